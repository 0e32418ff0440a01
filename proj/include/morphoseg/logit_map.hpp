#pragma once

#include <cstddef>
#include <vector>

namespace morphoseg {

/// Raw per-pixel class scores, pixel-major: logits[(r * width + c) * k + j].
struct LogitMap {
    int height = 0;
    int width = 0;
    int k = 0;
    std::vector<double> logits;

    LogitMap() = default;
    LogitMap(int h, int w, int classes)
        : height(h), width(w), k(classes), logits(static_cast<std::size_t>(h) * w * classes, 0.0) {}

    std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }
    const double* pixel(std::size_t p) const { return logits.data() + p * k; }
    double* pixel(std::size_t p) { return logits.data() + p * k; }
};

}  // namespace morphoseg
