#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

namespace morphoseg {

/// Row-major image with interleaved channels, intensities in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<double> data;

    Image() = default;
    Image(int h, int w, int c, double fill = 0.0)
        : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

    std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }
    double& at(int r, int c, int ch = 0) {
        return data[(static_cast<std::size_t>(r) * width + c) * channels + ch];
    }
    double at(int r, int c, int ch = 0) const {
        return data[(static_cast<std::size_t>(r) * width + c) * channels + ch];
    }

    /// Throws DataError when the shape/length/range invariants are broken.
    void validate() const;
};

/// Row-major per-pixel class labels.
struct MaskMap {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> labels;

    MaskMap() = default;
    MaskMap(int h, int w, std::uint8_t fill = 0)
        : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

    std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }
    std::uint8_t& at(int r, int c) { return labels[static_cast<std::size_t>(r) * width + c]; }
    std::uint8_t at(int r, int c) const { return labels[static_cast<std::size_t>(r) * width + c]; }

    std::size_t foreground_count() const;
    void validate(int k) const;
};

struct SynthConfig {
    int image_size = 64;
    std::pair<int, int> cell_count_range{2, 4};
    std::pair<int, int> protrusion_count_range{1, 3};
    double noise_sigma = 0.08;
    int blur_radius = 1;
    std::uint64_t seed = 0;
    /// Fraction of image_size used for the cell body radius.
    std::pair<double, double> radius_fraction{0.08, 0.13};
    /// Mean intensities of background and cell bodies.
    double background_level = 0.25;
    std::pair<double, double> cell_level{0.6, 0.85};

    void validate() const;
};

struct Sample {
    Image image;
    MaskMap mask;
};

/// Loads an 8-bit grayscale/RGB PNG or a binary PGM (P5), scaled by 1/255.
Image load_image(const std::filesystem::path& path);

/// Writes PNG (or PGM when the extension is .pgm). Intensities are
/// quantized with round(255 * v).
void save_image(const Image& image, const std::filesystem::path& path);

/// Loads a single-channel 8-bit mask. With binarize set (the default for
/// k == 2) every nonzero value becomes label 1; otherwise values >= k raise.
MaskMap load_mask(const std::filesystem::path& path, int k, bool binarize = true);

/// Writes an 8-bit single-channel PNG. Binary masks are stored as 0/255.
void save_mask(const MaskMap& mask, const std::filesystem::path& path, bool binary = true);

/// Foreground pixels blended 50/50 with pure red; written as RGB PNG.
Image make_overlay(const Image& image, const MaskMap& mask);
void save_overlay(const Image& image, const MaskMap& mask, const std::filesystem::path& path);

/// Irregular star-convex cells with elongated spurs. Output depends only on
/// (cfg, n).
std::vector<Sample> generate_synthetic_dataset(const SynthConfig& cfg, int n);

}  // namespace morphoseg
