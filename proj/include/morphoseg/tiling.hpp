#pragma once

#include "morphoseg/errors.hpp"
#include "morphoseg/imaging.hpp"
#include "morphoseg/random.hpp"

#include <cmath>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace morphoseg {

struct TileRect {
    int row0 = 0;
    int col0 = 0;
    int size = 0;

    bool contains(int r, int c) const { return r >= row0 && r < row0 + size && c >= col0 && c < col0 + size; }
    auto operator<=>(const TileRect&) const = default;
};

struct TilePlan {
    int image_height = 0;
    int image_width = 0;
    int patch_size = 0;
    int stride = 0;
    std::vector<TileRect> rects;  // row-major by (row0, col0)
};

/// Per-pixel class probability vectors, pixel-major (k values per pixel).
struct ProbMap {
    int height = 0;
    int width = 0;
    int k = 0;
    std::vector<double> probs;

    ProbMap() = default;
    ProbMap(int h, int w, int classes)
        : height(h), width(w), k(classes), probs(static_cast<std::size_t>(h) * w * classes, 0.0) {}

    double at(int r, int c, int cls) const {
        return probs[(static_cast<std::size_t>(r) * width + c) * k + cls];
    }
    double& at(int r, int c, int cls) { return probs[(static_cast<std::size_t>(r) * width + c) * k + cls]; }
};

/// A crop of a source image. `rect` is empty for the whole undivided image.
struct Patch {
    Image image;
    MaskMap mask;
    std::optional<TileRect> rect;
    std::string source;
};

/// Axis start positions: 0, stride, 2*stride, ... with the first start past
/// extent - patch clamped to extent - patch.
std::vector<int> axis_starts(int extent, int patch, int stride);

TilePlan plan_tiles(int h, int w, int patch, int stride);

/// floor(patch * (1 - overlap)), at least 1.
int overlap_stride(int patch, double overlap);

/// patch - margin.
int margin_stride(int patch, int margin);

Image crop(const Image& img, const TileRect& rect);
MaskMap crop(const MaskMap& mask, const TileRect& rect);

std::vector<Patch> extract_patches(const Image& img, const MaskMap& mask, std::span<const int> sizes,
                                   double overlap, const std::string& source);

std::vector<Patch> prune_maskless(std::vector<Patch> patches);

/// Seeded Fisher-Yates permutation of [0, n).
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

/// Deterministic shuffle then cut; |train| = round(train_fraction * |items|).
template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_dataset(const std::vector<T>& items, double train_fraction,
                                                        std::uint64_t seed) {
    if (items.empty()) throw DataError("split_dataset: empty input");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0, 1)");
    const auto order = seeded_permutation(items.size(), seed);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(items.size())));
    std::pair<std::vector<T>, std::vector<T>> out;
    for (std::size_t i = 0; i < order.size(); ++i) {
        (i < n_train ? out.first : out.second).push_back(items[order[i]]);
    }
    return out;
}

/// Average-pooling stitch. Tiles are reduced in sorted rect order so the
/// result does not depend on the input order.
ProbMap stitch(std::span<const std::pair<TileRect, ProbMap>> tile_probs, int h, int w, int k);

// ---------------------------------------------------------------------------
// On-disk patch datasets: images/ and masks/ plus manifest.jsonl.

struct ManifestRecord {
    std::string source;
    std::optional<TileRect> rect;
    int height = 0;
    int width = 0;
    std::string split;  // "train", "test", or empty
    std::string image;  // relative to the dataset directory
    std::string mask;
};

/// `<source>_<row0>_<col0>_<size>` for tiles, `<source>_whole` for whole images.
std::string patch_stem(const Patch& p);

void write_manifest(const std::filesystem::path& path, std::span<const ManifestRecord> records);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);

/// Writes each patch's image and mask PNG plus manifest.jsonl under dir.
/// `splits[i]` labels patch i.
void write_patch_dataset(const std::filesystem::path& dir, std::span<const Patch> patches,
                         std::span<const std::string> splits);

}  // namespace morphoseg
