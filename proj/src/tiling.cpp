#include "morphoseg/tiling.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

namespace morphoseg {

std::vector<int> axis_starts(int extent, int patch, int stride) {
    std::vector<int> starts;
    const int last = extent - patch;
    for (int s = 0;; s += stride) {
        if (s >= last) {
            starts.push_back(last);
            break;
        }
        starts.push_back(s);
    }
    return starts;
}

TilePlan plan_tiles(int h, int w, int patch, int stride) {
    if (patch < 1 || stride < 1 || stride > patch) {
        throw ConfigError("plan_tiles requires 1 <= stride <= patch (patch=" + std::to_string(patch) +
                          ", stride=" + std::to_string(stride) + ")");
    }
    if (patch > h || patch > w) {
        throw DataError("tiling error: patch " + std::to_string(patch) + " exceeds image extent " +
                        std::to_string(h) + "x" + std::to_string(w));
    }
    TilePlan plan{h, w, patch, stride, {}};
    const auto rows = axis_starts(h, patch, stride);
    const auto cols = axis_starts(w, patch, stride);
    plan.rects.reserve(rows.size() * cols.size());
    for (int r : rows) {
        for (int c : cols) plan.rects.push_back({r, c, patch});
    }
    return plan;
}

int overlap_stride(int patch, double overlap) {
    if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("overlap must lie in [0, 1)");
    // The small offset absorbs binary-fraction error, e.g. 100 * (1 - 0.7).
    const int s = static_cast<int>(std::floor(patch * (1.0 - overlap) + 1e-9));
    return std::max(1, s);
}

int margin_stride(int patch, int margin) {
    if (margin < 0 || margin >= patch) throw ConfigError("margin must lie in [0, patch)");
    return patch - margin;
}

Image crop(const Image& img, const TileRect& rect) {
    Image out(rect.size, rect.size, img.channels);
    const auto row_len = static_cast<std::size_t>(rect.size) * img.channels;
    for (int r = 0; r < rect.size; ++r) {
        const auto* src = &img.data[(static_cast<std::size_t>(rect.row0 + r) * img.width + rect.col0) * img.channels];
        std::copy(src, src + row_len, &out.data[static_cast<std::size_t>(r) * row_len]);
    }
    return out;
}

MaskMap crop(const MaskMap& mask, const TileRect& rect) {
    MaskMap out(rect.size, rect.size);
    for (int r = 0; r < rect.size; ++r) {
        const auto* src = &mask.labels[static_cast<std::size_t>(rect.row0 + r) * mask.width + rect.col0];
        std::copy(src, src + rect.size, &out.labels[static_cast<std::size_t>(r) * rect.size]);
    }
    return out;
}

std::vector<Patch> extract_patches(const Image& img, const MaskMap& mask, std::span<const int> sizes,
                                   double overlap, const std::string& source) {
    if (sizes.empty()) throw ConfigError("extract_patches: at least one patch size is required");
    if (img.height != mask.height || img.width != mask.width) throw DataError("extract_patches: image/mask shape mismatch");
    std::vector<Patch> out;
    for (int size : sizes) {
        if (size > img.height || size > img.width) continue;
        const auto plan = plan_tiles(img.height, img.width, size, overlap_stride(size, overlap));
        for (const auto& rect : plan.rects) out.push_back({crop(img, rect), crop(mask, rect), rect, source});
    }
    out.push_back({img, mask, std::nullopt, source});
    return out;
}

std::vector<Patch> prune_maskless(std::vector<Patch> patches) {
    std::erase_if(patches, [](const Patch& p) { return p.mask.foreground_count() == 0; });
    return patches;
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    return idx;
}

ProbMap stitch(std::span<const std::pair<TileRect, ProbMap>> tile_probs, int h, int w, int k) {
    std::vector<std::size_t> order(tile_probs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return tile_probs[a].first < tile_probs[b].first; });

    ProbMap out(h, w, k);
    std::vector<int> cover(static_cast<std::size_t>(h) * w, 0);
    for (auto i : order) {
        const auto& [rect, tile] = tile_probs[i];
        if (rect.row0 < 0 || rect.col0 < 0 || rect.row0 + rect.size > h || rect.col0 + rect.size > w) {
            throw DataError("stitch: tile rect outside the output image");
        }
        if (tile.height != rect.size || tile.width != rect.size || tile.k != k) {
            throw DataError("stitch: tile probability map does not match its rect");
        }
        for (int r = 0; r < rect.size; ++r) {
            for (int c = 0; c < rect.size; ++c) {
                const auto p = static_cast<std::size_t>(rect.row0 + r) * w + rect.col0 + c;
                ++cover[p];
                for (int j = 0; j < k; ++j) out.probs[p * k + j] += tile.at(r, c, j);
            }
        }
    }
    for (std::size_t p = 0; p < cover.size(); ++p) {
        if (cover[p] == 0) {
            throw DataError("coverage error: pixel (" + std::to_string(p / w) + "," + std::to_string(p % w) +
                            ") is not covered by any tile");
        }
        for (int j = 0; j < k; ++j) out.probs[p * k + j] /= cover[p];
    }
    return out;
}

std::string patch_stem(const Patch& p) {
    if (!p.rect) return p.source + "_whole";
    return p.source + "_" + std::to_string(p.rect->row0) + "_" + std::to_string(p.rect->col0) + "_" +
           std::to_string(p.rect->size);
}

void write_manifest(const std::filesystem::path& path, std::span<const ManifestRecord> records) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write manifest " + path.string());
    for (const auto& rec : records) {
        nlohmann::json j;
        j["source"] = rec.source;
        if (rec.rect) {
            j["row0"] = rec.rect->row0;
            j["col0"] = rec.rect->col0;
            j["size"] = rec.rect->size;
        } else {
            j["whole"] = true;
        }
        j["height"] = rec.height;
        j["width"] = rec.width;
        if (!rec.split.empty()) j["split"] = rec.split;
        j["image"] = rec.image;
        j["mask"] = rec.mask;
        out << j.dump() << "\n";
    }
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest " + path.string());
    std::vector<ManifestRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            ManifestRecord rec;
            rec.source = j.at("source").get<std::string>();
            if (j.contains("size")) {
                rec.rect = TileRect{j.at("row0").get<int>(), j.at("col0").get<int>(), j.at("size").get<int>()};
            }
            rec.height = j.value("height", 0);
            rec.width = j.value("width", 0);
            rec.split = j.value("split", std::string{});
            rec.image = j.at("image").get<std::string>();
            rec.mask = j.at("mask").get<std::string>();
            out.push_back(std::move(rec));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("manifest " + path.string() + " line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void write_patch_dataset(const std::filesystem::path& dir, std::span<const Patch> patches,
                         std::span<const std::string> splits) {
    if (splits.size() != patches.size()) throw DataError("write_patch_dataset: one split label per patch required");
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "masks");
    std::vector<ManifestRecord> records;
    records.reserve(patches.size());
    for (std::size_t i = 0; i < patches.size(); ++i) {
        const auto& p = patches[i];
        const std::string stem = patch_stem(p);
        ManifestRecord rec{p.source, p.rect, p.image.height, p.image.width, splits[i],
                           "images/" + stem + ".png", "masks/" + stem + ".png"};
        save_image(p.image, dir / rec.image);
        save_mask(p.mask, dir / rec.mask);
        records.push_back(std::move(rec));
    }
    write_manifest(dir / "manifest.jsonl", records);
}

}  // namespace morphoseg
