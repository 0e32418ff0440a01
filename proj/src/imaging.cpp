#include "morphoseg/imaging.hpp"

#include "morphoseg/errors.hpp"
#include "morphoseg/random.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>

namespace morphoseg {

namespace {

std::string lower_ext(const std::filesystem::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e;
}

std::uint8_t quantize(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

struct RawImage {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<std::uint8_t> bytes;
};

// PGM header tokens are separated by whitespace; '#' starts a comment.
std::string next_pgm_token(std::istream& in) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    return tok;
}

RawImage read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    if (next_pgm_token(in) != "P5") throw DataError("decode error in " + path.string() + ": not a binary PGM (P5)");
    RawImage raw;
    int maxval = 0;
    try {
        raw.width = std::stoi(next_pgm_token(in));
        raw.height = std::stoi(next_pgm_token(in));
        maxval = std::stoi(next_pgm_token(in));
    } catch (const std::exception&) {
        throw DataError("decode error in " + path.string() + ": malformed PGM header");
    }
    if (raw.width <= 0 || raw.height <= 0) throw DataError("decode error in " + path.string() + ": bad dimensions");
    if (maxval <= 0 || maxval > 255) {
        throw DataError("decode error in " + path.string() + ": unsupported bit depth (maxval " +
                        std::to_string(maxval) + ")");
    }
    raw.channels = 1;
    raw.bytes.resize(static_cast<std::size_t>(raw.width) * raw.height);
    in.read(reinterpret_cast<char*>(raw.bytes.data()), static_cast<std::streamsize>(raw.bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.bytes.size())) {
        throw DataError("decode error in " + path.string() + ": truncated pixel data");
    }
    return raw;
}

RawImage read_png(const std::filesystem::path& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
        std::string msg = img.message;
        png_image_free(&img);
        throw DataError("decode error in " + path.string() + ": " + msg);
    }
    const auto fmt = img.format;
    if (fmt & PNG_FORMAT_FLAG_LINEAR) {
        png_image_free(&img);
        throw DataError("decode error in " + path.string() + ": unsupported bit depth (16-bit)");
    }
    if (fmt & (PNG_FORMAT_FLAG_ALPHA | PNG_FORMAT_FLAG_COLORMAP)) {
        png_image_free(&img);
        throw DataError("decode error in " + path.string() + ": unsupported format (alpha or palette)");
    }
    RawImage raw;
    raw.width = static_cast<int>(img.width);
    raw.height = static_cast<int>(img.height);
    raw.channels = (fmt & PNG_FORMAT_FLAG_COLOR) ? 3 : 1;
    img.format = raw.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    raw.bytes.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, raw.bytes.data(), 0, nullptr)) {
        std::string msg = img.message;
        png_image_free(&img);
        throw DataError("decode error in " + path.string() + ": " + msg);
    }
    return raw;
}

RawImage read_raw(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw DataError("missing file " + path.string());
    const auto ext = lower_ext(path);
    if (ext == ".pgm") return read_pgm(path);
    if (ext == ".png") return read_png(path);
    throw DataError("decode error in " + path.string() + ": unsupported file extension");
}

void write_raw(const RawImage& raw, const std::filesystem::path& path) {
    if (lower_ext(path) == ".pgm") {
        if (raw.channels != 1) throw DataError("PGM output requires a single channel: " + path.string());
        std::ofstream out(path, std::ios::binary);
        if (!out) throw DataError("cannot write " + path.string());
        out << "P5\n" << raw.width << " " << raw.height << "\n255\n";
        out.write(reinterpret_cast<const char*>(raw.bytes.data()), static_cast<std::streamsize>(raw.bytes.size()));
        if (!out) throw DataError("cannot write " + path.string());
        return;
    }
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(raw.width);
    img.height = static_cast<png_uint_32>(raw.height);
    img.format = raw.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&img, path.string().c_str(), 0, raw.bytes.data(), 0, nullptr)) {
        std::string msg = img.message;
        png_image_free(&img);
        throw DataError("cannot write " + path.string() + ": " + msg);
    }
}

}  // namespace

void Image::validate() const {
    if (height <= 0 || width <= 0) throw DataError("image has non-positive dimensions");
    if (channels != 1 && channels != 3) throw DataError("image channel count must be 1 or 3");
    if (data.size() != pixel_count() * channels) throw DataError("image data length does not match its shape");
    for (double v : data) {
        if (!(v >= 0.0 && v <= 1.0)) throw DataError("image intensity outside [0,1]");
    }
}

std::size_t MaskMap::foreground_count() const {
    return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; }));
}

void MaskMap::validate(int k) const {
    if (height <= 0 || width <= 0) throw DataError("mask has non-positive dimensions");
    if (labels.size() != pixel_count()) throw DataError("mask label length does not match its shape");
    for (auto l : labels) {
        if (l >= k) throw DataError("mask label " + std::to_string(l) + " out of range for k=" + std::to_string(k));
    }
}

void SynthConfig::validate() const {
    if (image_size < 16) throw ConfigError("synthetic image_size must be at least 16 px to fit one cell");
    if (cell_count_range.first < 1 || cell_count_range.first > cell_count_range.second) {
        throw ConfigError("cell_count_range must satisfy 1 <= min <= max");
    }
    if (protrusion_count_range.first < 0 || protrusion_count_range.first > protrusion_count_range.second) {
        throw ConfigError("protrusion_count_range must satisfy 0 <= min <= max");
    }
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
    if (blur_radius < 0) throw ConfigError("blur_radius must be >= 0");
    if (!(radius_fraction.first > 0.0 && radius_fraction.first <= radius_fraction.second)) {
        throw ConfigError("radius_fraction must satisfy 0 < min <= max");
    }
}

Image load_image(const std::filesystem::path& path) {
    const RawImage raw = read_raw(path);
    Image img(raw.height, raw.width, raw.channels);
    for (std::size_t i = 0; i < raw.bytes.size(); ++i) img.data[i] = raw.bytes[i] / 255.0;
    return img;
}

void save_image(const Image& image, const std::filesystem::path& path) {
    image.validate();
    RawImage raw{image.height, image.width, image.channels, {}};
    raw.bytes.resize(image.data.size());
    std::transform(image.data.begin(), image.data.end(), raw.bytes.begin(), quantize);
    write_raw(raw, path);
}

MaskMap load_mask(const std::filesystem::path& path, int k, bool binarize) {
    if (k < 2) throw ConfigError("class count k must be >= 2");
    const RawImage raw = read_raw(path);
    if (raw.channels != 1) throw DataError("mask must be single-channel: " + path.string());
    MaskMap mask(raw.height, raw.width);
    const bool to_binary = binarize && k == 2;
    for (std::size_t i = 0; i < raw.bytes.size(); ++i) {
        const std::uint8_t v = raw.bytes[i];
        if (to_binary) {
            mask.labels[i] = v != 0 ? 1 : 0;
        } else {
            if (v >= k) {
                throw DataError("range error in " + path.string() + ": mask value " + std::to_string(v) +
                                " >= k=" + std::to_string(k));
            }
            mask.labels[i] = v;
        }
    }
    return mask;
}

void save_mask(const MaskMap& mask, const std::filesystem::path& path, bool binary) {
    RawImage raw{mask.height, mask.width, 1, {}};
    raw.bytes.resize(mask.labels.size());
    for (std::size_t i = 0; i < mask.labels.size(); ++i) {
        raw.bytes[i] = binary ? (mask.labels[i] != 0 ? 255 : 0) : mask.labels[i];
    }
    write_raw(raw, path);
}

Image make_overlay(const Image& image, const MaskMap& mask) {
    if (image.height != mask.height || image.width != mask.width) {
        throw DataError("overlay shape mismatch: image " + std::to_string(image.height) + "x" +
                        std::to_string(image.width) + " vs mask " + std::to_string(mask.height) + "x" +
                        std::to_string(mask.width));
    }
    Image out(image.height, image.width, 3);
    constexpr double kBlend = 0.5;
    const double red[3] = {1.0, 0.0, 0.0};
    for (int r = 0; r < image.height; ++r) {
        for (int c = 0; c < image.width; ++c) {
            const bool fg = mask.at(r, c) != 0;
            for (int ch = 0; ch < 3; ++ch) {
                const double v = image.at(r, c, image.channels == 3 ? ch : 0);
                out.at(r, c, ch) = fg ? (1.0 - kBlend) * v + kBlend * red[ch] : v;
            }
        }
    }
    return out;
}

void save_overlay(const Image& image, const MaskMap& mask, const std::filesystem::path& path) {
    save_image(make_overlay(image, mask), path);
}

namespace {

struct Spur {
    double angle;
    double length;  // from the cell center
    double half_width;
};

struct Cell {
    double cy, cx;
    double radius;
    std::vector<double> vertex_radii;  // evenly spaced in angle
    std::vector<Spur> spurs;
    double level;

    double reach() const {
        double r = *std::max_element(vertex_radii.begin(), vertex_radii.end());
        for (const auto& s : spurs) r = std::max(r, s.length + s.half_width);
        return r;
    }

    bool contains(double y, double x) const {
        const double dy = y - cy, dx = x - cx;
        const double d = std::hypot(dy, dx);
        // Star-convex body: radius linearly interpolated between vertices.
        double a = std::atan2(dy, dx);
        if (a < 0) a += 2.0 * std::numbers::pi;
        const auto n = vertex_radii.size();
        const double pos = a / (2.0 * std::numbers::pi) * static_cast<double>(n);
        const auto i0 = static_cast<std::size_t>(pos) % n;
        const auto i1 = (i0 + 1) % n;
        const double t = pos - std::floor(pos);
        if (d <= (1.0 - t) * vertex_radii[i0] + t * vertex_radii[i1]) return true;
        // Spurs are capsules from the center outward.
        for (const auto& s : spurs) {
            const double ux = std::cos(s.angle), uy = std::sin(s.angle);
            const double proj = std::clamp(dx * ux + dy * uy, 0.0, s.length);
            const double ex = dx - proj * ux, ey = dy - proj * uy;
            // Taper toward the tip.
            const double w = s.half_width * (1.0 - 0.4 * proj / s.length);
            if (ex * ex + ey * ey <= w * w) return true;
        }
        return false;
    }
};

Cell make_cell(Rng& rng, const SynthConfig& cfg) {
    Cell cell{};
    cell.radius = cfg.image_size * rng.uniform(cfg.radius_fraction.first, cfg.radius_fraction.second);
    constexpr int kVertices = 24;
    cell.vertex_radii.resize(kVertices);
    for (auto& r : cell.vertex_radii) r = cell.radius * rng.uniform(0.75, 1.25);
    const int spurs = rng.between(cfg.protrusion_count_range.first, cfg.protrusion_count_range.second);
    for (int i = 0; i < spurs; ++i) {
        Spur s{};
        s.angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
        s.length = cell.radius * rng.uniform(1.6, 2.6);
        // With the 0.4 taper the tip keeps a half-width >= 0.75 px, wide
        // enough for the rasterized spur to stay 4-connected.
        s.half_width = rng.uniform(1.25, 1.8);
        cell.spurs.push_back(s);
    }
    cell.level = rng.uniform(cfg.cell_level.first, cfg.cell_level.second);
    return cell;
}

void box_blur(std::vector<double>& plane, int h, int w, int radius) {
    if (radius <= 0) return;
    std::vector<double> tmp(plane.size());
    // Separable mean filter with clamped borders.
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            double s = 0.0;
            for (int d = -radius; d <= radius; ++d) s += plane[static_cast<std::size_t>(r) * w + std::clamp(c + d, 0, w - 1)];
            tmp[static_cast<std::size_t>(r) * w + c] = s / (2 * radius + 1);
        }
    }
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            double s = 0.0;
            for (int d = -radius; d <= radius; ++d) s += tmp[static_cast<std::size_t>(std::clamp(r + d, 0, h - 1)) * w + c];
            plane[static_cast<std::size_t>(r) * w + c] = s / (2 * radius + 1);
        }
    }
}

// Pixels of the cell: the 4-connected part of its region that contains the
// center, so every cell renders as exactly one component.
std::vector<std::pair<int, int>> rasterize(const Cell& cell, int size) {
    const double reach = cell.reach();
    const int r0 = std::max(0, static_cast<int>(std::floor(cell.cy - reach)) - 1);
    const int r1 = std::min(size - 1, static_cast<int>(std::ceil(cell.cy + reach)) + 1);
    const int c0 = std::max(0, static_cast<int>(std::floor(cell.cx - reach)) - 1);
    const int c1 = std::min(size - 1, static_cast<int>(std::ceil(cell.cx + reach)) + 1);
    const int h = r1 - r0 + 1, w = c1 - c0 + 1;
    std::vector<std::uint8_t> inside(static_cast<std::size_t>(h) * w, 0);
    for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) inside[static_cast<std::size_t>(r - r0) * w + (c - c0)] = cell.contains(r, c);

    std::vector<std::pair<int, int>> out;
    const int sr = static_cast<int>(std::lround(cell.cy)), sc = static_cast<int>(std::lround(cell.cx));
    auto take = [&](int r, int c) {
        if (r < r0 || r > r1 || c < c0 || c > c1) return;
        auto& v = inside[static_cast<std::size_t>(r - r0) * w + (c - c0)];
        if (v != 1) return;
        v = 2;
        out.emplace_back(r, c);
    };
    take(sr, sc);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto [r, c] = out[i];
        take(r - 1, c);
        take(r + 1, c);
        take(r, c - 1);
        take(r, c + 1);
    }
    return out;
}

// True when no pixel is within one pixel (8-neighborhood) of existing
// foreground.
bool fits(const std::vector<std::pair<int, int>>& pixels, const MaskMap& mask) {
    for (auto [r, c] : pixels) {
        for (int y = std::max(0, r - 1); y <= std::min(mask.height - 1, r + 1); ++y)
            for (int x = std::max(0, c - 1); x <= std::min(mask.width - 1, c + 1); ++x)
                if (mask.at(y, x)) return false;
    }
    return true;
}

Sample render_sample(const SynthConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    const int size = cfg.image_size;
    const int count = rng.between(cfg.cell_count_range.first, cfg.cell_count_range.second);

    Sample s{Image(size, size, 1, cfg.background_level), MaskMap(size, size)};
    for (int i = 0; i < count; ++i) {
        Cell cell = make_cell(rng, cfg);
        const double body = cell.radius * 1.25;
        const double lo = std::min(body, size / 2.0), hi = std::max(size - 1 - body, size / 2.0);
        // Rejection placement keeps blobs apart; after too many attempts the
        // last candidate is kept and may touch a neighbor.
        constexpr int kAttempts = 200;
        std::vector<std::pair<int, int>> pixels;
        for (int attempt = 0; attempt < kAttempts; ++attempt) {
            cell.cy = rng.uniform(lo, hi);
            cell.cx = rng.uniform(lo, hi);
            pixels = rasterize(cell, size);
            if (fits(pixels, s.mask)) break;
        }
        for (auto [r, c] : pixels) {
            s.mask.at(r, c) = 1;
            s.image.at(r, c) = cell.level;
        }
    }
    if (cfg.noise_sigma > 0.0) {
        for (auto& v : s.image.data) v += cfg.noise_sigma * rng.normal();
    }
    box_blur(s.image.data, size, size, cfg.blur_radius);
    for (auto& v : s.image.data) v = std::clamp(v, 0.0, 1.0);
    return s;
}

}  // namespace

std::vector<Sample> generate_synthetic_dataset(const SynthConfig& cfg, int n) {
    cfg.validate();
    if (n < 1) throw ConfigError("synthetic dataset size must be >= 1");
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(render_sample(cfg, derive_seed(cfg.seed, {static_cast<std::uint64_t>(i)})));
    return out;
}

}  // namespace morphoseg
