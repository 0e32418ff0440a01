#include "morphoseg/metrics.hpp"

#include "morphoseg/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace morphoseg {

namespace {

void check_pair(const MaskMap& a, const MaskMap& b) {
    if (a.height != b.height || a.width != b.width) {
        throw DataError("metric shape mismatch: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                        std::to_string(b.height) + "x" + std::to_string(b.width));
    }
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1-D squared distance transform (lower envelope of parabolas). Sites with
// f == inf are not parabolas and are skipped.
void edt_1d(const double* f, double* d, int n, std::vector<int>& v, std::vector<double>& z) {
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        double s = -kInf;
        while (k >= 0) {
            const int p = v[k];
            s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p));
            if (s > z[k]) break;
            --k;
        }
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -kInf;
        } else {
            ++k;
            v[k] = q;
            z[k] = s;
        }
        z[k + 1] = kInf;
    }
    if (k < 0) {
        std::fill(d, d + n, kInf);
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (z[j + 1] < q) ++j;
        const double diff = q - v[j];
        d[q] = diff * diff + f[v[j]];
    }
}

// Exact squared Euclidean distance from every pixel to the nearest seed.
std::vector<double> squared_distance_to(const std::vector<std::pair<int, int>>& seeds, int h, int w) {
    std::vector<double> grid(static_cast<std::size_t>(h) * w, kInf);
    for (auto [r, c] : seeds) grid[static_cast<std::size_t>(r) * w + c] = 0.0;
    const int n = std::max(h, w);
    std::vector<double> f(n), d(n), z(n + 1);
    std::vector<int> v(n);
    for (int c = 0; c < w; ++c) {
        for (int r = 0; r < h; ++r) f[r] = grid[static_cast<std::size_t>(r) * w + c];
        edt_1d(f.data(), d.data(), h, v, z);
        for (int r = 0; r < h; ++r) grid[static_cast<std::size_t>(r) * w + c] = d[r];
    }
    for (int r = 0; r < h; ++r) {
        double* row = &grid[static_cast<std::size_t>(r) * w];
        std::copy(row, row + w, f.begin());
        edt_1d(f.data(), d.data(), w, v, z);
        std::copy(d.begin(), d.begin() + w, row);
    }
    return grid;
}

}  // namespace

ConfusionCounts confusion(const MaskMap& pred, const MaskMap& gt) {
    check_pair(pred, gt);
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
        const bool p = pred.labels[i] != 0, g = gt.labels[i] != 0;
        c.tp += p && g;
        c.fp += p && !g;
        c.fn += !p && g;
    }
    return c;
}

double dsc(const ConfusionCounts& c) {
    const auto den = 2 * c.tp + c.fp + c.fn;
    if (den == 0) return 100.0;
    return 100.0 * (2.0 * static_cast<double>(c.tp)) / static_cast<double>(den);
}

double iou(const ConfusionCounts& c) {
    const auto den = c.tp + c.fp + c.fn;
    if (den == 0) return 100.0;
    return 100.0 * static_cast<double>(c.tp) / static_cast<double>(den);
}

double dsc(const MaskMap& pred, const MaskMap& gt) { return dsc(confusion(pred, gt)); }
double iou(const MaskMap& pred, const MaskMap& gt) { return iou(confusion(pred, gt)); }

std::vector<std::pair<int, int>> boundary_pixels(const MaskMap& mask) {
    std::vector<std::pair<int, int>> out;
    const int h = mask.height, w = mask.width;
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            if (mask.at(r, c) == 0) continue;
            const bool edge = r == 0 || c == 0 || r == h - 1 || c == w - 1;
            if (edge || mask.at(r - 1, c) == 0 || mask.at(r + 1, c) == 0 || mask.at(r, c - 1) == 0 ||
                mask.at(r, c + 1) == 0) {
                out.emplace_back(r, c);
            }
        }
    }
    return out;
}

std::vector<double> boundary_distances(const MaskMap& pred, const MaskMap& gt) {
    check_pair(pred, gt);
    const auto bx = boundary_pixels(pred);
    const auto by = boundary_pixels(gt);
    if (bx.empty() || by.empty()) return {};
    const auto to_y = squared_distance_to(by, gt.height, gt.width);
    const auto to_x = squared_distance_to(bx, pred.height, pred.width);
    std::vector<double> pool;
    pool.reserve(bx.size() + by.size());
    for (auto [r, c] : bx) pool.push_back(std::sqrt(to_y[static_cast<std::size_t>(r) * gt.width + c]));
    for (auto [r, c] : by) pool.push_back(std::sqrt(to_x[static_cast<std::size_t>(r) * pred.width + c]));
    return pool;
}

std::optional<double> hd95(const MaskMap& pred, const MaskMap& gt) {
    auto pool = boundary_distances(pred, gt);
    if (pool.empty()) return std::nullopt;
    std::sort(pool.begin(), pool.end());
    const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(pool.size()))) - 1;
    return pool[rank];
}

std::optional<double> hausdorff(const MaskMap& pred, const MaskMap& gt) {
    const auto pool = boundary_distances(pred, gt);
    if (pool.empty()) return std::nullopt;
    return *std::max_element(pool.begin(), pool.end());
}

ImageRecord evaluate_pair(const std::string& id, const MaskMap& pred, const MaskMap& gt) {
    const auto c = confusion(pred, gt);
    return {id, dsc(c), hd95(pred, gt), iou(c)};
}

double iou_pass_rate(std::span<const ImageRecord> records, double threshold_percent) {
    if (records.empty()) throw DataError("iou_pass_rate: no records");
    const auto pass = std::count_if(records.begin(), records.end(),
                                    [&](const ImageRecord& r) { return r.iou >= threshold_percent; });
    return 100.0 * static_cast<double>(pass) / static_cast<double>(records.size());
}

EvalReport aggregate(std::vector<ImageRecord> records) {
    if (records.empty()) throw DataError("aggregate: no evaluation records");
    EvalReport rep;
    double hd_sum = 0.0;
    std::size_t hd_n = 0;
    for (const auto& r : records) {
        rep.mean_dsc += r.dsc;
        rep.mean_iou += r.iou;
        if (r.hd95) {
            hd_sum += *r.hd95;
            ++hd_n;
        } else {
            ++rep.hd95_skipped;
        }
    }
    const auto n = static_cast<double>(records.size());
    rep.mean_dsc /= n;
    rep.mean_iou /= n;
    if (hd_n > 0) rep.mean_hd95 = hd_sum / static_cast<double>(hd_n);
    rep.iou_50 = iou_pass_rate(records, 50.0);
    rep.iou_75 = iou_pass_rate(records, 75.0);
    rep.iou_90 = iou_pass_rate(records, 90.0);
    for (int t = 50; t <= 95; t += 5) rep.map += iou_pass_rate(records, t);
    rep.map /= 10.0;
    rep.records = std::move(records);
    return rep;
}

void write_eval_csv(const EvalReport& report, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out.precision(10);
    out << "id,dsc,hd95,iou\n";
    for (const auto& r : report.records) {
        out << r.id << "," << r.dsc << ",";
        if (r.hd95) {
            out << *r.hd95;
        } else {
            out << "SKIP";
        }
        out << "," << r.iou << "\n";
    }
}

nlohmann::json to_json(const EvalReport& report) {
    nlohmann::json j;
    j["images"] = report.records.size();
    j["mean_dsc"] = report.mean_dsc;
    j["mean_hd95"] = report.mean_hd95 ? nlohmann::json(*report.mean_hd95) : nlohmann::json(nullptr);
    j["mean_iou"] = report.mean_iou;
    j["iou_0.5"] = report.iou_50;
    j["iou_0.75"] = report.iou_75;
    j["iou_0.9"] = report.iou_90;
    j["map"] = report.map;
    j["hd95_skipped"] = report.hd95_skipped;
    return j;
}

}  // namespace morphoseg
