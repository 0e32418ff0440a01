#pragma once

// Random instance generators and brute-force oracles shared by the unit
// tests and the acceptance binary. Nothing here calls into the library's
// metric or statistics code; the oracles are written from the definitions.

#include "morphoseg/imaging.hpp"
#include "morphoseg/logit_map.hpp"
#include "morphoseg/losses.hpp"
#include "morphoseg/outliers.hpp"
#include "morphoseg/random.hpp"
#include "morphoseg/segmenter.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <utility>
#include <vector>

namespace testsupport {

using morphoseg::Image;
using morphoseg::LogitMap;
using morphoseg::MaskMap;
using morphoseg::Rng;

inline Image random_image(Rng& rng, int h, int w, int channels = 1) {
    Image img(h, w, channels);
    for (auto& v : img.data) v = rng.uniform();
    return img;
}

/// Either independent pixels or a few filled rectangles, so both ragged and
/// blob-like boundaries show up.
inline MaskMap random_mask(Rng& rng, int h, int w) {
    MaskMap m(h, w);
    if (rng.uniform() < 0.5) {
        const double p = rng.uniform();
        for (auto& l : m.labels) l = rng.uniform() < p ? 1 : 0;
    } else {
        const int blobs = rng.between(0, 3);
        for (int b = 0; b < blobs; ++b) {
            const int r0 = rng.between(0, h - 1), c0 = rng.between(0, w - 1);
            const int r1 = rng.between(r0, h - 1), c1 = rng.between(c0, w - 1);
            for (int r = r0; r <= r1; ++r)
                for (int c = c0; c <= c1; ++c) m.at(r, c) = 1;
        }
    }
    return m;
}

inline LogitMap random_logits(Rng& rng, int h, int w, int k, double scale = 2.0) {
    LogitMap l(h, w, k);
    for (auto& v : l.logits) v = rng.uniform(-scale, scale);
    return l;
}

// ---------------------------------------------------------------------------
// Metric oracles.

struct Counts {
    long tp = 0, fp = 0, fn = 0;
};

inline Counts count_pixels(const MaskMap& pred, const MaskMap& gt) {
    Counts c;
    for (int r = 0; r < gt.height; ++r) {
        for (int col = 0; col < gt.width; ++col) {
            const bool p = pred.at(r, col) != 0, g = gt.at(r, col) != 0;
            if (p && g) ++c.tp;
            if (p && !g) ++c.fp;
            if (!p && g) ++c.fn;
        }
    }
    return c;
}

inline bool is_fg(const MaskMap& m, int r, int c) {
    return r >= 0 && c >= 0 && r < m.height && c < m.width && m.at(r, c) != 0;
}

inline std::vector<std::pair<int, int>> boundary_oracle(const MaskMap& m) {
    std::vector<std::pair<int, int>> out;
    for (int r = 0; r < m.height; ++r) {
        for (int c = 0; c < m.width; ++c) {
            if (!is_fg(m, r, c)) continue;
            if (!is_fg(m, r - 1, c) || !is_fg(m, r + 1, c) || !is_fg(m, r, c - 1) || !is_fg(m, r, c + 1)) {
                out.emplace_back(r, c);
            }
        }
    }
    return out;
}

/// All-pairs directed distances pooled in both directions.
inline std::vector<double> pooled_distances_oracle(const MaskMap& a, const MaskMap& b) {
    const auto x = boundary_oracle(a), y = boundary_oracle(b);
    std::vector<double> pool;
    if (x.empty() || y.empty()) return pool;
    auto directed = [&](const auto& from, const auto& to) {
        for (auto [r, c] : from) {
            long best = std::numeric_limits<long>::max();
            for (auto [r2, c2] : to) {
                const long dr = r - r2, dc = c - c2;
                best = std::min(best, dr * dr + dc * dc);
            }
            pool.push_back(std::sqrt(static_cast<double>(best)));
        }
    };
    directed(x, y);
    directed(y, x);
    return pool;
}

inline std::optional<double> hd95_oracle(const MaskMap& a, const MaskMap& b) {
    auto pool = pooled_distances_oracle(a, b);
    if (pool.empty()) return std::nullopt;
    std::sort(pool.begin(), pool.end());
    const auto n = pool.size();
    // Nearest rank: smallest index i with (i + 1) >= 0.95 n, in integers.
    std::size_t i = 0;
    while (20 * (i + 1) < 19 * n) ++i;
    return pool[i];
}

// ---------------------------------------------------------------------------
// Gaussian oracles.

struct BatchStats {
    std::vector<Eigen::VectorXd> means;
    Eigen::MatrixXd cov;
};

/// Shared covariance through the raw second moment:
///   cov = (1/N) sum_all s s^T - (1/N) sum_k n_k mu_k mu_k^T,
/// accumulated in long double.
inline BatchStats batch_stats_oracle(const std::vector<std::vector<std::vector<double>>>& per_class, int dim) {
    BatchStats out;
    std::vector<long double> second(static_cast<std::size_t>(dim) * dim, 0.0L);
    std::vector<long double> mean_outer(static_cast<std::size_t>(dim) * dim, 0.0L);
    long double total = 0.0L;
    for (const auto& entries : per_class) {
        std::vector<long double> sum(dim, 0.0L);
        for (const auto& v : entries) {
            for (int i = 0; i < dim; ++i) {
                sum[i] += v[i];
                for (int j = 0; j < dim; ++j) second[i * dim + j] += static_cast<long double>(v[i]) * v[j];
            }
        }
        const long double n = static_cast<long double>(entries.size());
        Eigen::VectorXd mu(dim);
        for (int i = 0; i < dim; ++i) mu[i] = static_cast<double>(sum[i] / n);
        for (int i = 0; i < dim; ++i)
            for (int j = 0; j < dim; ++j) mean_outer[i * dim + j] += sum[i] * sum[j] / n;
        out.means.push_back(mu);
        total += n;
    }
    out.cov.resize(dim, dim);
    for (int i = 0; i < dim; ++i)
        for (int j = 0; j < dim; ++j)
            out.cov(i, j) = static_cast<double>((second[i * dim + j] - mean_outer[i * dim + j]) / total);
    return out;
}

/// Multivariate normal density through an explicit inverse and determinant.
inline double density_oracle(const Eigen::VectorXd& mu, const Eigen::MatrixXd& cov, const Eigen::VectorXd& v) {
    const auto m = static_cast<double>(mu.size());
    const Eigen::VectorXd d = v - mu;
    const double q = d.dot(cov.inverse() * d);
    return std::exp(-0.5 * q) / (std::pow(2.0 * std::numbers::pi, m / 2.0) * std::sqrt(cov.determinant()));
}

/// Fills a queue set with random vectors around per-class centers.
inline morphoseg::QueueSet random_queues(Rng& rng, int classes, int dim, std::size_t per_class) {
    morphoseg::QueueSet qs(classes, per_class, dim);
    for (int k = 0; k < classes; ++k) {
        std::vector<double> center(dim), v(dim);
        for (auto& c : center) c = rng.uniform(-3.0, 3.0);
        for (std::size_t i = 0; i < per_class; ++i) {
            for (int j = 0; j < dim; ++j) v[j] = center[j] + rng.normal() * (0.5 + 0.5 * j);
            qs.queues[k].push(v);
        }
    }
    return qs;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle.

/// The four loss components at a perturbed parameter vector.
inline std::array<double, 4> components_at(const morphoseg::SegmenterParams& base, const std::vector<double>& flat,
                                           const Image& img, const MaskMap& target, const morphoseg::LossSpec& spec,
                                           const morphoseg::OutlierContext* ctx) {
    auto p = base;
    p.flat = flat;
    const auto r = morphoseg::loss_and_grad(p, img, target, spec, ctx).report;
    return {r.ce, r.dice, r.ce_out, r.dice_out};
}

/// Zero pattern of every ReLU output, used to detect kinks crossed by a
/// finite-difference perturbation.
inline std::vector<bool> relu_pattern(const morphoseg::SegmenterParams& p, const Image& img) {
    const auto cache = morphoseg::forward_cached(p, img);
    std::vector<bool> pattern;
    for (std::size_t l = 1; l < cache.inputs.size(); ++l) {
        for (double v : cache.inputs[l]) pattern.push_back(v > 0.0);
    }
    return pattern;
}

/// Central-difference slopes of every loss component for each parameter in
/// `indices`. When a perturbation flips a ReLU the step is shrunk (up to
/// three times); parameters that still straddle a kink come back empty.
/// `spec` only decides which components are active.
inline std::vector<std::optional<std::array<double, 4>>> component_slopes(
    const morphoseg::SegmenterParams& params, const Image& img, const MaskMap& target,
    const morphoseg::LossSpec& spec, const morphoseg::OutlierContext* ctx, const std::vector<std::size_t>& indices,
    double h = 1e-5) {
    const auto pattern = relu_pattern(params, img);
    std::vector<std::optional<std::array<double, 4>>> out;
    for (auto idx : indices) {
        std::optional<std::array<double, 4>> slope;
        double step = h;
        for (int attempt = 0; attempt < 4 && !slope; ++attempt, step /= 10.0) {
            auto pp = params, pm = params;
            pp.flat[idx] += step;
            pm.flat[idx] -= step;
            if (relu_pattern(pp, img) != pattern || relu_pattern(pm, img) != pattern) continue;
            const auto fp = components_at(params, pp.flat, img, target, spec, ctx);
            const auto fm = components_at(params, pm.flat, img, target, spec, ctx);
            std::array<double, 4> d{};
            for (int i = 0; i < 4; ++i) d[i] = (fp[i] - fm[i]) / (2.0 * step);
            slope = d;
        }
        out.push_back(slope);
    }
    return out;
}

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped_kinks = 0;
};

/// Compares an analytic gradient with the slopes combined under frozen
/// strategy coefficients. Relative error uses max(|a|, |n|, floor).
inline GradCheck compare_gradient(const std::vector<double>& grad, const std::array<double, 4>& coefficients,
                                  const std::vector<std::size_t>& indices,
                                  const std::vector<std::optional<std::array<double, 4>>>& slopes,
                                  double floor = 1e-6) {
    GradCheck out;
    for (std::size_t n = 0; n < indices.size(); ++n) {
        if (!slopes[n]) {
            ++out.skipped_kinks;
            continue;
        }
        double numeric = 0.0;
        for (int i = 0; i < 4; ++i) numeric += coefficients[i] * (*slopes[n])[i];
        const double analytic = grad[indices[n]];
        const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
        out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic - numeric) / denom);
        ++out.checked;
    }
    return out;
}

inline GradCheck check_gradient(const morphoseg::SegmenterParams& params, const Image& img, const MaskMap& target,
                                const morphoseg::LossSpec& spec, const morphoseg::OutlierContext* ctx,
                                const std::vector<std::size_t>& indices) {
    const auto base = morphoseg::loss_and_grad(params, img, target, spec, ctx);
    const auto slopes = component_slopes(params, img, target, spec, ctx, indices);
    return compare_gradient(base.grad, base.report.coefficients, indices, slopes);
}

/// Distinct indices covering every layer: all biases plus a seeded sample of
/// weights, `count` in total.
inline std::vector<std::size_t> sample_param_indices(const morphoseg::SegmenterParams& p, std::size_t count,
                                                     Rng& rng) {
    std::vector<std::size_t> idx;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto off = p.offset(l) + p.layers[l].weight_count();
        for (int b = 0; b < p.layers[l].out; ++b) idx.push_back(off + b);
    }
    count = std::min(count, p.flat.size());
    while (idx.size() < count) {
        const auto l = static_cast<std::size_t>(rng.below(p.layers.size()));
        const auto i = p.offset(l) + rng.below(p.layers[l].weight_count());
        if (std::find(idx.begin(), idx.end(), i) == idx.end()) idx.push_back(i);
    }
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// Parameters drawn at a scale that keeps most ReLUs away from zero and the
/// losses away from saturation.
inline morphoseg::SegmenterParams random_params(Rng& rng, int channels, int classes) {
    auto p = morphoseg::init_params(morphoseg::reference_layers(channels, classes), rng.next_u64());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto off = p.offset(l) + p.layers[l].weight_count();
        for (int b = 0; b < p.layers[l].out; ++b) p.flat[off + b] = rng.uniform(-0.2, 0.2);
    }
    return p;
}

/// Seeded outlier batches for every class from a random Gaussian model.
inline std::map<int, morphoseg::OutlierBatch> random_batches(Rng& rng, int classes, std::size_t sample_size,
                                                             std::size_t selection) {
    const auto qs = random_queues(rng, classes, classes, 40);
    const auto model = morphoseg::estimate(qs);
    std::map<int, morphoseg::OutlierBatch> out;
    for (int k = 0; k < classes; ++k) {
        out.emplace(k, morphoseg::sample_outliers(*model, k, sample_size, selection, rng.next_u64()));
    }
    return out;
}

}  // namespace testsupport
