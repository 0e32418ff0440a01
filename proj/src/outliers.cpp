#include "morphoseg/outliers.hpp"

#include "morphoseg/errors.hpp"
#include "morphoseg/random.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

namespace morphoseg {

ClassQueue::ClassQueue(int class_id, std::size_t capacity, int dim)
    : class_id_(class_id), capacity_(capacity), dim_(dim) {
    if (capacity == 0) throw ConfigError("queue capacity must be >= 1");
    if (dim < 1) throw ConfigError("queue dimension must be >= 1");
}

void ClassQueue::push(std::span<const double> v) {
    if (static_cast<int>(v.size()) != dim_) throw DataError("queue entry has the wrong dimension");
    if (entries_.size() == capacity_) entries_.pop_front();
    entries_.emplace_back(v.begin(), v.end());
}

QueueSet::QueueSet(int classes, std::size_t capacity, int dim) {
    for (int k = 0; k < classes; ++k) queues.emplace_back(k, capacity, dim);
}

bool QueueSet::ready() const {
    if (queues.empty()) return false;
    return std::all_of(queues.begin(), queues.end(),
                       [](const ClassQueue& q) { return q.size() >= static_cast<std::size_t>(q.dim()) + 1; });
}

namespace {

// Partial Fisher-Yates: the first `take` entries of `pool` become a uniform
// sample without replacement.
template <typename T>
void partial_shuffle(std::vector<T>& pool, std::size_t take, Rng& rng) {
    for (std::size_t i = 0; i < take; ++i) {
        const auto j = i + rng.below(pool.size() - i);
        std::swap(pool[i], pool[j]);
    }
}

}  // namespace

void enqueue_pixels(QueueSet& queues, const LogitMap& logits, const MaskMap& target, int n_per_image,
                    std::uint64_t seed) {
    if (logits.height != target.height || logits.width != target.width) {
        throw DataError("enqueue_pixels: logit map and target shapes differ");
    }
    if (n_per_image < 1) throw ConfigError("pixels per image must be >= 1");
    if (logits.k != queues.dim()) throw DataError("enqueue_pixels: logit dimension differs from queue dimension");
    const auto n = logits.pixel_count();
    const auto take = std::min<std::size_t>(static_cast<std::size_t>(n_per_image), n);
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    Rng rng(seed);
    partial_shuffle(pool, take, rng);
    for (std::size_t i = 0; i < take; ++i) {
        const auto p = pool[i];
        const int label = target.labels[p];
        if (label >= static_cast<int>(queues.queues.size())) throw DataError("enqueue_pixels: label has no queue");
        queues.queues[label].push(std::span<const double>(logits.pixel(p), logits.k));
    }
}

std::optional<GaussianModel> estimate(const QueueSet& queues) {
    if (!queues.ready()) return std::nullopt;
    const int m = queues.dim();
    GaussianModel model;
    model.classes = static_cast<int>(queues.queues.size());
    model.dim = m;
    model.cov = Eigen::MatrixXd::Zero(m, m);
    std::size_t total = 0;
    for (const auto& q : queues.queues) {
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(m);
        for (const auto& e : q.entries()) mean += Eigen::Map<const Eigen::VectorXd>(e.data(), m);
        mean /= static_cast<double>(q.size());
        for (const auto& e : q.entries()) {
            const Eigen::VectorXd d = Eigen::Map<const Eigen::VectorXd>(e.data(), m) - mean;
            model.cov.noalias() += d * d.transpose();
        }
        total += q.size();
        model.means.push_back(std::move(mean));
    }
    model.cov /= static_cast<double>(total);
    model.cov = 0.5 * (model.cov + model.cov.transpose());

    constexpr int kMaxDoublings = 10;
    double ridge = 1e-4;
    for (int attempt = 0; attempt <= kMaxDoublings; ++attempt, ridge *= 2.0) {
        const Eigen::MatrixXd shifted = model.cov + ridge * Eigen::MatrixXd::Identity(m, m);
        Eigen::LLT<Eigen::MatrixXd> llt(shifted);
        if (llt.info() != Eigen::Success) continue;
        const Eigen::MatrixXd l = llt.matrixL();
        if (!l.allFinite() || (l.diagonal().array() <= 0.0).any()) continue;
        model.chol = l;
        model.ridge = ridge;
        model.log_det = 2.0 * l.diagonal().array().log().sum();
        return model;
    }
    throw NumericalError("estimate: covariance factorization failed after " + std::to_string(kMaxDoublings) +
                         " ridge doublings");
}

double log_density(const GaussianModel& model, int k, const Eigen::VectorXd& v) {
    const Eigen::VectorXd d = v - model.means.at(static_cast<std::size_t>(k));
    const Eigen::VectorXd w = model.chol.triangularView<Eigen::Lower>().solve(d);
    return -0.5 * model.dim * std::log(2.0 * std::numbers::pi) - 0.5 * model.log_det - 0.5 * w.squaredNorm();
}

double density(const GaussianModel& model, int k, const Eigen::VectorXd& v) {
    return std::exp(log_density(model, k, v));
}

std::vector<Eigen::VectorXd> draw_candidates(const GaussianModel& model, int k, std::size_t count,
                                             std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Eigen::VectorXd> out;
    out.reserve(count);
    Eigen::VectorXd z(model.dim);
    const auto& mean = model.means.at(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < count; ++i) {
        for (int j = 0; j < model.dim; ++j) z[j] = rng.normal();
        out.push_back(mean + model.chol.triangularView<Eigen::Lower>() * z);
    }
    return out;
}

OutlierBatch select_lowest_density(const GaussianModel& model, int k, std::vector<Eigen::VectorXd> candidates,
                                   std::size_t selection_count) {
    if (selection_count > candidates.size()) throw ConfigError("selection_count exceeds sample_size");
    std::vector<double> dens(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) dens[i] = density(model, k, candidates[i]);
    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto by_density = [&](std::size_t a, std::size_t b) {
        return dens[a] < dens[b] || (dens[a] == dens[b] && a < b);
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(selection_count), order.end(),
                      by_density);
    OutlierBatch batch;
    batch.class_id = k;
    batch.vectors.reserve(selection_count);
    batch.densities.reserve(selection_count);
    for (std::size_t i = 0; i < selection_count; ++i) {
        batch.vectors.push_back(std::move(candidates[order[i]]));
        batch.densities.push_back(dens[order[i]]);
    }
    batch.epsilon = batch.densities.empty() ? 0.0 : batch.densities.back();
    return batch;
}

OutlierBatch sample_outliers(const GaussianModel& model, int k, std::size_t sample_size,
                             std::size_t selection_count, std::uint64_t seed) {
    if (k < 0 || k >= model.classes) throw ConfigError("sample_outliers: class out of range");
    if (selection_count > sample_size) throw ConfigError("selection_count exceeds sample_size");
    return select_lowest_density(model, k, draw_candidates(model, k, sample_size, seed), selection_count);
}

SyntheticMap build_synthetic_map(const LogitMap& logits, const MaskMap& target,
                                 const std::map<int, OutlierBatch>& batches, double substitution_fraction,
                                 std::uint64_t seed) {
    if (logits.height != target.height || logits.width != target.width) {
        throw DataError("build_synthetic_map: logit map and target shapes differ");
    }
    if (!(substitution_fraction >= 0.0 && substitution_fraction <= 1.0)) {
        throw ConfigError("substitution_fraction must lie in [0, 1]");
    }
    SyntheticMap out{logits, std::vector<std::uint8_t>(logits.pixel_count(), 0)};
    if (substitution_fraction == 0.0) return out;

    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t p = 0; p < target.pixel_count(); ++p) by_class[target.labels[p]].push_back(p);

    for (auto& [cls, pixels] : by_class) {
        const auto it = batches.find(cls);
        if (it == batches.end()) continue;
        const auto& vecs = it->second.vectors;
        if (vecs.empty()) throw DataError("build_synthetic_map: empty outlier batch for class " + std::to_string(cls));
        const auto count = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::llround(substitution_fraction * static_cast<double>(pixels.size()))));
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(cls)}));
        partial_shuffle(pixels, count, rng);
        for (std::size_t i = 0; i < count; ++i) {
            const auto& v = vecs[i % vecs.size()];
            if (v.size() != static_cast<Eigen::Index>(logits.k)) throw DataError("build_synthetic_map: outlier dimension mismatch");
            std::copy(v.data(), v.data() + logits.k, out.logits.pixel(pixels[i]));
            out.substituted[pixels[i]] = 1;
        }
    }
    return out;
}

void append_model_csv(const std::filesystem::path& path, int epoch, const GaussianModel& model,
                      const std::map<int, OutlierBatch>& batches) {
    const bool fresh = !std::filesystem::exists(path);
    std::ofstream out(path, std::ios::app);
    if (!out) throw DataError("cannot write " + path.string());
    out.precision(17);
    if (fresh) {
        out << "epoch,class";
        for (int i = 0; i < model.dim; ++i) out << ",mu" << i;
        for (int i = 0; i < model.dim; ++i)
            for (int j = 0; j < model.dim; ++j) out << ",sigma" << i << j;
        out << ",epsilon\n";
    }
    for (int k = 0; k < model.classes; ++k) {
        out << epoch << "," << k;
        for (int i = 0; i < model.dim; ++i) out << "," << model.means[k][i];
        for (int i = 0; i < model.dim; ++i)
            for (int j = 0; j < model.dim; ++j) out << "," << model.cov(i, j);
        out << ",";
        if (auto it = batches.find(k); it != batches.end()) out << it->second.epsilon;
        out << "\n";
    }
}

}  // namespace morphoseg
