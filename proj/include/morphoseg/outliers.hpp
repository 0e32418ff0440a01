#pragma once

#include "morphoseg/imaging.hpp"
#include "morphoseg/logit_map.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

namespace morphoseg {

/// Fixed-capacity FIFO of per-pixel logit vectors for one class.
class ClassQueue {
public:
    ClassQueue(int class_id, std::size_t capacity, int dim);

    int class_id() const { return class_id_; }
    std::size_t capacity() const { return capacity_; }
    int dim() const { return dim_; }
    std::size_t size() const { return entries_.size(); }
    const std::deque<std::vector<double>>& entries() const { return entries_; }

    /// Appends v, evicting the oldest entry when full.
    void push(std::span<const double> v);

private:
    int class_id_;
    std::size_t capacity_;
    int dim_;
    std::deque<std::vector<double>> entries_;
};

/// One queue per class, all over the same logit dimension.
struct QueueSet {
    std::vector<ClassQueue> queues;

    QueueSet() = default;
    QueueSet(int classes, std::size_t capacity, int dim);

    int dim() const { return queues.empty() ? 0 : queues.front().dim(); }
    /// Every class holds at least dim + 1 entries.
    bool ready() const;
};

/// Class means plus one covariance shared across classes, with the
/// Cholesky factor of cov + ridge * I.
struct GaussianModel {
    int classes = 0;
    int dim = 0;
    std::vector<Eigen::VectorXd> means;
    Eigen::MatrixXd cov;
    Eigen::MatrixXd chol;  // lower triangular
    double ridge = 0.0;
    double log_det = 0.0;  // of cov + ridge * I
};

struct OutlierBatch {
    int class_id = 0;
    std::vector<Eigen::VectorXd> vectors;
    std::vector<double> densities;  // nondecreasing
    double epsilon = 0.0;           // largest selected density
};

/// Draws n_per_image pixel positions without replacement (clamped to the
/// pixel count) and pushes each pixel's logit vector to its label's queue.
void enqueue_pixels(QueueSet& queues, const LogitMap& logits, const MaskMap& target, int n_per_image,
                    std::uint64_t seed);

/// Returns nullopt while any queue holds fewer than dim + 1 entries. The
/// ridge starts at 1e-4 and doubles until the factorization succeeds (at
/// most 10 doublings); NumericalError after that.
std::optional<GaussianModel> estimate(const QueueSet& queues);

double log_density(const GaussianModel& model, int k, const Eigen::VectorXd& v);
double density(const GaussianModel& model, int k, const Eigen::VectorXd& v);

/// The pre-selection stream: mean_k + chol * z, z standard normal.
std::vector<Eigen::VectorXd> draw_candidates(const GaussianModel& model, int k, std::size_t count,
                                             std::uint64_t seed);

/// Keeps the selection_count lowest-density candidates, ties broken by draw
/// index.
OutlierBatch select_lowest_density(const GaussianModel& model, int k, std::vector<Eigen::VectorXd> candidates,
                                   std::size_t selection_count);

OutlierBatch sample_outliers(const GaussianModel& model, int k, std::size_t sample_size,
                             std::size_t selection_count, std::uint64_t seed);

struct SyntheticMap {
    LogitMap logits;
    std::vector<std::uint8_t> substituted;  // per pixel
};

/// Replaces a seeded subset of each class's pixels (max(1, round(fraction *
/// class count)) when fraction > 0) with consecutive vectors from that
/// class's batch. Classes without a batch are left untouched.
SyntheticMap build_synthetic_map(const LogitMap& logits, const MaskMap& target,
                                 const std::map<int, OutlierBatch>& batches, double substitution_fraction,
                                 std::uint64_t seed);

/// Appends one row per class: epoch, class, mean components, covariance
/// entries (row-major), epsilon (empty when no batch).
void append_model_csv(const std::filesystem::path& path, int epoch, const GaussianModel& model,
                      const std::map<int, OutlierBatch>& batches);

}  // namespace morphoseg
