#pragma once

#include "morphoseg/imaging.hpp"
#include "morphoseg/logit_map.hpp"
#include "morphoseg/losses.hpp"
#include "morphoseg/outliers.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <utility>
#include <vector>

namespace morphoseg {

/// One same-padded, stride-1 convolution, optionally followed by ReLU.
struct ConvSpec {
    int in = 0;
    int out = 0;
    int kernel = 1;  // odd
    bool relu = false;

    std::size_t weight_count() const { return static_cast<std::size_t>(out) * in * kernel * kernel; }
    std::size_t param_count() const { return weight_count() + static_cast<std::size_t>(out); }
    bool operator==(const ConvSpec&) const = default;
};

/// Layer specs plus a flat parameter vector. Each layer stores its weights
/// as [out][in][ky][kx] followed by its biases.
struct SegmenterParams {
    static constexpr int kVersion = 1;

    std::vector<ConvSpec> layers;
    std::vector<double> flat;
    int version = kVersion;

    int in_channels() const { return layers.front().in; }
    int classes() const { return layers.back().out; }
    std::size_t offset(std::size_t layer) const;
    static std::size_t count(std::span<const ConvSpec> layers);
    void validate() const;
};

/// conv3x3 C->8 + ReLU, conv3x3 8->16 + ReLU, conv1x1 16->K.
std::vector<ConvSpec> reference_layers(int channels, int classes);

/// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
SegmenterParams init_params(std::vector<ConvSpec> layers, std::uint64_t seed);

/// Intermediate activations kept for the backward pass (channel-major planes).
struct ForwardCache {
    int height = 0;
    int width = 0;
    std::vector<std::vector<double>> inputs;  // inputs[l] feeds layer l
    LogitMap logits;
};

ForwardCache forward_cached(const SegmenterParams& params, const Image& img);
LogitMap forward(const SegmenterParams& params, const Image& img);

/// Reverse pass from d(objective)/d(logits) (LogitMap layout) to the flat
/// parameter gradient.
std::vector<double> backward(const SegmenterParams& params, const ForwardCache& cache,
                             std::span<const double> dlogits);

/// Virtual-outlier inputs for one image: per-class batches, the fraction of
/// each class's pixels to substitute, and the seed choosing them.
struct OutlierContext {
    const std::map<int, OutlierBatch>* batches = nullptr;
    double substitution_fraction = 0.0;
    std::uint64_t seed = 0;
};

struct LossAndGrad {
    LossReport report;
    std::vector<double> grad;
    LogitMap logits;
};

/// The uncertainty term takes part when `outliers` is given and beta > 0.
/// Substituted outlier logits are constants: gradient reaches real-pixel
/// logits only.
LossAndGrad loss_and_grad(const SegmenterParams& params, const Image& img, const MaskMap& target,
                          const LossSpec& spec, const OutlierContext* outliers = nullptr);

struct OptimHyper {
    double lr0 = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double gamma = 0.98;

    void validate() const;
};

struct OptimState {
    std::vector<double> velocity;
    OptimHyper hyper;
    std::uint64_t step = 0;
};

OptimState make_optim_state(const SegmenterParams& params, const OptimHyper& hyper);

/// lr0 * gamma^epoch
double lr_at(const OptimHyper& hyper, int epoch);

/// v <- momentum * v + g + weight_decay * theta; theta <- theta - lr_at(epoch) * v.
std::pair<OptimState, SegmenterParams> sgd_step(OptimState state, SegmenterParams params,
                                                std::span<const double> grads, int epoch);

/// Self-describing checkpoint: one line of JSON header followed by
/// little-endian float64 payload (params, velocity, extra).
struct Checkpoint {
    static constexpr int kFormatVersion = 1;

    SegmenterParams params;
    OptimState optim;
    nlohmann::json extra = nlohmann::json::object();
    std::vector<double> extra_payload;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
void save_checkpoint(const SegmenterParams& params, const OptimState& optim, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace morphoseg
