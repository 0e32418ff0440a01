#pragma once

#include "morphoseg/imaging.hpp"
#include "morphoseg/losses.hpp"
#include "morphoseg/metrics.hpp"
#include "morphoseg/outliers.hpp"
#include "morphoseg/segmenter.hpp"
#include "morphoseg/tiling.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace morphoseg {

struct TrainConfig {
    int epochs = 200;
    /// Negative means 0.75 * epochs.
    int sampling_start_epoch = -1;
    int batch_size = 8;
    int pixels_per_image = 1000;
    std::size_t sample_size = 100000;
    std::size_t selection_count = 10000;
    double substitution_fraction = 0.05;
    std::size_t queue_capacity = 5000;
    bool outliers_enabled = true;
    bool foreground_only = false;
    int classes = 2;

    LossSpec loss;
    OptimHyper optim;
    std::uint64_t seed = 0;
    std::uint64_t init_seed = 0;  // 0: derived from seed

    /// Per-epoch checkpoints and logs go here when set.
    std::filesystem::path out_dir;
    /// Validation every N epochs (0 disables).
    int eval_every = 0;
    int infer_patch = 224;
    int infer_margin = 56;

    int start_epoch() const;
    void validate() const;
};

struct Dataset {
    std::vector<std::string> ids;
    std::vector<Sample> samples;

    std::size_t size() const { return samples.size(); }
    void push(std::string id, Sample s) {
        ids.push_back(std::move(id));
        samples.push_back(std::move(s));
    }
};

/// Loads every manifest record whose split matches (all records when split
/// is empty).
Dataset load_dataset(const std::filesystem::path& dir, const std::string& split, int k);

struct StepRow {
    int epoch = 0;
    int step = 0;
    LossReport report;  // batch means of the per-image reports
    double lr = 0.0;
    bool synthesis = false;
};

struct EpochEval {
    int epoch = 0;
    EvalReport report;
};

struct RunLog {
    std::vector<StepRow> rows;
    std::vector<EpochEval> evals;
    std::vector<double> epoch_seconds;
    std::vector<std::string> warnings;
};

/// Everything needed to continue a run at `next_epoch`.
struct TrainState {
    SegmenterParams params;
    OptimState optim;
    QueueSet queues;
    int next_epoch = 0;
};

struct TrainResult {
    TrainState state;
    RunLog log;
};

TrainState initial_state(const TrainConfig& cfg, int channels);

/// Runs epochs [state.next_epoch, until_epoch) (until_epoch < 0: cfg.epochs).
/// Before the sampling start only the segmentation loss is optimized; from it
/// on, each step samples outliers from the current Gaussian model, trains on
/// the full objective, then enqueues the batch's pixel logits. The model is
/// re-estimated at every epoch start and as soon as the queues first become
/// ready.
TrainResult train(const TrainConfig& cfg, const Dataset& train_set, const Dataset* val_set = nullptr,
                  std::optional<TrainState> resume = std::nullopt, int until_epoch = -1);

Checkpoint to_checkpoint(const TrainState& state);
TrainState from_checkpoint(const Checkpoint& ckpt);

struct Inference {
    MaskMap mask;
    ProbMap probs;
};

/// Tiled inference: stride = patch - margin, per-tile softmax, average-pooled
/// stitch, argmax with ties to class 0. Images smaller than the patch are
/// edge-replicated up to the patch size and cropped back.
Inference infer(const SegmenterParams& params, const Image& image, int patch = 224, int margin = 56);

EvalReport evaluate(const SegmenterParams& params, const Dataset& data, int patch = 224, int margin = 56);

void write_run_csv(const RunLog& log, const std::filesystem::path& path);

}  // namespace morphoseg
