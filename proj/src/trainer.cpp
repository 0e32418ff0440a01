#include "morphoseg/trainer.hpp"

#include "morphoseg/errors.hpp"
#include "morphoseg/random.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>

namespace morphoseg {

namespace {

// Stream tags for derive_seed.
enum : std::uint64_t { kTagInit = 1, kTagShuffle, kTagOutliers, kTagSubstitute, kTagEnqueue };

}  // namespace

int TrainConfig::start_epoch() const {
    return sampling_start_epoch >= 0 ? sampling_start_epoch : static_cast<int>(0.75 * epochs);
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (start_epoch() > epochs) throw ConfigError("sampling_start_epoch must be <= epochs");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (pixels_per_image < 1) throw ConfigError("pixels_per_image must be >= 1");
    if (selection_count > sample_size) throw ConfigError("selection_count must be <= sample_size");
    if (selection_count < 1) throw ConfigError("selection_count must be >= 1");
    if (!(substitution_fraction >= 0.0 && substitution_fraction <= 1.0)) {
        throw ConfigError("substitution_fraction must lie in [0, 1]");
    }
    if (queue_capacity < 1) throw ConfigError("queue_capacity must be >= 1");
    if (classes < 2) throw ConfigError("classes must be >= 2");
    const auto& w = loss.weights;
    for (double v : {w.lambda, w.beta, w.lambda1, w.lambda2, w.beta1, w.beta2}) {
        if (!(v >= 0.0)) throw ConfigError("loss weights must be non-negative");
    }
    if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
    if (infer_margin < 0 || infer_margin >= infer_patch) throw ConfigError("infer_margin must lie in [0, infer_patch)");
    optim.validate();
}

Dataset load_dataset(const std::filesystem::path& dir, const std::string& split, int k) {
    const auto records = read_manifest(dir / "manifest.jsonl");
    Dataset data;
    for (const auto& rec : records) {
        if (!split.empty() && rec.split != split) continue;
        Sample s{load_image(dir / rec.image), load_mask(dir / rec.mask, k)};
        if (s.image.height != s.mask.height || s.image.width != s.mask.width) {
            throw DataError("image/mask shape mismatch for " + rec.image);
        }
        const auto stem = std::filesystem::path(rec.image).stem().string();
        data.push(stem, std::move(s));
    }
    return data;
}

TrainState initial_state(const TrainConfig& cfg, int channels) {
    const auto init_seed = cfg.init_seed != 0 ? cfg.init_seed : derive_seed(cfg.seed, {kTagInit});
    TrainState st;
    st.params = init_params(reference_layers(channels, cfg.classes), init_seed);
    st.optim = make_optim_state(st.params, cfg.optim);
    st.queues = QueueSet(cfg.classes, cfg.queue_capacity, cfg.classes);
    st.next_epoch = 0;
    return st;
}

Checkpoint to_checkpoint(const TrainState& state) {
    Checkpoint ck{state.params, state.optim, nlohmann::json::object(), {}};
    ck.extra["next_epoch"] = state.next_epoch;
    auto& q = ck.extra["queues"];
    q["dim"] = state.queues.dim();
    q["capacity"] = state.queues.queues.empty() ? 0 : state.queues.queues.front().capacity();
    q["sizes"] = nlohmann::json::array();
    for (const auto& cq : state.queues.queues) {
        q["sizes"].push_back(cq.size());
        for (const auto& e : cq.entries()) ck.extra_payload.insert(ck.extra_payload.end(), e.begin(), e.end());
    }
    return ck;
}

TrainState from_checkpoint(const Checkpoint& ckpt) {
    TrainState st;
    st.params = ckpt.params;
    st.optim = ckpt.optim;
    try {
        st.next_epoch = ckpt.extra.at("next_epoch").get<int>();
        const auto& q = ckpt.extra.at("queues");
        const int dim = q.at("dim").get<int>();
        const auto capacity = q.at("capacity").get<std::size_t>();
        const auto sizes = q.at("sizes").get<std::vector<std::size_t>>();
        st.queues = QueueSet(static_cast<int>(sizes.size()), capacity, dim);
        std::size_t off = 0;
        for (std::size_t k = 0; k < sizes.size(); ++k) {
            for (std::size_t i = 0; i < sizes[k]; ++i) {
                if (off + dim > ckpt.extra_payload.size()) throw DataError("checkpoint queue payload is truncated");
                st.queues.queues[k].push(std::span<const double>(ckpt.extra_payload.data() + off, dim));
                off += dim;
            }
        }
        if (off != ckpt.extra_payload.size()) throw DataError("checkpoint queue payload has trailing values");
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint lacks trainer state: ") + e.what());
    }
    return st;
}

namespace {

void accumulate(LossReport& sum, const LossReport& r) {
    sum.ce += r.ce;
    sum.dice += r.dice;
    sum.ce_out += r.ce_out;
    sum.dice_out += r.dice_out;
    sum.combined += r.combined;
    for (int i = 0; i < 4; ++i) sum.coefficients[i] += r.coefficients[i];
    sum.outlier_active = sum.outlier_active || r.outlier_active;
    sum.pareto_fallback = sum.pareto_fallback || r.pareto_fallback;
}

void scale(LossReport& r, double s) {
    r.ce *= s;
    r.dice *= s;
    r.ce_out *= s;
    r.dice_out *= s;
    r.combined *= s;
    for (auto& c : r.coefficients) c *= s;
}

std::string epoch_file(int epoch) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "epoch_%04d.ckpt", epoch);
    return buf;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const Dataset& train_set, const Dataset* val_set,
                  std::optional<TrainState> resume, int until_epoch) {
    cfg.validate();
    if (train_set.size() == 0) throw DataError("training set is empty");
    const int channels = train_set.samples.front().image.channels;
    for (const auto& s : train_set.samples) {
        if (s.image.channels != channels) throw DataError("training images have mixed channel counts");
        s.mask.validate(cfg.classes);
    }
    const int last_epoch = until_epoch < 0 ? cfg.epochs : std::min(until_epoch, cfg.epochs);
    const int sampling_start = cfg.start_epoch();

    TrainResult result;
    auto& st = result.state;
    st = resume ? std::move(*resume) : initial_state(cfg, channels);
    auto& log = result.log;
    if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);

    const auto n = train_set.size();
    const auto batch = static_cast<std::size_t>(cfg.batch_size);
    std::vector<int> outlier_classes;
    for (int k = cfg.foreground_only ? 1 : 0; k < cfg.classes; ++k) outlier_classes.push_back(k);

    bool ever_ready = false;
    for (int epoch = st.next_epoch; epoch < last_epoch; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const bool sampling = cfg.outliers_enabled && epoch >= sampling_start;
        std::optional<GaussianModel> model;
        if (sampling) model = estimate(st.queues);

        const auto order = seeded_permutation(n, derive_seed(cfg.seed, {kTagShuffle, static_cast<std::uint64_t>(epoch)}));
        const double lr = lr_at(st.optim.hyper, epoch);
        int step = 0;
        for (std::size_t b0 = 0; b0 < n; b0 += batch, ++step) {
            const auto b1 = std::min(n, b0 + batch);
            const auto ep = static_cast<std::uint64_t>(epoch), sp = static_cast<std::uint64_t>(step);

            std::map<int, OutlierBatch> outliers;
            const bool synthesis = sampling && model && cfg.loss.weights.beta > 0.0;
            if (synthesis) {
                for (int k : outlier_classes) {
                    outliers.emplace(k, sample_outliers(*model, k, cfg.sample_size, cfg.selection_count,
                                                        derive_seed(cfg.seed, {kTagOutliers, ep, sp,
                                                                               static_cast<std::uint64_t>(k)})));
                }
            }

            std::vector<double> grad(st.params.flat.size(), 0.0);
            LossReport mean_report;
            std::vector<LogitMap> batch_logits;
            for (std::size_t i = b0; i < b1; ++i) {
                const auto idx = order[i];
                const auto& s = train_set.samples[idx];
                OutlierContext ctx{&outliers, cfg.substitution_fraction,
                                   derive_seed(cfg.seed, {kTagSubstitute, ep, sp, static_cast<std::uint64_t>(idx)})};
                auto lg = loss_and_grad(st.params, s.image, s.mask, cfg.loss, synthesis ? &ctx : nullptr);
                for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += lg.grad[j];
                accumulate(mean_report, lg.report);
                if (sampling) batch_logits.push_back(std::move(lg.logits));
            }
            const double inv = 1.0 / static_cast<double>(b1 - b0);
            for (auto& g : grad) g *= inv;
            scale(mean_report, inv);
            mean_report.strategy = cfg.loss.strategy;
            mean_report.weights = cfg.loss.weights;

            if (sampling) {
                for (std::size_t i = b0; i < b1; ++i) {
                    const auto idx = order[i];
                    enqueue_pixels(st.queues, batch_logits[i - b0], train_set.samples[idx].mask, cfg.pixels_per_image,
                                   derive_seed(cfg.seed, {kTagEnqueue, ep, sp, static_cast<std::uint64_t>(idx)}));
                }
                if (!model) model = estimate(st.queues);
            }
            std::tie(st.optim, st.params) = sgd_step(std::move(st.optim), std::move(st.params), grad, epoch);
            log.rows.push_back({epoch, step, mean_report, lr, synthesis});
        }
        ever_ready = ever_ready || (sampling && model.has_value());
        st.next_epoch = epoch + 1;

        if (val_set && val_set->size() > 0 && cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
            log.evals.push_back({epoch, evaluate(st.params, *val_set, cfg.infer_patch, cfg.infer_margin)});
        }
        if (!cfg.out_dir.empty()) {
            const auto ck = to_checkpoint(st);
            save_checkpoint(ck, cfg.out_dir / epoch_file(epoch));
            save_checkpoint(ck, cfg.out_dir / "last.ckpt");
            if (sampling && model) append_model_csv(cfg.out_dir / "gaussian.csv", epoch, *model, {});
        }
        log.epoch_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    if (cfg.outliers_enabled && sampling_start < last_epoch && !ever_ready) {
        log.warnings.push_back("class queues never became ready; no outliers were synthesized");
    }
    if (!cfg.out_dir.empty()) write_run_csv(log, cfg.out_dir / "train_log.csv");
    return result;
}

namespace {

Image pad_edge(const Image& img, int h, int w) {
    Image out(h, w, img.channels);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const int sr = std::min(r, img.height - 1), sc = std::min(c, img.width - 1);
            for (int ch = 0; ch < img.channels; ++ch) out.at(r, c, ch) = img.at(sr, sc, ch);
        }
    }
    return out;
}

}  // namespace

Inference infer(const SegmenterParams& params, const Image& image, int patch, int margin) {
    if (image.height < 1 || image.width < 1) throw DataError("infer: empty image");
    const int stride = margin_stride(patch, margin);
    const int h = std::max(image.height, patch), w = std::max(image.width, patch);
    const bool padded = h != image.height || w != image.width;
    const Image src = padded ? pad_edge(image, h, w) : Image{};
    const Image& full = padded ? src : image;

    const auto plan = plan_tiles(h, w, patch, stride);
    const int k = params.classes();
    std::vector<std::pair<TileRect, ProbMap>> tiles;
    tiles.reserve(plan.rects.size());
    for (const auto& rect : plan.rects) {
        const auto logits = forward(params, crop(full, rect));
        ProbMap pm(rect.size, rect.size, k);
        for (std::size_t p = 0; p < logits.pixel_count(); ++p) softmax(logits.pixel(p), k, &pm.probs[p * k]);
        tiles.emplace_back(rect, std::move(pm));
    }
    ProbMap stitched = stitch(tiles, h, w, k);

    Inference out;
    if (padded) {
        out.probs = ProbMap(image.height, image.width, k);
        for (int r = 0; r < image.height; ++r) {
            for (int c = 0; c < image.width; ++c) {
                for (int j = 0; j < k; ++j) out.probs.at(r, c, j) = stitched.at(r, c, j);
            }
        }
    } else {
        out.probs = std::move(stitched);
    }
    out.mask = MaskMap(image.height, image.width);
    for (std::size_t p = 0; p < out.mask.pixel_count(); ++p) {
        const double* v = &out.probs.probs[p * k];
        int best = 0;
        for (int j = 1; j < k; ++j) {
            if (v[j] > v[best]) best = j;
        }
        out.mask.labels[p] = static_cast<std::uint8_t>(best);
    }
    return out;
}

EvalReport evaluate(const SegmenterParams& params, const Dataset& data, int patch, int margin) {
    if (data.size() == 0) throw DataError("evaluate: dataset is empty");
    std::vector<ImageRecord> records;
    records.reserve(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto pred = infer(params, data.samples[i].image, patch, margin);
        records.push_back(evaluate_pair(data.ids[i], pred.mask, data.samples[i].mask));
    }
    return aggregate(std::move(records));
}

void write_run_csv(const RunLog& log, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out.precision(17);
    out << "epoch,step,ce,dice,ce_out,dice_out,combined,strategy,lr\n";
    for (const auto& row : log.rows) {
        const auto& r = row.report;
        out << row.epoch << "," << row.step << "," << r.ce << "," << r.dice << "," << r.ce_out << "," << r.dice_out
            << "," << r.combined << "," << to_string(r.strategy) << "," << row.lr << "\n";
    }
}

}  // namespace morphoseg
