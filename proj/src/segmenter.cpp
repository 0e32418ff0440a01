#include "morphoseg/segmenter.hpp"

#include "morphoseg/errors.hpp"
#include "morphoseg/random.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>

namespace morphoseg {

std::size_t SegmenterParams::count(std::span<const ConvSpec> layers) {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.param_count();
    return n;
}

std::size_t SegmenterParams::offset(std::size_t layer) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < layer; ++i) n += layers[i].param_count();
    return n;
}

void SegmenterParams::validate() const {
    if (layers.empty()) throw ConfigError("segmenter has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        if (l.in < 1 || l.out < 1 || l.kernel < 1 || l.kernel % 2 == 0) {
            throw ConfigError("invalid layer spec at index " + std::to_string(i));
        }
        if (i > 0 && layers[i - 1].out != l.in) throw ConfigError("layer channel counts do not chain");
    }
    if (classes() < 2) throw ConfigError("segmenter must output at least 2 classes");
    if (flat.size() != count(layers)) throw ConfigError("parameter vector length does not match layer specs");
    for (double v : flat) {
        if (!std::isfinite(v)) throw NumericalError("segmenter parameters contain non-finite values");
    }
}

std::vector<ConvSpec> reference_layers(int channels, int classes) {
    return {{channels, 8, 3, true}, {8, 16, 3, true}, {16, classes, 1, false}};
}

SegmenterParams init_params(std::vector<ConvSpec> layers, std::uint64_t seed) {
    SegmenterParams p;
    p.layers = std::move(layers);
    p.flat.assign(SegmenterParams::count(p.layers), 0.0);
    Rng rng(seed);
    std::size_t off = 0;
    for (const auto& l : p.layers) {
        const double fan_in = static_cast<double>(l.in) * l.kernel * l.kernel;
        const double fan_out = static_cast<double>(l.out) * l.kernel * l.kernel;
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        for (std::size_t i = 0; i < l.weight_count(); ++i) p.flat[off + i] = rng.uniform(-bound, bound);
        off += l.param_count();
    }
    p.validate();
    return p;
}

namespace {

// Same-padded stride-1 convolution over channel-major planes:
// out[o] = b[o] + sum_i W[o][i] (*) in[i], zero outside the image.
void conv_forward(const ConvSpec& l, const double* w, const double* in, double* out, int h, int wd) {
    const int pad = l.kernel / 2;
    const auto plane = static_cast<std::size_t>(h) * wd;
    const double* bias = w + l.weight_count();
    for (int o = 0; o < l.out; ++o) {
        double* op = out + o * plane;
        std::fill(op, op + plane, bias[o]);
        for (int i = 0; i < l.in; ++i) {
            const double* ip = in + i * plane;
            for (int ky = 0; ky < l.kernel; ++ky) {
                const int dy = ky - pad;
                const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                for (int kx = 0; kx < l.kernel; ++kx) {
                    const int dx = kx - pad;
                    const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
                    const double wv = w[((static_cast<std::size_t>(o) * l.in + i) * l.kernel + ky) * l.kernel + kx];
                    for (int y = y0; y < y1; ++y) {
                        double* orow = op + static_cast<std::size_t>(y) * wd;
                        const double* irow = ip + static_cast<std::size_t>(y + dy) * wd + dx;
                        for (int x = x0; x < x1; ++x) orow[x] += wv * irow[x];
                    }
                }
            }
        }
    }
}

// Given dout (channel-major), accumulates dW, db and (optionally) din.
void conv_backward(const ConvSpec& l, const double* w, const double* in, const double* dout, double* dw,
                   double* din, int h, int wd) {
    const int pad = l.kernel / 2;
    const auto plane = static_cast<std::size_t>(h) * wd;
    double* db = dw + l.weight_count();
    for (int o = 0; o < l.out; ++o) {
        const double* gp = dout + o * plane;
        db[o] += std::accumulate(gp, gp + plane, 0.0);
        for (int i = 0; i < l.in; ++i) {
            const double* ip = in + i * plane;
            double* dip = din ? din + i * plane : nullptr;
            for (int ky = 0; ky < l.kernel; ++ky) {
                const int dy = ky - pad;
                const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                for (int kx = 0; kx < l.kernel; ++kx) {
                    const int dx = kx - pad;
                    const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
                    const auto widx = ((static_cast<std::size_t>(o) * l.in + i) * l.kernel + ky) * l.kernel + kx;
                    const double wv = w[widx];
                    double acc = 0.0;
                    for (int y = y0; y < y1; ++y) {
                        const double* grow = gp + static_cast<std::size_t>(y) * wd;
                        const double* irow = ip + static_cast<std::size_t>(y + dy) * wd + dx;
                        for (int x = x0; x < x1; ++x) acc += grow[x] * irow[x];
                        if (dip) {
                            double* drow = dip + static_cast<std::size_t>(y + dy) * wd + dx;
                            for (int x = x0; x < x1; ++x) drow[x] += wv * grow[x];
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
}

}  // namespace

ForwardCache forward_cached(const SegmenterParams& params, const Image& img) {
    if (img.channels != params.in_channels()) {
        throw DataError("channel mismatch: image has " + std::to_string(img.channels) + " channels, segmenter expects " +
                        std::to_string(params.in_channels()));
    }
    const int h = img.height, w = img.width;
    const auto plane = static_cast<std::size_t>(h) * w;
    ForwardCache cache;
    cache.height = h;
    cache.width = w;

    std::vector<double> x(plane * img.channels);
    for (std::size_t p = 0; p < plane; ++p) {
        for (int c = 0; c < img.channels; ++c) x[c * plane + p] = img.data[p * img.channels + c];
    }
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
        const auto& l = params.layers[li];
        std::vector<double> y(plane * l.out);
        conv_forward(l, params.flat.data() + params.offset(li), x.data(), y.data(), h, w);
        if (l.relu) {
            for (auto& v : y) v = v > 0.0 ? v : 0.0;
        }
        cache.inputs.push_back(std::move(x));
        x = std::move(y);
    }
    const int k = params.classes();
    cache.logits = LogitMap(h, w, k);
    for (std::size_t p = 0; p < plane; ++p) {
        for (int j = 0; j < k; ++j) cache.logits.logits[p * k + j] = x[j * plane + p];
    }
    return cache;
}

LogitMap forward(const SegmenterParams& params, const Image& img) {
    return forward_cached(params, img).logits;
}

std::vector<double> backward(const SegmenterParams& params, const ForwardCache& cache,
                             std::span<const double> dlogits) {
    const int h = cache.height, w = cache.width;
    const auto plane = static_cast<std::size_t>(h) * w;
    const int k = params.classes();
    if (dlogits.size() != plane * k) throw DataError("backward: gradient size does not match the logit map");

    std::vector<double> grad(params.flat.size(), 0.0);
    std::vector<double> dy(plane * k);
    for (std::size_t p = 0; p < plane; ++p) {
        for (int j = 0; j < k; ++j) dy[j * plane + p] = dlogits[p * k + j];
    }
    for (std::size_t li = params.layers.size(); li-- > 0;) {
        const auto& l = params.layers[li];
        const auto off = params.offset(li);
        const auto& in = cache.inputs[li];
        std::vector<double> dx;
        if (li > 0) dx.assign(plane * l.in, 0.0);
        conv_backward(l, params.flat.data() + off, in.data(), dy.data(), grad.data() + off,
                      li > 0 ? dx.data() : nullptr, h, w);
        if (li > 0 && params.layers[li - 1].relu) {
            // The cached input is the previous layer's post-ReLU output.
            for (std::size_t i = 0; i < dx.size(); ++i) {
                if (!(in[i] > 0.0)) dx[i] = 0.0;
            }
        }
        dy = std::move(dx);
    }
    return grad;
}

LossAndGrad loss_and_grad(const SegmenterParams& params, const Image& img, const MaskMap& target,
                          const LossSpec& spec, const OutlierContext* outliers) {
    if (img.height != target.height || img.width != target.width) {
        throw DataError("loss_and_grad: image and target shapes differ");
    }
    auto cache = forward_cached(params, img);
    const auto& logits = cache.logits;

    const auto ce = ce_with_grad(logits, target);
    const auto dice = dice_with_grad(logits, target, spec.dice_eps);
    LossComponents comps;
    comps.values[kCe] = ce.value;
    comps.values[kDice] = dice.value;

    TermGrad ce_out, dice_out;
    if (outliers && outliers->batches && spec.weights.beta > 0.0) {
        const auto syn =
            build_synthetic_map(logits, target, *outliers->batches, outliers->substitution_fraction, outliers->seed);
        ce_out = ce_with_grad(syn.logits, target);
        dice_out = dice_with_grad(syn.logits, target, spec.dice_eps);
        for (std::size_t p = 0; p < syn.substituted.size(); ++p) {
            if (!syn.substituted[p]) continue;
            for (int j = 0; j < logits.k; ++j) {
                ce_out.dlogits[p * logits.k + j] = 0.0;
                dice_out.dlogits[p * logits.k + j] = 0.0;
            }
        }
        comps.values[kCeOut] = ce_out.value;
        comps.values[kDiceOut] = dice_out.value;
        comps.outlier_active = true;
    }

    static const char* const kNames[] = {"ce", "dice", "ce_out", "dice_out"};
    for (int i = 0; i < 4; ++i) {
        if (!std::isfinite(comps.values[i])) {
            throw NumericalError(std::string("non-finite loss component: ") + kNames[i]);
        }
    }

    LossAndGrad out;
    out.report = make_report(comps, spec);
    if (!std::isfinite(out.report.combined)) throw NumericalError("non-finite loss component: combined");

    const auto& coef = out.report.coefficients;
    std::vector<double> dlogits(logits.logits.size());
    for (std::size_t i = 0; i < dlogits.size(); ++i) {
        double g = coef[kCe] * ce.dlogits[i] + coef[kDice] * dice.dlogits[i];
        if (comps.outlier_active) g += coef[kCeOut] * ce_out.dlogits[i] + coef[kDiceOut] * dice_out.dlogits[i];
        dlogits[i] = g;
    }
    out.grad = backward(params, cache, dlogits);
    out.logits = std::move(cache.logits);
    return out;
}

void OptimHyper::validate() const {
    if (!(lr0 > 0.0)) throw ConfigError("lr0 must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(gamma > 0.0)) throw ConfigError("gamma must be > 0");
}

OptimState make_optim_state(const SegmenterParams& params, const OptimHyper& hyper) {
    hyper.validate();
    return {std::vector<double>(params.flat.size(), 0.0), hyper, 0};
}

double lr_at(const OptimHyper& hyper, int epoch) {
    if (epoch < 0) throw ConfigError("lr_at: epoch must be >= 0");
    return hyper.lr0 * std::pow(hyper.gamma, epoch);
}

std::pair<OptimState, SegmenterParams> sgd_step(OptimState state, SegmenterParams params,
                                                std::span<const double> grads, int epoch) {
    if (grads.size() != params.flat.size() || state.velocity.size() != params.flat.size()) {
        throw DataError("sgd_step: gradient/velocity/parameter lengths differ");
    }
    for (double g : grads) {
        if (!std::isfinite(g)) throw NumericalError("sgd_step: non-finite gradient");
    }
    const double lr = lr_at(state.hyper, epoch);
    const auto& hp = state.hyper;
    for (std::size_t i = 0; i < grads.size(); ++i) {
        state.velocity[i] = hp.momentum * state.velocity[i] + grads[i] + hp.weight_decay * params.flat[i];
        params.flat[i] -= lr * state.velocity[i];
    }
    ++state.step;
    return {std::move(state), std::move(params)};
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kFormatName = "morphoseg-checkpoint";

void put_f64(std::string& buf, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_f64(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    ckpt.params.validate();
    if (ckpt.optim.velocity.size() != ckpt.params.flat.size()) {
        throw DataError("save_checkpoint: velocity length differs from parameter length");
    }
    nlohmann::json header;
    header["format"] = kFormatName;
    header["version"] = Checkpoint::kFormatVersion;
    header["param_version"] = ckpt.params.version;
    header["layers"] = nlohmann::json::array();
    for (const auto& l : ckpt.params.layers) {
        header["layers"].push_back({{"in", l.in}, {"out", l.out}, {"kernel", l.kernel}, {"relu", l.relu}});
    }
    const auto& hp = ckpt.optim.hyper;
    header["hyper"] = {{"lr0", hp.lr0}, {"momentum", hp.momentum}, {"weight_decay", hp.weight_decay}, {"gamma", hp.gamma}};
    header["step"] = ckpt.optim.step;
    header["param_count"] = ckpt.params.flat.size();
    header["extra_count"] = ckpt.extra_payload.size();
    header["extra"] = ckpt.extra;

    std::string buf = header.dump();
    buf.push_back('\n');
    buf.reserve(buf.size() + 8 * (2 * ckpt.params.flat.size() + ckpt.extra_payload.size()));
    for (double v : ckpt.params.flat) put_f64(buf, v);
    for (double v : ckpt.optim.velocity) put_f64(buf, v);
    for (double v : ckpt.extra_payload) put_f64(buf, v);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw DataError("cannot write checkpoint " + path.string());
}

void save_checkpoint(const SegmenterParams& params, const OptimState& optim, const std::filesystem::path& path) {
    save_checkpoint(Checkpoint{params, optim, nlohmann::json::object(), {}}, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw DataError("checkpoint " + path.string() + ": missing header");

    Checkpoint ckpt;
    std::size_t n_params = 0, n_extra = 0;
    try {
        const auto header = nlohmann::json::parse(line);
        if (header.at("format").get<std::string>() != kFormatName) {
            throw DataError("checkpoint " + path.string() + ": unknown format");
        }
        const int version = header.at("version").get<int>();
        if (version != Checkpoint::kFormatVersion) {
            throw DataError("checkpoint " + path.string() + ": version mismatch (file " + std::to_string(version) +
                            ", expected " + std::to_string(Checkpoint::kFormatVersion) + ")");
        }
        ckpt.params.version = header.at("param_version").get<int>();
        for (const auto& l : header.at("layers")) {
            ckpt.params.layers.push_back(
                {l.at("in").get<int>(), l.at("out").get<int>(), l.at("kernel").get<int>(), l.at("relu").get<bool>()});
        }
        const auto& hp = header.at("hyper");
        ckpt.optim.hyper = {hp.at("lr0").get<double>(), hp.at("momentum").get<double>(),
                            hp.at("weight_decay").get<double>(), hp.at("gamma").get<double>()};
        ckpt.optim.step = header.at("step").get<std::uint64_t>();
        n_params = header.at("param_count").get<std::size_t>();
        n_extra = header.at("extra_count").get<std::size_t>();
        ckpt.extra = header.at("extra");
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint " + path.string() + ": corrupted header (" + e.what() + ")");
    }
    if (n_params != SegmenterParams::count(ckpt.params.layers)) {
        throw DataError("checkpoint " + path.string() + ": parameter count does not match layer specs");
    }

    const std::size_t total = 2 * n_params + n_extra;
    std::vector<unsigned char> payload(total * 8);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (in.gcount() != static_cast<std::streamsize>(payload.size())) {
        throw DataError("checkpoint " + path.string() + ": truncated payload");
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw DataError("checkpoint " + path.string() + ": trailing bytes after payload");
    }
    ckpt.params.flat.resize(n_params);
    ckpt.optim.velocity.resize(n_params);
    ckpt.extra_payload.resize(n_extra);
    const unsigned char* p = payload.data();
    for (auto& v : ckpt.params.flat) v = get_f64(p), p += 8;
    for (auto& v : ckpt.optim.velocity) v = get_f64(p), p += 8;
    for (auto& v : ckpt.extra_payload) v = get_f64(p), p += 8;
    try {
        ckpt.params.validate();
        ckpt.optim.hyper.validate();
    } catch (const Error& e) {
        throw DataError("checkpoint " + path.string() + ": " + e.what());
    }
    return ckpt;
}

}  // namespace morphoseg
