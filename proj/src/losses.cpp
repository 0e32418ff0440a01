#include "morphoseg/losses.hpp"

#include "morphoseg/errors.hpp"

#include <algorithm>
#include <cmath>

namespace morphoseg {

std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::balance: return "balance";
        case Strategy::norm: return "norm";
        case Strategy::pareto: return "pareto";
    }
    return "?";
}

Strategy parse_strategy(const std::string& name) {
    if (name == "balance") return Strategy::balance;
    if (name == "norm") return Strategy::norm;
    if (name == "pareto") return Strategy::pareto;
    throw ConfigError("unknown loss strategy '" + name + "' (expected balance, norm or pareto)");
}

void softmax(const double* logits, int k, double* out) {
    const double mx = *std::max_element(logits, logits + k);
    double z = 0.0;
    for (int j = 0; j < k; ++j) {
        out[j] = std::exp(logits[j] - mx);
        z += out[j];
    }
    for (int j = 0; j < k; ++j) out[j] /= z;
}

namespace {

void check_shapes(const LogitMap& logits, const MaskMap& target) {
    if (logits.height != target.height || logits.width != target.width) {
        throw DataError("loss: logit map and target shapes differ");
    }
}

double foreground_of(const double* probs, int k) {
    double p = 0.0;
    for (int j = 1; j < k; ++j) p += probs[j];
    return p;
}

}  // namespace

std::vector<double> foreground_probs(const LogitMap& logits) {
    std::vector<double> out(logits.pixel_count());
    std::vector<double> s(static_cast<std::size_t>(logits.k));
    for (std::size_t p = 0; p < out.size(); ++p) {
        softmax(logits.pixel(p), logits.k, s.data());
        out[p] = foreground_of(s.data(), logits.k);
    }
    return out;
}

double dice_loss(std::span<const double> fg_probs, const MaskMap& target, double eps) {
    if (fg_probs.size() != target.pixel_count()) throw DataError("dice_loss: probability/target size mismatch");
    double inter = 0.0, pp = 0.0, gg = 0.0;
    for (std::size_t i = 0; i < fg_probs.size(); ++i) {
        const double g = target.labels[i] != 0 ? 1.0 : 0.0;
        inter += fg_probs[i] * g;
        pp += fg_probs[i] * fg_probs[i];
        gg += g;
    }
    return 1.0 - (2.0 * inter + eps) / (pp + gg + eps);
}

double ce_loss(const LogitMap& logits, const MaskMap& target) {
    check_shapes(logits, target);
    double total = 0.0;
    for (std::size_t p = 0; p < logits.pixel_count(); ++p) {
        const double* z = logits.pixel(p);
        const double mx = *std::max_element(z, z + logits.k);
        double s = 0.0;
        for (int j = 0; j < logits.k; ++j) s += std::exp(z[j] - mx);
        total += mx + std::log(s) - z[target.labels[p]];
    }
    return total / static_cast<double>(logits.pixel_count());
}

double seg_loss(const LogitMap& logits, const MaskMap& target, double lambda1, double lambda2, double dice_eps) {
    if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("seg_loss weights must be non-negative");
    return lambda1 * ce_loss(logits, target) + lambda2 * dice_loss(foreground_probs(logits), target, dice_eps);
}

double uncertainty_loss(const LogitMap& synthetic_logits, const MaskMap& target, double beta1, double beta2,
                        double dice_eps) {
    if (beta1 < 0.0 || beta2 < 0.0) throw ConfigError("uncertainty_loss weights must be non-negative");
    return beta1 * ce_loss(synthetic_logits, target) +
           beta2 * dice_loss(foreground_probs(synthetic_logits), target, dice_eps);
}

TermGrad ce_with_grad(const LogitMap& logits, const MaskMap& target) {
    check_shapes(logits, target);
    const int k = logits.k;
    const auto n = logits.pixel_count();
    const double inv_n = 1.0 / static_cast<double>(n);
    TermGrad out{0.0, std::vector<double>(logits.logits.size())};
    std::vector<double> s(static_cast<std::size_t>(k));
    for (std::size_t p = 0; p < n; ++p) {
        const double* z = logits.pixel(p);
        const int y = target.labels[p];
        const double mx = *std::max_element(z, z + k);
        double sum = 0.0;
        for (int j = 0; j < k; ++j) {
            s[j] = std::exp(z[j] - mx);
            sum += s[j];
        }
        out.value += mx + std::log(sum) - z[y];
        for (int j = 0; j < k; ++j) {
            out.dlogits[p * k + j] = (s[j] / sum - (j == y ? 1.0 : 0.0)) * inv_n;
        }
    }
    out.value *= inv_n;
    return out;
}

TermGrad dice_with_grad(const LogitMap& logits, const MaskMap& target, double eps) {
    check_shapes(logits, target);
    const int k = logits.k;
    const auto n = logits.pixel_count();
    std::vector<double> probs(logits.logits.size());
    std::vector<double> fg(n);
    double inter = 0.0, pp = 0.0, gg = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
        softmax(logits.pixel(p), k, &probs[p * k]);
        fg[p] = foreground_of(&probs[p * k], k);
        const double g = target.labels[p] != 0 ? 1.0 : 0.0;
        inter += fg[p] * g;
        pp += fg[p] * fg[p];
        gg += g;
    }
    const double num = 2.0 * inter + eps;
    const double den = pp + gg + eps;
    TermGrad out{1.0 - num / den, std::vector<double>(logits.logits.size())};
    for (std::size_t p = 0; p < n; ++p) {
        const double g = target.labels[p] != 0 ? 1.0 : 0.0;
        // dL/dfg, then chain through softmax: dfg/dz_j = s_j * ([j >= 1] - fg).
        const double dfg = -(2.0 * g * den - num * 2.0 * fg[p]) / (den * den);
        for (int j = 0; j < k; ++j) {
            const double sj = probs[p * k + j];
            out.dlogits[p * k + j] = dfg * sj * ((j >= 1 ? 1.0 : 0.0) - fg[p]);
        }
    }
    return out;
}

namespace {

Combination combine_norm(const LossComponents& c, const LossSpec& spec) {
    Combination out;
    const int n = c.outlier_active ? 4 : 2;
    for (int i = 0; i < n; ++i) {
        const double coef = 1.0 / (std::abs(c.values[i]) + spec.norm_eps);
        out.coefficients[i] = coef;
        out.combined += c.values[i] / (std::abs(c.values[i]) + spec.norm_eps);
    }
    return out;
}

}  // namespace

Combination combine(const LossComponents& c, const LossSpec& spec) {
    for (double v : c.values) {
        if (!std::isfinite(v)) throw NumericalError("combine: non-finite loss component");
    }
    const auto& w = spec.weights;
    switch (spec.strategy) {
        case Strategy::balance: {
            Combination out;
            out.coefficients[kCe] = w.lambda * w.lambda1;
            out.coefficients[kDice] = w.lambda * w.lambda2;
            out.combined = w.lambda * (w.lambda1 * c.values[kCe] + w.lambda2 * c.values[kDice]);
            if (c.outlier_active) {
                out.coefficients[kCeOut] = w.beta * w.beta1;
                out.coefficients[kDiceOut] = w.beta * w.beta2;
                out.combined += w.beta * (w.beta1 * c.values[kCeOut] + w.beta2 * c.values[kDiceOut]);
            }
            return out;
        }
        case Strategy::norm:
            return combine_norm(c, spec);
        case Strategy::pareto: {
            const double primary = c.values[kCe];
            if (primary == 0.0) {
                auto out = combine_norm(c, spec);
                out.pareto_fallback = true;
                return out;
            }
            Combination out;
            out.coefficients[kCe] = 1.0;
            out.combined = primary;
            const int n = c.outlier_active ? 4 : 2;
            for (int i = 1; i < n; ++i) {
                // A zero secondary term contributes nothing and carries no gradient.
                if (c.values[i] == 0.0) continue;
                out.coefficients[i] = std::abs(primary) / std::abs(c.values[i]);
                out.combined += c.values[i] / std::abs(c.values[i] / primary);
            }
            return out;
        }
    }
    throw ConfigError("combine: unknown strategy");
}

double recombine(const LossReport& r) {
    const auto c = r.components();
    double s = 0.0;
    for (int i = 0; i < 4; ++i) s += r.coefficients[i] * c.values[i];
    return s;
}

LossReport make_report(const LossComponents& components, const LossSpec& spec) {
    const auto comb = combine(components, spec);
    LossReport r;
    r.ce = components.values[kCe];
    r.dice = components.values[kDice];
    r.ce_out = components.values[kCeOut];
    r.dice_out = components.values[kDiceOut];
    r.combined = comb.combined;
    r.strategy = spec.strategy;
    r.weights = spec.weights;
    r.outlier_active = components.outlier_active;
    r.pareto_fallback = comb.pareto_fallback;
    r.coefficients = comb.coefficients;
    return r;
}

}  // namespace morphoseg
