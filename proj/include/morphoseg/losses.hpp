#pragma once

#include "morphoseg/imaging.hpp"
#include "morphoseg/logit_map.hpp"

#include <array>
#include <span>
#include <string>
#include <vector>

namespace morphoseg {

enum class Strategy { balance, norm, pareto };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& name);

struct LossWeights {
    double lambda = 1.0;   // segmentation term
    double beta = 1.0;     // uncertainty term
    double lambda1 = 0.5;  // CE within the segmentation term
    double lambda2 = 0.5;  // Dice within the segmentation term
    double beta1 = 0.5;    // CE within the uncertainty term
    double beta2 = 0.5;    // Dice within the uncertainty term
};

struct LossSpec {
    Strategy strategy = Strategy::balance;
    LossWeights weights;
    double dice_eps = 1e-5;
    double norm_eps = 1e-8;
};

/// Indices into LossComponents::values / LossReport::coefficients.
enum Component : int { kCe = 0, kDice = 1, kCeOut = 2, kDiceOut = 3 };

struct LossComponents {
    std::array<double, 4> values{};  // ce, dice, ce_out, dice_out
    bool outlier_active = false;     // ce_out / dice_out take part
};

struct Combination {
    double combined = 0.0;
    /// d(combined)/d(component) with every normalizer held constant.
    std::array<double, 4> coefficients{};
    bool pareto_fallback = false;
};

struct LossReport {
    double ce = 0.0;
    double dice = 0.0;
    double ce_out = 0.0;
    double dice_out = 0.0;
    double combined = 0.0;
    Strategy strategy = Strategy::balance;
    LossWeights weights;
    bool outlier_active = false;
    bool pareto_fallback = false;
    std::array<double, 4> coefficients{};

    LossComponents components() const { return {{ce, dice, ce_out, dice_out}, outlier_active}; }
};

/// Numerically stable softmax of one pixel's logits.
void softmax(const double* logits, int k, double* out);

/// Foreground probability (classes 1..k-1) for every pixel.
std::vector<double> foreground_probs(const LogitMap& logits);

/// 1 - (2 sum p g + eps) / (sum p^2 + sum g^2 + eps), g = [label != 0].
double dice_loss(std::span<const double> fg_probs, const MaskMap& target, double eps = 1e-5);

/// Mean over pixels of -log softmax(logits)[label].
double ce_loss(const LogitMap& logits, const MaskMap& target);

double seg_loss(const LogitMap& logits, const MaskMap& target, double lambda1 = 0.5, double lambda2 = 0.5,
                double dice_eps = 1e-5);

/// Same functional forms as the segmentation loss, evaluated on a synthetic
/// (outlier-substituted) logit map.
double uncertainty_loss(const LogitMap& synthetic_logits, const MaskMap& target, double beta1 = 0.5,
                        double beta2 = 0.5, double dice_eps = 1e-5);

struct TermGrad {
    double value = 0.0;
    std::vector<double> dlogits;  // same layout as LogitMap::logits
};

TermGrad ce_with_grad(const LogitMap& logits, const MaskMap& target);
TermGrad dice_with_grad(const LogitMap& logits, const MaskMap& target, double eps = 1e-5);

/// Applies a weighting strategy:
///   balance: lambda*(l1*CE + l2*Dice) + beta*(b1*CE_out + b2*Dice_out)
///   norm:    sum_i L_i / (|L_i| + eps)               (|.| detached)
///   pareto:  CE + sum_{i != CE} L_i / |L_i / CE|     (|.| detached)
/// Inactive outlier components are left out. Pareto with CE == 0 falls back
/// to norm and sets pareto_fallback.
Combination combine(const LossComponents& components, const LossSpec& spec);

/// sum_i coefficient_i * L_i; equals the combined value up to rounding.
double recombine(const LossReport& report);

LossReport make_report(const LossComponents& components, const LossSpec& spec);

}  // namespace morphoseg
