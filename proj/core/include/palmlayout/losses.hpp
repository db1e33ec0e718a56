#pragma once

#include <cstddef>
#include <span>

#include "palmlayout/geometry.hpp"

namespace palm {

inline constexpr double kProbClamp = 1e-12;

/// -log p(true), with p clamped to >= 1e-12. `probs` must sum to 1 within 1e-6.
double cross_entropy(std::span<const double> probs, std::size_t true_class);

/// Softmax cross entropy on raw logits. Writes dL/dlogits into `grad` (same
/// length) when non-empty.
double softmax_cross_entropy(std::span<const double> logits, std::size_t true_class,
                             std::span<double> grad = {});

/// Mean over coordinates of 0.5 x^2 (|x| < 1) or |x| - 0.5, x = pred - target.
/// Writes dL/dpred into `grad` when non-empty.
double smooth_l1(std::span<const double> pred, std::span<const double> target,
                 std::span<double> grad = {});

/// Mean per-pixel binary cross entropy; predictions clamped to [1e-12, 1 - 1e-12].
double mask_bce(const SoftMask& pred, const BinaryMask& target);

/// Mean per-pixel focal loss -(1 - p_t)^gamma log p_t. gamma = 0 equals mask_bce.
double mask_focal(const SoftMask& pred, const BinaryMask& target, double gamma);

/// Logit-space versions used in training. `target` holds 0/1 values; `grad`
/// receives dL/dlogit (mean reduction) when non-empty.
double mask_bce_logits(std::span<const double> logits, std::span<const double> target,
                       std::span<double> grad = {});
double mask_focal_logits(std::span<const double> logits, std::span<const double> target,
                         double gamma, std::span<double> grad = {});

struct LossWeights {
  double rpn = 1.0;
  double region = 1.0;
  double box = 1.0;
  double mask = 2.0;
};

struct LossComponents {
  double rpn = 0.0;
  double region = 0.0;
  double box = 0.0;
  double mask = 0.0;
};

double total_loss(const LossComponents& c, const LossWeights& w);

}  // namespace palm
