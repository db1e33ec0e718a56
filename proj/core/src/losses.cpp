#include "palmlayout/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace palm {

namespace {

inline double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void check_mask_dims(const SoftMask& pred, const BinaryMask& target) {
  if (pred.height() != target.height() || pred.width() != target.width())
    throw std::invalid_argument("mask loss: prediction and target dimensions differ");
}

}  // namespace

double cross_entropy(std::span<const double> probs, std::size_t true_class) {
  if (true_class >= probs.size()) throw std::invalid_argument("cross_entropy: class out of range");
  double sum = 0.0;
  for (double p : probs) sum += p;
  if (std::abs(sum - 1.0) > 1e-6) throw std::invalid_argument("cross_entropy: probabilities must sum to 1");
  return -std::log(std::max(probs[true_class], kProbClamp));
}

double softmax_cross_entropy(std::span<const double> logits, std::size_t true_class,
                             std::span<double> grad) {
  if (true_class >= logits.size())
    throw std::invalid_argument("softmax_cross_entropy: class out of range");
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  const double log_z = m + std::log(z);
  const double p_true = std::exp(logits[true_class] - log_z);
  const double loss = -std::log(std::max(p_true, kProbClamp));
  if (!grad.empty()) {
    for (std::size_t i = 0; i < logits.size(); ++i)
      grad[i] = std::exp(logits[i] - log_z) - (i == true_class ? 1.0 : 0.0);
    if (p_true < kProbClamp) std::fill(grad.begin(), grad.end(), 0.0);
  }
  return loss;
}

double smooth_l1(std::span<const double> pred, std::span<const double> target,
                 std::span<double> grad) {
  if (pred.size() != target.size()) throw std::invalid_argument("smooth_l1: length mismatch");
  if (pred.empty()) return 0.0;
  const double n = static_cast<double>(pred.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double x = pred[i] - target[i];
    const double ax = std::abs(x);
    sum += ax < 1.0 ? 0.5 * x * x : ax - 0.5;
    if (!grad.empty()) grad[i] = (ax < 1.0 ? x : (x > 0.0 ? 1.0 : -1.0)) / n;
  }
  return sum / n;
}

double mask_bce(const SoftMask& pred, const BinaryMask& target) {
  check_mask_dims(pred, target);
  const auto p = pred.values();
  const auto y = target.bits();
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = clamp_prob(p[i]);
    sum += y[i] ? -std::log(q) : -std::log(1.0 - q);
  }
  return sum / static_cast<double>(p.size());
}

double mask_focal(const SoftMask& pred, const BinaryMask& target, double gamma) {
  if (gamma < 0.0) throw std::invalid_argument("mask_focal: gamma must be >= 0");
  check_mask_dims(pred, target);
  const auto p = pred.values();
  const auto y = target.bits();
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = clamp_prob(p[i]);
    const double pt = y[i] ? q : 1.0 - q;
    sum += -std::pow(1.0 - pt, gamma) * std::log(pt);
  }
  return sum / static_cast<double>(p.size());
}

double mask_bce_logits(std::span<const double> logits, std::span<const double> target,
                       std::span<double> grad) {
  return mask_focal_logits(logits, target, 0.0, grad);
}

double mask_focal_logits(std::span<const double> logits, std::span<const double> target,
                         double gamma, std::span<double> grad) {
  if (logits.size() != target.size()) throw std::invalid_argument("mask loss: length mismatch");
  if (gamma < 0.0) throw std::invalid_argument("mask_focal: gamma must be >= 0");
  if (logits.empty()) return 0.0;
  const double n = static_cast<double>(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double raw = sigmoid(logits[i]);
    const double p = clamp_prob(raw);
    const bool positive = target[i] > 0.5;
    const double pt = positive ? p : 1.0 - p;
    const double one_minus = 1.0 - pt;
    const double modulator = gamma == 0.0 ? 1.0 : std::pow(one_minus, gamma);
    sum += -modulator * std::log(pt);
    if (!grad.empty()) {
      if (raw != p) {
        grad[i] = 0.0;  // clamped: flat in the logit
        continue;
      }
      // d/dz of -(1-pt)^g log pt with pt = sigmoid(s z), s = +-1.
      const double s = positive ? 1.0 : -1.0;
      const double focal_term =
          gamma == 0.0 ? 0.0 : gamma * pt * std::pow(one_minus, gamma) * std::log(pt);
      grad[i] = s * (focal_term - modulator * one_minus) / n;
    }
  }
  return sum / n;
}

double total_loss(const LossComponents& c, const LossWeights& w) {
  return w.rpn * c.rpn + w.region * c.region + w.box * c.box + w.mask * c.mask;
}

}  // namespace palm
