#include <cmath>
#include <vector>

#include "doctest.h"
#include "palmlayout/model.hpp"

using namespace palm;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg = desk_model_config();
  cfg.backbone.stem_channels = 4;
  cfg.backbone.mid_channels = {2, 3, 3, 4};
  cfg.backbone.out_channels = {4, 5, 6, 6};
  cfg.fpn_channels = 4;
  cfg.rpn_channels = 4;
  cfg.head_hidden = 8;
  cfg.mask_convs = 1;
  cfg.mask_channels = 4;
  cfg.image_size = 64;
  return cfg;
}

struct Probe {
  std::vector<float> c_logits, c_deltas;
  nn::Matrix c_class, c_box;
  std::vector<nn::Tensor> c_mask;
  std::vector<Box> rois;
};

double scalar_loss(const MaskRcnn& m, const nn::Tensor& x, const Probe& p) {
  FeatureState fs = m.forward_features(x);
  RpnState rs = m.forward_rpn(fs);
  double s = 0.0;
  std::size_t a = 0;
  for (int l = 0; l < kPyramidLevels; ++l) {
    const auto& lg = rs.logits[l];
    for (int y = 0; y < lg.height; ++y)
      for (int xx = 0; xx < lg.width; ++xx)
        for (int r = 0; r < kAnchorRatios; ++r, ++a) {
          for (int k = 0; k < 2; ++k) s += p.c_logits[2 * a + k] * lg.at(2 * r + k, y, xx);
          for (int k = 0; k < 4; ++k) s += p.c_deltas[4 * a + k] * rs.deltas[l].at(4 * r + k, y, xx);
        }
  }
  HeadState hs = m.forward_heads(fs.pyramid, p.rois);
  for (std::size_t i = 0; i < hs.class_logits.data.size(); ++i)
    s += p.c_class.data[i] * hs.class_logits.data[i];
  for (std::size_t i = 0; i < hs.box_deltas.data.size(); ++i)
    s += p.c_box.data[i] * hs.box_deltas.data[i];
  MaskState ms = m.forward_masks(fs.pyramid, p.rois);
  for (std::size_t r = 0; r < p.rois.size(); ++r)
    for (std::size_t i = 0; i < ms.per_roi[r].logits.data.size(); ++i)
      s += p.c_mask[r].data[i] * ms.per_roi[r].logits.data[i];
  return s;
}

}  // namespace

TEST_CASE("model backward matches central differences") {
  MaskRcnn model(tiny_config(), 7);
  Rng rng(11);
  // Zero biases park many units exactly on the ReLU kink; move them off it.
  for (auto* param : model.parameters().all())
    if (!param->weight_decay)
      for (auto& v : param->value) v = static_cast<float>(0.2 * rng.normal());
  nn::Tensor x(1, 64, 64);
  for (auto& v : x.data) v = static_cast<float>(rng.uniform());

  Probe p;
  const std::size_t na = model.anchors().size();
  // Sparse probes keep float rounding in the finite differences small.
  auto sparse = [&](double keep) {
    return rng.uniform() < keep ? static_cast<float>(rng.normal()) : 0.0f;
  };
  for (std::size_t i = 0; i < 2 * na; ++i) p.c_logits.push_back(sparse(0.02));
  for (std::size_t i = 0; i < 4 * na; ++i) p.c_deltas.push_back(sparse(0.02));
  p.rois = {{4, 6, 40, 20}, {10, 10, 60, 58}, {0, 30, 20, 34}};
  p.c_class = nn::Matrix(3, kNumModelClasses);
  p.c_box = nn::Matrix(3, 4 * kNumModelClasses);
  for (auto& v : p.c_class.data) v = static_cast<float>(rng.normal());
  for (auto& v : p.c_box.data) v = static_cast<float>(rng.normal());
  for (int r = 0; r < 3; ++r) {
    nn::Tensor t(static_cast<int>(kNumRegionClasses), kMaskSize, kMaskSize);
    for (auto& v : t.data) v = sparse(0.01);
    p.c_mask.push_back(t);
  }

  // Analytic gradients.
  GradPlan plan;
  model.parameters().zero_grad();
  FeatureState fs = model.forward_features(x);
  model.init_grad_pyramid(fs);
  RpnState rs = model.forward_rpn(fs);
  HeadState hs = model.forward_heads(fs.pyramid, p.rois);
  model.backward_heads(hs, fs, p.c_class, p.c_box, plan);
  MaskState ms = model.forward_masks(fs.pyramid, p.rois);
  model.backward_masks(ms, fs, p.c_mask, plan);
  model.backward_rpn(rs, fs, p.c_logits, p.c_deltas, plan);
  model.backward_features(fs, plan);

  int checked = 0, agreed = 0;
  for (auto* param : model.parameters().all()) {
    for (int trial = 0; trial < 3; ++trial) {
      const std::size_t k = rng.below(param->size());
      const float saved = param->value[k];
      const double h = 1e-3;
      param->value[k] = saved + static_cast<float>(h);
      const double up = scalar_loss(model, x, p);
      param->value[k] = saved - static_cast<float>(h);
      const double down = scalar_loss(model, x, p);
      param->value[k] = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = param->grad[k];
      ++checked;
      // Float forward passes and ReLU kinks limit how close a finite difference can get.
      if (std::abs(numeric - analytic) <= 2e-3 + 0.05 * std::max(std::abs(numeric), std::abs(analytic))) {
        ++agreed;
      } else {
        MESSAGE(param->name << "[" << k << "] numeric " << numeric << " analytic " << analytic);
      }
    }
  }
  CHECK(agreed >= checked * 95 / 100);
}
