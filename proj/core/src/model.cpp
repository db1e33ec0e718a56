#include "palmlayout/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "palmlayout/errors.hpp"

namespace palm {

using nlohmann::json;
using nn::ParamGroup;
using nn::Tensor;

namespace {

constexpr char kCheckpointMagic[8] = {'P', 'A', 'L', 'M', 'C', 'K', 'P', 'T'};

ParamGroup stage_group(int stage) {
  switch (stage) {
    case 0: return ParamGroup::kRes2;
    case 1: return ParamGroup::kRes3;
    case 2: return ParamGroup::kRes4;
    default: return ParamGroup::kRes5;
  }
}

void set_normal(nn::Parameter& p, Rng& rng, double std) {
  for (auto& w : p.value) w = static_cast<float>(rng.normal() * std);
}

class PyramidHandle final : public FeatureHandle {
 public:
  explicit PyramidHandle(FeaturePyramid p) : pyramid(std::move(p)) {}
  FeaturePyramid pyramid;
};

const FeaturePyramid& pyramid_of(const FeatureHandle& h) {
  auto* p = dynamic_cast<const PyramidHandle*>(&h);
  if (!p) throw std::invalid_argument("feature handle was not produced by MaskRcnn");
  return p->pyramid;
}

float sigmoidf(float z) {
  if (z >= 0.0f) return 1.0f / (1.0f + std::exp(-z));
  const float e = std::exp(z);
  return e / (1.0f + e);
}

}  // namespace

bool GradPlan::any_backbone_at_or_below(int stage) const {
  for (int s = 0; s <= std::min(stage, 4); ++s)
    if (trainable[static_cast<std::size_t>(s)]) return true;
  return false;
}

ModelConfig resnet50_model_config() { return ModelConfig{}; }

ModelConfig desk_model_config() {
  ModelConfig cfg;
  cfg.preset = "desk";
  cfg.backbone.in_channels = 1;
  cfg.backbone.stem_channels = 8;
  cfg.backbone.blocks = {1, 1, 1, 1};
  cfg.backbone.mid_channels = {8, 16, 24, 32};
  cfg.backbone.out_channels = {32, 64, 96, 128};
  cfg.fpn_channels = 16;
  cfg.rpn_channels = 16;
  cfg.head_hidden = 128;
  cfg.mask_convs = 2;
  cfg.mask_channels = 16;
  // half resolution, so anchors and the level-assignment size shrink with it
  cfg.image_size = 512;
  cfg.anchors.scales = {16, 32, 64, 128, 256};
  cfg.canonical_roi_size = 112.0;
  return cfg;
}

ModelConfig model_config_from_preset(const std::string& preset) {
  if (preset == "resnet50-fpn") return resnet50_model_config();
  if (preset == "desk") return desk_model_config();
  throw std::invalid_argument("unknown model preset \"" + preset + "\"");
}

std::string model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["preset"] = cfg.preset;
  j["backbone"] = {{"in_channels", cfg.backbone.in_channels},
                   {"stem_channels", cfg.backbone.stem_channels},
                   {"blocks", cfg.backbone.blocks},
                   {"mid_channels", cfg.backbone.mid_channels},
                   {"out_channels", cfg.backbone.out_channels}};
  j["fpn_channels"] = cfg.fpn_channels;
  j["rpn_channels"] = cfg.rpn_channels;
  j["head_hidden"] = cfg.head_hidden;
  j["mask_convs"] = cfg.mask_convs;
  j["mask_channels"] = cfg.mask_channels;
  j["image_size"] = cfg.image_size;
  j["box_pool"] = cfg.box_pool;
  j["mask_pool"] = cfg.mask_pool;
  j["canonical_roi_size"] = cfg.canonical_roi_size;
  j["residual_init_gain"] = cfg.residual_init_gain;
  j["anchors"] = {{"scales", cfg.anchors.scales},
                  {"ratios", cfg.anchors.ratios},
                  {"strides", cfg.anchors.strides}};
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("model config: ") + e.what());
  }
  try {
    ModelConfig cfg = j.contains("preset") ? model_config_from_preset(j.at("preset")) : ModelConfig{};
    if (j.contains("backbone")) {
      const auto& b = j.at("backbone");
      if (b.contains("in_channels")) cfg.backbone.in_channels = b.at("in_channels");
      if (b.contains("stem_channels")) cfg.backbone.stem_channels = b.at("stem_channels");
      if (b.contains("blocks")) cfg.backbone.blocks = b.at("blocks");
      if (b.contains("mid_channels")) cfg.backbone.mid_channels = b.at("mid_channels");
      if (b.contains("out_channels")) cfg.backbone.out_channels = b.at("out_channels");
    }
    auto opt = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    opt("fpn_channels", cfg.fpn_channels);
    opt("rpn_channels", cfg.rpn_channels);
    opt("head_hidden", cfg.head_hidden);
    opt("mask_convs", cfg.mask_convs);
    opt("mask_channels", cfg.mask_channels);
    opt("image_size", cfg.image_size);
    opt("box_pool", cfg.box_pool);
    opt("mask_pool", cfg.mask_pool);
    opt("canonical_roi_size", cfg.canonical_roi_size);
    opt("residual_init_gain", cfg.residual_init_gain);
    if (j.contains("anchors")) {
      const auto& a = j.at("anchors");
      if (a.contains("scales")) cfg.anchors.scales = a.at("scales");
      if (a.contains("ratios")) cfg.anchors.ratios = a.at("ratios");
      if (a.contains("strides")) cfg.anchors.strides = a.at("strides");
    }
    return cfg;
  } catch (const json::exception& e) {
    throw ParseError(std::string("model config: ") + e.what());
  }
}

std::vector<LevelDims> pyramid_dims_for(int image_size) {
  auto half = [](int d, int k, int pad) { return (d + 2 * pad - k) / 2 + 1; };
  int d = half(image_size, 7, 3);  // stem conv
  d = half(d, 3, 1);               // max pool -> P2
  std::vector<LevelDims> dims;
  for (int level = 0; level < kPyramidLevels; ++level) {
    dims.push_back({d, d});
    d = level < 3 ? half(d, 1, 0) : (d + 1) / 2;
  }
  return dims;
}

MaskRcnn::MaskRcnn(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) { build(seed); }

void MaskRcnn::build(std::uint64_t seed) {
  Rng rng(seed);
  const auto& bb = cfg_.backbone;
  stem_ = nn::make_conv(params_, "backbone.stem", bb.in_channels, bb.stem_channels, 7, 2,
                        ParamGroup::kStem, rng);
  int in = bb.stem_channels;
  for (int s = 0; s < 4; ++s) {
    const ParamGroup g = stage_group(s);
    for (int b = 0; b < bb.blocks[s]; ++b) {
      const std::string name = "backbone.res" + std::to_string(s + 2) + "." + std::to_string(b);
      const int stride = (b == 0 && s > 0) ? 2 : 1;
      Bottleneck block;
      block.conv1 = nn::make_conv(params_, name + ".conv1", in, bb.mid_channels[s], 1, stride, g, rng);
      block.conv2 = nn::make_conv(params_, name + ".conv2", bb.mid_channels[s], bb.mid_channels[s], 3,
                                  1, g, rng);
      block.conv3 = nn::make_conv(params_, name + ".conv3", bb.mid_channels[s], bb.out_channels[s], 1,
                                  1, g, rng, cfg_.residual_init_gain);
      if (b == 0)
        block.projection = nn::make_conv(params_, name + ".shortcut", in, bb.out_channels[s], 1,
                                         stride, g, rng, std::sqrt(0.5));
      stages_[s].push_back(block);
      in = bb.out_channels[s];
    }
  }
  const int f = cfg_.fpn_channels;
  for (int k = 0; k < 4; ++k) {
    lateral_[k] = nn::make_conv(params_, "fpn.lateral" + std::to_string(k + 2),
                                bb.out_channels[k], f, 1, 1, ParamGroup::kHeads, rng, std::sqrt(0.5));
    fpn_out_[k] = nn::make_conv(params_, "fpn.output" + std::to_string(k + 2), f, f, 3, 1,
                                ParamGroup::kHeads, rng, std::sqrt(0.5));
  }
  rpn_conv_ = nn::make_conv(params_, "rpn.conv", f, cfg_.rpn_channels, 3, 1, ParamGroup::kHeads, rng);
  rpn_logits_ = nn::make_conv(params_, "rpn.logits", cfg_.rpn_channels, 2 * kAnchorRatios, 1, 1,
                              ParamGroup::kHeads, rng);
  set_normal(*rpn_logits_.weight, rng, 0.01);
  rpn_deltas_ = nn::make_conv(params_, "rpn.deltas", cfg_.rpn_channels, 4 * kAnchorRatios, 1, 1,
                              ParamGroup::kHeads, rng);
  set_normal(*rpn_deltas_.weight, rng, 0.01);

  const int pooled = f * cfg_.box_pool * cfg_.box_pool;
  fc1_ = nn::make_linear(params_, "head.fc1", pooled, cfg_.head_hidden, ParamGroup::kHeads, rng,
                         std::sqrt(2.0 / pooled));
  fc2_ = nn::make_linear(params_, "head.fc2", cfg_.head_hidden, cfg_.head_hidden, ParamGroup::kHeads,
                         rng, std::sqrt(2.0 / cfg_.head_hidden));
  cls_ = nn::make_linear(params_, "head.class", cfg_.head_hidden, kNumModelClasses,
                         ParamGroup::kHeads, rng, 0.01);
  box_ = nn::make_linear(params_, "head.box", cfg_.head_hidden, 4 * kNumModelClasses,
                         ParamGroup::kHeads, rng, 0.001);

  int mc_in = f;
  for (int i = 0; i < cfg_.mask_convs; ++i) {
    mask_convs_.push_back(nn::make_conv(params_, "mask.conv" + std::to_string(i + 1), mc_in,
                                        cfg_.mask_channels, 3, 1, ParamGroup::kHeads, rng));
    mc_in = cfg_.mask_channels;
  }
  mask_deconv_ = nn::make_deconv2x2(params_, "mask.deconv", mc_in, cfg_.mask_channels,
                                    ParamGroup::kHeads, rng);
  mask_out_ = nn::make_conv(params_, "mask.logits", cfg_.mask_channels,
                            static_cast<int>(kNumRegionClasses), 1, 1, ParamGroup::kHeads, rng);
  set_normal(*mask_out_.weight, rng, 0.01);

  const auto dims = pyramid_dims();
  anchors_ = generate_anchors(dims, cfg_.anchors);
}

BlockState MaskRcnn::forward_block(const Bottleneck& b, const Tensor& x) const {
  BlockState st;
  st.a1 = nn::conv2d_forward(b.conv1, x);
  nn::relu_inplace(st.a1);
  st.a2 = nn::conv2d_forward(b.conv2, st.a1);
  nn::relu_inplace(st.a2);
  st.out = nn::conv2d_forward(b.conv3, st.a2);
  if (b.projection) nn::add_inplace(st.out, nn::conv2d_forward(*b.projection, x));
  else nn::add_inplace(st.out, x);
  nn::relu_inplace(st.out);
  return st;
}

void MaskRcnn::backward_block(const Bottleneck& b, const Tensor& x, const BlockState& st,
                              Tensor& dout, Tensor* dx, bool param_grads) const {
  if (!dx && !param_grads) return;
  nn::relu_backward(st.out, dout);
  Tensor da2(st.a2.channels, st.a2.height, st.a2.width);
  nn::conv2d_backward(b.conv3, st.a2, dout, &da2, param_grads);
  nn::relu_backward(st.a2, da2);
  Tensor da1(st.a1.channels, st.a1.height, st.a1.width);
  nn::conv2d_backward(b.conv2, st.a1, da2, &da1, param_grads);
  nn::relu_backward(st.a1, da1);
  nn::conv2d_backward(b.conv1, x, da1, dx, param_grads);
  if (b.projection) {
    nn::conv2d_backward(*b.projection, x, dout, dx, param_grads);
  } else if (dx) {
    nn::add_inplace(*dx, dout);
  }
}

const Tensor& MaskRcnn::block_input(const FeatureState& fs, int stage, int block) const {
  if (block > 0) return fs.stages[stage][block - 1].out;
  if (stage == 0) return fs.stem_out;
  return fs.stage_output(stage - 1);
}

FeatureState MaskRcnn::forward_features(const Tensor& input,
                                        std::span<const Tensor> cached_stage_outputs) const {
  if (input.channels != cfg_.backbone.in_channels || input.height != cfg_.image_size ||
      input.width != cfg_.image_size)
    throw std::invalid_argument("model input must be " + std::to_string(cfg_.backbone.in_channels) +
                                "x" + std::to_string(cfg_.image_size) + "x" +
                                std::to_string(cfg_.image_size));
  if (cached_stage_outputs.size() > 4) throw std::invalid_argument("too many cached stage outputs");
  FeatureState fs;
  fs.input = &input;
  if (cached_stage_outputs.empty()) {
    fs.stem_conv = nn::conv2d_forward(stem_, input);
    nn::relu_inplace(fs.stem_conv);
    fs.stem_out = nn::maxpool3x3s2(fs.stem_conv, &fs.pool_argmax);
  } else {
    fs.resumed_after = static_cast<int>(cached_stage_outputs.size()) - 1;
    for (std::size_t k = 0; k < cached_stage_outputs.size(); ++k) {
      BlockState st;
      st.out = cached_stage_outputs[k];
      fs.stages[k].push_back(std::move(st));
    }
  }
  for (int s = fs.resumed_after + 1; s < 4; ++s) {
    for (std::size_t b = 0; b < stages_[s].size(); ++b)
      fs.stages[s].push_back(forward_block(stages_[s][b], block_input(fs, s, static_cast<int>(b))));
  }
  // Top-down pathway.
  for (int k = 3; k >= 0; --k) {
    Tensor lateral = nn::conv2d_forward(lateral_[k], fs.stage_output(k));
    if (k < 3) {
      nn::add_inplace(lateral,
                      nn::upsample2x_nearest(fs.merged[k + 1], lateral.height, lateral.width));
    }
    fs.merged[k] = std::move(lateral);
  }
  for (int k = 0; k < 4; ++k) {
    fs.pyramid.levels[k] = nn::conv2d_forward(fpn_out_[k], fs.merged[k]);
    fs.pyramid.strides[k] = cfg_.anchors.strides[k];
  }
  fs.pyramid.levels[4] = nn::subsample2x(fs.pyramid.levels[3]);
  fs.pyramid.strides[4] = cfg_.anchors.strides[4];
  return fs;
}

void MaskRcnn::init_grad_pyramid(FeatureState& fs) const {
  for (int l = 0; l < kPyramidLevels; ++l) {
    const auto& p = fs.pyramid.levels[l];
    fs.grad_pyramid[l] = Tensor(p.channels, p.height, p.width);
  }
}

RpnState MaskRcnn::forward_rpn(const FeatureState& fs) const {
  RpnState rs;
  for (int l = 0; l < kPyramidLevels; ++l) {
    rs.hidden[l] = nn::conv2d_forward(rpn_conv_, fs.pyramid.levels[l]);
    nn::relu_inplace(rs.hidden[l]);
    rs.logits[l] = nn::conv2d_forward(rpn_logits_, rs.hidden[l]);
    rs.deltas[l] = nn::conv2d_forward(rpn_deltas_, rs.hidden[l]);
  }
  return rs;
}

RpnOutput MaskRcnn::rpn_output(const RpnState& rs) const {
  RpnOutput out;
  out.objectness.reserve(anchors_.size());
  out.deltas.reserve(anchors_.size());
  for (int l = 0; l < kPyramidLevels; ++l) {
    const auto& lg = rs.logits[l];
    const auto& dl = rs.deltas[l];
    for (int y = 0; y < lg.height; ++y) {
      for (int x = 0; x < lg.width; ++x) {
        for (int r = 0; r < kAnchorRatios; ++r) {
          const float bg = lg.at(2 * r, y, x);
          const float fg = lg.at(2 * r + 1, y, x);
          out.objectness.push_back(sigmoidf(fg - bg));
          BoxDelta d;
          d.dx = dl.at(4 * r + 0, y, x) * kBoxDeltaStd[0];
          d.dy = dl.at(4 * r + 1, y, x) * kBoxDeltaStd[1];
          d.dw = std::min(static_cast<double>(dl.at(4 * r + 2, y, x)) * kBoxDeltaStd[2], kMaxLogScale);
          d.dh = std::min(static_cast<double>(dl.at(4 * r + 3, y, x)) * kBoxDeltaStd[3], kMaxLogScale);
          out.deltas.push_back(d);
        }
      }
    }
  }
  return out;
}

void MaskRcnn::backward_rpn(const RpnState& rs, FeatureState& fs, std::span<const float> dlogits,
                            std::span<const float> ddeltas, const GradPlan& plan) {
  if (dlogits.size() != 2 * anchors_.size() || ddeltas.size() != 4 * anchors_.size())
    throw std::invalid_argument("backward_rpn: gradient size mismatch");
  const bool pg = plan.group(ParamGroup::kHeads);
  std::size_t a = 0;
  for (int l = 0; l < kPyramidLevels; ++l) {
    const auto& lg = rs.logits[l];
    Tensor g_logits(lg.channels, lg.height, lg.width);
    Tensor g_deltas(rs.deltas[l].channels, lg.height, lg.width);
    bool any = false;
    for (int y = 0; y < lg.height; ++y) {
      for (int x = 0; x < lg.width; ++x) {
        for (int r = 0; r < kAnchorRatios; ++r, ++a) {
          for (int k = 0; k < 2; ++k) {
            const float g = dlogits[2 * a + k];
            g_logits.at(2 * r + k, y, x) = g;
            any |= g != 0.0f;
          }
          for (int k = 0; k < 4; ++k) {
            const float g = ddeltas[4 * a + k];
            g_deltas.at(4 * r + k, y, x) = g;
            any |= g != 0.0f;
          }
        }
      }
    }
    if (!any) continue;
    Tensor dhidden(rs.hidden[l].channels, rs.hidden[l].height, rs.hidden[l].width);
    nn::conv2d_backward(rpn_logits_, rs.hidden[l], g_logits, &dhidden, pg);
    nn::conv2d_backward(rpn_deltas_, rs.hidden[l], g_deltas, &dhidden, pg);
    nn::relu_backward(rs.hidden[l], dhidden);
    nn::conv2d_backward(rpn_conv_, fs.pyramid.levels[l], dhidden, &fs.grad_pyramid[l], pg);
  }
}

HeadState MaskRcnn::forward_heads(const FeaturePyramid& pyramid, std::span<const Box> rois) const {
  HeadState hs;
  hs.rois.assign(rois.begin(), rois.end());
  const int r = static_cast<int>(rois.size());
  const int f = cfg_.fpn_channels;
  const int cells = cfg_.box_pool * cfg_.box_pool;
  hs.pooled = nn::Matrix(r, f * cells);
  hs.levels.resize(rois.size());
  for (int i = 0; i < r; ++i) {
    const int level = assign_pyramid_level(rois[i], cfg_.canonical_roi_size);
    hs.levels[i] = level;
    const Tensor patch =
        roi_align(pyramid.levels[level], pyramid.strides[level], rois[i], cfg_.box_pool);
    std::copy(patch.data.begin(), patch.data.end(), hs.pooled.row(i));
  }
  hs.hidden1 = nn::linear_forward(fc1_, hs.pooled);
  nn::relu_inplace(hs.hidden1);
  hs.hidden2 = nn::linear_forward(fc2_, hs.hidden1);
  nn::relu_inplace(hs.hidden2);
  hs.class_logits = nn::linear_forward(cls_, hs.hidden2);
  hs.box_deltas = nn::linear_forward(box_, hs.hidden2);
  return hs;
}

void MaskRcnn::backward_heads(const HeadState& hs, FeatureState& fs, const nn::Matrix& dclass,
                              const nn::Matrix& dbox, const GradPlan& plan) {
  if (hs.rois.empty()) return;
  const bool pg = plan.group(ParamGroup::kHeads);
  nn::Matrix dh2a, dh2b;
  nn::linear_backward(cls_, hs.hidden2, dclass, &dh2a, pg);
  nn::linear_backward(box_, hs.hidden2, dbox, &dh2b, pg);
  for (std::size_t i = 0; i < dh2a.data.size(); ++i) dh2a.data[i] += dh2b.data[i];
  nn::relu_backward(hs.hidden2, dh2a);
  nn::Matrix dh1;
  nn::linear_backward(fc2_, hs.hidden1, dh2a, &dh1, pg);
  nn::relu_backward(hs.hidden1, dh1);
  nn::Matrix dpooled;
  nn::linear_backward(fc1_, hs.pooled, dh1, &dpooled, pg);
  const int f = cfg_.fpn_channels;
  for (std::size_t i = 0; i < hs.rois.size(); ++i) {
    Tensor patch(f, cfg_.box_pool, cfg_.box_pool);
    std::copy(dpooled.row(static_cast<int>(i)), dpooled.row(static_cast<int>(i)) + patch.size(),
              patch.data.begin());
    const int level = hs.levels[i];
    roi_align_backward(patch, fs.pyramid.strides[level], hs.rois[i], fs.grad_pyramid[level]);
  }
}

Tensor MaskRcnn::mask_forward_one(const Tensor& pooled, MaskRoiState* st) const {
  Tensor x = pooled;
  for (std::size_t i = 0; i < mask_convs_.size(); ++i) {
    Tensor y = nn::conv2d_forward(mask_convs_[i], x);
    nn::relu_inplace(y);
    if (st) st->conv_out.push_back(y);
    x = std::move(y);
  }
  Tensor up = nn::deconv2x2_forward(mask_deconv_, x);
  nn::relu_inplace(up);
  Tensor logits = nn::conv2d_forward(mask_out_, up);
  if (st) {
    st->pooled = pooled;
    st->deconv_out = std::move(up);
  }
  return logits;
}

MaskState MaskRcnn::forward_masks(const FeaturePyramid& pyramid, std::span<const Box> rois) const {
  MaskState ms;
  ms.rois.assign(rois.begin(), rois.end());
  for (const auto& roi : rois) {
    const int level = assign_pyramid_level(roi, cfg_.canonical_roi_size);
    ms.levels.push_back(level);
    MaskRoiState st;
    Tensor pooled = roi_align(pyramid.levels[level], pyramid.strides[level], roi, cfg_.mask_pool);
    st.logits = mask_forward_one(pooled, &st);
    ms.per_roi.push_back(std::move(st));
  }
  return ms;
}

void MaskRcnn::backward_masks(const MaskState& ms, FeatureState& fs,
                              std::span<const Tensor> dlogits, const GradPlan& plan) {
  if (dlogits.size() != ms.per_roi.size())
    throw std::invalid_argument("backward_masks: gradient count mismatch");
  const bool pg = plan.group(ParamGroup::kHeads);
  for (std::size_t i = 0; i < ms.per_roi.size(); ++i) {
    const auto& st = ms.per_roi[i];
    Tensor dup(st.deconv_out.channels, st.deconv_out.height, st.deconv_out.width);
    nn::conv2d_backward(mask_out_, st.deconv_out, dlogits[i], &dup, pg);
    nn::relu_backward(st.deconv_out, dup);
    const Tensor& deconv_in = st.conv_out.empty() ? st.pooled : st.conv_out.back();
    Tensor dx(deconv_in.channels, deconv_in.height, deconv_in.width);
    nn::deconv2x2_backward(mask_deconv_, deconv_in, dup, &dx, pg);
    for (int c = static_cast<int>(mask_convs_.size()) - 1; c >= 0; --c) {
      nn::relu_backward(st.conv_out[c], dx);
      const Tensor& in = c == 0 ? st.pooled : st.conv_out[c - 1];
      Tensor dprev(in.channels, in.height, in.width);
      nn::conv2d_backward(mask_convs_[c], in, dx, &dprev, pg);
      dx = std::move(dprev);
    }
    const int level = ms.levels[i];
    roi_align_backward(dx, fs.pyramid.strides[level], ms.rois[i], fs.grad_pyramid[level]);
  }
}

void MaskRcnn::backward_features(FeatureState& fs, const GradPlan& plan) {
  const bool heads = plan.group(ParamGroup::kHeads);
  nn::subsample2x_backward(fs.grad_pyramid[4], fs.grad_pyramid[3]);
  std::array<Tensor, 4> dmerged;
  for (int k = 0; k < 4; ++k) {
    const auto& m = fs.merged[k];
    dmerged[k] = Tensor(m.channels, m.height, m.width);
    nn::conv2d_backward(fpn_out_[k], m, fs.grad_pyramid[k], &dmerged[k], heads);
  }
  for (int k = 0; k < 3; ++k) nn::upsample2x_nearest_backward(dmerged[k], dmerged[k + 1]);

  // dC_k for backbone stages (stage index k + 1 in GradPlan terms).
  std::array<Tensor, 4> dstage;
  for (int k = 0; k < 4; ++k) {
    const Tensor& c = fs.stage_output(k);
    const bool need_dx = plan.any_backbone_at_or_below(k + 1);
    if (need_dx) dstage[k] = Tensor(c.channels, c.height, c.width);
    nn::conv2d_backward(lateral_[k], c, dmerged[k], need_dx ? &dstage[k] : nullptr, heads);
  }

  for (int s = 3; s >= 0; --s) {
    if (!plan.any_backbone_at_or_below(s + 1)) break;
    if (s <= fs.resumed_after)
      throw std::logic_error("backward through a cached (frozen) backbone stage");
    const bool pg = plan.group(stage_group(s));
    Tensor dout = std::move(dstage[s]);
    for (int b = static_cast<int>(stages_[s].size()) - 1; b >= 0; --b) {
      const Tensor& x = block_input(fs, s, b);
      const bool need_dx = b > 0 ? plan.any_backbone_at_or_below(s + 1)
                                 : plan.any_backbone_at_or_below(s);
      Tensor dx;
      if (need_dx) dx = Tensor(x.channels, x.height, x.width);
      backward_block(stages_[s][b], x, fs.stages[s][b], dout, need_dx ? &dx : nullptr, pg);
      if (!need_dx) break;
      if (b > 0) {
        dout = std::move(dx);
      } else if (s > 0) {
        nn::add_inplace(dstage[s - 1], dx);
      } else {
        // Into the stem.
        Tensor dconv(fs.stem_conv.channels, fs.stem_conv.height, fs.stem_conv.width);
        nn::maxpool_backward(dx, fs.pool_argmax, dconv);
        nn::relu_backward(fs.stem_conv, dconv);
        nn::conv2d_backward(stem_, *fs.input, dconv, nullptr, plan.group(ParamGroup::kStem));
      }
    }
  }
}

RpnStage MaskRcnn::propose(const Tensor& input) const {
  FeatureState fs = forward_features(input);
  RpnState rs = forward_rpn(fs);
  RpnStage out;
  out.rpn = rpn_output(rs);
  out.features = std::make_shared<PyramidHandle>(std::move(fs.pyramid));
  return out;
}

ClassifiedRois MaskRcnn::classify(const FeatureHandle& features, std::span<const Box> rois) const {
  const auto& pyramid = pyramid_of(features);
  HeadState hs = forward_heads(pyramid, rois);
  ClassifiedRois out;
  out.probs = nn::Matrix(static_cast<int>(rois.size()), kNumModelClasses);
  out.deltas.resize(rois.size());
  for (int i = 0; i < static_cast<int>(rois.size()); ++i) {
    const float* lg = hs.class_logits.row(i);
    const float m = *std::max_element(lg, lg + kNumModelClasses);
    double z = 0.0;
    for (int c = 0; c < kNumModelClasses; ++c) z += std::exp(static_cast<double>(lg[c] - m));
    for (int c = 0; c < kNumModelClasses; ++c)
      out.probs.at(i, c) = static_cast<float>(std::exp(static_cast<double>(lg[c] - m)) / z);
    const float* bd = hs.box_deltas.row(i);
    for (int c = 0; c < kNumModelClasses; ++c) {
      BoxDelta d;
      d.dx = bd[4 * c + 0] * kBoxDeltaStd[0];
      d.dy = bd[4 * c + 1] * kBoxDeltaStd[1];
      d.dw = std::min(bd[4 * c + 2] * kBoxDeltaStd[2], kMaxLogScale);
      d.dh = std::min(bd[4 * c + 3] * kBoxDeltaStd[3], kMaxLogScale);
      out.deltas[i][c] = d;
    }
  }
  return out;
}

std::vector<SoftMask> MaskRcnn::segment(const FeatureHandle& features, std::span<const Box> rois,
                                        std::span<const RegionClass> classes) const {
  if (rois.size() != classes.size()) throw std::invalid_argument("segment: rois/classes mismatch");
  const auto& pyramid = pyramid_of(features);
  std::vector<SoftMask> out;
  out.reserve(rois.size());
  for (std::size_t i = 0; i < rois.size(); ++i) {
    const int level = assign_pyramid_level(rois[i], cfg_.canonical_roi_size);
    Tensor pooled =
        roi_align(pyramid.levels[level], pyramid.strides[level], rois[i], cfg_.mask_pool);
    Tensor logits = mask_forward_one(pooled, nullptr);
    const float* ch = logits.channel(static_cast<int>(index_of(classes[i])));
    std::vector<float> probs(logits.plane());
    for (std::size_t p = 0; p < probs.size(); ++p) probs[p] = sigmoidf(ch[p]);
    out.emplace_back(logits.height, logits.width, std::move(probs));
  }
  return out;
}

namespace {

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("truncated checkpoint while reading " + what);
  return v;
}

std::string get_string(std::istream& in, const std::string& what) {
  const auto n = get<std::uint32_t>(in, what);
  if (n > (1u << 24)) throw IoError("corrupt checkpoint: oversized " + what);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw IoError("truncated checkpoint while reading " + what);
  return s;
}

struct StoredParam {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
};

struct StoredCheckpoint {
  ModelConfig config;
  std::vector<StoredParam> params;
};

StoredCheckpoint read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw IoError("not a checkpoint file: " + path.string());
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint format version " + std::to_string(version));
  StoredCheckpoint ck;
  ck.config = model_config_from_json(get_string(in, "model config"));
  const auto count = get<std::uint32_t>(in, "parameter count");
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredParam p;
    p.name = get_string(in, "parameter name");
    const auto ndims = get<std::uint32_t>(in, p.name + " rank");
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < ndims; ++d) {
      p.shape.push_back(get<std::int32_t>(in, p.name + " shape"));
      n *= static_cast<std::size_t>(p.shape.back());
    }
    p.values.resize(n);
    in.read(reinterpret_cast<char*>(p.values.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw IoError("truncated checkpoint while reading " + p.name);
    ck.params.push_back(std::move(p));
  }
  return ck;
}

std::string shape_string(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

}  // namespace

void save_checkpoint(const MaskRcnn& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, 8);
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = model_config_to_json(model.config());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  const auto params = model.parameters().all();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->shape.size()));
    for (int d : p->shape) put<std::int32_t>(out, d);
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(float)));
  }
  out.flush();
  if (!out) throw IoError("write failed for checkpoint " + path.string());
}

std::unique_ptr<MaskRcnn> load_checkpoint(const std::filesystem::path& path) {
  StoredCheckpoint ck = read_checkpoint_file(path);
  auto model = std::make_unique<MaskRcnn>(ck.config, 0);
  std::size_t loaded = 0;
  for (auto& sp : ck.params) {
    nn::Parameter* p = model->parameters().find(sp.name);
    if (!p) throw ValidationError("checkpoint layer \"" + sp.name + "\" does not exist in the model");
    if (p->shape != sp.shape)
      throw ValidationError("checkpoint layer \"" + sp.name + "\" has shape " +
                            shape_string(sp.shape) + ", model expects " + shape_string(p->shape));
    p->value.assign(sp.values.begin(), sp.values.end());
    ++loaded;
  }
  if (loaded != model->parameters().count()) {
    for (const auto* p : model->parameters().all()) {
      bool found = false;
      for (const auto& sp : ck.params) found |= sp.name == p->name;
      if (!found) throw ValidationError("checkpoint is missing layer \"" + p->name + "\"");
    }
  }
  return model;
}

std::size_t load_pretrained(MaskRcnn& model, const std::filesystem::path& path,
                            std::vector<std::string>* skipped) {
  StoredCheckpoint ck = read_checkpoint_file(path);
  std::size_t copied = 0;
  for (auto& sp : ck.params) {
    nn::Parameter* p = model.parameters().find(sp.name);
    if (!p || p->shape != sp.shape) {
      if (skipped) skipped->push_back(sp.name);
      continue;
    }
    p->value.assign(sp.values.begin(), sp.values.end());
    ++copied;
  }
  return copied;
}

}  // namespace palm
