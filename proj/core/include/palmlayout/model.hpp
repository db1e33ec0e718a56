#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "palmlayout/anchors.hpp"
#include "palmlayout/corpus.hpp"
#include "palmlayout/geometry.hpp"
#include "palmlayout/nn.hpp"
#include "palmlayout/roi.hpp"

namespace palm {

// Classifier outputs: index 0 is background, index k + 1 is RegionClass k.
inline constexpr int kNumModelClasses = static_cast<int>(kNumRegionClasses) + 1;
inline constexpr int kMaskSize = 28;

struct BackboneConfig {
  int in_channels = 3;
  int stem_channels = 64;
  // res2..res5 bottleneck stages.
  std::array<int, 4> blocks = {3, 4, 6, 3};
  std::array<int, 4> mid_channels = {64, 128, 256, 512};
  std::array<int, 4> out_channels = {256, 512, 1024, 2048};
  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

struct ModelConfig {
  std::string preset = "resnet50-fpn";
  BackboneConfig backbone;
  int fpn_channels = 256;
  int rpn_channels = 256;
  int head_hidden = 1024;
  int mask_convs = 4;
  int mask_channels = 256;
  int image_size = 1024;
  int box_pool = 7;
  int mask_pool = 14;
  double canonical_roi_size = 224.0;
  // Scale of the last conv in each residual branch at init (no normalisation layers).
  double residual_init_gain = 0.25;
  AnchorSpec anchors;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// ResNet-50 (res2..res5) + FPN with 256 channels, 1024x1024 RGB input.
ModelConfig resnet50_model_config();
/// Narrow single-block-per-stage variant for CPU-scale experiments on gray images,
/// 512x512 input.
ModelConfig desk_model_config();
// "resnet50-fpn" or "desk".
ModelConfig model_config_from_preset(const std::string& preset);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

std::vector<LevelDims> pyramid_dims_for(int image_size);

/// RoI classification output for a batch of RoIs.
struct ClassifiedRois {
  nn::Matrix probs;                                            // R x kNumModelClasses
  std::vector<std::array<BoxDelta, kNumModelClasses>> deltas;  // denormalised
};

/// Opaque per-image features produced by an InstanceSegmenter.
class FeatureHandle {
 public:
  virtual ~FeatureHandle() = default;
};

struct RpnStage {
  std::shared_ptr<const FeatureHandle> features;
  RpnOutput rpn;
};

/// Model contract consumed by the inference pipeline. Implemented by MaskRcnn
/// and by instrumented stubs in tests.
class InstanceSegmenter {
 public:
  virtual ~InstanceSegmenter() = default;
  virtual int input_size() const = 0;
  virtual int input_channels() const = 0;
  virtual std::span<const Box> anchors() const = 0;
  virtual RpnStage propose(const nn::Tensor& input) const = 0;
  virtual ClassifiedRois classify(const FeatureHandle& features, std::span<const Box> rois) const = 0;
  // 28x28 probabilities for each roi, from the channel of the given class.
  virtual std::vector<SoftMask> segment(const FeatureHandle& features, std::span<const Box> rois,
                                        std::span<const RegionClass> classes) const = 0;
};

// Which parameter groups receive gradients in the current training stage.
struct GradPlan {
  std::array<bool, 6> trainable = {true, true, true, true, true, true};  // indexed by ParamGroup
  bool group(nn::ParamGroup g) const { return trainable[static_cast<std::size_t>(g)]; }
  // True if any backbone stage at or below `stage` (0 = stem, 1 = res2, ...) trains.
  bool any_backbone_at_or_below(int stage) const;
};

struct BlockState {
  nn::Tensor a1;
  nn::Tensor a2;
  nn::Tensor out;
};

/// Activations kept for the backward pass.
struct FeatureState {
  const nn::Tensor* input = nullptr;
  nn::Tensor stem_conv;
  std::vector<int> pool_argmax;
  nn::Tensor stem_out;
  std::array<std::vector<BlockState>, 4> stages;
  // Stages with index <= resumed_after were restored from a cache and carry
  // only their output; -1 when computed from the input.
  int resumed_after = -1;
  std::array<nn::Tensor, 4> merged;  // FPN top-down sums M2..M5
  FeaturePyramid pyramid;
  std::array<nn::Tensor, kPyramidLevels> grad_pyramid;

  const nn::Tensor& stage_output(int k) const { return stages[k].back().out; }
};

struct RpnState {
  std::array<nn::Tensor, kPyramidLevels> hidden;
  std::array<nn::Tensor, kPyramidLevels> logits;  // 2 per anchor (background, object)
  std::array<nn::Tensor, kPyramidLevels> deltas;  // 4 per anchor, normalised
};

struct HeadState {
  std::vector<Box> rois;
  std::vector<int> levels;
  nn::Matrix pooled;
  nn::Matrix hidden1;
  nn::Matrix hidden2;
  nn::Matrix class_logits;  // R x kNumModelClasses
  nn::Matrix box_deltas;    // R x (4 * kNumModelClasses), normalised
};

struct MaskRoiState {
  nn::Tensor pooled;
  std::vector<nn::Tensor> conv_out;
  nn::Tensor deconv_out;
  nn::Tensor logits;  // kNumRegionClasses x 28 x 28
};

struct MaskState {
  std::vector<Box> rois;
  std::vector<int> levels;
  std::vector<MaskRoiState> per_roi;
};

class MaskRcnn final : public InstanceSegmenter {
 public:
  MaskRcnn(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  nn::ParameterStore& parameters() { return params_; }
  const nn::ParameterStore& parameters() const { return params_; }
  std::vector<LevelDims> pyramid_dims() const { return pyramid_dims_for(cfg_.image_size); }

  // InstanceSegmenter
  int input_size() const override { return cfg_.image_size; }
  int input_channels() const override { return cfg_.backbone.in_channels; }
  std::span<const Box> anchors() const override { return anchors_; }
  RpnStage propose(const nn::Tensor& input) const override;
  ClassifiedRois classify(const FeatureHandle& features, std::span<const Box> rois) const override;
  std::vector<SoftMask> segment(const FeatureHandle& features, std::span<const Box> rois,
                                std::span<const RegionClass> classes) const override;

  // Training-time pieces. `cached_stage_outputs` holds res2..res(k+1) outputs
  // when resuming after backbone stage k (see FeatureState::resumed_after).
  FeatureState forward_features(const nn::Tensor& input,
                                std::span<const nn::Tensor> cached_stage_outputs = {}) const;
  RpnState forward_rpn(const FeatureState& fs) const;
  RpnOutput rpn_output(const RpnState& rs) const;
  HeadState forward_heads(const FeaturePyramid& pyramid, std::span<const Box> rois) const;
  MaskState forward_masks(const FeaturePyramid& pyramid, std::span<const Box> rois) const;

  // Gradients are in anchor order: 2 logits and 4 normalised deltas per anchor.
  void backward_rpn(const RpnState& rs, FeatureState& fs, std::span<const float> dlogits,
                    std::span<const float> ddeltas, const GradPlan& plan);
  void backward_heads(const HeadState& hs, FeatureState& fs, const nn::Matrix& dclass,
                      const nn::Matrix& dbox, const GradPlan& plan);
  void backward_masks(const MaskState& ms, FeatureState& fs, std::span<const nn::Tensor> dlogits,
                      const GradPlan& plan);
  void backward_features(FeatureState& fs, const GradPlan& plan);

  void init_grad_pyramid(FeatureState& fs) const;

 private:
  struct Bottleneck {
    nn::Conv2d conv1, conv2, conv3;
    std::optional<nn::Conv2d> projection;
  };

  void build(std::uint64_t seed);
  BlockState forward_block(const Bottleneck& b, const nn::Tensor& x) const;
  void backward_block(const Bottleneck& b, const nn::Tensor& x, const BlockState& st,
                      nn::Tensor& dout, nn::Tensor* dx, bool param_grads) const;
  const nn::Tensor& block_input(const FeatureState& fs, int stage, int block) const;
  nn::Tensor mask_forward_one(const nn::Tensor& pooled, MaskRoiState* st) const;

  ModelConfig cfg_;
  nn::ParameterStore params_;
  nn::Conv2d stem_;
  std::array<std::vector<Bottleneck>, 4> stages_;
  std::array<nn::Conv2d, 4> lateral_;
  std::array<nn::Conv2d, 4> fpn_out_;
  nn::Conv2d rpn_conv_, rpn_logits_, rpn_deltas_;
  nn::Linear fc1_, fc2_, cls_, box_;
  std::vector<nn::Conv2d> mask_convs_;
  nn::Deconv2x2 mask_deconv_;
  nn::Conv2d mask_out_;
  std::vector<Box> anchors_;
};

// Binary checkpoint: magic, format version, model config (incl. AnchorSpec), then
// every parameter by name and shape.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const MaskRcnn& model, const std::filesystem::path& path);
// Throws IoError if unreadable, ValidationError naming the layer on shape mismatch.
std::unique_ptr<MaskRcnn> load_checkpoint(const std::filesystem::path& path);
// Copies parameters whose name and shape match; returns the count, lists skipped names.
std::size_t load_pretrained(MaskRcnn& model, const std::filesystem::path& path,
                            std::vector<std::string>* skipped = nullptr);

}  // namespace palm
