#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "palmlayout/corpus.hpp"
#include "palmlayout/geometry.hpp"
#include "palmlayout/image.hpp"
#include "palmlayout/losses.hpp"
#include "palmlayout/model.hpp"

namespace palm {

/// Network input built from a document image: content scaled so the width
/// (and, if needed, the height) fits, placed at the top-left, zero padding
/// to the bottom and right.
struct PreprocessResult {
  nn::Tensor input;  // channels x size x size, values in [0, 1]
  double scale = 1.0;
  int content_width = 0;
  int content_height = 0;
  int original_width = 0;
  int original_height = 0;

  // Region of the input that holds image content.
  Box content_box() const { return {0.0, 0.0, double(content_width), double(content_height)}; }
  // Original-image coordinates -> input coordinates and back.
  Box to_input(const Box& b) const {
    return {b.x1 * scale, b.y1 * scale, b.x2 * scale, b.y2 * scale};
  }
  Box to_original(const Box& b) const {
    return {b.x1 / scale, b.y1 / scale, b.x2 / scale, b.y2 / scale};
  }
};

// Throws std::invalid_argument for an empty image or a bad channel count.
PreprocessResult preprocess_image(const Image& image, int size = 1024, int channels = 3);

/// Rasterized region cropped to its bounding pixels.
struct RegionRaster {
  int x0 = 0;
  int y0 = 0;
  BinaryMask mask;

  bool at(int row, int col) const {
    const int r = row - y0;
    const int c = col - x0;
    return r >= 0 && c >= 0 && r < mask.height() && c < mask.width() && mask.at(r, c);
  }
};

RegionRaster rasterize_region(const Polygon& poly, int height, int width);

// Crop of the 0/1 field to `roi`, bilinear-resized to size x size and binarized at 0.5.
BinaryMask mask_target(const RegionRaster& raster, const Box& roi, int size = kMaskSize);

// Full-resolution rasterization of `region` followed by mask_target.
BinaryMask prepare_mask_target(const RegionInstance& region, const Box& roi, int doc_height,
                               int doc_width);

enum class AnchorLabel : std::int8_t { kIgnore = -1, kNegative = 0, kPositive = 1 };

struct AnchorThresholds {
  double positive_iou = 0.7;
  double negative_iou = 0.3;
};

struct AnchorTargets {
  std::vector<AnchorLabel> labels;
  // Highest-IoU gt (lower index on ties); -1 when there are no gts or no overlap.
  std::vector<int> matched_gt;
};

AnchorTargets assign_anchor_targets(std::span<const Box> anchors, std::span<const Box> gts,
                                    const AnchorThresholds& thresholds = {});

enum class TrainableScope { kHeadsOnly, kStage4AndUp, kAll };
enum class MaskLossKind { kBce, kFocal };

std::string_view to_string(TrainableScope s);
std::string_view to_string(MaskLossKind k);

GradPlan grad_plan_for(TrainableScope scope);

struct StageConfig {
  int stage = 1;
  int epochs = 1;
  double learning_rate = 1e-3;
  TrainableScope scope = TrainableScope::kHeadsOnly;
  MaskLossKind mask_loss = MaskLossKind::kBce;
};

// (30, 1e-3, heads) -> (20, 1e-3, res4+) -> (15, 1e-4, all); focal mask loss after stage 1.
std::vector<StageConfig> default_stages();

struct OptimizerConfig {
  double momentum = 0.9;
  double weight_decay = 1e-3;
  int batch_size = 1;
  double clip_norm = 0.5;
  // global by default; per-tensor scales each parameter tensor on its own
  bool clip_per_tensor = false;
  double focal_gamma = 2.0;
};

struct SamplingConfig {
  AnchorThresholds anchor_thresholds;
  int rpn_batch = 256;
  double rpn_positive_fraction = 0.5;
  double proposal_objectness_floor = 0.0;
  double proposal_nms = 0.7;
  int pre_nms_limit = 6000;
  int train_proposals = 512;
  bool add_gt_rois = true;
  int roi_batch = 200;
  double roi_positive_fraction = 0.33;
  double roi_positive_iou = 0.5;
};

struct TrainingConfig {
  ModelConfig model = resnet50_model_config();
  std::vector<StageConfig> stages = default_stages();
  OptimizerConfig optimizer;
  SamplingConfig sampling;
  LossWeights loss_weights;
  std::uint64_t seed = 0;
  // Optimizer steps per epoch; 0 means one pass over the training split.
  int steps_per_epoch = 0;
  std::optional<std::filesystem::path> pretrained_weights;
  // Memory allowed for caching frozen backbone activations per document.
  std::size_t feature_cache_bytes = std::size_t{2} << 30;
};

// JSON config file. Every field is optional; "model" may be a preset name or an object.
TrainingConfig parse_training_config(std::string_view text);
TrainingConfig load_training_config(const std::filesystem::path& path);
std::string training_config_to_json(const TrainingConfig& cfg);

struct EpochLog {
  int stage = 0;
  int epoch = 0;        // 1-based within the stage
  int global_epoch = 0; // 1-based across stages
  int steps = 0;
  LossComponents mean;
  double total = 0.0;
  double max_clipped_norm = 0.0;  // largest post-clip gradient norm seen
  double seconds = 0.0;
};

// One JSON object per line.
std::string epoch_log_line(const EpochLog& e);

struct StepRecord {
  int stage = 0;
  int step = 0;
  std::string doc_id;
  LossComponents losses;
  double total = 0.0;
  double grad_norm = 0.0;     // before clipping
  double clipped_norm = 0.0;  // after clipping
};

struct TrainingObserver {
  std::function<void(const EpochLog&)> on_epoch;
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const StageConfig&, const MaskRcnn&)> on_stage_begin;
  std::function<void(const StageConfig&, const MaskRcnn&)> on_stage_end;
  std::function<void(std::string_view)> message;
};

using ImageSource = std::function<Image(const DocumentAnnotation&)>;

// Loads `doc.image_path` relative to `root` (PNG).
ImageSource png_image_source(std::filesystem::path root);

struct TrainingResult {
  std::unique_ptr<MaskRcnn> model;
  std::vector<EpochLog> log;
};

// Throws ValidationError for an empty train split or stage list and
// std::runtime_error naming the component when a loss becomes non-finite.
TrainingResult run_training(std::span<const DocumentAnnotation> corpus,
                            const CorpusManifest& manifest, const ImageSource& images,
                            const TrainingConfig& cfg, const TrainingObserver& observer = {});

}  // namespace palm
