#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "palmlayout/corpus.hpp"
#include "palmlayout/geometry.hpp"
#include "palmlayout/image.hpp"
#include "palmlayout/model.hpp"
#include "palmlayout/training.hpp"

namespace palm {

struct InferenceConfig {
  std::size_t proposals_after_nms = 1000;
  std::size_t max_detections = 100;
  double detection_score_floor = 0.5;  // strict: score > floor
  double mask_binarize_threshold = 0.4;
  double final_mask_nms_threshold = 0.5;
  double rpn_nms_threshold = 0.7;
  std::size_t pre_nms_limit = 6000;
  // Per-class box NMS on detections before the top-k cut. Off by default.
  std::optional<double> detection_nms_threshold;
};

// Throws std::invalid_argument if a threshold lies outside (0, 1) or a count is zero.
void validate_inference_config(const InferenceConfig& cfg);

/// Head output for one RoI, in network input coordinates.
struct Detection {
  RegionClass region_class = RegionClass::kCharacterLineSegment;
  double score = 0.0;
  Box box;
  SoftMask mask28;
};

struct ParsedInstance {
  RegionClass region_class = RegionClass::kCharacterLineSegment;
  double score = 0.0;
  BinaryMask mask;  // original image size
  Box box;          // original image coordinates
};

struct ParsedLayout {
  int width = 0;
  int height = 0;
  std::vector<ParsedInstance> instances;  // descending score
};

/// Counts at each step of the pipeline.
struct InferenceTrace {
  std::size_t proposals = 0;         // after RPN NMS
  std::size_t foreground = 0;        // argmax class is not background
  std::size_t above_floor = 0;       // score > detection_score_floor
  std::size_t detections = 0;        // after the top-k cut
  std::size_t mask_rois = 0;         // RoIs sent to the mask head
  std::size_t nonempty_masks = 0;    // after binarization
  std::size_t final_instances = 0;   // after mask NMS
  double binarize_threshold = 0.0;
  double mask_nms_threshold = 0.0;
};

// Pastes each 28x28 mask into its box, resamples to the original frame,
// binarizes and applies per-class mask NMS.
ParsedLayout postprocess_masks(std::span<const Detection> detections, const PreprocessResult& meta,
                               const InferenceConfig& cfg, InferenceTrace* trace = nullptr);

ParsedLayout run_inference(const Image& image, const InstanceSegmenter& model,
                           const InferenceConfig& cfg = {}, InferenceTrace* trace = nullptr);
ParsedLayout run_inference(const Image& image, const std::filesystem::path& checkpoint,
                           const InferenceConfig& cfg = {}, InferenceTrace* trace = nullptr);

// Predicted regions with pixel-exact polygon boundaries and scores.
std::vector<RegionInstance> layout_to_regions(const ParsedLayout& layout);

}  // namespace palm
