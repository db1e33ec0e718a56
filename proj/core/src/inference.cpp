#include "palmlayout/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace palm {

void validate_inference_config(const InferenceConfig& cfg) {
  auto unit = [](double v, const char* name) {
    if (!(v > 0.0 && v < 1.0))
      throw std::invalid_argument(std::string("inference config: ") + name + " must lie in (0, 1)");
  };
  unit(cfg.detection_score_floor, "detection_score_floor");
  unit(cfg.mask_binarize_threshold, "mask_binarize_threshold");
  unit(cfg.final_mask_nms_threshold, "final_mask_nms_threshold");
  unit(cfg.rpn_nms_threshold, "rpn_nms_threshold");
  if (cfg.detection_nms_threshold) unit(*cfg.detection_nms_threshold, "detection_nms_threshold");
  if (cfg.proposals_after_nms == 0 || cfg.max_detections == 0)
    throw std::invalid_argument("inference config: proposal and detection limits must be positive");
}

namespace {

// Soft mask value at original pixel (row, col) for a 28x28 grid spanning `box`.
float sample_box_mask(const SoftMask& m, const Box& box, int row, int col) {
  const double u = (col + 0.5 - box.x1) / box.width() * m.width() - 0.5;
  const double v = (row + 0.5 - box.y1) / box.height() * m.height() - 0.5;
  const double cu = std::clamp(u, 0.0, double(m.width() - 1));
  const double cv = std::clamp(v, 0.0, double(m.height() - 1));
  const int x0 = static_cast<int>(std::floor(cu));
  const int y0 = static_cast<int>(std::floor(cv));
  const int x1 = std::min(x0 + 1, m.width() - 1);
  const int y1 = std::min(y0 + 1, m.height() - 1);
  const double fx = cu - x0;
  const double fy = cv - y0;
  return static_cast<float>((1 - fy) * ((1 - fx) * m.at(y0, x0) + fx * m.at(y0, x1)) +
                            fy * ((1 - fx) * m.at(y1, x0) + fx * m.at(y1, x1)));
}

}  // namespace

ParsedLayout postprocess_masks(std::span<const Detection> detections, const PreprocessResult& meta,
                               const InferenceConfig& cfg, InferenceTrace* trace) {
  ParsedLayout layout;
  layout.width = meta.original_width;
  layout.height = meta.original_height;
  const Box frame{0.0, 0.0, double(layout.width), double(layout.height)};

  std::vector<ParsedInstance> candidates;
  for (const auto& det : detections) {
    Box box = meta.to_original(det.box);
    box = {std::clamp(box.x1, 0.0, frame.x2), std::clamp(box.y1, 0.0, frame.y2),
           std::clamp(box.x2, 0.0, frame.x2), std::clamp(box.y2, 0.0, frame.y2)};
    ParsedInstance inst;
    inst.region_class = det.region_class;
    inst.score = det.score;
    inst.box = box;
    inst.mask = BinaryMask(layout.height, layout.width);
    if (box.width() > 0.0 && box.height() > 0.0) {
      // The grid covers the unclipped box so clipping does not stretch the mask.
      const Box grid = meta.to_original(det.box);
      const int r0 = static_cast<int>(std::floor(box.y1));
      const int r1 = std::min(layout.height, static_cast<int>(std::ceil(box.y2)));
      const int c0 = static_cast<int>(std::floor(box.x1));
      const int c1 = std::min(layout.width, static_cast<int>(std::ceil(box.x2)));
      for (int r = r0; r < r1; ++r) {
        if (r + 0.5 < grid.y1 || r + 0.5 > grid.y2) continue;
        for (int c = c0; c < c1; ++c) {
          if (c + 0.5 < grid.x1 || c + 0.5 > grid.x2) continue;
          if (sample_box_mask(det.mask28, grid, r, c) >= cfg.mask_binarize_threshold)
            inst.mask.set(r, c);
        }
      }
    }
    if (inst.mask.any()) candidates.push_back(std::move(inst));
  }
  if (trace) {
    trace->nonempty_masks = candidates.size();
    trace->binarize_threshold = cfg.mask_binarize_threshold;
    trace->mask_nms_threshold = cfg.final_mask_nms_threshold;
  }

  // Per-class mask NMS; cross-class overlap is legitimate.
  std::vector<bool> keep(candidates.size(), false);
  for (RegionClass c : kAllRegionClasses) {
    std::vector<std::size_t> members;
    std::vector<double> scores;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      if (candidates[i].region_class != c) continue;
      members.push_back(i);
      scores.push_back(candidates[i].score);
    }
    if (members.empty()) continue;
    const auto kept = nms(scores, cfg.final_mask_nms_threshold, [&](std::size_t a, std::size_t b) {
      return mask_iou(candidates[members[a]].mask, candidates[members[b]].mask);
    });
    for (auto k : kept) keep[members[k]] = true;
  }
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (keep[i]) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return candidates[a].score > candidates[b].score;
  });
  for (auto i : order) layout.instances.push_back(std::move(candidates[i]));
  if (trace) trace->final_instances = layout.instances.size();
  return layout;
}

ParsedLayout run_inference(const Image& image, const InstanceSegmenter& model,
                           const InferenceConfig& cfg, InferenceTrace* trace) {
  validate_inference_config(cfg);
  InferenceTrace local;
  InferenceTrace& t = trace ? *trace : local;
  t = InferenceTrace{};

  const PreprocessResult pre = preprocess_image(image, model.input_size(), model.input_channels());
  const RpnStage stage = model.propose(pre.input);

  ProposalOptions popts;
  popts.objectness_floor = 0.0;
  popts.nms_threshold = cfg.rpn_nms_threshold;
  popts.max_proposals = cfg.proposals_after_nms;
  popts.pre_nms_limit = cfg.pre_nms_limit;
  popts.clip_window = pre.content_box();
  const Proposals proposals = rpn_propose(stage.rpn, model.anchors(), popts);
  t.proposals = proposals.boxes.size();

  std::vector<Detection> dets;
  if (!proposals.boxes.empty()) {
    const ClassifiedRois cls = model.classify(*stage.features, proposals.boxes);
    const Box window = pre.content_box();
    for (std::size_t i = 0; i < proposals.boxes.size(); ++i) {
      const float* p = cls.probs.row(static_cast<int>(i));
      const int best = static_cast<int>(std::max_element(p, p + kNumModelClasses) - p);
      if (best == 0) continue;
      ++t.foreground;
      if (!(p[best] > cfg.detection_score_floor)) continue;
      Box b = decode_box_deltas(proposals.boxes[i], cls.deltas[i][best]);
      b = {std::clamp(b.x1, window.x1, window.x2), std::clamp(b.y1, window.y1, window.y2),
           std::clamp(b.x2, window.x1, window.x2), std::clamp(b.y2, window.y1, window.y2)};
      if (!(b.width() > 0.0) || !(b.height() > 0.0)) continue;
      ++t.above_floor;
      Detection d;
      d.region_class = kAllRegionClasses[static_cast<std::size_t>(best - 1)];
      d.score = p[best];
      d.box = b;
      dets.push_back(std::move(d));
    }
  }

  if (cfg.detection_nms_threshold) {
    std::vector<bool> keep(dets.size(), false);
    for (RegionClass c : kAllRegionClasses) {
      std::vector<std::size_t> members;
      std::vector<Box> boxes;
      std::vector<double> scores;
      for (std::size_t i = 0; i < dets.size(); ++i)
        if (dets[i].region_class == c) {
          members.push_back(i);
          boxes.push_back(dets[i].box);
          scores.push_back(dets[i].score);
        }
      for (auto k : nms_boxes(boxes, scores, *cfg.detection_nms_threshold)) keep[members[k]] = true;
    }
    std::vector<Detection> kept;
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (keep[i]) kept.push_back(std::move(dets[i]));
    dets = std::move(kept);
  }

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  if (order.size() > cfg.max_detections) order.resize(cfg.max_detections);
  std::vector<Detection> top;
  for (auto i : order) top.push_back(std::move(dets[i]));
  t.detections = top.size();

  // The mask head only sees the surviving detections.
  std::vector<Box> boxes;
  std::vector<RegionClass> classes;
  for (const auto& d : top) {
    boxes.push_back(d.box);
    classes.push_back(d.region_class);
  }
  t.mask_rois = boxes.size();
  if (!boxes.empty()) {
    auto masks = model.segment(*stage.features, boxes, classes);
    for (std::size_t i = 0; i < top.size(); ++i) top[i].mask28 = std::move(masks[i]);
  }
  return postprocess_masks(top, pre, cfg, &t);
}

ParsedLayout run_inference(const Image& image, const std::filesystem::path& checkpoint,
                           const InferenceConfig& cfg, InferenceTrace* trace) {
  const auto model = load_checkpoint(checkpoint);
  return run_inference(image, *model, cfg, trace);
}

std::vector<RegionInstance> layout_to_regions(const ParsedLayout& layout) {
  std::vector<RegionInstance> out;
  for (const auto& inst : layout.instances) {
    RegionInstance r;
    r.region_class = inst.region_class;
    r.boundary = mask_to_polygon(inst.mask);
    r.boundary.kind = ShapeKind::kFreehand;
    r.score = inst.score;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace palm
