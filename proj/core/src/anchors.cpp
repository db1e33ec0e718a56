#include "palmlayout/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace palm {

std::size_t anchor_count(std::span<const LevelDims> pyramid_dims) {
  std::size_t n = 0;
  for (const auto& d : pyramid_dims)
    n += static_cast<std::size_t>(d.height) * d.width * kAnchorRatios;
  return n;
}

std::vector<Box> generate_anchors(std::span<const LevelDims> pyramid_dims,
                                  const AnchorSpec& spec) {
  if (pyramid_dims.size() != kPyramidLevels)
    throw std::invalid_argument("generate_anchors: expected 5 pyramid levels");
  std::vector<Box> anchors;
  anchors.reserve(anchor_count(pyramid_dims));
  for (int level = 0; level < kPyramidLevels; ++level) {
    const auto dims = pyramid_dims[level];
    const double scale = spec.scales[level];
    const double stride = spec.strides[level];
    std::array<double, kAnchorRatios> half_w{};
    std::array<double, kAnchorRatios> half_h{};
    for (int r = 0; r < kAnchorRatios; ++r) {
      const double root = std::sqrt(spec.ratios[r]);
      half_w[r] = 0.5 * scale * root;
      half_h[r] = 0.5 * scale / root;
    }
    for (int y = 0; y < dims.height; ++y) {
      const double cy = (y + 0.5) * stride;
      for (int x = 0; x < dims.width; ++x) {
        const double cx = (x + 0.5) * stride;
        for (int r = 0; r < kAnchorRatios; ++r)
          anchors.push_back({cx - half_w[r], cy - half_h[r], cx + half_w[r], cy + half_h[r]});
      }
    }
  }
  return anchors;
}

BoxDelta encode_box_deltas(const Box& anchor, const Box& target) {
  const double w = anchor.width();
  const double h = anchor.height();
  if (!(w > 0.0) || !(h > 0.0)) throw std::invalid_argument("encode_box_deltas: degenerate anchor");
  if (!(target.width() > 0.0) || !(target.height() > 0.0))
    throw std::invalid_argument("encode_box_deltas: degenerate target");
  return {(target.center_x() - anchor.center_x()) / w, (target.center_y() - anchor.center_y()) / h,
          std::log(target.width() / w), std::log(target.height() / h)};
}

Box decode_box_deltas(const Box& anchor, const BoxDelta& d) {
  if (!std::isfinite(d.dx) || !std::isfinite(d.dy) || !std::isfinite(d.dw) || !std::isfinite(d.dh))
    throw std::invalid_argument("decode_box_deltas: non-finite delta");
  const double w = anchor.width();
  const double h = anchor.height();
  if (!(w > 0.0) || !(h > 0.0)) throw std::invalid_argument("decode_box_deltas: degenerate anchor");
  const double cx = anchor.center_x() + d.dx * w;
  const double cy = anchor.center_y() + d.dy * h;
  const double nw = w * std::exp(d.dw);
  const double nh = h * std::exp(d.dh);
  return {cx - 0.5 * nw, cy - 0.5 * nh, cx + 0.5 * nw, cy + 0.5 * nh};
}

Proposals rpn_propose(const RpnOutput& rpn, std::span<const Box> anchors,
                      const ProposalOptions& opts) {
  if (rpn.objectness.size() != anchors.size() || rpn.deltas.size() != anchors.size())
    throw std::invalid_argument("rpn_propose: outputs not aligned with anchors");
  std::vector<std::size_t> candidates;
  candidates.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i)
    if (rpn.objectness[i] >= opts.objectness_floor) candidates.push_back(i);
  auto by_score = [&](std::size_t a, std::size_t b) {
    if (rpn.objectness[a] != rpn.objectness[b]) return rpn.objectness[a] > rpn.objectness[b];
    return a < b;
  };
  if (opts.pre_nms_limit > 0 && candidates.size() > opts.pre_nms_limit) {
    std::partial_sort(candidates.begin(), candidates.begin() + opts.pre_nms_limit, candidates.end(),
                      by_score);
    candidates.resize(opts.pre_nms_limit);
  } else {
    std::sort(candidates.begin(), candidates.end(), by_score);
  }
  std::vector<Box> boxes;
  std::vector<double> scores;
  boxes.reserve(candidates.size());
  scores.reserve(candidates.size());
  for (std::size_t i : candidates) {
    Box b = decode_box_deltas(anchors[i], rpn.deltas[i]);
    if (opts.clip_window) {
      const Box& w = *opts.clip_window;
      b.x1 = std::clamp(b.x1, w.x1, w.x2);
      b.x2 = std::clamp(b.x2, w.x1, w.x2);
      b.y1 = std::clamp(b.y1, w.y1, w.y2);
      b.y2 = std::clamp(b.y2, w.y1, w.y2);
      if (b.width() < opts.min_size || b.height() < opts.min_size) continue;
    }
    boxes.push_back(b);
    scores.push_back(rpn.objectness[i]);
  }
  auto keep = nms_boxes(boxes, scores, opts.nms_threshold, opts.max_proposals);
  Proposals out;
  out.boxes.reserve(keep.size());
  out.scores.reserve(keep.size());
  for (std::size_t k : keep) {
    out.boxes.push_back(boxes[k]);
    out.scores.push_back(scores[k]);
  }
  return out;
}

}  // namespace palm
