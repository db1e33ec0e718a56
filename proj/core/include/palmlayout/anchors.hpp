#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "palmlayout/geometry.hpp"

namespace palm {

inline constexpr int kPyramidLevels = 5;  // P2..P6
inline constexpr int kAnchorRatios = 3;

/// Anchor configuration. Ratios are width:height multipliers, so an anchor of
/// scale s and ratio r is s*sqrt(r) wide and s/sqrt(r) tall (area s^2). The
/// 1:3 and 1:10 ratios therefore give wide, text-line shaped anchors.
struct AnchorSpec {
  std::array<double, kPyramidLevels> scales = {32, 64, 128, 256, 512};
  std::array<double, kAnchorRatios> ratios = {1.0, 3.0, 10.0};
  std::array<int, kPyramidLevels> strides = {4, 8, 16, 32, 64};
  friend bool operator==(const AnchorSpec&, const AnchorSpec&) = default;
};

struct LevelDims {
  int height = 0;
  int width = 0;
};

// Level-major, row-major, ratio-minor; centred on ((x + 0.5) * stride, (y + 0.5) * stride).
std::vector<Box> generate_anchors(std::span<const LevelDims> pyramid_dims, const AnchorSpec& spec);

std::size_t anchor_count(std::span<const LevelDims> pyramid_dims);

struct BoxDelta {
  double dx = 0.0;
  double dy = 0.0;
  double dw = 0.0;
  double dh = 0.0;
};

// Center-offset / log-size parameterisation relative to `anchor`.
BoxDelta encode_box_deltas(const Box& anchor, const Box& target);
// Throws std::invalid_argument for non-finite deltas or a degenerate anchor.
Box decode_box_deltas(const Box& anchor, const BoxDelta& d);

// Per-coordinate normalisation applied to regression targets inside the network.
inline constexpr std::array<double, 4> kBoxDeltaStd = {0.1, 0.1, 0.2, 0.2};
// Upper bound for dw/dh after denormalisation, log(1000/16).
inline constexpr double kMaxLogScale = 4.135166556742356;

struct RpnOutput {
  std::vector<float> objectness;   // P(object) per anchor
  std::vector<BoxDelta> deltas;    // raw (already denormalised) deltas per anchor
};

struct ProposalOptions {
  double objectness_floor = 0.0;
  double nms_threshold = 0.7;
  std::size_t max_proposals = 1000;
  // Top-scoring candidates considered by NMS. Zero means all.
  std::size_t pre_nms_limit = 6000;
  // Proposals are clipped to this window and dropped if thinner than min_size.
  std::optional<Box> clip_window;
  double min_size = 1.0;
};

struct Proposals {
  std::vector<Box> boxes;
  std::vector<double> scores;
};

// decode -> objectness floor (>=) -> clip -> NMS -> truncate, descending score.
Proposals rpn_propose(const RpnOutput& rpn, std::span<const Box> anchors,
                      const ProposalOptions& opts);

}  // namespace palm
