#pragma once

// Instrumented stand-in for the network, used to pin the inference chain
// without a trained model.

#include <atomic>
#include <vector>

#include "palmlayout/model.hpp"

namespace stub {

using namespace palm;

/// 64x64 grid of disjoint 4x4 anchors on a 256 px input; objectness falls with
/// anchor index. Proposals therefore arrive in anchor order. For proposal i:
///   i < 150        CLS, score 0.9 - 0.001 i   (above the floor)
///   150 <= i < 160 H,   score exactly 0.5     (fails a strict floor)
///   i >= 160       background
/// Proposal 1 carries a delta that moves it onto proposal 0's box. Masks are
/// uniform: rank 1 gets 0.9, other odd ranks 0.39, even ranks 0.4.
class ChainModel final : public InstanceSegmenter {
 public:
  static constexpr int kSize = 256;
  static constexpr int kCells = 64;
  static constexpr int kAnchors = kCells * kCells;

  ChainModel() {
    for (int y = 0; y < kCells; ++y)
      for (int x = 0; x < kCells; ++x)
        anchors_.push_back({x * 4.0, y * 4.0, x * 4.0 + 4, y * 4.0 + 4});
  }

  int input_size() const override { return kSize; }
  int input_channels() const override { return 1; }
  std::span<const Box> anchors() const override { return anchors_; }

  RpnStage propose(const nn::Tensor& input) const override {
    RpnStage s;
    s.features = std::make_shared<FeatureHandle>();
    s.rpn.objectness.resize(kAnchors);
    s.rpn.deltas.assign(kAnchors, BoxDelta{});
    for (int i = 0; i < kAnchors; ++i) s.rpn.objectness[i] = 1.0f - float(i) / kAnchors;
    input_channels_seen = input.channels;
    return s;
  }

  ClassifiedRois classify(const FeatureHandle&, std::span<const Box> rois) const override {
    rois_classified = rois.size();
    ClassifiedRois out;
    out.probs = nn::Matrix(int(rois.size()), kNumModelClasses, 0.0f);
    out.deltas.assign(rois.size(), {});
    const int cls = 1 + int(index_of(RegionClass::kCharacterLineSegment));
    const int hole = 1 + int(index_of(RegionClass::kHole));
    const int cc = 1 + int(index_of(RegionClass::kCharacterComponent));
    for (int i = 0; i < int(rois.size()); ++i) {
      float* p = out.probs.row(i);
      if (i < 150) {
        p[cls] = 0.9f - 0.001f * i;
        p[0] = 1.0f - p[cls];
      } else if (i < 160) {
        p[hole] = 0.5f;
        p[0] = 0.25f;
        p[cc] = 0.25f;
      } else {
        p[0] = 0.9f;
        p[cls] = 0.1f;
      }
    }
    if (rois.size() > 1) out.deltas[1][cls].dx = -1.0;
    return out;
  }

  std::vector<SoftMask> segment(const FeatureHandle&, std::span<const Box> rois,
                                std::span<const RegionClass>) const override {
    rois_segmented = rois.size();
    std::vector<SoftMask> masks;
    for (std::size_t k = 0; k < rois.size(); ++k) {
      const float v = k == 1 ? 0.9f : (k % 2 ? 0.39f : 0.4f);
      masks.emplace_back(kMaskSize, kMaskSize, v);
    }
    return masks;
  }

  mutable std::size_t rois_classified = 0;
  mutable std::size_t rois_segmented = 0;
  mutable int input_channels_seen = 0;

 private:
  std::vector<Box> anchors_;
};

}  // namespace stub
