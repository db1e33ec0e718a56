#pragma once

#include <array>

#include "palmlayout/anchors.hpp"
#include "palmlayout/geometry.hpp"
#include "palmlayout/nn.hpp"

namespace palm {

/// P2..P6 feature maps sharing one channel depth.
struct FeaturePyramid {
  std::array<nn::Tensor, kPyramidLevels> levels;
  std::array<int, kPyramidLevels> strides = {4, 8, 16, 32, 64};
};

/// FPN level assignment, floor(4 + log2(sqrt(area) / canonical)) clamped to
/// P2..P5. Returns the pyramid index (0 = P2).
int assign_pyramid_level(const Box& roi, double canonical_size = 224.0);

/// Bilinear RoI warp of one feature map: one sample at each bin centre
/// (align-corners-false), border-clamped. `roi` is in input-image pixels.
nn::Tensor roi_align(const nn::Tensor& feature, int stride, const Box& roi, int out_size);
void roi_align_backward(const nn::Tensor& dpatch, int stride, const Box& roi, nn::Tensor& dfeature);

/// Warps `roi` from its assigned pyramid level. Throws std::invalid_argument for
/// a zero-area roi.
nn::Tensor roi_warp(const FeaturePyramid& pyramid, const Box& roi, int out_size,
                    double canonical_size = 224.0);

}  // namespace palm
