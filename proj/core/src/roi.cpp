#include "palmlayout/roi.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace palm {

namespace {

struct Tap {
  int y0, y1, x0, x1;
  float wy, wx;
};

inline Tap bilinear_tap(double fy, double fx, int h, int w) {
  fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
  fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
  Tap t;
  t.y0 = static_cast<int>(fy);
  t.x0 = static_cast<int>(fx);
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.wy = static_cast<float>(fy - t.y0);
  t.wx = static_cast<float>(fx - t.x0);
  return t;
}

void check_roi(const Box& roi) {
  if (!(roi.width() > 0.0) || !(roi.height() > 0.0))
    throw std::invalid_argument("roi_warp: degenerate roi (zero area)");
}

}  // namespace

int assign_pyramid_level(const Box& roi, double canonical_size) {
  const double side = std::sqrt(std::max(roi.area(), 1e-12));
  const int k = static_cast<int>(std::floor(4.0 + std::log2(side / canonical_size)));
  return std::clamp(k, 2, 5) - 2;
}

nn::Tensor roi_align(const nn::Tensor& feature, int stride, const Box& roi, int out_size) {
  check_roi(roi);
  nn::Tensor out(feature.channels, out_size, out_size);
  const double bin_w = roi.width() / stride / out_size;
  const double bin_h = roi.height() / stride / out_size;
  const double x0 = roi.x1 / stride;
  const double y0 = roi.y1 / stride;
  const std::size_t w = static_cast<std::size_t>(feature.width);
  for (int i = 0; i < out_size; ++i) {
    const double fy = y0 + (i + 0.5) * bin_h - 0.5;
    for (int j = 0; j < out_size; ++j) {
      const double fx = x0 + (j + 0.5) * bin_w - 0.5;
      const Tap t = bilinear_tap(fy, fx, feature.height, feature.width);
      const float w00 = (1 - t.wy) * (1 - t.wx), w01 = (1 - t.wy) * t.wx;
      const float w10 = t.wy * (1 - t.wx), w11 = t.wy * t.wx;
      for (int c = 0; c < feature.channels; ++c) {
        const float* f = feature.channel(c);
        out.at(c, i, j) = w00 * f[t.y0 * w + t.x0] + w01 * f[t.y0 * w + t.x1] +
                          w10 * f[t.y1 * w + t.x0] + w11 * f[t.y1 * w + t.x1];
      }
    }
  }
  return out;
}

void roi_align_backward(const nn::Tensor& dpatch, int stride, const Box& roi,
                        nn::Tensor& dfeature) {
  check_roi(roi);
  const int out_size = dpatch.height;
  const double bin_w = roi.width() / stride / out_size;
  const double bin_h = roi.height() / stride / out_size;
  const double x0 = roi.x1 / stride;
  const double y0 = roi.y1 / stride;
  const std::size_t w = static_cast<std::size_t>(dfeature.width);
  for (int i = 0; i < out_size; ++i) {
    const double fy = y0 + (i + 0.5) * bin_h - 0.5;
    for (int j = 0; j < out_size; ++j) {
      const double fx = x0 + (j + 0.5) * bin_w - 0.5;
      const Tap t = bilinear_tap(fy, fx, dfeature.height, dfeature.width);
      const float w00 = (1 - t.wy) * (1 - t.wx), w01 = (1 - t.wy) * t.wx;
      const float w10 = t.wy * (1 - t.wx), w11 = t.wy * t.wx;
      for (int c = 0; c < dfeature.channels; ++c) {
        float* f = dfeature.channel(c);
        const float g = dpatch.at(c, i, j);
        f[t.y0 * w + t.x0] += w00 * g;
        f[t.y0 * w + t.x1] += w01 * g;
        f[t.y1 * w + t.x0] += w10 * g;
        f[t.y1 * w + t.x1] += w11 * g;
      }
    }
  }
}

nn::Tensor roi_warp(const FeaturePyramid& pyramid, const Box& roi, int out_size,
                    double canonical_size) {
  check_roi(roi);
  const int level = assign_pyramid_level(roi, canonical_size);
  return roi_align(pyramid.levels[level], pyramid.strides[level], roi, out_size);
}

}  // namespace palm
