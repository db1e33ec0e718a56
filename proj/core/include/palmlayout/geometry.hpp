#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "palmlayout/corpus.hpp"

namespace palm {

/// Axis-aligned box in continuous pixel coordinates. Pixel (row r, col c)
/// covers [c, c+1) x [r, r+1), so a single pixel at (3,5) has box (5,3,6,4).
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 <= x2 && y1 <= y2; }
  friend bool operator==(const Box&, const Box&) = default;
};

class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int height, int width);

  int height() const { return height_; }
  int width() const { return width_; }
  bool empty_grid() const { return bits_.empty(); }

  bool at(int row, int col) const { return bits_[index(row, col)] != 0; }
  void set(int row, int col, bool value = true) { bits_[index(row, col)] = value ? 1 : 0; }

  std::span<const std::uint8_t> bits() const { return bits_; }
  std::span<std::uint8_t> bits() { return bits_; }

  std::size_t count() const;
  bool any() const;

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  std::size_t index(int row, int col) const {
    return static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(col);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// Grid of probabilities in [0,1].
class SoftMask {
 public:
  SoftMask() = default;
  SoftMask(int height, int width, float fill = 0.0f);
  SoftMask(int height, int width, std::vector<float> values);

  int height() const { return height_; }
  int width() const { return width_; }

  float at(int row, int col) const { return values_[index(row, col)]; }
  void set(int row, int col, float v) { values_[index(row, col)] = v; }

  std::span<const float> values() const { return values_; }
  std::span<float> values() { return values_; }

  friend bool operator==(const SoftMask&, const SoftMask&) = default;

 private:
  std::size_t index(int row, int col) const {
    return static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(col);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<float> values_;
};

// Even-odd rule on pixel centers (c + 0.5, r + 0.5).
BinaryMask rasterize_polygon(const Polygon& poly, int height, int width);
bool point_in_polygon(std::span<const Point> vertices, double x, double y);

// |a & b| / |a | b|; 0 when both are empty. Throws std::invalid_argument on size mismatch.
double mask_iou(const BinaryMask& a, const BinaryMask& b);
std::size_t mask_intersection(const BinaryMask& a, const BinaryMask& b);

double box_iou(const Box& a, const Box& b);

inline constexpr std::size_t kKeepAll = std::numeric_limits<std::size_t>::max();

/// Greedy non-maximum suppression. `iou(i, j)` gives the overlap of items i and j.
/// Returns kept indices in descending score order; equal scores keep the lower
/// index first. Stops once `max_keep` items are kept (same prefix as truncating
/// the full result).
std::vector<std::size_t> nms(std::span<const double> scores, double iou_threshold,
                             const std::function<double(std::size_t, std::size_t)>& iou,
                             std::size_t max_keep = kKeepAll);

std::vector<std::size_t> nms_boxes(std::span<const Box> boxes, std::span<const double> scores,
                                   double iou_threshold, std::size_t max_keep = kKeepAll);

// Align-corners-false bilinear resampling with edge clamping.
SoftMask resize_bilinear(const SoftMask& m, int new_height, int new_width);

// Bit set iff value >= threshold.
BinaryMask binarize(const SoftMask& m, double threshold);

// Tight box around set pixels in pixel-edge coordinates; nullopt for an empty mask.
std::optional<Box> mask_to_box(const BinaryMask& m);

/// Traces every boundary ring of `m` along pixel edges and joins them into a
/// single vertex list with doubled bridges, so that
/// rasterize_polygon(mask_to_polygon(m)) == m. Returns an empty polygon for an
/// empty mask.
Polygon mask_to_polygon(const BinaryMask& m);

}  // namespace palm
