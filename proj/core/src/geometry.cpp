#include "palmlayout/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace palm {

BinaryMask::BinaryMask(int height, int width) : height_(height), width_(width) {
  if (height < 1 || width < 1) throw std::invalid_argument("BinaryMask dimensions must be >= 1");
  bits_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), 0);
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

bool BinaryMask::any() const {
  return std::any_of(bits_.begin(), bits_.end(), [](std::uint8_t b) { return b != 0; });
}

SoftMask::SoftMask(int height, int width, float fill) : height_(height), width_(width) {
  if (height < 1 || width < 1) throw std::invalid_argument("SoftMask dimensions must be >= 1");
  values_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill);
}

SoftMask::SoftMask(int height, int width, std::vector<float> values)
    : height_(height), width_(width), values_(std::move(values)) {
  if (height < 1 || width < 1) throw std::invalid_argument("SoftMask dimensions must be >= 1");
  if (values_.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width))
    throw std::invalid_argument("SoftMask value count does not match dimensions");
}

namespace {

// Crossing of the horizontal line at `y` with edge (a, b), evaluated from the
// lower endpoint so that an edge and its reverse produce the same value.
inline bool edge_crossing(const Point& a, const Point& b, double y, double* x) {
  const Point& lo = a.y <= b.y ? a : b;
  const Point& hi = a.y <= b.y ? b : a;
  if (!(lo.y <= y && y < hi.y)) return false;
  *x = lo.x + (y - lo.y) * (hi.x - lo.x) / (hi.y - lo.y);
  return true;
}

}  // namespace

bool point_in_polygon(std::span<const Point> vertices, double x, double y) {
  bool inside = false;
  const std::size_t n = vertices.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    double xc;
    if (edge_crossing(vertices[j], vertices[i], y, &xc) && x < xc) inside = !inside;
  }
  return inside;
}

BinaryMask rasterize_polygon(const Polygon& poly, int height, int width) {
  const auto& v = poly.vertices;
  if (v.size() < 3) throw std::invalid_argument("rasterize_polygon: fewer than 3 vertices");
  BinaryMask mask(height, width);
  double min_y = v[0].y;
  double max_y = v[0].y;
  for (const auto& p : v) {
    min_y = std::min(min_y, p.y);
    max_y = std::max(max_y, p.y);
  }
  const int row_begin = std::max(0, static_cast<int>(std::floor(min_y - 0.5)));
  const int row_end = std::min(height, static_cast<int>(std::ceil(max_y + 0.5)) + 1);
  std::vector<double> xs;
  auto bits = mask.bits();
  for (int r = row_begin; r < row_end; ++r) {
    const double y = r + 0.5;
    xs.clear();
    const std::size_t n = v.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
      double xc;
      if (edge_crossing(v[j], v[i], y, &xc)) xs.push_back(xc);
    }
    std::sort(xs.begin(), xs.end());
    // Center c + 0.5 is inside iff an odd number of crossings lie at or left of it,
    // i.e. it falls in [xs[2k], xs[2k+1]).
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      const double lo = std::ceil(xs[k] - 0.5);
      const double hi = std::ceil(xs[k + 1] - 0.5);
      const int c0 = static_cast<int>(std::max(0.0, lo));
      const int c1 = static_cast<int>(std::min(static_cast<double>(width), hi));
      if (c1 <= c0) continue;
      auto row = bits.subspan(static_cast<std::size_t>(r) * width, width);
      for (int c = c0; c < c1; ++c) row[c] ^= 1;
    }
  }
  return mask;
}

std::size_t mask_intersection(const BinaryMask& a, const BinaryMask& b) {
  if (a.height() != b.height() || a.width() != b.width())
    throw std::invalid_argument("mask dimensions differ");
  const auto ab = a.bits();
  const auto bb = b.bits();
  std::size_t inter = 0;
  for (std::size_t i = 0; i < ab.size(); ++i) inter += ab[i] & bb[i];
  return inter;
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.height() != b.height() || a.width() != b.width())
    throw std::invalid_argument("mask_iou: mask dimensions differ");
  const auto ab = a.bits();
  const auto bb = b.bits();
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < ab.size(); ++i) {
    inter += ab[i] & bb[i];
    uni += ab[i] | bb[i];
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double box_iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

std::vector<std::size_t> nms(std::span<const double> scores, double iou_threshold,
                             const std::function<double(std::size_t, std::size_t)>& iou,
                             std::size_t max_keep) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<char> suppressed(scores.size(), 0);
  std::vector<std::size_t> keep;
  for (std::size_t oi = 0; oi < order.size() && keep.size() < max_keep; ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    keep.push_back(i);
    if (keep.size() == max_keep) break;
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!suppressed[j] && iou(i, j) > iou_threshold) suppressed[j] = 1;
    }
  }
  return keep;
}

std::vector<std::size_t> nms_boxes(std::span<const Box> boxes, std::span<const double> scores,
                                   double iou_threshold, std::size_t max_keep) {
  if (boxes.size() != scores.size()) throw std::invalid_argument("nms_boxes: size mismatch");
  return nms(
      scores, iou_threshold,
      [&](std::size_t i, std::size_t j) { return box_iou(boxes[i], boxes[j]); }, max_keep);
}

SoftMask resize_bilinear(const SoftMask& m, int new_height, int new_width) {
  if (new_height < 1 || new_width < 1)
    throw std::invalid_argument("resize_bilinear: target dimensions must be >= 1");
  if (new_height == m.height() && new_width == m.width()) return m;
  SoftMask out(new_height, new_width);
  const double sy = static_cast<double>(m.height()) / new_height;
  const double sx = static_cast<double>(m.width()) / new_width;
  for (int i = 0; i < new_height; ++i) {
    const double fy = std::clamp((i + 0.5) * sy - 0.5, 0.0, static_cast<double>(m.height() - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, m.height() - 1);
    const double wy = fy - y0;
    for (int j = 0; j < new_width; ++j) {
      const double fx = std::clamp((j + 0.5) * sx - 0.5, 0.0, static_cast<double>(m.width() - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, m.width() - 1);
      const double wx = fx - x0;
      const double top = (1.0 - wx) * m.at(y0, x0) + wx * m.at(y0, x1);
      const double bottom = (1.0 - wx) * m.at(y1, x0) + wx * m.at(y1, x1);
      const double v = (1.0 - wy) * top + wy * bottom;
      out.set(i, j, static_cast<float>(std::clamp(v, 0.0, 1.0)));
    }
  }
  return out;
}

BinaryMask binarize(const SoftMask& m, double threshold) {
  BinaryMask out(m.height(), m.width());
  auto src = m.values();
  auto dst = out.bits();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] >= threshold ? 1 : 0;
  return out;
}

std::optional<Box> mask_to_box(const BinaryMask& m) {
  int min_r = m.height(), max_r = -1, min_c = m.width(), max_c = -1;
  for (int r = 0; r < m.height(); ++r) {
    for (int c = 0; c < m.width(); ++c) {
      if (!m.at(r, c)) continue;
      min_r = std::min(min_r, r);
      max_r = std::max(max_r, r);
      min_c = std::min(min_c, c);
      max_c = std::max(max_c, c);
    }
  }
  if (max_r < 0) return std::nullopt;
  return Box{static_cast<double>(min_c), static_cast<double>(min_r),
             static_cast<double>(max_c + 1), static_cast<double>(max_r + 1)};
}

Polygon mask_to_polygon(const BinaryMask& m) {
  auto box = mask_to_box(m);
  if (!box) return {};
  // Work inside the bounding box grown by one pixel so every boundary edge is interior.
  const int ox = static_cast<int>(box->x1) - 1;
  const int oy = static_cast<int>(box->y1) - 1;
  const int w = static_cast<int>(box->width()) + 2;
  const int h = static_cast<int>(box->height()) + 2;
  auto set = [&](int r, int c) {
    const int gr = r + oy;
    const int gc = c + ox;
    if (gr < 0 || gc < 0 || gr >= m.height() || gc >= m.width()) return false;
    return m.at(gr, gc);
  };
  const int vw = w + 1;
  auto vid = [&](int x, int y) { return y * vw + x; };
  const std::size_t nverts = static_cast<std::size_t>(vw) * static_cast<std::size_t>(h + 1);
  // Each lattice vertex has at most two outgoing boundary edges.
  std::vector<std::array<int, 2>> out(nverts, {-1, -1});
  auto add_edge = [&](int from, int to) {
    auto& slots = out[from];
    (slots[0] < 0 ? slots[0] : slots[1]) = to;
  };
  for (int y = 0; y <= h; ++y) {
    for (int c = 0; c < w; ++c) {
      const bool up = set(y - 1, c);
      const bool down = set(y, c);
      if (up == down) continue;
      if (up) add_edge(vid(c, y), vid(c + 1, y));
      else add_edge(vid(c + 1, y), vid(c, y));
    }
  }
  for (int x = 0; x <= w; ++x) {
    for (int r = 0; r < h; ++r) {
      const bool left = set(r, x - 1);
      const bool right = set(r, x);
      if (left == right) continue;
      if (left) add_edge(vid(x, r + 1), vid(x, r));
      else add_edge(vid(x, r), vid(x, r + 1));
    }
  }

  auto to_point = [&](int id) {
    return Point{static_cast<double>(id % vw + ox), static_cast<double>(id / vw + oy)};
  };
  std::vector<std::vector<Point>> rings;
  for (std::size_t start = 0; start < nverts; ++start) {
    while (out[start][0] >= 0 || out[start][1] >= 0) {
      std::vector<int> ids;
      int cur = static_cast<int>(start);
      do {
        ids.push_back(cur);
        auto& slots = out[cur];
        int next;
        if (slots[0] >= 0) {
          next = slots[0];
          slots[0] = -1;
        } else {
          next = slots[1];
          slots[1] = -1;
        }
        cur = next;
      } while (cur != static_cast<int>(start));
      // Drop vertices in the middle of straight runs.
      std::vector<Point> ring;
      const std::size_t n = ids.size();
      for (std::size_t i = 0; i < n; ++i) {
        const Point p = to_point(ids[(i + n - 1) % n]);
        const Point q = to_point(ids[i]);
        const Point s = to_point(ids[(i + 1) % n]);
        const bool collinear = (p.x == q.x && q.x == s.x) || (p.y == q.y && q.y == s.y);
        if (!collinear) ring.push_back(q);
      }
      rings.push_back(std::move(ring));
    }
  }

  Polygon poly;
  poly.kind = ShapeKind::kPolygon;
  const Point anchor = rings.front().front();
  poly.vertices = rings.front();
  for (std::size_t k = 1; k < rings.size(); ++k) {
    // Close the previous ring at the anchor, walk out along a bridge, trace the
    // ring, and return along the same bridge. Doubled bridge edges cancel under
    // the even-odd rule.
    poly.vertices.push_back(anchor);
    poly.vertices.insert(poly.vertices.end(), rings[k].begin(), rings[k].end());
    poly.vertices.push_back(rings[k].front());
  }
  if (rings.size() > 1) poly.vertices.push_back(anchor);
  return poly;
}

}  // namespace palm
