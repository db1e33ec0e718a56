#include <cmath>

#include "doctest.h"
#include "palmlayout/geometry.hpp"
#include "support/oracles.hpp"

using namespace palm;

namespace {

std::vector<Box> random_boxes(Rng& rng, int n, double extent) {
  std::vector<Box> boxes;
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform(0, extent), y = rng.uniform(0, extent);
    boxes.push_back({x, y, x + rng.uniform(2, extent / 2), y + rng.uniform(2, extent / 2)});
  }
  return boxes;
}

}  // namespace

TEST_CASE("nms matches step replay on random boxes") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    auto boxes = random_boxes(rng, 20, 100);
    std::vector<double> scores;
    // Coarse scores force ties.
    for (int i = 0; i < 20; ++i) scores.push_back(std::round(rng.uniform() * 8) / 8);
    const double t = rng.uniform(0.1, 0.9);
    CHECK(nms_boxes(boxes, scores, t) == oracle::nms_replay(boxes, scores, t));
  }
}

TEST_CASE("nms truncation keeps the same prefix") {
  Rng rng(3);
  auto boxes = random_boxes(rng, 30, 60);
  std::vector<double> scores;
  for (int i = 0; i < 30; ++i) scores.push_back(rng.uniform());
  const auto all = nms_boxes(boxes, scores, 0.5);
  const auto some = nms_boxes(boxes, scores, 0.5, 3);
  REQUIRE(some.size() == std::min<std::size_t>(3, all.size()));
  CHECK(std::equal(some.begin(), some.end(), all.begin()));
}

TEST_CASE("nms kept count is monotone in the threshold") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto boxes = random_boxes(rng, 25, 80);
    std::vector<double> scores;
    for (int i = 0; i < 25; ++i) scores.push_back(rng.uniform());
    std::size_t prev = 0;
    for (double t = 0.0; t <= 1.0; t += 0.1) {
      const auto n = nms_boxes(boxes, scores, t).size();
      CHECK(n >= prev);
      prev = n;
    }
  }
}

TEST_CASE("mask iou equals pixel counting") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 1 + int(rng.below(40)), w = 1 + int(rng.below(40));
    const auto a = oracle::random_mask(rng, h, w, rng.uniform());
    const auto b = oracle::random_mask(rng, h, w, rng.uniform());
    CHECK(mask_iou(a, b) == oracle::pixel_iou(a, b));
    CHECK(mask_iou(a, b) == mask_iou(b, a));
  }
  BinaryMask e(4, 4);
  CHECK(mask_iou(e, e) == 0.0);
  CHECK_THROWS_AS(mask_iou(BinaryMask(2, 2), BinaryMask(2, 3)), std::invalid_argument);
}

TEST_CASE("box iou") {
  CHECK(box_iou({0, 0, 2, 2}, {0, 0, 2, 2}) == 1.0);
  CHECK(box_iou({0, 0, 1, 1}, {2, 2, 3, 3}) == 0.0);
  CHECK(box_iou({0, 0, 2, 2}, {1, 0, 3, 2}) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("rasterize uses pixel centres and even-odd") {
  Polygon sq{{{1, 1}, {4, 1}, {4, 3}, {1, 3}}, ShapeKind::kRectangle};
  const auto m = rasterize_polygon(sq, 5, 6);
  CHECK(m.count() == 6);
  CHECK(m.at(1, 1));
  CHECK(m.at(2, 3));
  CHECK_FALSE(m.at(3, 1));
  CHECK_FALSE(m.at(1, 4));
  // A self-overlapping ring cancels under even-odd.
  Polygon twice{{{0, 0}, {4, 0}, {4, 4}, {0, 4}, {0, 0}, {4, 0}, {4, 4}, {0, 4}}};
  CHECK(rasterize_polygon(twice, 4, 4).count() == 0);
}

TEST_CASE("rasterize agrees with point in polygon on random polygons") {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    Polygon p;
    const int n = 3 + int(rng.below(6));
    for (int i = 0; i < n; ++i) p.vertices.push_back({rng.uniform(0, 20), rng.uniform(0, 15)});
    const auto m = rasterize_polygon(p, 15, 20);
    for (int r = 0; r < 15; ++r)
      for (int c = 0; c < 20; ++c) CHECK(m.at(r, c) == point_in_polygon(p.vertices, c + 0.5, r + 0.5));
  }
}

TEST_CASE("binarize is inclusive at the threshold") {
  SoftMask s(1, 3, std::vector<float>{0.39f, 0.40f, 0.41f});
  const auto b = binarize(s, 0.4f);
  CHECK_FALSE(b.at(0, 0));
  CHECK(b.at(0, 1));
  CHECK(b.at(0, 2));
}

TEST_CASE("bilinear resize") {
  SoftMask c(3, 3, 0.7f);
  const auto up = resize_bilinear(c, 7, 5);
  for (float v : up.values()) CHECK(v == doctest::Approx(0.7));
  // 1x2 -> 1x4 with align-corners-false: samples at -0.25, 0.25, 0.75, 1.25 (clamped).
  SoftMask r(1, 2, std::vector<float>{0.0f, 1.0f});
  const auto w = resize_bilinear(r, 1, 4);
  CHECK(w.at(0, 0) == doctest::Approx(0.0));
  CHECK(w.at(0, 1) == doctest::Approx(0.25));
  CHECK(w.at(0, 2) == doctest::Approx(0.75));
  CHECK(w.at(0, 3) == doctest::Approx(1.0));
}

TEST_CASE("mask to polygon rasterizes back exactly") {
  Rng rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    const int h = 3 + int(rng.below(20)), w = 3 + int(rng.below(20));
    const auto m = oracle::random_mask(rng, h, w, rng.uniform(0.1, 0.9));
    const auto p = mask_to_polygon(m);
    CHECK(rasterize_polygon(p, h, w) == m);
  }
  CHECK(mask_to_polygon(BinaryMask(4, 4)).vertices.empty());
}

TEST_CASE("mask to box") {
  const auto m = oracle::rect_mask(10, 10, 2, 3, 5, 7);
  const auto b = mask_to_box(m);
  REQUIRE(b);
  CHECK(*b == Box{3, 2, 7, 5});
  CHECK_FALSE(mask_to_box(BinaryMask(3, 3)));
}
