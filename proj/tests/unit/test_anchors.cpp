#include <cmath>
#include <set>

#include "doctest.h"
#include "palmlayout/anchors.hpp"
#include "palmlayout/model.hpp"
#include "support/oracles.hpp"

using namespace palm;

TEST_CASE("anchor count and shapes") {
  const std::vector<LevelDims> dims{{8, 8}, {4, 4}, {2, 2}, {1, 1}, {1, 1}};
  const AnchorSpec spec;
  const auto anchors = generate_anchors(dims, spec);
  REQUIRE(anchors.size() == 258);
  CHECK(anchor_count(dims) == 258);
  std::size_t k = 0;
  for (int l = 0; l < kPyramidLevels; ++l)
    for (int y = 0; y < dims[l].height; ++y)
      for (int x = 0; x < dims[l].width; ++x)
        for (int r = 0; r < kAnchorRatios; ++r, ++k) {
          const Box& a = anchors[k];
          const double s = spec.scales[l];
          CHECK(std::abs(a.area() - s * s) <= 1e-6 * s * s);
          CHECK(a.center_x() == doctest::Approx((x + 0.5) * spec.strides[l]));
          CHECK(a.center_y() == doctest::Approx((y + 0.5) * spec.strides[l]));
          CHECK(a.width() / a.height() == doctest::Approx(spec.ratios[r]));
        }
  CHECK(std::set<double>(spec.ratios.begin(), spec.ratios.end()) == std::set<double>{1, 3, 10});
}

TEST_CASE("delta encode/decode round trip") {
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    const double x = rng.uniform(0, 500), y = rng.uniform(0, 500);
    const Box a{x, y, x + rng.uniform(4, 300), y + rng.uniform(4, 300)};
    const double u = rng.uniform(0, 500), v = rng.uniform(0, 500);
    const Box t{u, v, u + rng.uniform(4, 300), v + rng.uniform(4, 300)};
    const Box back = decode_box_deltas(a, encode_box_deltas(a, t));
    CHECK(back.x1 == doctest::Approx(t.x1));
    CHECK(back.y2 == doctest::Approx(t.y2));
  }
  CHECK_THROWS_AS(decode_box_deltas({0, 0, 0, 5}, {}), std::invalid_argument);
  CHECK_THROWS_AS(decode_box_deltas({0, 0, 5, 5}, {NAN, 0, 0, 0}), std::invalid_argument);
}

TEST_CASE("proposals are clipped, suppressed and ordered") {
  std::vector<Box> anchors{{0, 0, 10, 10}, {1, 0, 11, 10}, {50, 50, 60, 60}, {90, 90, 110, 110}};
  RpnOutput out;
  out.objectness = {0.9f, 0.8f, 0.7f, 0.95f};
  out.deltas.assign(4, BoxDelta{});
  ProposalOptions opts;
  opts.clip_window = Box{0, 0, 100, 100};
  const auto p = rpn_propose(out, anchors, opts);
  REQUIRE(p.boxes.size() == 3);
  CHECK(p.scores[0] == doctest::Approx(0.95));
  CHECK(p.boxes[0] == Box{90, 90, 100, 100});
  CHECK(p.boxes[1] == anchors[0]);
  CHECK(p.boxes[2] == anchors[2]);
  opts.max_proposals = 2;
  CHECK(rpn_propose(out, anchors, opts).boxes.size() == 2);
}

TEST_CASE("pyramid dims for a 1024 input") {
  const auto dims = pyramid_dims_for(1024);
  REQUIRE(dims.size() == 5);
  CHECK(dims[0].height == 256);
  CHECK(dims[3].width == 32);
  CHECK(dims[4].width == 16);
}
