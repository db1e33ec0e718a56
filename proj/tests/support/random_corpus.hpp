#pragma once

#include <string>
#include <vector>

#include "palmlayout/corpus.hpp"
#include "palmlayout/rng.hpp"

namespace testgen {

inline palm::RegionInstance random_region(palm::Rng& rng, int w, int h) {
  palm::RegionInstance r;
  r.region_class = palm::kAllRegionClasses[rng.below(palm::kNumRegionClasses)];
  const auto kind = rng.below(3);
  if (kind == 0) {
    const double x1 = rng.uniform(0, w - 1), y1 = rng.uniform(0, h - 1);
    const double x2 = rng.uniform(x1 + 0.5, w), y2 = rng.uniform(y1 + 0.5, h);
    r.boundary = {{{x1, y1}, {x2, y1}, {x2, y2}, {x1, y2}}, palm::ShapeKind::kRectangle};
  } else {
    r.boundary.kind = kind == 1 ? palm::ShapeKind::kPolygon : palm::ShapeKind::kFreehand;
    const int n = 3 + int(rng.below(kind == 1 ? 8 : 40));
    for (int i = 0; i < n; ++i) r.boundary.vertices.push_back({rng.uniform(0, w), rng.uniform(0, h)});
  }
  if (rng.uniform() < 0.5) r.annotator_id = "ann-" + std::to_string(rng.below(5));
  r.revision = int(rng.below(4));
  return r;
}

inline std::vector<palm::DocumentAnnotation> random_corpus(palm::Rng& rng, int n_docs,
                                                           int max_regions = 12) {
  std::vector<palm::DocumentAnnotation> docs;
  for (int i = 0; i < n_docs; ++i) {
    palm::DocumentAnnotation d;
    d.doc_id = "doc-" + std::to_string(i) + "-" + std::to_string(rng.below(1000));
    d.image_path = "images/" + d.doc_id + ".png";
    d.width = 16 + int(rng.below(2000));
    d.height = 16 + int(rng.below(1500));
    d.collection = palm::kAllCollections[rng.below(3)];
    d.script = rng.uniform() < 0.5 ? "Devanagari" : "Telugu";
    const int n = int(rng.below(max_regions + 1));
    for (int k = 0; k < n; ++k) d.regions.push_back(random_region(rng, d.width, d.height));
    docs.push_back(std::move(d));
  }
  return docs;
}

}  // namespace testgen
