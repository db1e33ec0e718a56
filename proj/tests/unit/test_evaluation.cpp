#include <cmath>

#include "doctest.h"
#include "palmlayout/errors.hpp"
#include "palmlayout/evaluation.hpp"
#include "support/oracles.hpp"

using namespace palm;

namespace {

BinaryMask row_mask(int w, int c0, int c1) { return oracle::rect_mask(1, w, 0, c0, 1, c1); }

RegionInstance rect_region(RegionClass c, double x1, double y1, double x2, double y2,
                           std::optional<double> score = std::nullopt) {
  RegionInstance r;
  r.region_class = c;
  r.boundary = {{{x1, y1}, {x2, y1}, {x2, y2}, {x1, y2}}, ShapeKind::kRectangle};
  r.score = score;
  return r;
}

// Independent per-gt assignment: scan for the largest positive IoU each round.
std::vector<int> assignment_oracle(const std::vector<std::vector<double>>& iou_pg, std::size_t G) {
  const std::size_t P = iou_pg.size();
  std::vector<int> a(G, -1);
  std::vector<bool> used(P, false);
  while (true) {
    double best = 0.0;
    int bg = -1, bp = -1;
    for (std::size_t g = 0; g < G; ++g) {
      if (a[g] >= 0) continue;
      for (std::size_t p = 0; p < P; ++p)
        if (!used[p] && iou_pg[p][g] > best) {
          best = iou_pg[p][g];
          bg = int(g);
          bp = int(p);
        }
    }
    if (bg < 0) break;
    a[bg] = bp;
    used[bp] = true;
  }
  return a;
}

}  // namespace

TEST_CASE("match: trivial cases") {
  const auto g = oracle::rect_mask(10, 10, 0, 0, 5, 5);
  std::vector<ScoredMask> one{{0.9, g}};
  std::vector<BinaryMask> gts{g};
  for (double t : ap_thresholds()) CHECK(match_detections(one, gts, t).pred_tp[0]);
  std::vector<ScoredMask> two{{0.4, g}, {0.9, g}};
  const auto m = match_detections(two, gts, 0.5);
  CHECK(m.pred_tp[1]);
  CHECK_FALSE(m.pred_tp[0]);
  CHECK(m.gt_matched[0]);
}

TEST_CASE("match equals the greedy oracle on random cases") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<BinaryMask> gts;
    std::vector<ScoredMask> preds;
    for (int i = 0; i < 4; ++i) gts.push_back(oracle::random_mask(rng, 6, 6, 0.5));
    for (int i = 0; i < 10; ++i)
      preds.push_back({std::round(rng.uniform() * 4) / 4, oracle::random_mask(rng, 6, 6, 0.5)});
    std::vector<double> scores;
    std::vector<std::vector<double>> iou(10, std::vector<double>(4));
    for (int p = 0; p < 10; ++p) {
      scores.push_back(preds[p].score);
      for (int g = 0; g < 4; ++g) iou[p][g] = oracle::pixel_iou(preds[p].mask, gts[g]);
    }
    const double t = rng.uniform(0.1, 0.6);
    const auto got = match_detections(preds, gts, t);
    const auto want = oracle::greedy_match(scores, iou, t);
    for (int p = 0; p < 10; ++p) {
      CHECK(got.pred_tp[p] == want.tp[p]);
      CHECK((got.pred_gt[p] ? int(*got.pred_gt[p]) : -1) == want.gt_of[p]);
    }
  }
}

TEST_CASE("AP hand fixture: TP FP TP TP FP over four gts") {
  // Precision at the hits is 1, 2/3, 3/4; the envelope lifts 2/3 to 3/4, so
  // AP = (1 + 3/4 + 3/4) / 4 = 0.625.
  std::vector<BinaryMask> gts;
  for (int k = 0; k < 4; ++k) gts.push_back(row_mask(50, 10 * k, 10 * k + 8));
  std::vector<ScoredMask> preds{{0.9, gts[0]},
                                {0.8, row_mask(50, 41, 49)},
                                {0.7, gts[1]},
                                {0.6, gts[2]},
                                {0.5, gts[0]}};
  CHECK(*average_precision(preds, gts, 0.5) == 0.625);
  CHECK(oracle::ap_from_ranked({true, false, true, true, false}, 4) == 0.625);
}

TEST_CASE("AP edge cases") {
  std::vector<BinaryMask> gts{row_mask(20, 0, 5), row_mask(20, 10, 15)};
  std::vector<ScoredMask> perfect{{0.9, gts[0]}, {0.8, gts[1]}};
  CHECK(*average_precision(perfect, gts, 0.95) == 1.0);
  CHECK(*average_precision({}, gts, 0.5) == 0.0);
  CHECK_FALSE(average_precision(perfect, {}, 0.5));
}

TEST_CASE("AP agrees with the PR oracle and is monotone in the threshold") {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<BinaryMask> gts;
    std::vector<ScoredMask> preds;
    const int G = 1 + int(rng.below(5)), P = int(rng.below(9));
    for (int i = 0; i < G; ++i) gts.push_back(oracle::random_mask(rng, 5, 5, 0.5));
    for (int i = 0; i < P; ++i) preds.push_back({rng.uniform(), oracle::random_mask(rng, 5, 5, 0.5)});
    double prev = 2.0;
    for (double t : ap_thresholds()) {
      const double ap = *average_precision(preds, gts, t);
      CHECK(ap <= prev + 1e-12);
      prev = ap;
      std::vector<double> scores;
      std::vector<std::vector<double>> iou(P, std::vector<double>(G));
      for (int p = 0; p < P; ++p) {
        scores.push_back(preds[p].score);
        for (int g = 0; g < G; ++g) iou[p][g] = oracle::pixel_iou(preds[p].mask, gts[g]);
      }
      const auto m = oracle::greedy_match(scores, iou, t);
      std::vector<std::size_t> order(P);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
      std::vector<bool> ranked;
      for (auto p : order) ranked.push_back(m.tp[p]);
      CHECK(ap == doctest::Approx(oracle::ap_from_ranked(ranked, G)).epsilon(1e-12));
      // Rescaling scores leaves AP unchanged.
      auto scaled = preds;
      for (auto& s : scaled) s.score *= 3.5;
      CHECK(*average_precision(scaled, gts, t) == ap);
    }
  }
}

TEST_CASE("ap summary averages classes and thresholds") {
  Rng rng(29);
  std::array<std::vector<ClassDocData>, kNumRegionClasses> per_class;
  std::vector<int> present{0, 2, 7};
  for (int c : present) {
    ClassDocData d;
    d.iou = IouMatrix(4, 3);
    d.intersection.assign(12, 0);
    for (int p = 0; p < 4; ++p) {
      d.scores.push_back(rng.uniform());
      for (int g = 0; g < 3; ++g) d.iou.at(p, g) = rng.uniform();
    }
    d.gt_area.assign(3, 1);
    per_class[c].push_back(d);
  }
  const auto s = ap_summary(per_class);
  REQUIRE(s);
  double total = 0.0;
  for (double t : ap_thresholds()) {
    double mean = 0.0;
    for (int c : present) mean += *average_precision(per_class[c], t);
    total += mean / 3;
  }
  CHECK(s->ap_mean == doctest::Approx(total / 10).epsilon(1e-12));
  double ap50 = 0.0;
  for (int c : present) ap50 += *average_precision(per_class[c], 0.5);
  CHECK(s->ap50 == doctest::Approx(ap50 / 3).epsilon(1e-12));
  CHECK_FALSE(s->per_class_ap50[1]);
  REQUIRE(*s->per_class_ap50[2] > 0.0);
  // Changing one class changes the mean regardless of its instance count.
  auto changed = per_class;
  changed[2][0].scores.assign(4, 0.0);
  for (auto& v : changed[2][0].iou.values) v = 0.0;
  CHECK(ap_summary(changed)->ap50 != s->ap50);
}

TEST_CASE("class-wise IoU and accuracy per document") {
  std::vector<BinaryMask> g1{row_mask(10, 0, 10)};
  std::vector<BinaryMask> p1{row_mask(10, 0, 10)};
  CHECK(*class_iou_document(g1, p1) == 1.0);
  CHECK(*class_acc_document(g1, p1) == 1.0);
  std::vector<BinaryMask> g2{row_mask(20, 0, 10), row_mask(20, 10, 20)};
  std::vector<BinaryMask> p2{row_mask(20, 0, 10)};
  CHECK(*class_iou_document(g2, p2) == 0.5);
  std::vector<BinaryMask> g3{row_mask(30, 0, 10), row_mask(30, 10, 20), row_mask(30, 20, 30)};
  std::vector<BinaryMask> p3{row_mask(30, 0, 6), row_mask(30, 10, 18), row_mask(30, 20, 30)};
  CHECK(*class_iou_document(g3, p3) == doctest::Approx(0.8));
  // Half the gt pixels recovered, with extra prediction outside.
  std::vector<BinaryMask> g4{row_mask(30, 0, 10)};
  std::vector<BinaryMask> p4{row_mask(30, 5, 25)};
  CHECK(*class_acc_document(g4, p4) == 0.5);
  CHECK_FALSE(class_iou_document({}, p4));
}

TEST_CASE("class-wise corpus mean is over documents") {
  const std::vector<BinaryMask> ga{row_mask(10, 0, 10)};
  const std::vector<BinaryMask> pa{row_mask(10, 0, 5)};
  const std::vector<BinaryMask> gb{row_mask(20, 0, 10), row_mask(20, 10, 20)};
  const std::vector<BinaryMask> pb{row_mask(20, 0, 7), row_mask(20, 10, 19)};
  const std::vector<double> docs{*class_iou_document(ga, pa), *class_iou_document(gb, pb)};
  CHECK(*class_iou_corpus(docs) == doctest::Approx(0.65).epsilon(1e-15));
  CHECK(*class_iou_corpus(std::vector<double>{0.3}) == 0.3);
  // Adding a document with the corpus mean leaves it unchanged.
  const std::vector<double> more{docs[0], docs[1], *class_iou_corpus(docs)};
  CHECK(*class_iou_corpus(more) == doctest::Approx(*class_iou_corpus(docs)));
  CHECK_FALSE(class_iou_corpus({}));
}

TEST_CASE("assignment matches the scanning oracle") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const int P = int(rng.below(6)), G = 1 + int(rng.below(5));
    IouMatrix m(P, G);
    std::vector<std::vector<double>> pg(P, std::vector<double>(G));
    for (int p = 0; p < P; ++p)
      for (int g = 0; g < G; ++g) m.at(p, g) = pg[p][g] = rng.uniform() < 0.3 ? 0.0 : rng.uniform();
    const auto got = overlap_assignment(m);
    const auto want = assignment_oracle(pg, G);
    for (int g = 0; g < G; ++g) CHECK((got[g] ? int(*got[g]) : -1) == want[g]);
  }
}

namespace {

std::vector<DocumentAnnotation> small_gt_corpus(Rng& rng, int n) {
  std::vector<DocumentAnnotation> docs;
  for (int i = 0; i < n; ++i) {
    DocumentAnnotation d;
    char id[16];
    std::snprintf(id, sizeof id, "d%02d", i);  // corpus order equals doc_id order
    d.doc_id = id;
    d.image_path = d.doc_id + ".png";
    d.width = 60;
    d.height = 40;
    d.collection = i % 3 == 0 ? Collection::kBhoomi : Collection::kPih;
    d.script = "x";
    const int k = 1 + int(rng.below(5));
    for (int j = 0; j < k; ++j) {
      const RegionClass c = kAllRegionClasses[rng.below(4)];
      const double x = rng.uniform_int(0, 40), y = rng.uniform_int(0, 30);
      d.regions.push_back(rect_region(c, x, y, x + rng.uniform_int(3, 20), y + rng.uniform_int(2, 10)));
    }
    docs.push_back(d);
  }
  return docs;
}

}  // namespace

TEST_CASE("report: predictions equal ground truth") {
  Rng rng(37);
  auto gts = small_gt_corpus(rng, 9);
  auto preds = gts;
  for (auto& d : preds)
    for (auto& r : d.regions) r.score = 0.9;
  const auto report = evaluate_documents(gts, preds);
  REQUIRE(report.rows.size() == 3);
  CHECK(report.rows[0].name == "PIH");
  CHECK(report.rows[1].name == "Bhoomi");
  const auto& all = report.combined();
  CHECK(all.name == "Combined");
  CHECK(all.ap->ap50 == 1.0);
  CHECK(all.ap->ap_mean == 1.0);
  for (RegionClass c : kAllRegionClasses) {
    const auto i = index_of(c);
    if (all.cw_iou[i]) {
      CHECK(*all.cw_iou[i] == 1.0);
      CHECK(*all.cw_acc[i] == 1.0);
    }
  }
  CHECK_FALSE(all.cw_iou[index_of(RegionClass::kBoundaryLine)]);
  const std::string text = render_report_text(report);
  CHECK(text.find("100.00/100.00") != std::string::npos);
  CHECK(text.find("\xE2\x88\x92") != std::string::npos);
  CHECK(format_cell(0.12345) == "12.35");
  CHECK(report_to_json(report).find("\"Combined\"") != std::string::npos);
}

TEST_CASE("report: no predictions") {
  Rng rng(41);
  auto gts = small_gt_corpus(rng, 5);
  const auto report = evaluate_documents(gts, {});
  CHECK(report.combined().ap->ap50 == 0.0);
  for (RegionClass c : kAllRegionClasses)
    if (auto v = report.combined().cw_iou[index_of(c)]) CHECK(*v == 0.0);
}

TEST_CASE("report: unknown prediction documents are listed") {
  Rng rng(43);
  auto gts = small_gt_corpus(rng, 3);
  auto preds = gts;
  preds[1].doc_id = "ghost-1";
  preds[2].doc_id = "ghost-2";
  try {
    evaluate_documents(gts, preds);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("ghost-1") != std::string::npos);
    CHECK(msg.find("ghost-2") != std::string::npos);
  }
}

TEST_CASE("report: split selection") {
  Rng rng(47);
  auto gts = small_gt_corpus(rng, 6);
  CorpusManifest m;
  for (std::size_t i = 0; i < gts.size(); ++i) m.splits[gts[i].doc_id] = i < 4 ? Split::kTrain : Split::kTest;
  const auto report = emit_report(gts, gts, m, Split::kTest);
  CHECK(report.combined().documents == 2);
}

TEST_CASE("report: end-to-end against recomputation from raw masks") {
  Rng rng(53);
  const auto gts = small_gt_corpus(rng, 20);
  std::vector<DocumentAnnotation> preds = gts;
  for (auto& d : preds) {
    d.regions.clear();
    for (const auto& g : gts[std::stoi(d.doc_id.substr(1))].regions) {
      if (rng.uniform() < 0.2) continue;
      const auto& v = g.boundary.vertices;
      const double jx = rng.uniform_int(-2, 2), jy = rng.uniform_int(-1, 1);
      d.regions.push_back(rect_region(g.region_class, std::max(0.0, v[0].x + jx), std::max(0.0, v[0].y + jy),
                                      std::min(60.0, v[2].x + jx), std::min(40.0, v[2].y + jy),
                                      std::round(rng.uniform() * 10) / 10));
    }
    if (rng.uniform() < 0.5)
      d.regions.push_back(rect_region(kAllRegionClasses[rng.below(4)], 1, 1, 9, 6, rng.uniform()));
  }
  const auto report = evaluate_documents(gts, preds);

  // Recompute Combined from full-size rasters.
  struct Item { double score; std::size_t doc; std::size_t idx; };
  double ap50_sum = 0.0, ap_sum = 0.0;
  int classes = 0;
  for (RegionClass c : kAllRegionClasses) {
    std::vector<std::vector<BinaryMask>> G(gts.size()), P(gts.size());
    std::vector<std::vector<double>> S(gts.size());
    std::size_t num_gt = 0;
    std::vector<double> doc_iou, doc_acc;
    for (std::size_t i = 0; i < gts.size(); ++i) {
      for (const auto& r : gts[i].regions)
        if (r.region_class == c) G[i].push_back(rasterize_polygon(r.boundary, 40, 60));
      for (const auto& r : preds[i].regions)
        if (r.region_class == c) {
          P[i].push_back(rasterize_polygon(r.boundary, 40, 60));
          S[i].push_back(*r.score);
        }
      num_gt += G[i].size();
      if (G[i].empty()) continue;
      std::vector<std::vector<double>> pg(P[i].size(), std::vector<double>(G[i].size()));
      for (std::size_t p = 0; p < P[i].size(); ++p)
        for (std::size_t g = 0; g < G[i].size(); ++g) pg[p][g] = oracle::pixel_iou(P[i][p], G[i][g]);
      const auto a = assignment_oracle(pg, G[i].size());
      double si = 0.0, sa = 0.0;
      for (std::size_t g = 0; g < G[i].size(); ++g) {
        if (a[g] < 0) continue;
        si += pg[a[g]][g];
        long inter = 0;
        for (int r = 0; r < 40; ++r)
          for (int x = 0; x < 60; ++x) inter += G[i][g].at(r, x) && P[i][a[g]].at(r, x);
        sa += double(inter) / double(G[i][g].count());
      }
      doc_iou.push_back(si / G[i].size());
      doc_acc.push_back(sa / G[i].size());
    }
    const auto i = index_of(c);
    if (num_gt == 0) {
      CHECK_FALSE(report.combined().cw_iou[i]);
      continue;
    }
    CHECK(*report.combined().cw_iou[i] ==
          doctest::Approx(std::accumulate(doc_iou.begin(), doc_iou.end(), 0.0) / doc_iou.size()));
    CHECK(*report.combined().cw_acc[i] ==
          doctest::Approx(std::accumulate(doc_acc.begin(), doc_acc.end(), 0.0) / doc_acc.size()));
    ++classes;
    double class_ap_sum = 0.0;
    for (double t : ap_thresholds()) {
      std::vector<Item> items;
      std::vector<std::vector<bool>> tp(gts.size());
      for (std::size_t d = 0; d < gts.size(); ++d) {
        std::vector<std::vector<double>> pg(P[d].size(), std::vector<double>(G[d].size()));
        for (std::size_t p = 0; p < P[d].size(); ++p)
          for (std::size_t g = 0; g < G[d].size(); ++g) pg[p][g] = oracle::pixel_iou(P[d][p], G[d][g]);
        tp[d] = P[d].empty() ? std::vector<bool>{} : oracle::greedy_match(S[d], pg, t).tp;
        for (std::size_t p = 0; p < P[d].size(); ++p) items.push_back({S[d][p], d, p});
      }
      std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score > b.score; });
      std::vector<bool> ranked;
      for (const auto& it : items) ranked.push_back(tp[it.doc][it.idx]);
      const double ap = oracle::ap_from_ranked(ranked, num_gt);
      if (t == 0.5) ap50_sum += ap;
      class_ap_sum += ap;
    }
    ap_sum += class_ap_sum / 10;
  }
  CHECK(report.combined().ap->ap50 == doctest::Approx(ap50_sum / classes));
  CHECK(report.combined().ap->ap_mean == doctest::Approx(ap_sum / classes));
}
