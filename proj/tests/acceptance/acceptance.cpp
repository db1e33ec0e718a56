// One PASS/FAIL line per acceptance criterion. Exit status is the number of failures.
//
//   palmlayout_acceptance [name ...]     run a subset, e.g. "overfit"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "palmlayout/anchors.hpp"
#include "palmlayout/evaluation.hpp"
#include "palmlayout/inference.hpp"
#include "palmlayout/losses.hpp"
#include "palmlayout/service.hpp"
#include "palmlayout/synth.hpp"
#include "palmlayout/training.hpp"
#include "support/oracles.hpp"
#include "support/random_corpus.hpp"
#include "support/stub_model.hpp"

using namespace palm;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Records the first failing check; later ones only count.
class Checker {
 public:
  void check(bool ok, const std::string& what) {
    ++checks_;
    if (ok) return;
    ++failed_;
    if (first_.empty()) first_ = what;
  }
  Outcome outcome(const std::string& ok_detail) const {
    if (failed_ == 0) return {true, ok_detail + " (" + std::to_string(checks_) + " checks)"};
    return {false, std::to_string(failed_) + "/" + std::to_string(checks_) +
                       " checks failed; first: " + first_};
  }

 private:
  long checks_ = 0;
  long failed_ = 0;
  std::string first_;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<Box> random_boxes(Rng& rng, int n, double extent) {
  std::vector<Box> boxes;
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform(0, extent), y = rng.uniform(0, extent);
    boxes.push_back({x, y, x + rng.uniform(2, extent / 2), y + rng.uniform(2, extent / 2)});
  }
  return boxes;
}

Outcome geometry_oracles() {
  Checker c;
  Rng rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    const auto boxes = random_boxes(rng, 20, 100);
    std::vector<double> scores;
    for (int i = 0; i < 20; ++i) scores.push_back(std::round(rng.uniform() * 10) / 10);
    const double t = rng.uniform(0.1, 0.9);
    c.check(nms_boxes(boxes, scores, t) == oracle::nms_replay(boxes, scores, t),
            "nms trial " + std::to_string(trial));
  }
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 1 + int(rng.below(48)), w = 1 + int(rng.below(48));
    const auto a = oracle::random_mask(rng, h, w, rng.uniform());
    const auto b = oracle::random_mask(rng, h, w, rng.uniform());
    c.check(mask_iou(a, b) == oracle::pixel_iou(a, b), "mask iou trial " + std::to_string(trial));
  }
  return c.outcome("100 NMS instances and 100 mask pairs agree exactly");
}

bool grad_close(double analytic, double numeric) {
  return std::abs(analytic - numeric) <=
         1e-4 * std::max({std::abs(analytic), std::abs(numeric), 1e-3});
}

Outcome loss_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  Checker c;
  Rng rng(202);
  auto vec = [&](std::size_t n, double s) {
    std::vector<double> v(n);
    for (auto& x : v) x = s * rng.normal();
    return v;
  };
  for (int trial = 0; trial < 50; ++trial) {
    // cross entropy on logits
    {
      const std::size_t n = 2 + rng.below(9);
      const auto x = vec(n, 2.0);
      const std::size_t k = rng.below(n);
      std::vector<double> g(n);
      softmax_cross_entropy(x, k, g);
      auto f = [&](const std::vector<double>& v) { return softmax_cross_entropy(v, k); };
      for (std::size_t i = 0; i < n; ++i)
        c.check(grad_close(g[i], oracle::central_diff(f, x, i, 1e-5)), "cross entropy grad");
    }
    // smooth l1, away from the kinks
    {
      const std::size_t n = 1 + rng.below(8);
      auto x = vec(n, 2.0);
      const auto y = vec(n, 2.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double d = std::abs(x[i] - y[i]);
        if (d < 1e-2 || std::abs(d - 1) < 1e-2) x[i] += 0.05;
      }
      std::vector<double> g(n);
      smooth_l1(x, y, g);
      auto f = [&](const std::vector<double>& v) { return smooth_l1(v, y); };
      for (std::size_t i = 0; i < n; ++i)
        c.check(grad_close(g[i], oracle::central_diff(f, x, i, 1e-6)), "smooth l1 grad");
    }
    // mask bce and focal
    {
      const std::size_t n = 1 + rng.below(16);
      const auto x = vec(n, 3.0);
      std::vector<double> y(n);
      for (auto& v : y) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
      std::vector<double> gb(n), gf(n);
      mask_bce_logits(x, y, gb);
      mask_focal_logits(x, y, 2.0, gf);
      auto fb = [&](const std::vector<double>& v) { return mask_bce_logits(v, y); };
      auto ff = [&](const std::vector<double>& v) { return mask_focal_logits(v, y, 2.0); };
      for (std::size_t i = 0; i < n; ++i) {
        c.check(grad_close(gb[i], oracle::central_diff(fb, x, i, 1e-5)), "mask bce grad");
        c.check(grad_close(gf[i], oracle::central_diff(ff, x, i, 1e-5)), "mask focal grad");
      }
      c.check(std::abs(mask_focal_logits(x, y, 0.0) - mask_bce_logits(x, y)) <= 1e-9,
              "focal gamma 0 vs bce on logits");
    }
    {
      const int h = 1 + int(rng.below(6)), w = 1 + int(rng.below(6));
      SoftMask p(h, w);
      BinaryMask t(h, w);
      for (int r = 0; r < h; ++r)
        for (int col = 0; col < w; ++col) {
          p.set(r, col, float(rng.uniform(0.01, 0.99)));
          t.set(r, col, rng.uniform() < 0.5);
        }
      c.check(std::abs(mask_focal(p, t, 0.0) - mask_bce(p, t)) <= 1e-9, "focal gamma 0 vs bce");
    }
  }
  c.check(total_loss({1, 1, 1, 1}, LossWeights{}) == 5.0, "total loss of unit components");
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  c.check(secs < 60.0, "runtime " + fmt("%.1f s", secs));
  return c.outcome("50 random inputs per loss, total 5, " + fmt("%.2f s", secs));
}

Outcome anchor_contract() {
  Checker c;
  const std::vector<LevelDims> dims{{8, 8}, {4, 4}, {2, 2}, {1, 1}, {1, 1}};
  const AnchorSpec spec;
  const auto anchors = generate_anchors(dims, spec);
  c.check(anchors.size() == 258, "anchor count " + std::to_string(anchors.size()));
  std::set<long> ratios;
  std::size_t k = 0;
  for (int l = 0; l < kPyramidLevels; ++l)
    for (int i = 0; i < dims[l].height * dims[l].width; ++i)
      for (int r = 0; r < kAnchorRatios && k < anchors.size(); ++r, ++k) {
        const double s2 = spec.scales[l] * spec.scales[l];
        c.check(std::abs(anchors[k].area() - s2) <= 1e-6 * s2, "area of anchor " + std::to_string(k));
        ratios.insert(std::lround(anchors[k].width() / anchors[k].height() * 1000));
      }
  c.check(ratios == std::set<long>{1000, 3000, 10000}, "width:height ratio set");
  return c.outcome("258 anchors, areas within 1e-6, ratios {1:1, 1:3, 1:10}");
}

BinaryMask row_mask(int w, int c0, int c1) { return oracle::rect_mask(1, w, 0, c0, 1, c1); }

Outcome metric_oracle() {
  Checker c;
  // TP FP TP TP FP against four gts
  std::vector<BinaryMask> gts;
  for (int k = 0; k < 4; ++k) gts.push_back(row_mask(50, 10 * k, 10 * k + 8));
  const std::vector<ScoredMask> preds{{0.9, gts[0]},
                                      {0.8, row_mask(50, 41, 49)},
                                      {0.7, gts[1]},
                                      {0.6, gts[2]},
                                      {0.5, gts[0]}};
  const double ap = *average_precision(preds, gts, 0.5);
  c.check(ap == 0.625, "AP fixture gave " + fmt("%.17g", ap));

  const std::vector<BinaryMask> ga{row_mask(10, 0, 10)}, pa{row_mask(10, 0, 5)};
  const std::vector<BinaryMask> gb{row_mask(20, 0, 10), row_mask(20, 10, 20)};
  const std::vector<BinaryMask> pb{row_mask(20, 0, 7), row_mask(20, 10, 19)};
  const double da = *class_iou_document(ga, pa), db = *class_iou_document(gb, pb);
  c.check(da == 0.5, "first document IoU " + fmt("%.17g", da));
  c.check(db == (0.7 + 0.9) / 2, "second document IoU " + fmt("%.17g", db));
  const double cw = *class_iou_corpus(std::vector<double>{da, db});
  c.check(cw == 0.65, "cwIoU gave " + fmt("%.17g", cw));

  Rng rng(303);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<BinaryMask> g;
    std::vector<ScoredMask> p;
    const int G = 1 + int(rng.below(5)), P = int(rng.below(10));
    for (int i = 0; i < G; ++i) g.push_back(oracle::random_mask(rng, 6, 6, 0.5));
    for (int i = 0; i < P; ++i) p.push_back({rng.uniform(), oracle::random_mask(rng, 6, 6, 0.5)});
    double prev = 2.0;
    for (double t : ap_thresholds()) {
      const double v = *average_precision(p, g, t);
      c.check(v <= prev, "AP rose with the threshold in trial " + std::to_string(trial));
      prev = v;
    }
  }
  return c.outcome("AP 0.625 and cwIoU 0.65 exact, monotone over 50 cases");
}

Outcome pipeline_constants() {
  Checker c;
  stub::ChainModel model;
  InferenceTrace t;
  const InferenceConfig cfg;
  const auto layout = run_inference(Image(256, 256, 1, 128), model, cfg, &t);
  c.check(cfg.proposals_after_nms == 1000 && cfg.max_detections == 100 &&
              cfg.detection_score_floor == 0.5 && cfg.mask_binarize_threshold == 0.4 &&
              cfg.final_mask_nms_threshold == 0.5,
          "default constants");
  c.check(t.proposals == 1000, "proposals " + std::to_string(t.proposals));
  c.check(model.rois_classified == 1000, "classified " + std::to_string(model.rois_classified));
  c.check(t.above_floor == 150, "strictly above 0.5: " + std::to_string(t.above_floor));
  c.check(t.detections == 100, "detections " + std::to_string(t.detections));
  c.check(t.mask_rois == 100 && model.rois_segmented == 100,
          "mask rois " + std::to_string(model.rois_segmented));
  c.check(t.nonempty_masks == 51, "masks surviving binarize at 0.4: " +
                                      std::to_string(t.nonempty_masks));
  c.check(t.binarize_threshold == 0.4 && t.mask_nms_threshold == 0.5, "traced thresholds");
  c.check(t.final_instances == 50 && layout.instances.size() == 50,
          "after mask NMS " + std::to_string(t.final_instances));
  return c.outcome("1000 -> 150 above 0.5 -> 100 -> 51 at 0.4 -> 50 after mask NMS 0.5");
}

// Settings shared by the overfit harness and the README.
SynthConfig overfit_synth() {
  SynthConfig cfg;
  cfg.pages_per_image = 2;
  cfg.stacking = PageStacking::kHorizontal;
  cfg.holes = {0, 2};
  cfg.degradation_blobs = {0, 1};
  return cfg;
}

constexpr int kOverfitStepsPerEpoch = 1000;

Outcome desk_overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto corpus = generate_corpus(overfit_synth(), 8, {1.0, 0.0, 0.0}, 5);
  const auto docs = corpus.annotations();
  std::map<std::string, Image> images;
  for (const auto& d : corpus.documents) images[d.annotation.doc_id] = d.image;

  TrainingConfig tc;
  tc.model = desk_model_config();
  tc.seed = 1;
  tc.stages = default_stages();
  tc.stages[0].epochs = 3;
  tc.stages[1].epochs = 2;
  tc.stages[2].epochs = 2;
  tc.steps_per_epoch = kOverfitStepsPerEpoch;
  TrainingObserver obs;
  obs.on_epoch = [](const EpochLog& e) {
    std::printf("  overfit epoch %d/%d: loss %.4f\n", e.global_epoch, 7, e.total);
    std::fflush(stdout);
  };
  const auto result = run_training(
      docs, corpus.manifest, [&](const DocumentAnnotation& d) { return images.at(d.doc_id); }, tc,
      obs);

  std::vector<DocumentAnnotation> preds;
  for (const auto& d : docs) {
    auto p = d;
    p.regions = layout_to_regions(run_inference(images.at(d.doc_id), *result.model));
    preds.push_back(std::move(p));
  }
  const auto report = evaluate_documents(docs, preds);
  const double ap50 = report.combined().ap ? report.combined().ap->ap50 : 0.0;

  long cls_total = 0, cls_hit = 0;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const auto reduced = reduce_document(docs[i], &preds[i]);
    const auto& d = reduced[index_of(RegionClass::kCharacterLineSegment)];
    for (std::size_t g = 0; g < d.iou.gts; ++g) {
      double best = 0.0;
      for (std::size_t p = 0; p < d.iou.preds; ++p) best = std::max(best, d.iou.at(p, g));
      ++cls_total;
      cls_hit += best >= 0.5 ? 1 : 0;
    }
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::string detail = "AP50 " + fmt("%.4f", ap50) + ", CLS covered " + std::to_string(cls_hit) +
                       "/" + std::to_string(cls_total) + ", " + fmt("%.0f s", secs);
  const bool ok = ap50 >= 0.70 && cls_hit == cls_total && secs <= 1800.0;
  return {ok, detail};
}

// Tiny model and corpus for the determinism runs.
TrainingConfig tiny_training() {
  TrainingConfig tc;
  tc.model = desk_model_config();
  tc.model.image_size = 256;
  tc.model.backbone.mid_channels = {4, 4, 8, 8};
  tc.model.backbone.out_channels = {8, 8, 16, 16};
  tc.model.head_hidden = 16;
  tc.model.mask_convs = 1;
  tc.model.mask_channels = 4;
  tc.stages = {{1, 2, 1e-3, TrainableScope::kHeadsOnly, MaskLossKind::kBce},
               {2, 1, 1e-3, TrainableScope::kStage4AndUp, MaskLossKind::kFocal},
               {3, 1, 1e-4, TrainableScope::kAll, MaskLossKind::kFocal}};
  tc.steps_per_epoch = 6;
  tc.seed = 42;
  return tc;
}

Outcome determinism() {
  Checker c;
  SynthConfig cfg;
  cfg.width = 256;
  cfg.height = 256;
  cfg.lines_per_page = {2, 3};
  cfg.line_height = {14, 18};
  cfg.line_spacing = {8, 12};
  cfg.hole_radius = {5.0, 8.0};
  const auto corpus = generate_corpus(cfg, 4, {1.0, 0.0, 0.0}, 9);
  const auto docs = corpus.annotations();
  std::map<std::string, Image> images;
  for (const auto& d : corpus.documents) images[d.annotation.doc_id] = d.image;
  const ImageSource src = [&](const DocumentAnnotation& d) { return images.at(d.doc_id); };

  const auto a = run_training(docs, corpus.manifest, src, tiny_training());
  const auto b = run_training(docs, corpus.manifest, src, tiny_training());
  c.check(a.log.size() == b.log.size() && !a.log.empty(), "epoch count");
  for (std::size_t i = 0; i < std::min(a.log.size(), b.log.size()); ++i)
    c.check(epoch_log_line(a.log[i]) == epoch_log_line(b.log[i]),
            "epoch " + std::to_string(i + 1) + " log differs");

  // low score floor so the untrained model still emits masks to compare
  InferenceConfig icfg;
  icfg.detection_score_floor = 1e-3;
  std::size_t instances = 0, outputs = 0;
  for (const auto& d : corpus.documents) {
    const auto x = run_inference(d.image, *a.model, icfg);
    const auto y = run_inference(d.image, *a.model, icfg);
    const auto z = run_inference(d.image, *b.model, icfg);
    c.check(x.instances.size() == y.instances.size() && x.instances.size() == z.instances.size(),
            "instance count");
    for (std::size_t i = 0; i < std::min({x.instances.size(), y.instances.size(), z.instances.size()}); ++i) {
      c.check(x.instances[i].score == y.instances[i].score &&
                  x.instances[i].score == z.instances[i].score,
              "score bits");
      c.check(x.instances[i].mask == y.instances[i].mask && x.instances[i].mask == z.instances[i].mask,
              "mask bits");
      c.check(x.instances[i].box == y.instances[i].box, "box bits");
    }
    instances += x.instances.size();

    // raw network outputs, since an untrained net may emit no instances at all
    const auto pre = preprocess_image(d.image, a.model->input_size(), a.model->input_channels());
    const auto ra = a.model->propose(pre.input), rb = b.model->propose(pre.input);
    c.check(ra.rpn.objectness == rb.rpn.objectness, "objectness bits");
    bool deltas_same = ra.rpn.deltas.size() == rb.rpn.deltas.size();
    for (std::size_t i = 0; deltas_same && i < ra.rpn.deltas.size(); ++i)
      deltas_same = ra.rpn.deltas[i].dx == rb.rpn.deltas[i].dx &&
                    ra.rpn.deltas[i].dy == rb.rpn.deltas[i].dy &&
                    ra.rpn.deltas[i].dw == rb.rpn.deltas[i].dw &&
                    ra.rpn.deltas[i].dh == rb.rpn.deltas[i].dh;
    c.check(deltas_same, "rpn delta bits");
    const std::vector<Box> rois(a.model->anchors().begin(), a.model->anchors().begin() + 64);
    const auto ca = a.model->classify(*ra.features, rois), cb = b.model->classify(*rb.features, rois);
    c.check(ca.probs.data == cb.probs.data, "class probability bits");
    outputs += ra.rpn.objectness.size() + ca.probs.data.size();
  }
  return c.outcome(std::to_string(a.log.size()) + " identical epoch logs, " +
                   std::to_string(outputs) + " bit-identical raw outputs, " +
                   std::to_string(instances) + " instances");
}

Outcome corpus_round_trip() {
  Checker c;
  Rng rng(404);
  for (int trial = 0; trial < 50; ++trial) {
    auto docs = testgen::random_corpus(rng, 1 + int(rng.below(8)));
    validate_corpus(docs);
    const std::string text = serialize_annotations(docs);
    const auto parsed = parse_annotation_text(text);
    c.check(parsed == docs, "parse(write) trial " + std::to_string(trial));
    c.check(serialize_annotations(parsed) == text, "byte stability trial " + std::to_string(trial));
  }

  auto docs = testgen::random_corpus(rng, 25);
  validate_corpus(docs);
  AnnotationStore store(docs, std::nullopt);
  c.check(store.export_corpus() == docs, "export of an untouched import");
  const auto who = store.register_annotator("acceptance");
  const auto session = store.open_session(who.id);
  for (int i = 0; i < 50; ++i) {
    const auto& d = docs[rng.below(docs.size())];
    std::vector<RegionInstance> regs;
    for (int k = 0, n = int(rng.below(6)); k < n; ++k) {
      RegionInstance r;
      r.region_class = kAllRegionClasses[rng.below(kNumRegionClasses)];
      const double x1 = rng.uniform(0, d.width - 2), y1 = rng.uniform(0, d.height - 2);
      const double x2 = rng.uniform(x1 + 1, d.width), y2 = rng.uniform(y1 + 1, d.height);
      r.boundary = {{{x1, y1}, {x2, y1}, {x2, y2}, {x1, y2}}, ShapeKind::kRectangle};
      regs.push_back(std::move(r));
    }
    const bool correct = store.current_annotation(d.doc_id) && rng.uniform() < 0.5;
    store.submit_annotation(session.id, d.doc_id, regs,
                            correct ? RevisionMode::kCorrection : RevisionMode::kFresh);
  }
  const auto exported = store.export_corpus();
  const auto reimported = parse_annotation_text(serialize_annotations(exported));
  c.check(reimported == exported, "export parses back identically");
  AnnotationStore second(reimported, std::nullopt);
  c.check(second.export_corpus() == exported, "import(export) yields the same current annotations");

  const auto summary = store.analytics_summary();
  const auto stats = compute_region_statistics(exported);
  c.check(summary.class_counts.combined == stats.combined, "analytics combined counts");
  c.check(summary.class_counts.per_collection == stats.per_collection,
          "analytics per-collection counts");
  // independent tally
  ClassCounts tally{};
  for (const auto& d : reimported)
    for (const auto& r : d.regions) ++tally[index_of(r.region_class)];
  c.check(summary.class_counts.combined == tally, "analytics vs manual recount");
  return c.outcome("50 corpora, export/import identity, analytics recount");
}

struct Criterion {
  const char* key;
  const char* title;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {"geometry", "Geometry oracles", geometry_oracles},
      {"losses", "Loss correctness", loss_correctness},
      {"anchors", "Anchor contract", anchor_contract},
      {"metrics", "Metric oracle", metric_oracle},
      {"pipeline", "Pipeline constants", pipeline_constants},
      {"overfit", "Desk-scale overfit", desk_overfit},
      {"determinism", "Determinism", determinism},
      {"roundtrip", "Corpus round trip", corpus_round_trip},
  };
  std::set<std::string> wanted(argv + 1, argv + argc);
  int failures = 0;
  for (const auto& crit : all) {
    if (!wanted.empty() && !wanted.count(crit.key)) continue;
    Outcome o;
    try {
      o = crit.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s  %-20s %s\n", o.pass ? "PASS" : "FAIL", crit.title, o.detail.c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  return failures;
}
