#include <cmath>
#include <map>

#include "doctest.h"
#include "palmlayout/errors.hpp"
#include "palmlayout/synth.hpp"
#include "palmlayout/training.hpp"
#include "support/oracles.hpp"

using namespace palm;

namespace {

Polygon rect(double x1, double y1, double x2, double y2) {
  return Polygon{{{x1, y1}, {x2, y1}, {x2, y2}, {x1, y2}}, ShapeKind::kPolygon};
}

// Small enough to run a few optimizer steps in well under a second.
TrainingConfig tiny_training(int steps) {
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
  tc.steps_per_epoch = steps;
  tc.seed = 4;
  return tc;
}

struct TinyCorpus {
  SynthCorpus corpus;
  std::vector<DocumentAnnotation> docs;
  ImageSource images;
};

TinyCorpus tiny_corpus(int n) {
  SynthConfig cfg;
  cfg.width = 256;
  cfg.height = 256;
  cfg.lines_per_page = {2, 3};
  cfg.line_height = {14, 18};
  cfg.line_spacing = {8, 12};
  cfg.hole_radius = {5.0, 8.0};
  TinyCorpus t{generate_corpus(cfg, n, {1.0, 0.0, 0.0}, 11), {}, {}};
  t.docs = t.corpus.annotations();
  std::map<std::string, Image> by_id;
  for (const auto& d : t.corpus.documents) by_id[d.annotation.doc_id] = d.image;
  t.images = [by_id](const DocumentAnnotation& d) { return by_id.at(d.doc_id); };
  return t;
}

}  // namespace

TEST_CASE("preprocess caps width and pads to a square") {
  auto wide = preprocess_image(Image(2048, 512, 1), 1024, 1);
  CHECK(wide.scale == 0.5);
  CHECK(wide.content_width == 1024);
  CHECK(wide.content_height == 256);
  CHECK(wide.input.height == 1024);
  CHECK(wide.input.width == 1024);

  auto small = preprocess_image(Image(800, 600, 3, 200), 1024, 3);
  CHECK(small.scale == 1.0);
  CHECK(small.content_width == 800);
  CHECK(small.content_height == 600);
  CHECK(small.input.channels == 3);
  // content then zero padding
  CHECK(small.input.at(0, 599, 799) == doctest::Approx(200.0 / 255.0));
  CHECK(small.input.at(0, 600, 0) == 0.0f);
  CHECK(small.input.at(2, 0, 800) == 0.0f);

  auto tall = preprocess_image(Image(500, 3000, 1), 1024, 1);
  CHECK(tall.content_height <= 1024);
  CHECK(tall.scale == doctest::Approx(1024.0 / 3000.0));

  CHECK_THROWS_AS(preprocess_image(Image(0, 10, 1), 1024, 1), std::invalid_argument);
}

TEST_CASE("preprocess round trip recovers the original dimensions") {
  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    const int w = 1 + static_cast<int>(rng.uniform() * 4000);
    const int h = 1 + static_cast<int>(rng.uniform() * 4000);
    auto p = preprocess_image(Image(w, h, 1), 1024, 1);
    CHECK(p.content_width <= 1024);
    CHECK(p.content_height <= 1024);
    // content is rounded to whole input pixels, so mapping back is exact to within one of them
    const Box back = p.to_original(p.content_box());
    CHECK(std::abs(back.x2 - w) <= 0.5 / p.scale + 1e-9);
    CHECK(std::abs(back.y2 - h) <= 0.5 / p.scale + 1e-9);
    CHECK(p.original_width == w);
    CHECK(p.original_height == h);
  }
}

TEST_CASE("mask target examples") {
  RegionInstance full{RegionClass::kHole, rect(10, 10, 38, 38), {}, 0, {}};
  auto ones = prepare_mask_target(full, {10, 10, 38, 38}, 64, 64);
  CHECK(ones.count() == 28 * 28);

  RegionInstance far{RegionClass::kHole, rect(50, 50, 60, 60), {}, 0, {}};
  CHECK(prepare_mask_target(far, {10, 10, 38, 38}, 64, 64).count() == 0);

  RegionInstance half{RegionClass::kHole, rect(0, 0, 28, 56), {}, 0, {}};
  const auto h = prepare_mask_target(half, {0, 0, 56, 56}, 64, 64);
  CHECK(std::abs(static_cast<long>(h.count()) - 392) <= 28);

  CHECK_THROWS_AS(prepare_mask_target(full, {5, 5, 5, 9}, 64, 64), std::invalid_argument);
}

TEST_CASE("anchor targets match an exhaustive IoU table") {
  CHECK_THROWS_AS(assign_anchor_targets({}, {}), std::invalid_argument);
  Rng rng(31);
  auto rbox = [&] {
    const double x = rng.uniform() * 80, y = rng.uniform() * 80;
    return Box{x, y, x + 4 + rng.uniform() * 30, y + 4 + rng.uniform() * 30};
  };
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Box> anchors, gts;
    for (int i = 0; i < 30; ++i) anchors.push_back(rbox());
    for (int i = 0; i < 4; ++i) gts.push_back(rbox());
    // duplicate anchors on a gt exercise the positive and tie paths
    if (trial % 3 == 0) anchors[trial % 30] = gts[1];
    if (trial % 5 == 0) gts[3] = gts[2];

    std::vector<std::vector<double>> table(30, std::vector<double>(4));
    for (int a = 0; a < 30; ++a)
      for (int g = 0; g < 4; ++g) table[a][g] = oracle::box_iou(anchors[a], gts[g]);
    std::vector<double> gt_max(4, 0.0);
    for (int g = 0; g < 4; ++g)
      for (int a = 0; a < 30; ++a) gt_max[g] = std::max(gt_max[g], table[a][g]);

    const auto t = assign_anchor_targets(anchors, gts);
    for (int a = 0; a < 30; ++a) {
      int best = -1;
      double best_iou = 0.0;
      for (int g = 0; g < 4; ++g)
        if (table[a][g] > best_iou) {
          best_iou = table[a][g];
          best = g;
        }
      bool argmax_of_some = false;
      for (int g = 0; g < 4; ++g)
        if (gt_max[g] > 0.0 && table[a][g] == gt_max[g]) argmax_of_some = true;
      AnchorLabel expect = AnchorLabel::kIgnore;
      if (best_iou >= 0.7 || argmax_of_some) expect = AnchorLabel::kPositive;
      else if (best_iou < 0.3) expect = AnchorLabel::kNegative;
      CHECK(t.labels[a] == expect);
      CHECK(t.matched_gt[a] == best);
    }
  }
}

TEST_CASE("anchor targets trivial cases") {
  std::vector<Box> anchors{{0, 0, 10, 10}, {20, 20, 40, 40}, {50, 50, 60, 60}};
  const auto none = assign_anchor_targets(anchors, {});
  for (auto l : none.labels) CHECK(l == AnchorLabel::kNegative);
  std::vector<Box> gts{{20, 20, 40, 40}};
  const auto one = assign_anchor_targets(anchors, gts);
  CHECK(one.labels[1] == AnchorLabel::kPositive);
  CHECK(one.matched_gt[1] == 0);
  CHECK(one.labels[0] == AnchorLabel::kNegative);
}

TEST_CASE("default training config is the three-stage schedule") {
  const TrainingConfig cfg;
  REQUIRE(cfg.stages.size() == 3);
  CHECK(cfg.stages[0].epochs == 30);
  CHECK(cfg.stages[0].learning_rate == 1e-3);
  CHECK(cfg.stages[0].scope == TrainableScope::kHeadsOnly);
  CHECK(cfg.stages[0].mask_loss == MaskLossKind::kBce);
  CHECK(cfg.stages[1].epochs == 20);
  CHECK(cfg.stages[1].learning_rate == 1e-3);
  CHECK(cfg.stages[1].scope == TrainableScope::kStage4AndUp);
  CHECK(cfg.stages[1].mask_loss == MaskLossKind::kFocal);
  CHECK(cfg.stages[2].epochs == 15);
  CHECK(cfg.stages[2].learning_rate == 1e-4);
  CHECK(cfg.stages[2].scope == TrainableScope::kAll);
  CHECK(cfg.stages[2].mask_loss == MaskLossKind::kFocal);
  CHECK(cfg.optimizer.momentum == 0.9);
  CHECK(cfg.optimizer.weight_decay == 1e-3);
  CHECK(cfg.optimizer.batch_size == 1);
  CHECK(cfg.optimizer.clip_norm == 0.5);
  CHECK_FALSE(cfg.optimizer.clip_per_tensor);
}

TEST_CASE("training config json round trip and errors") {
  auto cfg = parse_training_config(R"({"model":"desk","seed":9,"steps_per_epoch":12,
    "stages":[{"stage":1,"epochs":3,"learning_rate":0.001,"trainable":"heads_only","mask_loss":"bce"}],
    "optimizer":{"clip_mode":"per_tensor"}})");
  CHECK(cfg.model == desk_model_config());
  CHECK(cfg.seed == 9);
  CHECK(cfg.steps_per_epoch == 12);
  REQUIRE(cfg.stages.size() == 1);
  CHECK(cfg.stages[0].epochs == 3);
  CHECK(cfg.optimizer.clip_per_tensor);
  const auto again = parse_training_config(training_config_to_json(cfg));
  CHECK(training_config_to_json(again) == training_config_to_json(cfg));
  CHECK(again.model == cfg.model);

  CHECK_THROWS_AS(parse_training_config("{"), ParseError);
  CHECK_THROWS_AS(parse_training_config(R"({"optimizer":{"batch_size":2}})"), ValidationError);
  CHECK_THROWS_AS(parse_training_config(R"({"optimizer":{"clip_mode":"layer"}})"), ValidationError);
  CHECK_THROWS_AS(parse_training_config(R"({"stages":[{"stage":1,"epochs":1,"learning_rate":0}]})"),
                  ValidationError);
}

TEST_CASE("grad plans follow the trainable scope") {
  using G = nn::ParamGroup;
  const auto heads = grad_plan_for(TrainableScope::kHeadsOnly);
  CHECK(heads.group(G::kHeads));
  for (auto g : {G::kStem, G::kRes2, G::kRes3, G::kRes4, G::kRes5}) CHECK_FALSE(heads.group(g));
  const auto mid = grad_plan_for(TrainableScope::kStage4AndUp);
  for (auto g : {G::kRes4, G::kRes5, G::kHeads}) CHECK(mid.group(g));
  for (auto g : {G::kStem, G::kRes2, G::kRes3}) CHECK_FALSE(mid.group(g));
  CHECK_FALSE(mid.any_backbone_at_or_below(2));
  CHECK(mid.any_backbone_at_or_below(3));
  const auto all = grad_plan_for(TrainableScope::kAll);
  for (auto g : {G::kStem, G::kRes2, G::kRes3, G::kRes4, G::kRes5, G::kHeads}) CHECK(all.group(g));
}

TEST_CASE("training freezes parameters outside the stage scope") {
  auto t = tiny_corpus(1);
  auto tc = tiny_training(3);
  tc.stages = {{1, 1, 1e-3, TrainableScope::kHeadsOnly, MaskLossKind::kBce},
               {2, 1, 1e-3, TrainableScope::kStage4AndUp, MaskLossKind::kFocal}};
  std::map<std::string, nn::FloatBuffer> before;
  bool checked = false;
  TrainingObserver obs;
  obs.on_stage_begin = [&](const StageConfig&, const MaskRcnn& m) {
    before.clear();
    for (const auto* p : m.parameters().all()) before[p->name] = p->value;
  };
  obs.on_stage_end = [&](const StageConfig& st, const MaskRcnn& m) {
    const auto plan = grad_plan_for(st.scope);
    bool heads_moved = false;
    for (const auto* p : m.parameters().all()) {
      if (!plan.group(p->group)) CHECK(p->value == before.at(p->name));
      else if (p->group == nn::ParamGroup::kHeads && p->value != before.at(p->name))
        heads_moved = true;
    }
    CHECK(heads_moved);
    checked = true;
  };
  run_training(t.docs, t.corpus.manifest, t.images, tc, obs);
  CHECK(checked);
}

TEST_CASE("training clips the global gradient norm and is deterministic") {
  auto t = tiny_corpus(3);
  const auto tc = tiny_training(4);
  std::vector<StepRecord> steps;
  TrainingObserver obs;
  obs.on_step = [&](const StepRecord& r) { steps.push_back(r); };
  const auto a = run_training(t.docs, t.corpus.manifest, t.images, tc, obs);
  REQUIRE(steps.size() == 16);
  for (const auto& s : steps) {
    CHECK(s.clipped_norm <= 0.5 + 1e-6);
    CHECK(std::isfinite(s.total));
    if (s.grad_norm <= 0.5) CHECK(s.clipped_norm == doctest::Approx(s.grad_norm));
  }
  REQUIRE(a.log.size() == 4);
  CHECK(a.log[0].stage == 1);
  CHECK(a.log[3].global_epoch == 4);

  const auto b = run_training(t.docs, t.corpus.manifest, t.images, tc);
  REQUIRE(b.log.size() == a.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i)
    CHECK(epoch_log_line(a.log[i]) == epoch_log_line(b.log[i]));
  const auto pa = a.model->parameters().all();
  const auto pb = b.model->parameters().all();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    INFO(pa[i]->name);
    CHECK(pa[i]->value == pb[i]->value);
  }
}

TEST_CASE("training rejects an empty train split and empty stage list") {
  auto t = tiny_corpus(2);
  CorpusManifest test_only = t.corpus.manifest;
  for (auto& [id, split] : test_only.splits) split = Split::kTest;
  CHECK_THROWS_AS(run_training(t.docs, test_only, t.images, tiny_training(1)), ValidationError);
  auto tc = tiny_training(1);
  tc.stages.clear();
  CHECK_THROWS_AS(run_training(t.docs, t.corpus.manifest, t.images, tc), ValidationError);
}
