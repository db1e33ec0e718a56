#include <benchmark/benchmark.h>

#include <cmath>

#include "palmlayout/evaluation.hpp"
#include "palmlayout/geometry.hpp"
#include "palmlayout/inference.hpp"
#include "palmlayout/model.hpp"
#include "palmlayout/nn.hpp"
#include "palmlayout/rng.hpp"
#include "palmlayout/synth.hpp"

using namespace palm;

namespace {

std::vector<Box> random_boxes(Rng& rng, std::size_t n) {
  std::vector<Box> boxes;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.uniform(0, 1000), y = rng.uniform(0, 1000);
    boxes.push_back({x, y, x + rng.uniform(10, 300), y + rng.uniform(5, 60)});
  }
  return boxes;
}

void BM_NmsBoxes(benchmark::State& state) {
  Rng rng(1);
  const auto boxes = random_boxes(rng, std::size_t(state.range(0)));
  std::vector<double> scores;
  for (std::size_t i = 0; i < boxes.size(); ++i) scores.push_back(rng.uniform());
  for (auto _ : state) benchmark::DoNotOptimize(nms_boxes(boxes, scores, 0.7));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_NmsBoxes)->Arg(100)->Arg(1000)->Arg(6000);

void BM_MaskIou(benchmark::State& state) {
  const int side = int(state.range(0));
  BinaryMask a(side, side), b(side, side);
  Rng rng(2);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      a.set(r, c, rng.uniform() < 0.3);
      b.set(r, c, rng.uniform() < 0.3);
    }
  for (auto _ : state) benchmark::DoNotOptimize(mask_iou(a, b));
  state.SetBytesProcessed(state.iterations() * 2 * std::int64_t(side) * side);
}
BENCHMARK(BM_MaskIou)->Arg(28)->Arg(512)->Arg(1024);

void BM_RasterizePolygon(benchmark::State& state) {
  Polygon p;
  p.kind = ShapeKind::kPolygon;
  for (int i = 0; i < 64; ++i) {
    const double t = 6.283185307179586 * i / 64;
    p.vertices.push_back({512 + 400 * std::cos(t), 384 + 60 * std::sin(3 * t) + 200 * std::sin(t)});
  }
  for (auto _ : state) benchmark::DoNotOptimize(rasterize_polygon(p, 768, 1024));
}
BENCHMARK(BM_RasterizePolygon);

void BM_Conv3x3(benchmark::State& state) {
  const int ch = int(state.range(0)), side = int(state.range(1));
  nn::ParameterStore store;
  Rng rng(3);
  const auto conv = nn::make_conv(store, "c", ch, ch, 3, 1, nn::ParamGroup::kHeads, rng);
  nn::Tensor x(ch, side, side, 0.5f);
  for (auto _ : state) benchmark::DoNotOptimize(nn::conv2d_forward(conv, x));
  state.SetItemsProcessed(state.iterations() * std::int64_t(ch) * ch * 9 * side * side);
}
BENCHMARK(BM_Conv3x3)->Args({16, 128})->Args({64, 64})->Unit(benchmark::kMillisecond);

void BM_DeskInference(benchmark::State& state) {
  const MaskRcnn model(desk_model_config(), 7);
  SynthConfig cfg;
  const auto doc = generate_document(cfg, 11);
  InferenceConfig icfg;
  icfg.detection_score_floor = 0.05;
  for (auto _ : state) benchmark::DoNotOptimize(run_inference(doc.image, model, icfg));
}
BENCHMARK(BM_DeskInference)->Unit(benchmark::kMillisecond);

void BM_ApSummary(benchmark::State& state) {
  SynthConfig cfg;
  const auto corpus = generate_corpus(cfg, 8, {1.0, 0.0, 0.0}, 3);
  const auto docs = corpus.annotations();
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_documents(docs, docs));
}
BENCHMARK(BM_ApSummary)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
