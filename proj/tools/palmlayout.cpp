// palmlayout: train, infer, evaluate, synth, serve.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "palmlayout/corpus.hpp"
#include "palmlayout/errors.hpp"
#include "palmlayout/evaluation.hpp"
#include "palmlayout/image.hpp"
#include "palmlayout/inference.hpp"
#include "palmlayout/model.hpp"
#include "palmlayout/service.hpp"
#include "palmlayout/synth.hpp"
#include "palmlayout/training.hpp"

namespace fs = std::filesystem;
using namespace palm;

namespace {

std::optional<Split> parse_split_option(const std::string& s) {
  if (s == "all") return std::nullopt;
  auto split = split_from_string(s);
  if (!split) throw ValidationError("unknown split \"" + s + "\" (train, validation, test, all)");
  return split;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out.flush()) throw IoError("write failed for " + path.string());
}

struct TrainArgs {
  fs::path corpus, manifest, stages, out, images;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

int cmd_train(const TrainArgs& a) {
  TrainingConfig cfg = a.stages.empty() ? TrainingConfig{} : load_training_config(a.stages);
  if (a.seed_set) cfg.seed = a.seed;
  const auto docs = parse_annotation_file(a.corpus);
  const auto manifest = parse_manifest_file(a.manifest);
  const fs::path root = a.images.empty() ? a.corpus.parent_path() : a.images;
  fs::create_directories(a.out);
  write_file(a.out / "config.json", training_config_to_json(cfg));

  std::ofstream log(a.out / "train_log.jsonl", std::ios::trunc);
  TrainingObserver obs;
  obs.message = [](std::string_view m) { std::cerr << m << "\n"; };
  obs.on_epoch = [&](const EpochLog& e) {
    const std::string line = epoch_log_line(e);
    log << line << "\n";
    log.flush();
    std::cout << line << std::endl;
  };
  obs.on_stage_end = [&](const StageConfig& s, const MaskRcnn& model) {
    save_checkpoint(model, a.out / ("stage" + std::to_string(s.stage) + ".ckpt"));
  };
  const auto result = run_training(docs, manifest, png_image_source(root), cfg, obs);
  save_checkpoint(*result.model, a.out / "model.ckpt");
  std::cerr << "wrote " << (a.out / "model.ckpt").string() << "\n";
  return 0;
}

struct InferArgs {
  fs::path ckpt, image, out, corpus, manifest;
  std::string split = "all";
};

int cmd_infer(const InferArgs& a) {
  const auto model = load_checkpoint(a.ckpt);
  std::vector<std::pair<DocumentAnnotation, fs::path>> jobs;
  if (!a.corpus.empty()) {
    auto docs = parse_annotation_file(a.corpus);
    const auto split = parse_split_option(a.split);
    if (split) {
      if (a.manifest.empty()) throw ValidationError("--split needs --manifest");
      docs = select_split(parse_manifest_file(a.manifest), docs, *split);
    }
    const fs::path root = a.image.empty() ? a.corpus.parent_path() : a.image;
    for (auto& d : docs) {
      fs::path p = root / d.image_path;
      d.regions.clear();
      jobs.emplace_back(std::move(d), p);
    }
  } else {
    if (a.image.empty()) throw ValidationError("give --image or --corpus");
    std::vector<fs::path> files;
    if (fs::is_directory(a.image)) {
      for (const auto& e : fs::directory_iterator(a.image))
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
      std::sort(files.begin(), files.end());
    } else {
      files.push_back(a.image);
    }
    for (const auto& f : files) {
      DocumentAnnotation d;
      d.doc_id = f.stem().string();
      d.image_path = f.filename().string();
      d.script = "unknown";
      jobs.emplace_back(std::move(d), f);
    }
  }

  std::vector<DocumentAnnotation> out;
  for (auto& [doc, path] : jobs) {
    const Image img = read_png(path);
    InferenceTrace trace;
    const ParsedLayout layout = run_inference(img, *model, InferenceConfig{}, &trace);
    doc.width = img.width();
    doc.height = img.height();
    doc.regions = layout_to_regions(layout);
    std::cerr << doc.doc_id << ": " << trace.proposals << " proposals, " << trace.detections
              << " detections, " << trace.final_instances << " instances\n";
    out.push_back(std::move(doc));
  }
  write_file(a.out, serialize_annotations(out));
  return 0;
}

struct EvalArgs {
  fs::path pred, gt, manifest, out;
  std::string split = "test";
};

int cmd_evaluate(const EvalArgs& a) {
  const auto preds = parse_annotation_file(a.pred);
  const auto gts = parse_annotation_file(a.gt);
  const auto manifest = parse_manifest_file(a.manifest);
  const auto report = emit_report(preds, gts, manifest, parse_split_option(a.split));
  const std::string text = render_report_text(report);
  write_file(a.out, report_to_json(report));
  fs::path txt = a.out;
  txt += ".txt";
  write_file(txt, text);
  std::cout << text;
  return 0;
}

struct SynthArgs {
  fs::path config, out;
  int n = 0;
  std::uint64_t seed = 0;
  double train = 0.6, validation = 0.2, test = 0.2;
};

int cmd_synth(const SynthArgs& a) {
  const SynthConfig cfg = a.config.empty() ? SynthConfig{} : load_synth_config(a.config);
  const auto corpus = generate_corpus(cfg, a.n, {a.train, a.validation, a.test}, a.seed);
  write_synth_corpus(corpus, a.out);
  std::cerr << "wrote " << corpus.documents.size() << " documents to " << a.out.string() << "\n";
  return 0;
}

struct ServeArgs {
  fs::path corpus_dir, store;
  std::string host = "127.0.0.1";
  int port = 8080;
};

int cmd_serve(const ServeArgs& a) {
  run_annotation_server(a.corpus_dir, a.store, a.host, a.port);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instance-level layout parsing for historical manuscripts"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train the instance segmentation model");
  train->add_option("--corpus", ta.corpus, "Annotation file")->required()->check(CLI::ExistingFile);
  train->add_option("--manifest", ta.manifest, "Split manifest")->required()->check(CLI::ExistingFile);
  train->add_option("--stages", ta.stages, "Training config (stages, optimizer, model)")
      ->check(CLI::ExistingFile);
  train->add_option("--seed", ta.seed, "Random seed (overrides the config)")
      ->each([&](const std::string&) { ta.seed_set = true; });
  train->add_option("--out", ta.out, "Checkpoint directory")->required();
  train->add_option("--images", ta.images, "Image root (default: the corpus file's directory)");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "Predict regions for images");
  infer->add_option("--ckpt", ia.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  infer->add_option("--image", ia.image, "PNG file, directory of PNGs, or image root with --corpus");
  infer->add_option("--corpus", ia.corpus, "Take documents and metadata from this annotation file")
      ->check(CLI::ExistingFile);
  infer->add_option("--manifest", ia.manifest, "Split manifest for --split");
  infer->add_option("--split", ia.split, "train, validation, test or all");
  infer->add_option("--out", ia.out, "Output annotation file")->required();

  EvalArgs ea;
  auto* eval = app.add_subcommand("evaluate", "Score predictions against ground truth");
  eval->add_option("--pred", ea.pred, "Predicted annotation file")->required()->check(CLI::ExistingFile);
  eval->add_option("--gt", ea.gt, "Ground-truth annotation file")->required()->check(CLI::ExistingFile);
  eval->add_option("--manifest", ea.manifest, "Split manifest")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", ea.split, "train, validation, test or all")->capture_default_str();
  eval->add_option("--out", ea.out, "Report path (JSON; tables go to <out>.txt)")->required();

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus");
  synth->add_option("--config", sa.config, "Synth config")->check(CLI::ExistingFile);
  synth->add_option("--n", sa.n, "Number of documents")->required()->check(CLI::PositiveNumber);
  synth->add_option("--seed", sa.seed, "Random seed");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--train", sa.train, "Train fraction")->capture_default_str();
  synth->add_option("--validation", sa.validation, "Validation fraction")->capture_default_str();
  synth->add_option("--test", sa.test, "Test fraction")->capture_default_str();

  ServeArgs va;
  auto* serve = app.add_subcommand("serve", "Run the annotation service");
  serve->add_option("--corpus-dir", va.corpus_dir, "Directory holding corpus.json and images")
      ->required()
      ->check(CLI::ExistingDirectory);
  serve->add_option("--store", va.store, "Revision log file")->required();
  serve->add_option("--port", va.port, "Port")->capture_default_str();
  serve->add_option("--host", va.host, "Bind address")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(ta);
    if (*infer) return cmd_infer(ia);
    if (*eval) return cmd_evaluate(ea);
    if (*synth) return cmd_synth(sa);
    if (*serve) return cmd_serve(va);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
