#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "palmlayout/corpus.hpp"
#include "palmlayout/image.hpp"

namespace palm {

struct IntRange {
  int lo = 0;
  int hi = 0;
};

struct RealRange {
  double lo = 0.0;
  double hi = 0.0;
};

enum class PageStacking { kHorizontal, kVertical };

/// Procedural manuscript generator settings. All lengths are in pixels.
struct SynthConfig {
  int width = 1024;
  int height = 768;
  int pages_per_image = 1;
  PageStacking stacking = PageStacking::kVertical;
  IntRange lines_per_page{5, 8};
  double waviness = 4.0;        // amplitude of the line centre curve
  IntRange line_height{30, 40}; // band thickness
  IntRange line_spacing{12, 24};// vertical gap between bands
  IntRange holes{0, 2};
  RealRange hole_radius{10.0, 18.0};
  IntRange degradation_blobs{0, 2};
  bool library_marker = false;
  bool decorator = false;
  bool picture = false;
  bool boundary_line = false;
  std::string script = "synthetic";
};

// Throws ValidationError for degenerate ranges, small images or a layout that
// cannot fit the worst-case line stack.
void validate_synth_config(const SynthConfig& cfg);

SynthConfig parse_synth_config(std::string_view json_text);
SynthConfig load_synth_config(const std::filesystem::path& path);
std::string synth_config_to_json(const SynthConfig& cfg);

struct SynthDocument {
  Image image;  // 8-bit gray
  DocumentAnnotation annotation;
};

// Fully determined by (cfg, seed).
SynthDocument generate_document(const SynthConfig& cfg, std::uint64_t seed,
                                const std::string& doc_id = "synth");

struct SplitFractions {
  double train = 0.6;
  double validation = 0.2;
  double test = 0.2;
};

// floor(n * fraction) per split; the remainder goes to train.
std::array<int, 3> split_sizes(int n_docs, const SplitFractions& fractions);

struct SynthCorpus {
  std::vector<SynthDocument> documents;
  CorpusManifest manifest;

  std::vector<DocumentAnnotation> annotations() const;
};

SynthCorpus generate_corpus(const SynthConfig& cfg, int n_docs, const SplitFractions& fractions,
                            std::uint64_t seed);

// Writes images/<doc_id>.png, corpus.json and manifest.json under `dir`.
void write_synth_corpus(const SynthCorpus& corpus, const std::filesystem::path& dir);

}  // namespace palm
