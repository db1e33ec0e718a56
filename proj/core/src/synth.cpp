#include "palmlayout/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "palmlayout/errors.hpp"
#include "palmlayout/geometry.hpp"
#include "palmlayout/rng.hpp"

namespace palm {

using nlohmann::json;

namespace {

constexpr int kMaxPageJitter = 8;
constexpr double kPageGapFraction = 0.03;
constexpr double kMarginFraction = 0.05;
constexpr int kMarginPad = 6;

struct Rect {
  int x0, y0, x1, y1;
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
};

Rect page_cell(const SynthConfig& cfg, int page) {
  const int n = cfg.pages_per_image;
  if (cfg.stacking == PageStacking::kHorizontal) {
    const int w = cfg.width / n;
    return {page * w, 0, page == n - 1 ? cfg.width : (page + 1) * w, cfg.height};
  }
  const int h = cfg.height / n;
  return {0, page * h, cfg.width, page == n - 1 ? cfg.height : (page + 1) * h};
}

int page_gap(const Rect& cell) {
  return static_cast<int>(std::lround(kPageGapFraction * std::min(cell.width(), cell.height())));
}

int vertical_margin(int page_height) {
  return kMarginPad + static_cast<int>(std::ceil(kMarginFraction * page_height));
}

void check_range(const IntRange& r, const char* name, int min_lo) {
  if (r.lo < min_lo || r.hi < r.lo)
    throw ValidationError(std::string("synth config: ") + name + " range [" +
                          std::to_string(r.lo) + ", " + std::to_string(r.hi) + "] is invalid");
}

double snap(double v) { return std::round(v * 4.0) / 4.0; }

Polygon rectangle(double x0, double y0, double x1, double y1) {
  return {{{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}}, ShapeKind::kRectangle};
}

Polygon circle(double cx, double cy, double r, int n = 24) {
  Polygon p;
  for (int i = 0; i < n; ++i) {
    const double t = 2.0 * std::numbers::pi * i / n;
    p.vertices.push_back({snap(cx + r * std::cos(t)), snap(cy + r * std::sin(t))});
  }
  return p;
}

class Canvas {
 public:
  explicit Canvas(int w, int h) : image_(w, h, 1), values_(static_cast<std::size_t>(w) * h, 0.0) {}

  double& at(int y, int x) { return values_[static_cast<std::size_t>(y) * image_.width() + x]; }
  int width() const { return image_.width(); }
  int height() const { return image_.height(); }

  template <typename F>
  void apply(const BinaryMask& mask, F&& f) {
    for (int y = 0; y < height(); ++y)
      for (int x = 0; x < width(); ++x)
        if (mask.at(y, x)) f(y, x, at(y, x));
  }

  Image finish(Rng& rng, double noise_sigma) {
    for (int y = 0; y < height(); ++y)
      for (int x = 0; x < width(); ++x) {
        const double v = at(y, x) + noise_sigma * rng.normal();
        image_.set(y, x, static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)));
      }
    return image_;
  }

 private:
  Image image_;
  std::vector<double> values_;
};

struct LineBand {
  double x_start, x_end;
  double y_centre, amplitude, period, phase;
  double thickness;
  double centre_at(double x) const {
    return y_centre + amplitude * std::sin(2.0 * std::numbers::pi * (x - x_start) / period + phase);
  }
  Polygon polygon() const {
    Polygon p;
    const int n = std::max(2, static_cast<int>(std::ceil((x_end - x_start) / 16.0)) + 1);
    for (int i = 0; i < n; ++i) {
      const double x = x_start + (x_end - x_start) * i / (n - 1);
      p.vertices.push_back({snap(x), snap(centre_at(x) - 0.5 * thickness)});
    }
    for (int i = n - 1; i >= 0; --i) {
      const double x = x_start + (x_end - x_start) * i / (n - 1);
      p.vertices.push_back({snap(x), snap(centre_at(x) + 0.5 * thickness)});
    }
    return p;
  }
};

void add_region(DocumentAnnotation& doc, RegionClass c, Polygon p) {
  RegionInstance r;
  r.region_class = c;
  r.boundary = std::move(p);
  doc.regions.push_back(std::move(r));
}

}  // namespace

void validate_synth_config(const SynthConfig& cfg) {
  if (cfg.width < 256 || cfg.height < 256)
    throw ValidationError("synth config: image dimensions must be at least 256");
  if (cfg.pages_per_image != 1 && cfg.pages_per_image != 2)
    throw ValidationError("synth config: pages_per_image must be 1 or 2");
  check_range(cfg.lines_per_page, "lines_per_page", 0);
  check_range(cfg.line_height, "line_height", 4);
  check_range(cfg.line_spacing, "line_spacing", 0);
  check_range(cfg.holes, "holes", 0);
  check_range(cfg.degradation_blobs, "degradation_blobs", 0);
  if (!(cfg.hole_radius.lo >= 2.0) || cfg.hole_radius.hi < cfg.hole_radius.lo)
    throw ValidationError("synth config: hole_radius range is invalid");
  if (!(cfg.waviness >= 0.0)) throw ValidationError("synth config: waviness must be >= 0");

  // Worst case: every draw at the top of its range on the smallest page.
  for (int page = 0; page < cfg.pages_per_image; ++page) {
    const Rect cell = page_cell(cfg, page);
    const int page_h = cell.height() - 2 * (page_gap(cell) + kMaxPageJitter);
    const int page_w = cell.width() - 2 * (page_gap(cell) + kMaxPageJitter);
    const int n = cfg.lines_per_page.hi;
    const double need = n * cfg.line_height.hi + std::max(0, n - 1) * cfg.line_spacing.hi +
                        2.0 * cfg.waviness + 2 * vertical_margin(cell.height());
    if (page_h < 64 || page_w < 64 || need > page_h)
      throw ValidationError(
          "synth config: " + std::to_string(n) + " lines of height " +
          std::to_string(cfg.line_height.hi) + " with spacing " +
          std::to_string(cfg.line_spacing.hi) + " need " + std::to_string(static_cast<int>(need)) +
          " px but a page offers " + std::to_string(page_h) +
          " px; reduce lines_per_page, line_height or line_spacing, or enlarge the image");
  }
}

SynthDocument generate_document(const SynthConfig& cfg, std::uint64_t seed,
                                const std::string& doc_id) {
  validate_synth_config(cfg);
  Rng rng(seed);
  SynthDocument out;
  auto& doc = out.annotation;
  doc.doc_id = doc_id;
  doc.image_path = "images/" + doc_id + ".png";
  doc.width = cfg.width;
  doc.height = cfg.height;
  doc.collection = Collection::kSynthetic;
  doc.script = cfg.script;

  Canvas canvas(cfg.width, cfg.height);
  const double backdrop = rng.uniform(35.0, 70.0);
  for (int y = 0; y < cfg.height; ++y)
    for (int x = 0; x < cfg.width; ++x) canvas.at(y, x) = backdrop;

  for (int page = 0; page < cfg.pages_per_image; ++page) {
    const Rect cell = page_cell(cfg, page);
    const int gap = page_gap(cell);
    const Rect pr{cell.x0 + gap + rng.uniform_int(0, kMaxPageJitter),
                  cell.y0 + gap + rng.uniform_int(0, kMaxPageJitter),
                  cell.x1 - gap - rng.uniform_int(0, kMaxPageJitter),
                  cell.y1 - gap - rng.uniform_int(0, kMaxPageJitter)};
    const Polygon page_poly = rectangle(pr.x0, pr.y0, pr.x1, pr.y1);
    add_region(doc, RegionClass::kPageBoundary, page_poly);

    // Leaf tone with horizontal fibre streaks.
    const double tone = rng.uniform(185.0, 215.0);
    double streak = 0.0;
    for (int y = pr.y0; y < pr.y1; ++y) {
      streak = std::clamp(streak + rng.normal() * 1.5, -10.0, 10.0);
      for (int x = pr.x0; x < pr.x1; ++x) canvas.at(y, x) = tone + streak;
    }

    // Text lines.
    const int margin_y = vertical_margin(cell.height());
    const double margin_x = std::max(8.0, 0.06 * pr.width());
    const int n_lines = rng.uniform_int(cfg.lines_per_page.lo, cfg.lines_per_page.hi);
    std::vector<LineBand> lines;
    double cursor = pr.y0 + margin_y + cfg.waviness;
    for (int i = 0; i < n_lines; ++i) {
      LineBand band;
      band.thickness = rng.uniform_int(cfg.line_height.lo, cfg.line_height.hi);
      band.x_start = pr.x0 + margin_x * rng.uniform(0.8, 1.2);
      band.x_end = pr.x1 - margin_x * rng.uniform(0.8, 1.2) - (rng.uniform() < 0.25 ? rng.uniform(0.0, 0.3) * pr.width() : 0.0);
      band.amplitude = cfg.waviness * rng.uniform(0.5, 1.0);
      band.period = rng.uniform(180.0, 420.0);
      band.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      band.y_centre = cursor + 0.5 * band.thickness;
      cursor += band.thickness + rng.uniform_int(cfg.line_spacing.lo, cfg.line_spacing.hi);
      lines.push_back(band);
    }

    std::vector<BinaryMask> line_masks;
    for (const auto& band : lines) {
      const Polygon poly = band.polygon();
      add_region(doc, RegionClass::kCharacterLineSegment, poly);
      BinaryMask mask = rasterize_polygon(poly, cfg.height, cfg.width);
      // Glyph-like blobs, clipped to the band so the polygon delimits the ink.
      double x = band.x_start + rng.uniform(1.0, 4.0);
      while (x < band.x_end - 3.0) {
        const double bw = rng.uniform(2.0, 5.0);
        const double bh = 0.5 * band.thickness * rng.uniform(0.55, 0.9);
        const double cy = band.centre_at(x) + rng.uniform(-2.0, 2.0);
        const double ink = rng.uniform(25.0, 75.0);
        const int y_lo = static_cast<int>(std::floor(cy - bh));
        const int y_hi = static_cast<int>(std::ceil(cy + bh));
        const int x_lo = static_cast<int>(std::floor(x - bw));
        const int x_hi = static_cast<int>(std::ceil(x + bw));
        for (int yy = std::max(0, y_lo); yy <= std::min(cfg.height - 1, y_hi); ++yy)
          for (int xx = std::max(0, x_lo); xx <= std::min(cfg.width - 1, x_hi); ++xx) {
            const double u = (xx + 0.5 - x) / bw;
            const double v = (yy + 0.5 - cy) / bh;
            if (u * u + v * v <= 1.0 && mask.at(yy, xx)) canvas.at(yy, xx) = ink;
          }
        x += 2.0 * bw + rng.uniform(1.5, 4.0) + (rng.uniform() < 0.15 ? rng.uniform(8.0, 18.0) : 0.0);
      }
      line_masks.push_back(std::move(mask));
    }

    // Optional furniture.
    if (cfg.boundary_line) {
      const double bx = pr.x0 + 0.45 * margin_x;
      const Polygon bl = rectangle(snap(bx), pr.y0 + margin_y * 0.5, snap(bx + 3.0),
                                   pr.y1 - margin_y * 0.5);
      add_region(doc, RegionClass::kBoundaryLine, bl);
      canvas.apply(rasterize_polygon(bl, cfg.height, cfg.width),
                   [](int, int, double& v) { v = 45.0; });
    }
    if (cfg.library_marker) {
      const double w = rng.uniform(40.0, 60.0), h = rng.uniform(24.0, 34.0);
      const double x0 = snap(pr.x1 - margin_x - w - rng.uniform(0.0, 40.0));
      const double y0 = snap(pr.y0 + margin_y * 0.3);
      const Polygon lm = rectangle(x0, y0, x0 + snap(w), y0 + snap(h));
      add_region(doc, RegionClass::kLibraryMarker, lm);
      canvas.apply(rasterize_polygon(lm, cfg.height, cfg.width), [&](int y, int x, double& v) {
        const bool rim = x < x0 + 3 || x >= x0 + w - 3 || y < y0 + 3 || y >= y0 + h - 3;
        v = rim || ((x + y) % 7 == 0) ? 60.0 : 150.0;
      });
    }
    if (cfg.decorator) {
      const double r = rng.uniform(18.0, 28.0);
      const double cx = rng.uniform(pr.x0 + r + 4, pr.x1 - r - 4);
      const double cy = rng.uniform(pr.y0 + r + 4, pr.y1 - r - 4);
      Polygon d;
      for (int i = 0; i < 16; ++i) {
        const double t = 2.0 * std::numbers::pi * i / 16;
        const double rr = i % 2 == 0 ? r : 0.55 * r;
        d.vertices.push_back({snap(cx + rr * std::cos(t)), snap(cy + rr * std::sin(t))});
      }
      add_region(doc, RegionClass::kDecorator, d);
      canvas.apply(rasterize_polygon(d, cfg.height, cfg.width),
                   [](int, int, double& v) { v = 95.0; });
    }
    if (cfg.picture) {
      const double w = rng.uniform(80.0, 140.0), h = rng.uniform(60.0, 100.0);
      const double x0 = snap(rng.uniform(pr.x0 + 4, pr.x1 - w - 4));
      const double y0 = snap(rng.uniform(pr.y0 + 4, pr.y1 - h - 4));
      const Polygon p = rectangle(x0, y0, x0 + snap(w), y0 + snap(h));
      add_region(doc, RegionClass::kPicture, p);
      canvas.apply(rasterize_polygon(p, cfg.height, cfg.width), [](int y, int x, double& v) {
        v = ((x / 4 + y / 4) % 2 == 0) ? 80.0 : 130.0;
      });
    }

    // Holes sit on text lines and erase whatever they cover.
    const int n_holes = rng.uniform_int(cfg.holes.lo, cfg.holes.hi);
    for (int i = 0; i < n_holes; ++i) {
      const double r = rng.uniform(cfg.hole_radius.lo, cfg.hole_radius.hi);
      double cx, cy;
      if (!lines.empty()) {
        const auto& band = lines[rng.below(lines.size())];
        const double lo = band.x_start + r, hi = std::max(lo, band.x_end - r);
        cx = rng.uniform(lo, hi);
        cy = band.centre_at(cx);
      } else {
        cx = rng.uniform(pr.x0 + r + 2, pr.x1 - r - 2);
        cy = rng.uniform(pr.y0 + r + 2, pr.y1 - r - 2);
      }
      const Polygon h = circle(cx, cy, r);
      add_region(doc, RegionClass::kHole, h);
      canvas.apply(rasterize_polygon(h, cfg.height, cfg.width),
                   [&](int, int, double& v) { v = backdrop; });
    }

    // Stains.
    const int n_blobs = rng.uniform_int(cfg.degradation_blobs.lo, cfg.degradation_blobs.hi);
    for (int i = 0; i < n_blobs; ++i) {
      const double r = rng.uniform(18.0, 40.0);
      const double cx = rng.uniform(pr.x0 + 1.3 * r + 2, pr.x1 - 1.3 * r - 2);
      const double cy = rng.uniform(pr.y0 + 1.3 * r + 2, pr.y1 - 1.3 * r - 2);
      Polygon blob;
      for (int k = 0; k < 16; ++k) {
        const double t = 2.0 * std::numbers::pi * k / 16;
        const double rr = r * rng.uniform(0.7, 1.3);
        blob.vertices.push_back({snap(cx + rr * std::cos(t)), snap(cy + rr * std::sin(t))});
      }
      add_region(doc, RegionClass::kPhysicalDegradation, blob);
      const double factor = rng.uniform(0.55, 0.7);
      canvas.apply(rasterize_polygon(blob, cfg.height, cfg.width),
                   [&](int, int, double& v) { v *= factor; });
    }
  }

  out.image = canvas.finish(rng, 4.0);
  return out;
}

std::array<int, 3> split_sizes(int n_docs, const SplitFractions& f) {
  if (n_docs < 0) throw ValidationError("document count must be >= 0");
  if (f.train < 0 || f.validation < 0 || f.test < 0 ||
      std::abs(f.train + f.validation + f.test - 1.0) > 1e-9)
    throw ValidationError("split fractions must be non-negative and sum to 1");
  std::array<int, 3> n = {static_cast<int>(std::floor(n_docs * f.train + 1e-9)),
                          static_cast<int>(std::floor(n_docs * f.validation + 1e-9)),
                          static_cast<int>(std::floor(n_docs * f.test + 1e-9))};
  n[0] += n_docs - n[0] - n[1] - n[2];
  return n;
}

std::vector<DocumentAnnotation> SynthCorpus::annotations() const {
  std::vector<DocumentAnnotation> out;
  out.reserve(documents.size());
  for (const auto& d : documents) out.push_back(d.annotation);
  return out;
}

SynthCorpus generate_corpus(const SynthConfig& cfg, int n_docs, const SplitFractions& fractions,
                            std::uint64_t seed) {
  validate_synth_config(cfg);
  const auto sizes = split_sizes(n_docs, fractions);
  SynthCorpus corpus;
  for (int i = 0; i < n_docs; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "synth-%04d", i);
    corpus.documents.push_back(generate_document(cfg, Rng::derive(seed, static_cast<std::uint64_t>(i)), id));
    const Split split = i < sizes[0] ? Split::kTrain
                        : i < sizes[0] + sizes[1] ? Split::kValidation
                                                  : Split::kTest;
    corpus.manifest.splits[id] = split;
  }
  return corpus;
}

void write_synth_corpus(const SynthCorpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  for (const auto& d : corpus.documents) write_png(d.image, dir / d.annotation.image_path);
  const auto docs = corpus.annotations();
  write_annotation_file(docs, dir / "corpus.json");
  write_manifest_file(corpus.manifest, dir / "manifest.json");
}

// ---------------------------------------------------------------------------

namespace {

void read_range(const json& j, const char* key, IntRange& r) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (v.is_number()) {
    r.lo = r.hi = v.get<int>();
  } else {
    r.lo = v.at(0).get<int>();
    r.hi = v.at(1).get<int>();
  }
}

void read_range(const json& j, const char* key, RealRange& r) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (v.is_number()) {
    r.lo = r.hi = v.get<double>();
  } else {
    r.lo = v.at(0).get<double>();
    r.hi = v.at(1).get<double>();
  }
}

}  // namespace

SynthConfig parse_synth_config(std::string_view text) {
  SynthConfig cfg;
  try {
    const json j = json::parse(text);
    if (j.contains("width")) cfg.width = j.at("width");
    if (j.contains("height")) cfg.height = j.at("height");
    if (j.contains("pages_per_image")) cfg.pages_per_image = j.at("pages_per_image");
    if (j.contains("stacking")) {
      const std::string s = j.at("stacking");
      if (s == "horizontal") cfg.stacking = PageStacking::kHorizontal;
      else if (s == "vertical") cfg.stacking = PageStacking::kVertical;
      else throw ParseError("synth config: stacking must be \"horizontal\" or \"vertical\"");
    }
    read_range(j, "lines_per_page", cfg.lines_per_page);
    if (j.contains("waviness")) cfg.waviness = j.at("waviness");
    read_range(j, "line_height", cfg.line_height);
    read_range(j, "line_spacing", cfg.line_spacing);
    read_range(j, "holes", cfg.holes);
    read_range(j, "hole_radius", cfg.hole_radius);
    read_range(j, "degradation_blobs", cfg.degradation_blobs);
    if (j.contains("include")) {
      const auto& inc = j.at("include");
      if (inc.contains("LM")) cfg.library_marker = inc.at("LM");
      if (inc.contains("D")) cfg.decorator = inc.at("D");
      if (inc.contains("P")) cfg.picture = inc.at("P");
      if (inc.contains("BL")) cfg.boundary_line = inc.at("BL");
    }
    if (j.contains("script")) cfg.script = j.at("script");
  } catch (const json::exception& e) {
    throw ParseError(std::string("synth config: ") + e.what());
  }
  validate_synth_config(cfg);
  return cfg;
}

SynthConfig load_synth_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read synth config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_synth_config(ss.str());
}

std::string synth_config_to_json(const SynthConfig& cfg) {
  json j = {{"width", cfg.width},
            {"height", cfg.height},
            {"pages_per_image", cfg.pages_per_image},
            {"stacking", cfg.stacking == PageStacking::kHorizontal ? "horizontal" : "vertical"},
            {"lines_per_page", {cfg.lines_per_page.lo, cfg.lines_per_page.hi}},
            {"waviness", cfg.waviness},
            {"line_height", {cfg.line_height.lo, cfg.line_height.hi}},
            {"line_spacing", {cfg.line_spacing.lo, cfg.line_spacing.hi}},
            {"holes", {cfg.holes.lo, cfg.holes.hi}},
            {"hole_radius", {cfg.hole_radius.lo, cfg.hole_radius.hi}},
            {"degradation_blobs", {cfg.degradation_blobs.lo, cfg.degradation_blobs.hi}},
            {"include",
             {{"LM", cfg.library_marker}, {"D", cfg.decorator}, {"P", cfg.picture},
              {"BL", cfg.boundary_line}}},
            {"script", cfg.script}};
  return j.dump(2);
}

}  // namespace palm
