#include "palmlayout/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "palmlayout/errors.hpp"
#include "json_codec.hpp"

namespace palm {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, kNumRegionClasses> kAbbrev = {
    "CLS", "CC", "H", "PB", "LM", "D", "P", "PD", "BL"};
constexpr std::array<std::string_view, kNumRegionClasses> kNames = {
    "Character Line Segment", "Character Component", "Hole",
    "Page Boundary",          "Library Marker",      "Decorator",
    "Picture",                "Physical Degradation", "Boundary Line"};

constexpr std::string_view kCorpusFormat = "palmlayout-corpus";
constexpr std::string_view kManifestFormat = "palmlayout-manifest";
constexpr int kFormatVersion = 1;

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

json parse_json(std::string_view text, std::string_view what) {
  try {
    return json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw ParseError(std::string(what) + ": " + e.what());
  }
}

void check_format(const json& root, std::string_view expected) {
  if (!root.is_object()) throw ParseError("top level must be an object");
  auto it = root.find("format");
  if (it == root.end() || !it->is_string() || it->get<std::string>() != expected)
    throw ParseError("missing or wrong \"format\" tag (expected " + std::string(expected) + ")");
  auto v = root.find("version");
  if (v == root.end() || !v->is_number_integer() || v->get<int>() != kFormatVersion)
    throw ParseError("unsupported format version");
}

template <typename T>
T required(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(where + ": missing field \"" + key + "\"");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ParseError(where + ": field \"" + key + "\" has the wrong type");
  }
}

}  // namespace

namespace detail {

RegionInstance region_from_json(const json& r, const std::string& where) {
  if (!r.is_object()) throw ParseError(where + ": region must be an object");
  RegionInstance region;
  const auto cls = required<std::string>(r, "class", where);
  auto parsed = region_class_from_abbreviation(cls);
  if (!parsed) throw ParseError(where + ": unknown region class \"" + cls + "\"");
  region.region_class = *parsed;

  const auto shape = required<std::string>(r, "shape", where);
  auto kind = shape_kind_from_string(shape);
  if (!kind) throw ParseError(where + ": unknown shape kind \"" + shape + "\"");
  region.boundary.kind = *kind;

  auto vit = r.find("vertices");
  if (vit == r.end() || !vit->is_array())
    throw ParseError(where + ": \"vertices\" must be a flat number array");
  if (vit->size() % 2 != 0) throw ParseError(where + ": odd number of vertex coordinates");
  region.boundary.vertices.reserve(vit->size() / 2);
  for (std::size_t i = 0; i < vit->size(); i += 2) {
    const auto& xs = (*vit)[i];
    const auto& ys = (*vit)[i + 1];
    if (!xs.is_number() || !ys.is_number())
      throw ParseError(where + ": non-numeric vertex coordinate");
    region.boundary.vertices.push_back({xs.get<double>(), ys.get<double>()});
  }
  if (auto a = r.find("annotator_id"); a != r.end() && !a->is_null()) {
    if (!a->is_string()) throw ParseError(where + ": annotator_id must be a string");
    region.annotator_id = a->get<std::string>();
  }
  region.revision = required<int>(r, "revision", where);
  if (region.revision < 0) throw ParseError(where + ": negative revision");
  if (auto s = r.find("score"); s != r.end() && !s->is_null()) {
    if (!s->is_number()) throw ParseError(where + ": score must be a number");
    region.score = s->get<double>();
  }
  return region;
}

json region_to_json(const RegionInstance& r) {
  json j;
  j["class"] = abbreviation(r.region_class);
  j["shape"] = to_string(r.boundary.kind);
  json flat = json::array();
  for (const auto& v : r.boundary.vertices) {
    flat.push_back(v.x);
    flat.push_back(v.y);
  }
  j["vertices"] = std::move(flat);
  if (r.annotator_id) j["annotator_id"] = *r.annotator_id;
  j["revision"] = r.revision;
  if (r.score) j["score"] = *r.score;
  return j;
}

DocumentAnnotation document_from_json(const json& d, std::size_t index) {
  std::string where = "document #" + std::to_string(index);
  if (!d.is_object()) throw ParseError(where + ": must be an object");
  DocumentAnnotation doc;
  doc.doc_id = required<std::string>(d, "doc_id", where);
  where = "document \"" + doc.doc_id + "\"";
  doc.image_path = required<std::string>(d, "image_path", where);
  doc.width = required<int>(d, "width", where);
  doc.height = required<int>(d, "height", where);
  const auto coll = required<std::string>(d, "collection", where);
  auto c = collection_from_string(coll);
  if (!c) throw ParseError(where + ": unknown collection \"" + coll + "\"");
  doc.collection = *c;
  doc.script = required<std::string>(d, "script", where);
  auto rit = d.find("regions");
  if (rit == d.end() || !rit->is_array()) throw ParseError(where + ": \"regions\" must be an array");
  doc.regions.reserve(rit->size());
  for (std::size_t i = 0; i < rit->size(); ++i)
    doc.regions.push_back(region_from_json((*rit)[i], where + " region #" + std::to_string(i)));
  return doc;
}

json document_to_json(const DocumentAnnotation& doc) {
  json d;
  d["doc_id"] = doc.doc_id;
  d["image_path"] = doc.image_path;
  d["width"] = doc.width;
  d["height"] = doc.height;
  d["collection"] = to_string(doc.collection);
  d["script"] = doc.script;
  json regions = json::array();
  for (const auto& r : doc.regions) regions.push_back(region_to_json(r));
  d["regions"] = std::move(regions);
  return d;
}

}  // namespace detail

namespace {

using detail::document_from_json;
using detail::document_to_json;

bool is_axis_aligned_rectangle(const std::vector<Point>& v) {
  if (v.size() != 4) return false;
  // Consecutive edges must alternate horizontal / vertical.
  auto horizontal = [&](int i) { return v[i].y == v[(i + 1) % 4].y && v[i].x != v[(i + 1) % 4].x; };
  auto vertical = [&](int i) { return v[i].x == v[(i + 1) % 4].x && v[i].y != v[(i + 1) % 4].y; };
  bool a = horizontal(0) && vertical(1) && horizontal(2) && vertical(3);
  bool b = vertical(0) && horizontal(1) && vertical(2) && horizontal(3);
  return a || b;
}

}  // namespace

std::string_view abbreviation(RegionClass c) { return kAbbrev[index_of(c)]; }
std::string_view full_name(RegionClass c) { return kNames[index_of(c)]; }

std::optional<RegionClass> region_class_from_abbreviation(std::string_view abbrev) {
  for (std::size_t i = 0; i < kAbbrev.size(); ++i)
    if (kAbbrev[i] == abbrev) return static_cast<RegionClass>(i);
  return std::nullopt;
}

std::string_view to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::kRectangle: return "rectangle";
    case ShapeKind::kPolygon: return "polygon";
    case ShapeKind::kFreehand: return "freehand";
  }
  return "polygon";
}

std::optional<ShapeKind> shape_kind_from_string(std::string_view s) {
  if (s == "rectangle") return ShapeKind::kRectangle;
  if (s == "polygon") return ShapeKind::kPolygon;
  if (s == "freehand") return ShapeKind::kFreehand;
  return std::nullopt;
}

std::string_view to_string(Collection c) {
  switch (c) {
    case Collection::kPih: return "PIH";
    case Collection::kBhoomi: return "Bhoomi";
    case Collection::kSynthetic: return "synthetic";
  }
  return "synthetic";
}

std::optional<Collection> collection_from_string(std::string_view s) {
  for (auto c : kAllCollections)
    if (to_string(c) == s) return c;
  return std::nullopt;
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValidation: return "validation";
    case Split::kTest: return "test";
  }
  return "train";
}

std::optional<Split> split_from_string(std::string_view s) {
  for (auto sp : kAllSplits)
    if (to_string(sp) == s) return sp;
  return std::nullopt;
}

std::string polygon_problem(const Polygon& p) {
  if (p.vertices.size() < 3) return "polygon has fewer than 3 vertices";
  for (const auto& v : p.vertices)
    if (!std::isfinite(v.x) || !std::isfinite(v.y)) return "non-finite vertex coordinate";
  if (p.kind == ShapeKind::kRectangle && !is_axis_aligned_rectangle(p.vertices))
    return "rectangle must have exactly 4 vertices forming an axis-aligned box";
  return {};
}

void validate_document(DocumentAnnotation& doc, const ValidationOptions& opts) {
  if (doc.doc_id.empty()) throw ValidationError("document with empty doc_id");
  if (doc.width < 1 || doc.height < 1)
    throw ValidationError("document \"" + doc.doc_id + "\": width and height must be >= 1");
  bool clamped = false;
  const double w = doc.width;
  const double h = doc.height;
  for (std::size_t i = 0; i < doc.regions.size(); ++i) {
    auto& region = doc.regions[i];
    if (auto problem = polygon_problem(region.boundary); !problem.empty())
      throw ValidationError("document \"" + doc.doc_id + "\" region #" + std::to_string(i) + ": " +
                            problem);
    if (region.revision < 0)
      throw ValidationError("document \"" + doc.doc_id + "\" region #" + std::to_string(i) +
                            ": negative revision");
    for (auto& v : region.boundary.vertices) {
      if (v.x >= 0.0 && v.x <= w && v.y >= 0.0 && v.y <= h) continue;
      if (opts.out_of_bounds == OutOfBoundsPolicy::kReject)
        throw ValidationError("out-of-bounds vertex in document \"" + doc.doc_id + "\"");
      v.x = std::clamp(v.x, 0.0, w);
      v.y = std::clamp(v.y, 0.0, h);
      clamped = true;
    }
  }
  if (clamped && opts.warnings)
    opts.warnings->push_back("document \"" + doc.doc_id + "\": vertices clamped to image bounds");
}

void validate_corpus(std::vector<DocumentAnnotation>& docs, const ValidationOptions& opts) {
  std::set<std::string> seen;
  std::vector<std::string> out_of_bounds;
  ValidationOptions per_doc = opts;
  for (auto& doc : docs) {
    if (!seen.insert(doc.doc_id).second)
      throw ValidationError("duplicate doc_id \"" + doc.doc_id + "\"");
    if (opts.out_of_bounds == OutOfBoundsPolicy::kReject) {
      // Collect every offending id before failing.
      try {
        validate_document(doc, per_doc);
      } catch (const ValidationError& e) {
        if (std::string_view(e.what()).starts_with("out-of-bounds"))
          out_of_bounds.push_back(doc.doc_id);
        else
          throw;
      }
    } else {
      validate_document(doc, per_doc);
    }
  }
  if (!out_of_bounds.empty()) {
    std::string msg = "out-of-bounds vertices in documents:";
    for (const auto& id : out_of_bounds) msg += " " + id;
    throw ValidationError(msg);
  }
}

std::vector<DocumentAnnotation> parse_annotation_text(std::string_view text,
                                                      const ValidationOptions& opts) {
  const json root = parse_json(text, "annotation file");
  check_format(root, kCorpusFormat);
  auto it = root.find("documents");
  if (it == root.end() || !it->is_array()) throw ParseError("\"documents\" must be an array");
  std::vector<DocumentAnnotation> docs;
  docs.reserve(it->size());
  for (std::size_t i = 0; i < it->size(); ++i) docs.push_back(document_from_json((*it)[i], i));
  validate_corpus(docs, opts);
  return docs;
}

std::vector<DocumentAnnotation> parse_annotation_file(const std::filesystem::path& path,
                                                      const ValidationOptions& opts) {
  return parse_annotation_text(read_text(path), opts);
}

std::string serialize_annotations(std::span<const DocumentAnnotation> docs) {
  json root;
  root["format"] = kCorpusFormat;
  root["version"] = kFormatVersion;
  json arr = json::array();
  for (const auto& d : docs) arr.push_back(document_to_json(d));
  root["documents"] = std::move(arr);
  return root.dump(1) + "\n";
}

void write_annotation_file(std::span<const DocumentAnnotation> docs,
                           const std::filesystem::path& path) {
  write_text(path, serialize_annotations(docs));
}

CorpusManifest parse_manifest_text(std::string_view text) {
  const json root = parse_json(text, "manifest file");
  check_format(root, kManifestFormat);
  auto it = root.find("splits");
  if (it == root.end() || !it->is_object()) throw ParseError("\"splits\" must be an object");
  CorpusManifest m;
  for (const auto& [id, value] : it->items()) {
    if (!value.is_string()) throw ParseError("split for \"" + id + "\" must be a string");
    auto s = split_from_string(value.get<std::string>());
    if (!s) throw ParseError("unknown split \"" + value.get<std::string>() + "\" for \"" + id + "\"");
    m.splits.emplace(id, *s);
  }
  return m;
}

CorpusManifest parse_manifest_file(const std::filesystem::path& path) {
  return parse_manifest_text(read_text(path));
}

std::string serialize_manifest(const CorpusManifest& manifest) {
  json root;
  root["format"] = kManifestFormat;
  root["version"] = kFormatVersion;
  json splits = json::object();
  for (const auto& [id, s] : manifest.splits) splits[id] = to_string(s);
  root["splits"] = std::move(splits);
  return root.dump(1) + "\n";
}

void write_manifest_file(const CorpusManifest& manifest, const std::filesystem::path& path) {
  write_text(path, serialize_manifest(manifest));
}

long RegionStatistics::count(RegionClass c, Collection coll) const {
  auto it = per_collection.find(coll);
  return it == per_collection.end() ? 0 : it->second[index_of(c)];
}

RegionStatistics compute_region_statistics(std::span<const DocumentAnnotation> docs) {
  RegionStatistics stats;
  for (const auto& doc : docs) {
    auto& row = stats.per_collection[doc.collection];
    for (const auto& r : doc.regions) {
      ++row[index_of(r.region_class)];
      ++stats.combined[index_of(r.region_class)];
    }
  }
  return stats;
}

long SplitCounts::count(Collection coll, Split s) const {
  auto it = per_collection.find(coll);
  return it == per_collection.end() ? 0 : it->second[static_cast<std::size_t>(s)];
}

SplitCounts split_counts(const CorpusManifest& manifest,
                         std::span<const DocumentAnnotation> docs) {
  SplitCounts counts;
  std::vector<std::string> missing;
  for (const auto& doc : docs) {
    auto it = manifest.splits.find(doc.doc_id);
    if (it == manifest.splits.end()) {
      missing.push_back(doc.doc_id);
      continue;
    }
    const auto s = static_cast<std::size_t>(it->second);
    ++counts.per_collection[doc.collection][s];
    ++counts.total[s];
  }
  if (!missing.empty()) {
    std::string msg = "documents without a split assignment:";
    for (const auto& id : missing) msg += " " + id;
    throw ValidationError(msg);
  }
  return counts;
}

std::vector<DocumentAnnotation> select_split(const CorpusManifest& manifest,
                                             std::span<const DocumentAnnotation> docs,
                                             Split split) {
  std::vector<DocumentAnnotation> out;
  for (const auto& doc : docs) {
    auto it = manifest.splits.find(doc.doc_id);
    if (it != manifest.splits.end() && it->second == split) out.push_back(doc);
  }
  return out;
}

}  // namespace palm
