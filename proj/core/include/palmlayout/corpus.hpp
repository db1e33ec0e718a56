#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace palm {

/// Layout region taxonomy for palm-leaf and paper manuscripts.
///
/// The numeric value doubles as the network's foreground class index minus one
/// (index 0 of the classifier is background).
enum class RegionClass : int {
  kCharacterLineSegment = 0,  // CLS
  kCharacterComponent,        // CC
  kHole,                      // H
  kPageBoundary,              // PB
  kLibraryMarker,             // LM
  kDecorator,                 // D
  kPicture,                   // P
  kPhysicalDegradation,       // PD
  kBoundaryLine,              // BL
};

inline constexpr std::size_t kNumRegionClasses = 9;

inline constexpr std::array<RegionClass, kNumRegionClasses> kAllRegionClasses = {
    RegionClass::kCharacterLineSegment, RegionClass::kCharacterComponent,
    RegionClass::kHole,                 RegionClass::kPageBoundary,
    RegionClass::kLibraryMarker,        RegionClass::kDecorator,
    RegionClass::kPicture,              RegionClass::kPhysicalDegradation,
    RegionClass::kBoundaryLine,
};

std::string_view abbreviation(RegionClass c);
std::string_view full_name(RegionClass c);
// Accepts the canonical abbreviation only ("CLS", "H", ...).
std::optional<RegionClass> region_class_from_abbreviation(std::string_view abbrev);

inline std::size_t index_of(RegionClass c) { return static_cast<std::size_t>(c); }

enum class ShapeKind { kRectangle, kPolygon, kFreehand };

std::string_view to_string(ShapeKind k);
std::optional<ShapeKind> shape_kind_from_string(std::string_view s);

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

struct Polygon {
  std::vector<Point> vertices;
  ShapeKind kind = ShapeKind::kPolygon;
  friend bool operator==(const Polygon&, const Polygon&) = default;
};

struct RegionInstance {
  RegionClass region_class = RegionClass::kCharacterLineSegment;
  Polygon boundary;
  std::optional<std::string> annotator_id;
  int revision = 0;
  // Present on model predictions only.
  std::optional<double> score;
  friend bool operator==(const RegionInstance&, const RegionInstance&) = default;
};

enum class Collection { kPih, kBhoomi, kSynthetic };

inline constexpr std::array<Collection, 3> kAllCollections = {
    Collection::kPih, Collection::kBhoomi, Collection::kSynthetic};

std::string_view to_string(Collection c);
std::optional<Collection> collection_from_string(std::string_view s);

struct DocumentAnnotation {
  std::string doc_id;
  std::string image_path;
  int width = 0;
  int height = 0;
  Collection collection = Collection::kSynthetic;
  std::string script;
  std::vector<RegionInstance> regions;
  friend bool operator==(const DocumentAnnotation&, const DocumentAnnotation&) = default;
};

enum class Split { kTrain, kValidation, kTest };

inline constexpr std::array<Split, 3> kAllSplits = {Split::kTrain, Split::kValidation,
                                                    Split::kTest};

std::string_view to_string(Split s);
std::optional<Split> split_from_string(std::string_view s);

struct CorpusManifest {
  std::map<std::string, Split> splits;
  friend bool operator==(const CorpusManifest&, const CorpusManifest&) = default;
};

enum class OutOfBoundsPolicy {
  kClamp,   // clamp vertices into [0,W]x[0,H] and record a warning
  kReject,  // throw ValidationError listing the offending doc_ids
};

struct ValidationOptions {
  OutOfBoundsPolicy out_of_bounds = OutOfBoundsPolicy::kClamp;
  // Receives one line per clamped document when non-null.
  std::vector<std::string>* warnings = nullptr;
};

// Checks polygon shape invariants (vertex count, finiteness, rectangle form).
// Returns an empty string when valid, otherwise a description of the problem.
std::string polygon_problem(const Polygon& p);

// Validates one document in place. Overlapping regions are always accepted.
// Vertices outside the image are clamped or rejected per `opts`.
void validate_document(DocumentAnnotation& doc, const ValidationOptions& opts = {});

// Validates every document and checks doc_id uniqueness.
void validate_corpus(std::vector<DocumentAnnotation>& docs, const ValidationOptions& opts = {});

// Annotation files are JSON: {"format": "palmlayout-corpus", "version": 1, "documents": [...]}.
// Vertex lists are flat [x1, y1, x2, y2, ...] arrays in original image coordinates.
std::vector<DocumentAnnotation> parse_annotation_text(std::string_view text,
                                                      const ValidationOptions& opts = {});
std::vector<DocumentAnnotation> parse_annotation_file(const std::filesystem::path& path,
                                                      const ValidationOptions& opts = {});
std::string serialize_annotations(std::span<const DocumentAnnotation> docs);
void write_annotation_file(std::span<const DocumentAnnotation> docs,
                           const std::filesystem::path& path);

CorpusManifest parse_manifest_text(std::string_view text);
CorpusManifest parse_manifest_file(const std::filesystem::path& path);
std::string serialize_manifest(const CorpusManifest& manifest);
void write_manifest_file(const CorpusManifest& manifest, const std::filesystem::path& path);

using ClassCounts = std::array<long, kNumRegionClasses>;

struct RegionStatistics {
  std::map<Collection, ClassCounts> per_collection;
  ClassCounts combined{};

  long count(RegionClass c, Collection coll) const;
  long count(RegionClass c) const { return combined[index_of(c)]; }
};

RegionStatistics compute_region_statistics(std::span<const DocumentAnnotation> docs);

using SplitTally = std::array<long, 3>;  // indexed by Split

struct SplitCounts {
  std::map<Collection, SplitTally> per_collection;
  SplitTally total{};

  long count(Collection coll, Split s) const;
  long count(Split s) const { return total[static_cast<std::size_t>(s)]; }
};

// Throws ValidationError if any document lacks a split assignment.
SplitCounts split_counts(const CorpusManifest& manifest,
                         std::span<const DocumentAnnotation> docs);

// Documents whose manifest split equals `split`, in corpus order.
std::vector<DocumentAnnotation> select_split(const CorpusManifest& manifest,
                                             std::span<const DocumentAnnotation> docs,
                                             Split split);

}  // namespace palm
