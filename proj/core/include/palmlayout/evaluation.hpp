#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "palmlayout/corpus.hpp"
#include "palmlayout/geometry.hpp"

namespace palm {

/// Pairwise mask IoUs between predictions (rows) and ground truths (columns).
struct IouMatrix {
  std::size_t preds = 0;
  std::size_t gts = 0;
  std::vector<double> values;

  IouMatrix() = default;
  IouMatrix(std::size_t num_preds, std::size_t num_gts)
      : preds(num_preds), gts(num_gts), values(num_preds * num_gts, 0.0) {}
  double at(std::size_t p, std::size_t g) const { return values[p * gts + g]; }
  double& at(std::size_t p, std::size_t g) { return values[p * gts + g]; }
};

struct MatchResult {
  std::vector<bool> pred_tp;                       // input order
  std::vector<std::optional<std::size_t>> pred_gt;  // matched gt index
  std::vector<bool> gt_matched;
};

struct ScoredMask {
  double score = 0.0;
  BinaryMask mask;
};

// Score-ordered greedy matching: each prediction takes the highest-IoU unmatched
// gt with IoU >= threshold. Equal scores go in input order; equal IoUs go to the lower gt index.
MatchResult match_detections(std::span<const double> scores, const IouMatrix& iou,
                             double iou_threshold);
MatchResult match_detections(std::span<const ScoredMask> preds, std::span<const BinaryMask> gts,
                             double iou_threshold);

/// One class within one document, reduced to what the metrics need.
struct ClassDocData {
  std::vector<double> scores;
  IouMatrix iou;
  std::vector<std::size_t> gt_area;
  std::vector<std::size_t> intersection;  // row-major like iou
};

// Area under the enveloped precision-recall curve for one class pooled over
// documents. Predictions only match gts of their own document.
// nullopt when there are no gts.
std::optional<double> average_precision(std::span<const ClassDocData> docs,
                                        double iou_threshold);
std::optional<double> average_precision(std::span<const ScoredMask> preds,
                                        std::span<const BinaryMask> gts, double iou_threshold);

// 0.50, 0.55, ..., 0.95.
std::array<double, 10> ap_thresholds();

struct ApSummary {
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ap_mean = 0.0;
  // nullopt for classes with no gt; excluded from the class average.
  std::array<std::optional<double>, kNumRegionClasses> per_class_ap50{};
};

// Class-averaged mask AP. `per_class[c]` holds class c's per-document data.
// nullopt when no class has any gt.
std::optional<ApSummary> ap_summary(
    const std::array<std::vector<ClassDocData>, kNumRegionClasses>& per_class);

/// Per-gt assignment for the class-wise scores: repeatedly pairs the
/// unmatched gt and prediction with the largest positive IoU. No threshold.
std::vector<std::optional<std::size_t>> overlap_assignment(const IouMatrix& iou);

// Mean over gt regions of IoU with the assigned prediction (0 when unassigned).
// nullopt when the document has no gt of the class.
std::optional<double> class_iou_document(const ClassDocData& d);
// Mean over gt regions of |pred & gt| / |gt| under the same assignment.
std::optional<double> class_acc_document(const ClassDocData& d);
std::optional<double> class_iou_document(std::span<const BinaryMask> gts,
                                         std::span<const BinaryMask> preds);
std::optional<double> class_acc_document(std::span<const BinaryMask> gts,
                                         std::span<const BinaryMask> preds);

// Unweighted mean of per-document scores; nullopt for an empty list.
std::optional<double> class_iou_corpus(std::span<const double> doc_scores);
inline std::optional<double> class_acc_corpus(std::span<const double> doc_scores) {
  return class_iou_corpus(doc_scores);
}

// Rasterizes one document's regions and reduces them per class. Predictions
// without a score count as 1.0. Rasterization uses the gt document's size.
std::array<ClassDocData, kNumRegionClasses> reduce_document(const DocumentAnnotation& gt,
                                                            const DocumentAnnotation* pred);

struct MetricRow {
  std::string name;  // collection name or "Combined"
  std::size_t documents = 0;
  std::optional<ApSummary> ap;
  std::array<std::optional<double>, kNumRegionClasses> cw_iou{};
  std::array<std::optional<double>, kNumRegionClasses> cw_acc{};
};

struct EvalReport {
  std::vector<MetricRow> rows;  // one per collection present, then Combined
  const MetricRow& combined() const { return rows.back(); }
};

// Ground-truth documents without predictions count as having none.
// Throws ValidationError listing prediction doc_ids absent from `gts`.
EvalReport evaluate_documents(std::span<const DocumentAnnotation> gts,
                              std::span<const DocumentAnnotation> preds);

// Restricts the ground truth to `split` (all documents when nullopt). Predictions
// for gt documents outside the split are ignored.
EvalReport emit_report(std::span<const DocumentAnnotation> preds,
                       std::span<const DocumentAnnotation> gts, const CorpusManifest& manifest,
                       std::optional<Split> split = std::nullopt);

// Column order of the class table.
inline constexpr std::array<RegionClass, kNumRegionClasses> kReportClassOrder = {
    RegionClass::kHole,          RegionClass::kCharacterLineSegment,
    RegionClass::kPhysicalDegradation, RegionClass::kPageBoundary,
    RegionClass::kCharacterComponent,  RegionClass::kPicture,
    RegionClass::kDecorator,     RegionClass::kLibraryMarker,
    RegionClass::kBoundaryLine,
};

// x100 with two decimals; "−" for nullopt.
std::string format_cell(std::optional<double> v);
std::string render_report_text(const EvalReport& report);
std::string report_to_json(const EvalReport& report);

}  // namespace palm
