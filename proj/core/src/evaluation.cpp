#include "palmlayout/evaluation.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "palmlayout/errors.hpp"
#include "palmlayout/training.hpp"

namespace palm {

namespace {

std::vector<std::size_t> score_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

IouMatrix iou_matrix(std::span<const BinaryMask> preds, std::span<const BinaryMask> gts) {
  IouMatrix m(preds.size(), gts.size());
  for (std::size_t p = 0; p < preds.size(); ++p)
    for (std::size_t g = 0; g < gts.size(); ++g) m.at(p, g) = mask_iou(preds[p], gts[g]);
  return m;
}

ClassDocData class_doc_data(std::span<const BinaryMask> gts, std::span<const BinaryMask> preds) {
  ClassDocData d;
  d.scores.assign(preds.size(), 1.0);
  d.iou = iou_matrix(preds, gts);
  d.intersection.assign(preds.size() * gts.size(), 0);
  for (const auto& g : gts) d.gt_area.push_back(g.count());
  for (std::size_t p = 0; p < preds.size(); ++p)
    for (std::size_t g = 0; g < gts.size(); ++g)
      d.intersection[p * gts.size() + g] = mask_intersection(preds[p], gts[g]);
  return d;
}

std::size_t intersect(const RegionRaster& a, const RegionRaster& b) {
  const int r0 = std::max(a.y0, b.y0);
  const int r1 = std::min(a.y0 + a.mask.height(), b.y0 + b.mask.height());
  const int c0 = std::max(a.x0, b.x0);
  const int c1 = std::min(a.x0 + a.mask.width(), b.x0 + b.mask.width());
  std::size_t n = 0;
  for (int r = r0; r < r1; ++r)
    for (int c = c0; c < c1; ++c)
      n += (a.mask.at(r - a.y0, c - a.x0) && b.mask.at(r - b.y0, c - b.x0)) ? 1 : 0;
  return n;
}

double mean(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

MatchResult match_detections(std::span<const double> scores, const IouMatrix& iou,
                             double iou_threshold) {
  if (scores.size() != iou.preds) throw std::invalid_argument("match_detections: size mismatch");
  MatchResult r;
  r.pred_tp.assign(iou.preds, false);
  r.pred_gt.assign(iou.preds, std::nullopt);
  r.gt_matched.assign(iou.gts, false);
  for (std::size_t p : score_order(scores)) {
    std::optional<std::size_t> best;
    double best_iou = -1.0;
    for (std::size_t g = 0; g < iou.gts; ++g) {
      if (r.gt_matched[g]) continue;
      const double v = iou.at(p, g);
      if (v >= iou_threshold && v > best_iou) {
        best = g;
        best_iou = v;
      }
    }
    if (best) {
      r.pred_tp[p] = true;
      r.pred_gt[p] = best;
      r.gt_matched[*best] = true;
    }
  }
  return r;
}

MatchResult match_detections(std::span<const ScoredMask> preds, std::span<const BinaryMask> gts,
                             double iou_threshold) {
  std::vector<double> scores;
  std::vector<BinaryMask> masks;
  for (const auto& p : preds) {
    scores.push_back(p.score);
    masks.push_back(p.mask);
  }
  return match_detections(scores, iou_matrix(masks, gts), iou_threshold);
}

std::optional<double> average_precision(std::span<const ClassDocData> docs,
                                        double iou_threshold) {
  struct Ranked {
    double score;
    bool tp;
  };
  std::vector<Ranked> ranked;
  std::size_t num_gt = 0;
  for (const auto& d : docs) {
    num_gt += d.iou.gts;
    const MatchResult m = match_detections(d.scores, d.iou, iou_threshold);
    for (std::size_t p = 0; p < d.scores.size(); ++p) ranked.push_back({d.scores[p], m.pred_tp[p]});
  }
  if (num_gt == 0) return std::nullopt;
  // Stable sort keeps document order, then prediction order, among equal scores.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
  std::vector<double> precision(ranked.size());
  std::size_t tp = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    tp += ranked[k].tp ? 1 : 0;
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
  }
  for (std::size_t k = ranked.size(); k-- > 1;)
    precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double area = 0.0;
  for (std::size_t k = 0; k < ranked.size(); ++k)
    if (ranked[k].tp) area += precision[k];
  return area / static_cast<double>(num_gt);
}

std::optional<double> average_precision(std::span<const ScoredMask> preds,
                                        std::span<const BinaryMask> gts, double iou_threshold) {
  std::vector<BinaryMask> masks;
  for (const auto& p : preds) masks.push_back(p.mask);
  ClassDocData d = class_doc_data(gts, masks);
  for (std::size_t i = 0; i < preds.size(); ++i) d.scores[i] = preds[i].score;
  return average_precision(std::span<const ClassDocData>(&d, 1), iou_threshold);
}

std::array<double, 10> ap_thresholds() {
  std::array<double, 10> t{};
  for (int k = 0; k < 10; ++k) t[k] = (50 + 5 * k) / 100.0;
  return t;
}

std::optional<ApSummary> ap_summary(
    const std::array<std::vector<ClassDocData>, kNumRegionClasses>& per_class) {
  ApSummary s;
  std::array<double, 10> sums{};
  std::size_t classes = 0;
  const auto thresholds = ap_thresholds();
  for (std::size_t c = 0; c < kNumRegionClasses; ++c) {
    std::array<double, 10> aps{};
    bool present = true;
    for (std::size_t k = 0; k < thresholds.size(); ++k) {
      const auto ap = average_precision(per_class[c], thresholds[k]);
      if (!ap) {
        present = false;
        break;
      }
      aps[k] = *ap;
    }
    if (!present) continue;
    ++classes;
    s.per_class_ap50[c] = aps[0];
    for (std::size_t k = 0; k < aps.size(); ++k) sums[k] += aps[k];
  }
  if (classes == 0) return std::nullopt;
  for (auto& v : sums) v /= static_cast<double>(classes);
  s.ap50 = sums[0];
  s.ap75 = sums[5];
  s.ap_mean = mean(sums);
  return s;
}

std::vector<std::optional<std::size_t>> overlap_assignment(const IouMatrix& iou) {
  struct Pair {
    double v;
    std::size_t g, p;
  };
  std::vector<Pair> pairs;
  for (std::size_t g = 0; g < iou.gts; ++g)
    for (std::size_t p = 0; p < iou.preds; ++p)
      if (iou.at(p, g) > 0.0) pairs.push_back({iou.at(p, g), g, p});
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.v != b.v) return a.v > b.v;
    if (a.g != b.g) return a.g < b.g;
    return a.p < b.p;
  });
  std::vector<std::optional<std::size_t>> assigned(iou.gts);
  std::vector<bool> used(iou.preds, false);
  for (const auto& pr : pairs) {
    if (assigned[pr.g] || used[pr.p]) continue;
    assigned[pr.g] = pr.p;
    used[pr.p] = true;
  }
  return assigned;
}

std::optional<double> class_iou_document(const ClassDocData& d) {
  if (d.iou.gts == 0) return std::nullopt;
  const auto a = overlap_assignment(d.iou);
  double sum = 0.0;
  for (std::size_t g = 0; g < a.size(); ++g)
    if (a[g]) sum += d.iou.at(*a[g], g);
  return sum / static_cast<double>(d.iou.gts);
}

std::optional<double> class_acc_document(const ClassDocData& d) {
  if (d.iou.gts == 0) return std::nullopt;
  const auto a = overlap_assignment(d.iou);
  double sum = 0.0;
  for (std::size_t g = 0; g < a.size(); ++g)
    if (a[g] && d.gt_area[g] > 0)
      sum += static_cast<double>(d.intersection[*a[g] * d.iou.gts + g]) /
             static_cast<double>(d.gt_area[g]);
  return sum / static_cast<double>(d.iou.gts);
}

std::optional<double> class_iou_document(std::span<const BinaryMask> gts,
                                         std::span<const BinaryMask> preds) {
  return class_iou_document(class_doc_data(gts, preds));
}

std::optional<double> class_acc_document(std::span<const BinaryMask> gts,
                                         std::span<const BinaryMask> preds) {
  return class_acc_document(class_doc_data(gts, preds));
}

std::optional<double> class_iou_corpus(std::span<const double> doc_scores) {
  if (doc_scores.empty()) return std::nullopt;
  return mean(doc_scores);
}

std::array<ClassDocData, kNumRegionClasses> reduce_document(const DocumentAnnotation& gt,
                                                            const DocumentAnnotation* pred) {
  std::array<std::vector<RegionRaster>, kNumRegionClasses> g, p;
  std::array<std::vector<double>, kNumRegionClasses> scores;
  for (const auto& r : gt.regions)
    g[index_of(r.region_class)].push_back(rasterize_region(r.boundary, gt.height, gt.width));
  if (pred)
    for (const auto& r : pred->regions) {
      p[index_of(r.region_class)].push_back(rasterize_region(r.boundary, gt.height, gt.width));
      scores[index_of(r.region_class)].push_back(r.score.value_or(1.0));
    }
  std::array<ClassDocData, kNumRegionClasses> out;
  for (std::size_t c = 0; c < kNumRegionClasses; ++c) {
    ClassDocData& d = out[c];
    d.scores = scores[c];
    d.iou = IouMatrix(p[c].size(), g[c].size());
    d.intersection.assign(p[c].size() * g[c].size(), 0);
    std::vector<std::size_t> pred_area;
    for (const auto& r : g[c]) d.gt_area.push_back(r.mask.count());
    for (const auto& r : p[c]) pred_area.push_back(r.mask.count());
    for (std::size_t i = 0; i < p[c].size(); ++i)
      for (std::size_t j = 0; j < g[c].size(); ++j) {
        const std::size_t inter = intersect(p[c][i], g[c][j]);
        const std::size_t uni = pred_area[i] + d.gt_area[j] - inter;
        d.intersection[i * g[c].size() + j] = inter;
        d.iou.at(i, j) = uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
      }
  }
  return out;
}

namespace {

MetricRow make_row(std::string name,
                   const std::vector<const std::array<ClassDocData, kNumRegionClasses>*>& docs) {
  MetricRow row;
  row.name = std::move(name);
  row.documents = docs.size();
  std::array<std::vector<ClassDocData>, kNumRegionClasses> per_class;
  for (std::size_t c = 0; c < kNumRegionClasses; ++c) {
    std::vector<double> ious, accs;
    for (const auto* d : docs) {
      per_class[c].push_back((*d)[c]);
      if (auto v = class_iou_document((*d)[c])) ious.push_back(*v);
      if (auto v = class_acc_document((*d)[c])) accs.push_back(*v);
    }
    row.cw_iou[c] = class_iou_corpus(ious);
    row.cw_acc[c] = class_acc_corpus(accs);
  }
  row.ap = ap_summary(per_class);
  return row;
}

std::size_t display_width(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char ch : s) n += (ch & 0xC0) != 0x80 ? 1 : 0;
  return n;
}

std::string pad(const std::string& s, std::size_t width, bool left_align) {
  const std::string fill(width > display_width(s) ? width - display_width(s) : 0, ' ');
  return left_align ? s + fill : fill + s;
}

std::string render_table(const std::vector<std::vector<std::string>>& cells) {
  std::vector<std::size_t> widths;
  for (const auto& row : cells)
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (widths.size() <= i) widths.push_back(0);
      widths[i] = std::max(widths[i], display_width(row[i]));
    }
  std::string out;
  for (const auto& row : cells) {
    std::string line;
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) line += "  ";
      line += pad(row[i], widths[i], i == 0);
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
  }
  return out;
}

nlohmann::json opt_json(std::optional<double> v) { return v ? nlohmann::json(*v) : nullptr; }

}  // namespace

EvalReport evaluate_documents(std::span<const DocumentAnnotation> gts,
                              std::span<const DocumentAnnotation> preds) {
  std::map<std::string, const DocumentAnnotation*> pred_by_id;
  std::map<std::string, const DocumentAnnotation*> gt_by_id;
  for (const auto& g : gts) gt_by_id[g.doc_id] = &g;
  std::vector<std::string> unknown;
  for (const auto& p : preds) {
    if (!gt_by_id.count(p.doc_id)) unknown.push_back(p.doc_id);
    if (pred_by_id.count(p.doc_id))
      throw ValidationError("duplicate prediction document: " + p.doc_id);
    pred_by_id[p.doc_id] = &p;
  }
  if (!unknown.empty()) {
    std::string msg = "predictions for documents absent from the ground truth:";
    for (const auto& id : unknown) msg += " " + id;
    throw ValidationError(msg);
  }

  // Reduce in doc_id order so results do not depend on file order.
  std::vector<std::array<ClassDocData, kNumRegionClasses>> reduced;
  std::vector<Collection> collection;
  reduced.reserve(gt_by_id.size());
  for (const auto& [id, g] : gt_by_id) {
    auto it = pred_by_id.find(id);
    reduced.push_back(reduce_document(*g, it == pred_by_id.end() ? nullptr : it->second));
    collection.push_back(g->collection);
  }

  EvalReport report;
  for (Collection coll : kAllCollections) {
    std::vector<const std::array<ClassDocData, kNumRegionClasses>*> docs;
    for (std::size_t i = 0; i < reduced.size(); ++i)
      if (collection[i] == coll) docs.push_back(&reduced[i]);
    if (!docs.empty()) report.rows.push_back(make_row(std::string(to_string(coll)), docs));
  }
  std::vector<const std::array<ClassDocData, kNumRegionClasses>*> all;
  for (const auto& r : reduced) all.push_back(&r);
  report.rows.push_back(make_row("Combined", all));
  return report;
}

EvalReport emit_report(std::span<const DocumentAnnotation> preds,
                       std::span<const DocumentAnnotation> gts, const CorpusManifest& manifest,
                       std::optional<Split> split) {
  std::vector<DocumentAnnotation> selected;
  if (split) {
    selected = select_split(manifest, gts, *split);
  } else {
    selected.assign(gts.begin(), gts.end());
  }
  // Unknown ids are checked against the full ground truth, then narrowed to the split.
  std::map<std::string, bool> in_gt, in_split;
  for (const auto& g : gts) in_gt[g.doc_id] = true;
  for (const auto& g : selected) in_split[g.doc_id] = true;
  std::vector<std::string> unknown;
  std::vector<DocumentAnnotation> kept;
  for (const auto& p : preds) {
    if (!in_gt.count(p.doc_id))
      unknown.push_back(p.doc_id);
    else if (in_split.count(p.doc_id))
      kept.push_back(p);
  }
  if (!unknown.empty()) {
    std::string msg = "predictions for documents absent from the ground truth:";
    for (const auto& id : unknown) msg += " " + id;
    throw ValidationError(msg);
  }
  return evaluate_documents(selected, kept);
}

std::string format_cell(std::optional<double> v) {
  if (!v) return "\xE2\x88\x92";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *v * 100.0);
  return buf;
}

std::string render_report_text(const EvalReport& report) {
  std::vector<std::vector<std::string>> cls;
  std::vector<std::string> header{"Dataset"};
  for (RegionClass c : kReportClassOrder) header.emplace_back(abbreviation(c));
  cls.push_back(header);
  for (const auto& row : report.rows) {
    std::vector<std::string> line{row.name};
    for (RegionClass c : kReportClassOrder) {
      const auto i = index_of(c);
      line.push_back(row.cw_iou[i] ? format_cell(row.cw_iou[i]) + "/" + format_cell(row.cw_acc[i])
                                   : format_cell(std::nullopt));
    }
    cls.push_back(line);
  }
  std::vector<std::vector<std::string>> ap{{"Dataset", "AP50", "AP75", "AP"}};
  for (const auto& row : report.rows) {
    if (row.ap)
      ap.push_back({row.name, format_cell(row.ap->ap50), format_cell(row.ap->ap75),
                    format_cell(row.ap->ap_mean)});
    else
      ap.push_back({row.name, format_cell(std::nullopt), format_cell(std::nullopt),
                    format_cell(std::nullopt)});
  }
  std::ostringstream os;
  os << "Class-wise average IoU / average per-pixel accuracy (x100)\n"
     << render_table(cls) << "\n"
     << "Mask AP at IoU 0.50, 0.75 and averaged over 0.50:0.05:0.95 (x100)\n"
     << render_table(ap);
  return os.str();
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : report.rows) {
    nlohmann::json r;
    r["name"] = row.name;
    r["documents"] = row.documents;
    if (row.ap) {
      r["ap50"] = row.ap->ap50;
      r["ap75"] = row.ap->ap75;
      r["ap"] = row.ap->ap_mean;
    } else {
      r["ap50"] = r["ap75"] = r["ap"] = nullptr;
    }
    nlohmann::json classes = nlohmann::json::object();
    for (RegionClass c : kAllRegionClasses) {
      const auto i = index_of(c);
      classes[std::string(abbreviation(c))] = {{"iou", opt_json(row.cw_iou[i])},
                                               {"acc", opt_json(row.cw_acc[i])},
                                               {"ap50", opt_json(row.ap ? row.ap->per_class_ap50[i]
                                                                        : std::nullopt)}};
    }
    r["classes"] = classes;
    rows.push_back(r);
  }
  return nlohmann::json{{"rows", rows}}.dump(2) + "\n";
}

}  // namespace palm
