#include "palmlayout/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "palmlayout/errors.hpp"

namespace palm {

using nlohmann::json;
using nn::ParamGroup;
using nn::Tensor;

PreprocessResult preprocess_image(const Image& image, int size, int channels) {
  if (image.empty()) throw std::invalid_argument("preprocess_image: image has a zero dimension");
  if (channels != 1 && channels != 3)
    throw std::invalid_argument("preprocess_image: channels must be 1 or 3");
  if (size < 1) throw std::invalid_argument("preprocess_image: size must be positive");

  PreprocessResult out;
  out.original_width = image.width();
  out.original_height = image.height();
  double scale = 1.0;
  if (image.width() > size) scale = static_cast<double>(size) / image.width();
  if (image.height() * scale > size) scale = static_cast<double>(size) / image.height();
  out.scale = scale;
  out.content_width = std::clamp(static_cast<int>(std::lround(image.width() * scale)), 1, size);
  out.content_height = std::clamp(static_cast<int>(std::lround(image.height() * scale)), 1, size);

  const Image src = channels == 1 ? image.to_gray() : image;
  const int src_channels = src.channels();
  out.input = Tensor(channels, size, size);
  for (int c = 0; c < channels; ++c) {
    const int sc = src_channels == 1 ? 0 : c;
    float* plane = out.input.channel(c);
    if (scale == 1.0) {
      for (int y = 0; y < out.content_height; ++y)
        for (int x = 0; x < out.content_width; ++x)
          plane[static_cast<std::size_t>(y) * size + x] = src.at(y, x, sc) / 255.0f;
      continue;
    }
    // Area averaging over the source footprint of each output pixel.
    const double inv = 1.0 / scale;
    for (int y = 0; y < out.content_height; ++y) {
      const int sy0 = std::min(src.height() - 1, static_cast<int>(std::floor(y * inv)));
      const int sy1 = std::clamp(static_cast<int>(std::floor((y + 1) * inv)), sy0 + 1, src.height());
      for (int x = 0; x < out.content_width; ++x) {
        const int sx0 = std::min(src.width() - 1, static_cast<int>(std::floor(x * inv)));
        const int sx1 = std::clamp(static_cast<int>(std::floor((x + 1) * inv)), sx0 + 1, src.width());
        double sum = 0.0;
        for (int yy = sy0; yy < sy1; ++yy)
          for (int xx = sx0; xx < sx1; ++xx) sum += src.at(yy, xx, sc);
        plane[static_cast<std::size_t>(y) * size + x] =
            static_cast<float>(sum / ((sy1 - sy0) * (sx1 - sx0) * 255.0));
      }
    }
  }
  return out;
}

RegionRaster rasterize_region(const Polygon& poly, int height, int width) {
  RegionRaster r;
  if (poly.vertices.empty()) return r;
  double minx = poly.vertices[0].x, maxx = minx, miny = poly.vertices[0].y, maxy = miny;
  for (const auto& p : poly.vertices) {
    minx = std::min(minx, p.x);
    maxx = std::max(maxx, p.x);
    miny = std::min(miny, p.y);
    maxy = std::max(maxy, p.y);
  }
  const int x0 = std::clamp(static_cast<int>(std::floor(minx)), 0, width);
  const int y0 = std::clamp(static_cast<int>(std::floor(miny)), 0, height);
  const int x1 = std::clamp(static_cast<int>(std::ceil(maxx)), x0, width);
  const int y1 = std::clamp(static_cast<int>(std::ceil(maxy)), y0, height);
  Polygon shifted = poly;
  for (auto& p : shifted.vertices) {
    p.x -= x0;
    p.y -= y0;
  }
  r.x0 = x0;
  r.y0 = y0;
  r.mask = rasterize_polygon(shifted, y1 - y0, x1 - x0);
  return r;
}

BinaryMask mask_target(const RegionRaster& raster, const Box& roi, int size) {
  if (!(roi.width() > 0.0) || !(roi.height() > 0.0))
    throw std::invalid_argument("mask_target: degenerate roi");
  BinaryMask out(size, size);
  // The crop covers the pixels touched by the roi; samples clamp to its edge.
  const int cx0 = static_cast<int>(std::floor(roi.x1));
  const int cy0 = static_cast<int>(std::floor(roi.y1));
  const int cx1 = std::max(cx0, static_cast<int>(std::ceil(roi.x2)) - 1);
  const int cy1 = std::max(cy0, static_cast<int>(std::ceil(roi.y2)) - 1);
  const double sw = roi.width() / size;
  const double sh = roi.height() / size;
  for (int i = 0; i < size; ++i) {
    const double sy = std::clamp(roi.y1 + (i + 0.5) * sh - 0.5, double(cy0), double(cy1));
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, cy1);
    const double fy = sy - y0;
    for (int j = 0; j < size; ++j) {
      const double sx = std::clamp(roi.x1 + (j + 0.5) * sw - 0.5, double(cx0), double(cx1));
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, cx1);
      const double fx = sx - x0;
      const double v = (1 - fy) * ((1 - fx) * raster.at(y0, x0) + fx * raster.at(y0, x1)) +
                       fy * ((1 - fx) * raster.at(y1, x0) + fx * raster.at(y1, x1));
      if (v >= 0.5) out.set(i, j);
    }
  }
  return out;
}

BinaryMask prepare_mask_target(const RegionInstance& region, const Box& roi, int doc_height,
                               int doc_width) {
  BinaryMask full = rasterize_polygon(region.boundary, doc_height, doc_width);
  RegionRaster raster{0, 0, std::move(full)};
  return mask_target(raster, roi, kMaskSize);
}

AnchorTargets assign_anchor_targets(std::span<const Box> anchors, std::span<const Box> gts,
                                    const AnchorThresholds& thresholds) {
  if (anchors.empty()) throw std::invalid_argument("assign_anchor_targets: no anchors");
  AnchorTargets t;
  t.labels.assign(anchors.size(), AnchorLabel::kNegative);
  t.matched_gt.assign(anchors.size(), -1);
  if (gts.empty()) return t;

  std::vector<double> gt_best(gts.size(), 0.0);
  std::vector<double> anchor_best(anchors.size(), 0.0);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    double best = 0.0;
    int arg = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double iou = box_iou(anchors[a], gts[g]);
      if (iou > best) {
        best = iou;
        arg = static_cast<int>(g);
      }
      gt_best[g] = std::max(gt_best[g], iou);
    }
    anchor_best[a] = best;
    t.matched_gt[a] = arg;
    if (best >= thresholds.positive_iou) t.labels[a] = AnchorLabel::kPositive;
    else if (best >= thresholds.negative_iou) t.labels[a] = AnchorLabel::kIgnore;
  }
  // Every gt keeps its best anchor(s), even below the positive threshold.
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (anchor_best[a] <= 0.0 || t.labels[a] == AnchorLabel::kPositive) continue;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gt_best[g] > 0.0 && box_iou(anchors[a], gts[g]) == gt_best[g]) {
        t.labels[a] = AnchorLabel::kPositive;
        break;
      }
    }
  }
  return t;
}

std::string_view to_string(TrainableScope s) {
  switch (s) {
    case TrainableScope::kHeadsOnly: return "heads_only";
    case TrainableScope::kStage4AndUp: return "stage4_and_up";
    case TrainableScope::kAll: return "all";
  }
  return "?";
}

std::string_view to_string(MaskLossKind k) { return k == MaskLossKind::kBce ? "bce" : "focal"; }

GradPlan grad_plan_for(TrainableScope scope) {
  GradPlan plan;
  auto set = [&](ParamGroup g, bool v) { plan.trainable[static_cast<std::size_t>(g)] = v; };
  const bool all = scope == TrainableScope::kAll;
  const bool upper = scope != TrainableScope::kHeadsOnly;
  set(ParamGroup::kStem, all);
  set(ParamGroup::kRes2, all);
  set(ParamGroup::kRes3, all);
  set(ParamGroup::kRes4, upper);
  set(ParamGroup::kRes5, upper);
  set(ParamGroup::kHeads, true);
  return plan;
}

std::vector<StageConfig> default_stages() {
  return {{1, 30, 1e-3, TrainableScope::kHeadsOnly, MaskLossKind::kBce},
          {2, 20, 1e-3, TrainableScope::kStage4AndUp, MaskLossKind::kFocal},
          {3, 15, 1e-4, TrainableScope::kAll, MaskLossKind::kFocal}};
}

// ---------------------------------------------------------------------------
// Config file

namespace {

TrainableScope scope_from_string(const std::string& s) {
  if (s == "heads_only") return TrainableScope::kHeadsOnly;
  if (s == "stage4_and_up") return TrainableScope::kStage4AndUp;
  if (s == "all") return TrainableScope::kAll;
  throw ParseError("unknown trainable scope \"" + s + "\"");
}

MaskLossKind mask_loss_from_string(const std::string& s) {
  if (s == "bce") return MaskLossKind::kBce;
  if (s == "focal") return MaskLossKind::kFocal;
  throw ParseError("unknown mask loss \"" + s + "\"");
}

template <typename T>
void read_opt(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

}  // namespace

TrainingConfig parse_training_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("training config: ") + e.what());
  }
  TrainingConfig cfg;
  try {
    if (j.contains("model")) {
      const auto& m = j.at("model");
      cfg.model = m.is_string() ? model_config_from_preset(m.get<std::string>())
                                : model_config_from_json(m.dump());
    }
    if (j.contains("stages")) {
      cfg.stages.clear();
      int index = 1;
      const auto defaults = default_stages();
      for (const auto& s : j.at("stages")) {
        StageConfig st = index <= 3 ? defaults[index - 1] : StageConfig{};
        st.stage = index++;
        read_opt(s, "stage", st.stage);
        read_opt(s, "epochs", st.epochs);
        read_opt(s, "learning_rate", st.learning_rate);
        if (s.contains("trainable")) st.scope = scope_from_string(s.at("trainable"));
        if (s.contains("mask_loss")) st.mask_loss = mask_loss_from_string(s.at("mask_loss"));
        if (st.epochs < 0 || !(st.learning_rate > 0.0))
          throw ValidationError("stage " + std::to_string(st.stage) +
                                ": epochs must be >= 0 and learning_rate > 0");
        cfg.stages.push_back(st);
      }
    }
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      read_opt(o, "momentum", cfg.optimizer.momentum);
      read_opt(o, "weight_decay", cfg.optimizer.weight_decay);
      read_opt(o, "batch_size", cfg.optimizer.batch_size);
      read_opt(o, "clip_norm", cfg.optimizer.clip_norm);
      if (o.contains("clip_mode")) {
        const auto m = o.at("clip_mode").get<std::string>();
        if (m != "per_tensor" && m != "global")
          throw ValidationError("clip_mode must be per_tensor or global");
        cfg.optimizer.clip_per_tensor = m == "per_tensor";
      }
      read_opt(o, "focal_gamma", cfg.optimizer.focal_gamma);
      if (cfg.optimizer.batch_size != 1)
        throw ValidationError("only batch_size 1 is supported");
    }
    if (j.contains("sampling")) {
      const auto& s = j.at("sampling");
      auto& c = cfg.sampling;
      read_opt(s, "anchor_positive_iou", c.anchor_thresholds.positive_iou);
      read_opt(s, "anchor_negative_iou", c.anchor_thresholds.negative_iou);
      read_opt(s, "rpn_batch", c.rpn_batch);
      read_opt(s, "rpn_positive_fraction", c.rpn_positive_fraction);
      read_opt(s, "proposal_objectness_floor", c.proposal_objectness_floor);
      read_opt(s, "proposal_nms", c.proposal_nms);
      read_opt(s, "pre_nms_limit", c.pre_nms_limit);
      read_opt(s, "train_proposals", c.train_proposals);
      read_opt(s, "add_gt_rois", c.add_gt_rois);
      read_opt(s, "roi_batch", c.roi_batch);
      read_opt(s, "roi_positive_fraction", c.roi_positive_fraction);
      read_opt(s, "roi_positive_iou", c.roi_positive_iou);
    }
    if (j.contains("loss_weights")) {
      const auto& w = j.at("loss_weights");
      read_opt(w, "rpn", cfg.loss_weights.rpn);
      read_opt(w, "region", cfg.loss_weights.region);
      read_opt(w, "box", cfg.loss_weights.box);
      read_opt(w, "mask", cfg.loss_weights.mask);
    }
    read_opt(j, "seed", cfg.seed);
    read_opt(j, "steps_per_epoch", cfg.steps_per_epoch);
    if (j.contains("pretrained_weights") && !j.at("pretrained_weights").is_null())
      cfg.pretrained_weights = j.at("pretrained_weights").get<std::string>();
    if (j.contains("feature_cache_mb"))
      cfg.feature_cache_bytes = j.at("feature_cache_mb").get<std::size_t>() << 20;
  } catch (const json::exception& e) {
    throw ParseError(std::string("training config: ") + e.what());
  }
  return cfg;
}

TrainingConfig load_training_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read training config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_training_config(ss.str());
}

std::string training_config_to_json(const TrainingConfig& cfg) {
  json j;
  j["model"] = json::parse(model_config_to_json(cfg.model));
  j["stages"] = json::array();
  for (const auto& s : cfg.stages)
    j["stages"].push_back({{"stage", s.stage},
                           {"epochs", s.epochs},
                           {"learning_rate", s.learning_rate},
                           {"trainable", to_string(s.scope)},
                           {"mask_loss", to_string(s.mask_loss)}});
  const auto& o = cfg.optimizer;
  j["optimizer"] = {{"momentum", o.momentum},     {"weight_decay", o.weight_decay},
                    {"batch_size", o.batch_size}, {"clip_norm", o.clip_norm},
                    {"clip_mode", o.clip_per_tensor ? "per_tensor" : "global"},
                    {"focal_gamma", o.focal_gamma}};
  const auto& s = cfg.sampling;
  j["sampling"] = {{"anchor_positive_iou", s.anchor_thresholds.positive_iou},
                   {"anchor_negative_iou", s.anchor_thresholds.negative_iou},
                   {"rpn_batch", s.rpn_batch},
                   {"rpn_positive_fraction", s.rpn_positive_fraction},
                   {"proposal_objectness_floor", s.proposal_objectness_floor},
                   {"proposal_nms", s.proposal_nms},
                   {"pre_nms_limit", s.pre_nms_limit},
                   {"train_proposals", s.train_proposals},
                   {"add_gt_rois", s.add_gt_rois},
                   {"roi_batch", s.roi_batch},
                   {"roi_positive_fraction", s.roi_positive_fraction},
                   {"roi_positive_iou", s.roi_positive_iou}};
  j["loss_weights"] = {{"rpn", cfg.loss_weights.rpn},
                       {"region", cfg.loss_weights.region},
                       {"box", cfg.loss_weights.box},
                       {"mask", cfg.loss_weights.mask}};
  j["seed"] = cfg.seed;
  j["steps_per_epoch"] = cfg.steps_per_epoch;
  if (cfg.pretrained_weights) j["pretrained_weights"] = cfg.pretrained_weights->string();
  j["feature_cache_mb"] = cfg.feature_cache_bytes >> 20;
  return j.dump(2);
}

std::string epoch_log_line(const EpochLog& e) {
  json j = {{"stage", e.stage},
            {"epoch", e.epoch},
            {"global_epoch", e.global_epoch},
            {"steps", e.steps},
            {"loss", e.total},
            {"rpn", e.mean.rpn},
            {"region", e.mean.region},
            {"box", e.mean.box},
            {"mask", e.mean.mask},
            {"max_clipped_grad_norm", e.max_clipped_norm}};
  return j.dump();
}

ImageSource png_image_source(std::filesystem::path root) {
  return [root = std::move(root)](const DocumentAnnotation& doc) {
    const std::filesystem::path p(doc.image_path);
    return read_png(p.is_absolute() ? p : root / p);
  };
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

struct PreparedDoc {
  const DocumentAnnotation* doc = nullptr;
  PreprocessResult pre;
  std::vector<Box> gt_boxes;
  std::vector<int> gt_classes;  // model class index (1-based)
  std::vector<RegionRaster> rasters;
  AnchorTargets anchor_targets;
  std::vector<Tensor> cached_stages;
};

PreparedDoc prepare_document(const DocumentAnnotation& doc, const ImageSource& images,
                             const MaskRcnn& model, const AnchorThresholds& thresholds) {
  PreparedDoc p;
  p.doc = &doc;
  const Image image = images(doc);
  if (image.width() != doc.width || image.height() != doc.height)
    throw ValidationError("document " + doc.doc_id + ": image is " + std::to_string(image.width()) +
                          "x" + std::to_string(image.height()) + " but annotation says " +
                          std::to_string(doc.width) + "x" + std::to_string(doc.height));
  p.pre = preprocess_image(image, model.input_size(), model.input_channels());
  const int size = model.input_size();
  for (const auto& region : doc.regions) {
    Polygon scaled = region.boundary;
    for (auto& v : scaled.vertices) {
      v.x *= p.pre.scale;
      v.y *= p.pre.scale;
    }
    RegionRaster raster = rasterize_region(scaled, size, size);
    const auto box = mask_to_box(raster.mask);
    if (!box) continue;  // thinner than a pixel after scaling
    p.gt_boxes.push_back({box->x1 + raster.x0, box->y1 + raster.y0, box->x2 + raster.x0,
                          box->y2 + raster.y0});
    p.gt_classes.push_back(static_cast<int>(index_of(region.region_class)) + 1);
    p.rasters.push_back(std::move(raster));
  }
  p.anchor_targets = assign_anchor_targets(model.anchors(), p.gt_boxes, thresholds);
  return p;
}

// Number of leading backbone stages (res2, res3, ...) whose outputs can be
// cached because neither they nor anything before them trains.
int frozen_prefix_stages(const GradPlan& plan) {
  if (plan.group(ParamGroup::kStem)) return 0;
  const ParamGroup stages[4] = {ParamGroup::kRes2, ParamGroup::kRes3, ParamGroup::kRes4,
                                ParamGroup::kRes5};
  for (int k = 0; k < 4; ++k)
    if (plan.group(stages[k])) return k;
  return 4;
}

std::size_t tensor_bytes(const std::vector<Tensor>& ts) {
  std::size_t n = 0;
  for (const auto& t : ts) n += t.size() * sizeof(float);
  return n;
}

void check_finite(double v, const char* component, int stage, int step, const std::string& doc) {
  if (!std::isfinite(v))
    throw std::runtime_error(std::string("non-finite ") + component + " loss at stage " +
                             std::to_string(stage) + ", step " + std::to_string(step) +
                             " (document " + doc + ")");
}

class Trainer {
 public:
  Trainer(const TrainingConfig& cfg, MaskRcnn& model) : cfg_(cfg), model_(model) {}

  struct StepResult {
    LossComponents losses;
    double total = 0.0;
    double grad_norm = 0.0;
    double clipped_norm = 0.0;
  };

  void begin_stage(const StageConfig& stage) {
    stage_ = stage;
    plan_ = grad_plan_for(stage.scope);
    cache_stages_ = frozen_prefix_stages(plan_);
    velocity_.clear();
    trainable_.clear();
    for (auto* p : model_.parameters().all()) {
      if (!plan_.group(p->group)) continue;
      trainable_.push_back(p);
      velocity_.emplace_back(p->size(), 0.0f);
    }
    cache_used_ = 0;
  }

  void drop_cache(std::vector<PreparedDoc>& docs) {
    for (auto& d : docs) d.cached_stages.clear();
    cache_used_ = 0;
  }

  StepResult step(PreparedDoc& doc, Rng& rng, int step_index) {
    const auto& s = cfg_.sampling;
    const auto& w = cfg_.loss_weights;
    model_.parameters().zero_grad();

    // Features, reusing the frozen prefix when cached.
    FeatureState fs;
    if (cache_stages_ > 0 && !doc.cached_stages.empty()) {
      fs = model_.forward_features(doc.pre.input, doc.cached_stages);
    } else {
      fs = model_.forward_features(doc.pre.input);
      if (cache_stages_ > 0) {
        std::vector<Tensor> keep;
        for (int k = 0; k < cache_stages_; ++k) keep.push_back(fs.stage_output(k));
        const std::size_t bytes = tensor_bytes(keep);
        if (cache_used_ + bytes <= cfg_.feature_cache_bytes) {
          cache_used_ += bytes;
          doc.cached_stages = std::move(keep);
        }
      }
    }
    model_.init_grad_pyramid(fs);

    // RPN.
    const RpnState rs = model_.forward_rpn(fs);
    const RpnOutput rpn = model_.rpn_output(rs);
    const auto anchors = model_.anchors();
    const std::size_t n_anchors = anchors.size();
    std::vector<float> d_rpn_logits(2 * n_anchors, 0.0f);
    std::vector<float> d_rpn_deltas(4 * n_anchors, 0.0f);
    LossComponents loss;
    {
      std::vector<std::size_t> pos, neg;
      for (std::size_t a = 0; a < n_anchors; ++a) {
        const auto label = doc.anchor_targets.labels[a];
        if (label == AnchorLabel::kPositive) pos.push_back(a);
        else if (label == AnchorLabel::kNegative) neg.push_back(a);
      }
      rng.shuffle(pos.begin(), pos.end());
      rng.shuffle(neg.begin(), neg.end());
      const std::size_t n_pos = std::min<std::size_t>(
          pos.size(), static_cast<std::size_t>(s.rpn_batch * s.rpn_positive_fraction));
      const std::size_t n_neg = std::min<std::size_t>(neg.size(), s.rpn_batch - n_pos);
      pos.resize(n_pos);
      neg.resize(n_neg);
      const double n_cls = static_cast<double>(n_pos + n_neg);
      double cls_loss = 0.0;
      auto add_cls = [&](std::size_t a, std::size_t cls) {
        double logits[2];
        rpn_logits_of(rs, a, logits);
        double grad[2];
        cls_loss += softmax_cross_entropy(logits, cls, grad);
        d_rpn_logits[2 * a] = static_cast<float>(w.rpn * grad[0] / n_cls);
        d_rpn_logits[2 * a + 1] = static_cast<float>(w.rpn * grad[1] / n_cls);
      };
      for (auto a : pos) add_cls(a, 1);
      for (auto a : neg) add_cls(a, 0);
      if (n_cls > 0) cls_loss /= n_cls;

      double box_loss = 0.0;
      if (!pos.empty()) {
        std::vector<double> pred, target, grad(4 * pos.size());
        for (auto a : pos) {
          const int g = doc.anchor_targets.matched_gt[a];
          const BoxDelta t = encode_box_deltas(anchors[a], doc.gt_boxes[g]);
          const double tv[4] = {t.dx / kBoxDeltaStd[0], t.dy / kBoxDeltaStd[1],
                                t.dw / kBoxDeltaStd[2], t.dh / kBoxDeltaStd[3]};
          double pv[4];
          rpn_deltas_of(rs, a, pv);
          for (int k = 0; k < 4; ++k) {
            pred.push_back(pv[k]);
            target.push_back(tv[k]);
          }
        }
        box_loss = smooth_l1(pred, target, grad);
        for (std::size_t i = 0; i < pos.size(); ++i)
          for (int k = 0; k < 4; ++k)
            d_rpn_deltas[4 * pos[i] + k] = static_cast<float>(w.rpn * grad[4 * i + k]);
      }
      loss.rpn = cls_loss + box_loss;
    }

    // Proposals and RoI sampling.
    ProposalOptions popts;
    popts.objectness_floor = s.proposal_objectness_floor;
    popts.nms_threshold = s.proposal_nms;
    popts.max_proposals = static_cast<std::size_t>(s.train_proposals);
    popts.pre_nms_limit = static_cast<std::size_t>(s.pre_nms_limit);
    popts.clip_window = doc.pre.content_box();
    Proposals props = rpn_propose(rpn, anchors, popts);
    std::vector<Box> candidates = std::move(props.boxes);
    if (s.add_gt_rois) candidates.insert(candidates.end(), doc.gt_boxes.begin(), doc.gt_boxes.end());

    std::vector<std::size_t> roi_pos, roi_neg;
    std::vector<int> roi_gt(candidates.size(), -1);
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      double best = 0.0;
      for (std::size_t g = 0; g < doc.gt_boxes.size(); ++g) {
        const double iou = box_iou(candidates[i], doc.gt_boxes[g]);
        if (iou > best) {
          best = iou;
          roi_gt[i] = static_cast<int>(g);
        }
      }
      if (roi_gt[i] >= 0 && best >= s.roi_positive_iou) roi_pos.push_back(i);
      else roi_neg.push_back(i);
    }
    rng.shuffle(roi_pos.begin(), roi_pos.end());
    rng.shuffle(roi_neg.begin(), roi_neg.end());
    const double f = s.roi_positive_fraction;
    const std::size_t n_pos = std::min<std::size_t>(
        roi_pos.size(), static_cast<std::size_t>(std::floor(s.roi_batch * f)));
    std::size_t neg_quota = n_pos > 0
                                ? static_cast<std::size_t>(std::ceil(n_pos * (1.0 - f) / f))
                                : static_cast<std::size_t>(std::floor(s.roi_batch * (1.0 - f)));
    neg_quota = std::min<std::size_t>(neg_quota, s.roi_batch - n_pos);
    const std::size_t n_neg = std::min(roi_neg.size(), neg_quota);

    std::vector<Box> rois;
    std::vector<int> roi_class, roi_match;
    for (std::size_t i = 0; i < n_pos; ++i) {
      rois.push_back(candidates[roi_pos[i]]);
      roi_match.push_back(roi_gt[roi_pos[i]]);
      roi_class.push_back(doc.gt_classes[roi_gt[roi_pos[i]]]);
    }
    for (std::size_t i = 0; i < n_neg; ++i) {
      rois.push_back(candidates[roi_neg[i]]);
      roi_match.push_back(-1);
      roi_class.push_back(0);
    }

    // Class and box heads.
    if (!rois.empty()) {
      const HeadState hs = model_.forward_heads(fs.pyramid, rois);
      const int r = static_cast<int>(rois.size());
      nn::Matrix dclass(r, kNumModelClasses);
      nn::Matrix dbox(r, 4 * kNumModelClasses);
      double cls_loss = 0.0;
      std::array<double, kNumModelClasses> logits{}, grad{};
      for (int i = 0; i < r; ++i) {
        for (int c = 0; c < kNumModelClasses; ++c) logits[c] = hs.class_logits.at(i, c);
        cls_loss += softmax_cross_entropy(logits, static_cast<std::size_t>(roi_class[i]), grad);
        for (int c = 0; c < kNumModelClasses; ++c)
          dclass.at(i, c) = static_cast<float>(w.region * grad[c] / r);
      }
      loss.region = cls_loss / r;
      if (n_pos > 0) {
        std::vector<double> pred, target, bgrad(4 * n_pos);
        for (std::size_t i = 0; i < n_pos; ++i) {
          const BoxDelta t = encode_box_deltas(rois[i], doc.gt_boxes[roi_match[i]]);
          const double tv[4] = {t.dx / kBoxDeltaStd[0], t.dy / kBoxDeltaStd[1],
                                t.dw / kBoxDeltaStd[2], t.dh / kBoxDeltaStd[3]};
          for (int k = 0; k < 4; ++k) {
            pred.push_back(hs.box_deltas.at(static_cast<int>(i), 4 * roi_class[i] + k));
            target.push_back(tv[k]);
          }
        }
        loss.box = smooth_l1(pred, target, bgrad);
        for (std::size_t i = 0; i < n_pos; ++i)
          for (int k = 0; k < 4; ++k)
            dbox.at(static_cast<int>(i), 4 * roi_class[i] + k) =
                static_cast<float>(w.box * bgrad[4 * i + k]);
      }
      model_.backward_heads(hs, fs, dclass, dbox, plan_);
    }

    // Mask head on positive RoIs.
    if (n_pos > 0) {
      std::vector<Box> mask_rois(rois.begin(), rois.begin() + static_cast<long>(n_pos));
      const MaskState ms = model_.forward_masks(fs.pyramid, mask_rois);
      std::vector<Tensor> dmask;
      double mloss = 0.0;
      const double gamma = stage_.mask_loss == MaskLossKind::kFocal ? cfg_.optimizer.focal_gamma : 0.0;
      std::vector<double> logits(kMaskSize * kMaskSize), target(logits.size()), grad(logits.size());
      for (std::size_t i = 0; i < n_pos; ++i) {
        const auto& lg = ms.per_roi[i].logits;
        const int channel = roi_class[i] - 1;
        const BinaryMask t = mask_target(doc.rasters[roi_match[i]], mask_rois[i], kMaskSize);
        const float* src = lg.channel(channel);
        for (std::size_t p = 0; p < logits.size(); ++p) {
          logits[p] = src[p];
          target[p] = t.bits()[p];
        }
        mloss += mask_focal_logits(logits, target, gamma, grad);
        Tensor d(lg.channels, lg.height, lg.width);
        float* dst = d.channel(channel);
        for (std::size_t p = 0; p < logits.size(); ++p)
          dst[p] = static_cast<float>(w.mask * grad[p] / static_cast<double>(n_pos));
        dmask.push_back(std::move(d));
      }
      loss.mask = mloss / static_cast<double>(n_pos);
      model_.backward_masks(ms, fs, dmask, plan_);
    }

    const std::string& id = doc.doc->doc_id;
    check_finite(loss.rpn, "RPN", stage_.stage, step_index, id);
    check_finite(loss.region, "region classification", stage_.stage, step_index, id);
    check_finite(loss.box, "bounding box", stage_.stage, step_index, id);
    check_finite(loss.mask, "mask", stage_.stage, step_index, id);

    model_.backward_rpn(rs, fs, d_rpn_logits, d_rpn_deltas, plan_);
    model_.backward_features(fs, plan_);

    StepResult result;
    result.losses = loss;
    result.total = total_loss(loss, w);
    apply_update(result);
    return result;
  }

 private:
  static void locate(const RpnState& rs, std::size_t a, int& level, int& r, int& y, int& x) {
    for (level = 0; level < kPyramidLevels; ++level) {
      const std::size_t n = rs.logits[level].plane() * kAnchorRatios;
      if (a < n) break;
      a -= n;
    }
    r = static_cast<int>(a % kAnchorRatios);
    const std::size_t cell = a / kAnchorRatios;
    const int width = rs.logits[level].width;
    y = static_cast<int>(cell / width);
    x = static_cast<int>(cell % width);
  }

  static void rpn_logits_of(const RpnState& rs, std::size_t a, double out[2]) {
    int level, r, y, x;
    locate(rs, a, level, r, y, x);
    out[0] = rs.logits[level].at(2 * r, y, x);
    out[1] = rs.logits[level].at(2 * r + 1, y, x);
  }

  static void rpn_deltas_of(const RpnState& rs, std::size_t a, double out[4]) {
    int level, r, y, x;
    locate(rs, a, level, r, y, x);
    for (int k = 0; k < 4; ++k) out[k] = rs.deltas[level].at(4 * r + k, y, x);
  }

  void apply_update(StepResult& result) {
    const auto& o = cfg_.optimizer;
    std::vector<std::vector<double>> g(trainable_.size());
    std::vector<double> tensor_sq(trainable_.size(), 0.0);
    double sq = 0.0;
    for (std::size_t i = 0; i < trainable_.size(); ++i) {
      const auto* p = trainable_[i];
      const double wd = p->weight_decay ? o.weight_decay : 0.0;
      g[i].resize(p->size());
      for (std::size_t k = 0; k < p->size(); ++k) {
        const double v = static_cast<double>(p->grad[k]) + wd * p->value[k];
        g[i][k] = v;
        tensor_sq[i] += v * v;
      }
      sq += tensor_sq[i];
    }
    const double norm = std::sqrt(sq);
    const double global_factor = norm > o.clip_norm ? o.clip_norm / norm : 1.0;
    result.grad_norm = norm;
    double clipped_sq = 0.0;
    for (std::size_t i = 0; i < trainable_.size(); ++i) {
      auto* p = trainable_[i];
      auto& vel = velocity_[i];
      double factor = global_factor;
      if (o.clip_per_tensor) {
        const double tn = std::sqrt(tensor_sq[i]);
        factor = tn > o.clip_norm ? o.clip_norm / tn : 1.0;
      }
      for (std::size_t k = 0; k < p->size(); ++k) {
        const double gk = g[i][k] * factor;
        clipped_sq += gk * gk;
        vel[k] = static_cast<float>(o.momentum * vel[k] - stage_.learning_rate * gk);
        p->value[k] += vel[k];
      }
    }
    result.clipped_norm = std::sqrt(clipped_sq);
  }

  const TrainingConfig& cfg_;
  MaskRcnn& model_;
  StageConfig stage_;
  GradPlan plan_;
  int cache_stages_ = 0;
  std::size_t cache_used_ = 0;
  std::vector<nn::Parameter*> trainable_;
  std::vector<nn::FloatBuffer> velocity_;
};

}  // namespace

TrainingResult run_training(std::span<const DocumentAnnotation> corpus,
                            const CorpusManifest& manifest, const ImageSource& images,
                            const TrainingConfig& cfg, const TrainingObserver& observer) {
  if (cfg.stages.empty()) throw ValidationError("training needs at least one stage");
  std::vector<const DocumentAnnotation*> train;
  for (const auto& d : corpus) {
    auto it = manifest.splits.find(d.doc_id);
    if (it != manifest.splits.end() && it->second == Split::kTrain) train.push_back(&d);
  }
  if (train.empty()) throw ValidationError("the train split is empty");
  auto say = [&](const std::string& msg) {
    if (observer.message) observer.message(msg);
  };

  TrainingResult result;
  result.model = std::make_unique<MaskRcnn>(cfg.model, Rng::derive(cfg.seed, 1));
  MaskRcnn& model = *result.model;
  if (cfg.pretrained_weights) {
    std::vector<std::string> skipped;
    const auto n = load_pretrained(model, *cfg.pretrained_weights, &skipped);
    say("loaded " + std::to_string(n) + " pretrained tensors from " +
        cfg.pretrained_weights->string() + " (" + std::to_string(skipped.size()) + " skipped)");
  } else {
    say("WARNING: no pretrained weights supplied; training starts from seeded random "
        "initialisation");
  }

  std::vector<PreparedDoc> docs;
  docs.reserve(train.size());
  for (const auto* d : train)
    docs.push_back(prepare_document(*d, images, model, cfg.sampling.anchor_thresholds));

  Trainer trainer(cfg, model);
  Rng order_rng(Rng::derive(cfg.seed, 2));
  Rng sample_rng(Rng::derive(cfg.seed, 3));
  std::vector<std::size_t> order(docs.size());
  std::size_t cursor = order.size();  // forces a reshuffle on first use
  auto next_doc = [&]() -> std::size_t {
    if (cursor >= order.size()) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      order_rng.shuffle(order.begin(), order.end());
      cursor = 0;
    }
    return order[cursor++];
  };

  int global_epoch = 0;
  int global_step = 0;
  for (const auto& stage : cfg.stages) {
    trainer.drop_cache(docs);
    trainer.begin_stage(stage);
    cursor = order.size();
    if (observer.on_stage_begin) observer.on_stage_begin(stage, model);
    for (int epoch = 1; epoch <= stage.epochs; ++epoch) {
      const auto start = std::chrono::steady_clock::now();
      const int steps = cfg.steps_per_epoch > 0 ? cfg.steps_per_epoch : static_cast<int>(docs.size());
      EpochLog log;
      log.stage = stage.stage;
      log.epoch = epoch;
      log.global_epoch = ++global_epoch;
      log.steps = steps;
      for (int k = 0; k < steps; ++k) {
        auto& doc = docs[next_doc()];
        const auto r = trainer.step(doc, sample_rng, ++global_step);
        log.mean.rpn += r.losses.rpn;
        log.mean.region += r.losses.region;
        log.mean.box += r.losses.box;
        log.mean.mask += r.losses.mask;
        log.total += r.total;
        log.max_clipped_norm = std::max(log.max_clipped_norm, r.clipped_norm);
        if (observer.on_step) {
          StepRecord rec{stage.stage, global_step, doc.doc->doc_id, r.losses, r.total, r.grad_norm,
                         r.clipped_norm};
          observer.on_step(rec);
        }
      }
      log.mean.rpn /= steps;
      log.mean.region /= steps;
      log.mean.box /= steps;
      log.mean.mask /= steps;
      log.total /= steps;
      log.seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      result.log.push_back(log);
      if (observer.on_epoch) observer.on_epoch(log);
    }
    if (observer.on_stage_end) observer.on_stage_end(stage, model);
  }
  return result;
}

}  // namespace palm
