#pragma once

// COCO-protocol mask AP: per-class greedy matching in score order at IoU
// thresholds 0.50:0.05:0.95, 101-point interpolated precision, plus size
// buckets scaled to the canvas.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "centermask/common.hpp"

namespace centermask {

// |a ∩ b| / |a ∪ b|; 0 when the union is empty.
inline double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.h != b.h || a.w != b.w) {
    throw ShapeError(detail::cat("mask_iou: canvas mismatch ", a.h, "x", a.w, " vs ", b.h, "x", b.w));
  }
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    bool av = a.data[i] != 0, bv = b.data[i] != 0;
    inter += av && bv;
    uni += av || bv;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct EvalDetection {
  int image_id = 0;
  int class_id = 0;
  double score = 0;
  BinaryMask mask;
};

struct EvalGroundTruth {
  int image_id = 0;
  int class_id = 0;
  BinaryMask mask;
};

struct EvalConfig {
  std::vector<double> iou_thresholds = {0.50, 0.55, 0.60, 0.65, 0.70,
                                        0.75, 0.80, 0.85, 0.90, 0.95};
  // Size buckets as fractions of the canvas area (COCO's absolute 32^2/96^2
  // cutoffs are resolution-specific).
  double small_area_frac = 1.0 / 64;
  double large_area_frac = 1.0 / 16;
};

struct ApReport {
  double ap = 0;    // mean over IoU thresholds and classes
  double ap50 = 0;
  double ap75 = 0;
  double ap_small = 0;
  double ap_medium = 0;
  double ap_large = 0;
  std::map<int, double> per_class;  // at the full threshold range
  std::int64_t num_gt = 0;
  std::int64_t num_detections = 0;
};

namespace detail {

enum class AreaBucket { kAll, kSmall, kMedium, kLarge };

inline AreaBucket bucket_of(std::int64_t area, std::int64_t canvas_area, const EvalConfig& cfg) {
  double frac = static_cast<double>(area) / static_cast<double>(canvas_area);
  if (frac < cfg.small_area_frac) return AreaBucket::kSmall;
  if (frac > cfg.large_area_frac) return AreaBucket::kLarge;
  return AreaBucket::kMedium;
}

// 101-point interpolated AP from (recall, precision) points in detection-rank
// order: mean over r in {0, 0.01, ..., 1} of max precision at recall >= r.
inline double interpolated_ap(const std::vector<double>& recall,
                              const std::vector<double>& precision) {
  double total = 0;
  for (int i = 0; i <= 100; ++i) {
    double r = i / 100.0;
    double best = 0;
    for (std::size_t k = 0; k < recall.size(); ++k) {
      if (recall[k] >= r && precision[k] > best) best = precision[k];
    }
    total += best;
  }
  return total / 101.0;
}

struct ClassEval {
  double ap = 0;
  bool valid = false;  // false when the class has no ground truth
};

// AP for one class at one IoU threshold over pre-filtered dets and gts.
inline ClassEval class_ap(std::vector<const EvalDetection*> dets,
                          const std::vector<const EvalGroundTruth*>& gts, double iou_threshold) {
  ClassEval out;
  if (gts.empty()) return out;
  out.valid = true;
  if (dets.empty()) return out;

  // Score-descending order; ties broken by (image_id, original order) so the
  // match is deterministic.
  std::stable_sort(dets.begin(), dets.end(), [](const EvalDetection* a, const EvalDetection* b) {
    if (a->score != b->score) return a->score > b->score;
    return a->image_id < b->image_id;
  });

  std::vector<bool> gt_matched(gts.size(), false);
  std::vector<double> recall, precision;
  recall.reserve(dets.size());
  precision.reserve(dets.size());
  std::int64_t tp = 0, fp = 0;
  for (const EvalDetection* det : dets) {
    int best_gt = -1;
    double best_iou = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gt_matched[g] || gts[g]->image_id != det->image_id) continue;
      double iou = mask_iou(det->mask, gts[g]->mask);
      if (iou >= iou_threshold && iou > best_iou) {
        best_iou = iou;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) {
      gt_matched[static_cast<std::size_t>(best_gt)] = true;
      ++tp;
    } else {
      ++fp;
    }
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  out.ap = interpolated_ap(recall, precision);
  return out;
}

// Mean AP over classes (with GT) and thresholds, optionally restricted to an
// area bucket: only detections and ground truths whose mask area falls in the
// bucket participate.
inline double bucket_map(const std::vector<EvalDetection>& dets,
                         const std::vector<EvalGroundTruth>& gts,
                         const std::vector<double>& thresholds, int num_classes,
                         AreaBucket bucket, std::int64_t canvas_area, const EvalConfig& cfg,
                         std::map<int, double>* per_class = nullptr) {
  double sum = 0;
  int valid_classes = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<const EvalDetection*> class_dets;
    std::vector<const EvalGroundTruth*> class_gts;
    for (const auto& d : dets) {
      if (d.class_id != c) continue;
      if (bucket != AreaBucket::kAll && bucket_of(d.mask.count(), canvas_area, cfg) != bucket) continue;
      class_dets.push_back(&d);
    }
    for (const auto& g : gts) {
      if (g.class_id != c) continue;
      if (bucket != AreaBucket::kAll && bucket_of(g.mask.count(), canvas_area, cfg) != bucket) continue;
      class_gts.push_back(&g);
    }
    double class_sum = 0;
    bool any_valid = false;
    for (double t : thresholds) {
      ClassEval e = class_ap(class_dets, class_gts, t);
      if (e.valid) {
        any_valid = true;
        class_sum += e.ap;
      }
    }
    if (any_valid) {
      double class_mean = class_sum / static_cast<double>(thresholds.size());
      sum += class_mean;
      ++valid_classes;
      if (per_class) (*per_class)[c] = class_mean;
    }
  }
  return valid_classes == 0 ? 0.0 : sum / valid_classes;
}

}  // namespace detail

// Full report over a detection set and ground-truth set sharing a canvas size.
inline ApReport match_and_score(const std::vector<EvalDetection>& dets,
                                const std::vector<EvalGroundTruth>& gts, int num_classes,
                                int canvas_h, int canvas_w, const EvalConfig& cfg = {}) {
  ApReport report;
  report.num_gt = static_cast<std::int64_t>(gts.size());
  report.num_detections = static_cast<std::int64_t>(dets.size());
  const std::int64_t canvas_area = static_cast<std::int64_t>(canvas_h) * canvas_w;

  report.ap = detail::bucket_map(dets, gts, cfg.iou_thresholds, num_classes,
                                 detail::AreaBucket::kAll, canvas_area, cfg, &report.per_class);
  report.ap50 = detail::bucket_map(dets, gts, {0.50}, num_classes, detail::AreaBucket::kAll,
                                   canvas_area, cfg);
  report.ap75 = detail::bucket_map(dets, gts, {0.75}, num_classes, detail::AreaBucket::kAll,
                                   canvas_area, cfg);
  report.ap_small = detail::bucket_map(dets, gts, cfg.iou_thresholds, num_classes,
                                       detail::AreaBucket::kSmall, canvas_area, cfg);
  report.ap_medium = detail::bucket_map(dets, gts, cfg.iou_thresholds, num_classes,
                                        detail::AreaBucket::kMedium, canvas_area, cfg);
  report.ap_large = detail::bucket_map(dets, gts, cfg.iou_thresholds, num_classes,
                                       detail::AreaBucket::kLarge, canvas_area, cfg);
  return report;
}

}  // namespace centermask
