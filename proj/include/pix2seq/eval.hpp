#pragma once

// COCO-convention detection metrics: IoU, greedy score-ordered matching,
// 101-point interpolated AP over IoU thresholds and area buckets, AR@100.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pix2seq/codec.hpp"
#include "pix2seq/infer.hpp"

namespace pix2seq {

inline double iou(const BBox& a, const BBox& b) {
  const double ih = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double iw = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double inter = ih * iw;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct MatchResult {
  std::vector<bool> true_positive;  // aligned with the input detection order
  std::vector<int> matched_gt;      // gt index or -1
  int unmatched_gt = 0;
};

namespace detail {

// Detections in score order (stable) claim the unmatched same-class ground
// truth with the highest IoU >= threshold; equal IoU goes to the lower gt
// index. Ground truths flagged ignored are considered only after non-ignored
// ones, and a detection already holding a non-ignored match never moves to an
// ignored one.
inline std::vector<int> greedy_match(const std::vector<Detection>& dets, const std::vector<std::size_t>& det_order,
                                     const std::vector<AnnotatedObject>& gts, const std::vector<bool>& gt_ignore,
                                     double threshold) {
  std::vector<std::size_t> gt_order(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) gt_order[i] = i;
  std::stable_sort(gt_order.begin(), gt_order.end(),
                   [&](std::size_t a, std::size_t b) { return !gt_ignore[a] && gt_ignore[b]; });
  std::vector<bool> taken(gts.size(), false);
  std::vector<int> match(dets.size(), -1);
  for (std::size_t di : det_order) {
    int best = -1;
    double best_iou = 0;
    for (std::size_t gi : gt_order) {
      if (taken[gi] || gts[gi].class_id != dets[di].class_id) continue;
      if (best >= 0 && !gt_ignore[static_cast<std::size_t>(best)] && gt_ignore[gi]) break;
      const double v = iou(dets[di].box, gts[gi].box);
      if (v < threshold) continue;
      if (best < 0 || v > best_iou) {
        best = static_cast<int>(gi);
        best_iou = v;
      }
    }
    if (best >= 0) taken[static_cast<std::size_t>(best)] = true;
    match[di] = best;
  }
  return match;
}

inline std::vector<std::size_t> score_order(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

}  // namespace detail

inline MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<AnnotatedObject>& gts,
                                    double iou_threshold) {
  MatchResult r;
  r.matched_gt =
      detail::greedy_match(dets, detail::score_order(dets), gts, std::vector<bool>(gts.size(), false), iou_threshold);
  r.true_positive.resize(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) r.true_positive[i] = r.matched_gt[i] >= 0;
  r.unmatched_gt = static_cast<int>(gts.size()) -
                   static_cast<int>(std::count(r.true_positive.begin(), r.true_positive.end(), true));
  return r;
}

// Ground truth for one image; area buckets use its pixel dimensions.
struct EvalImage {
  std::int64_t image_id = 0;
  int height = 0;
  int width = 0;
  std::vector<AnnotatedObject> objects;
};

struct AreaRange {
  double lo = 0;
  double hi = 1e10;
};

inline constexpr AreaRange kAreaAll{0, 1e10};
inline constexpr AreaRange kAreaSmall{0, 32.0 * 32.0};
inline constexpr AreaRange kAreaMedium{32.0 * 32.0, 96.0 * 96.0};
inline constexpr AreaRange kAreaLarge{96.0 * 96.0, 1e10};

struct EvalParams {
  std::vector<double> iou_thresholds;
  int max_detections = 100;
  int recall_points = 101;

  static EvalParams coco() {
    EvalParams p;
    for (int i = 0; i < 10; ++i) p.iou_thresholds.push_back(0.5 + 0.05 * i);
    return p;
  }
};

// Metrics are absent (nullopt) when no ground truth exists for them.
struct EvalResult {
  std::optional<double> AP, AP50, AP75, AP_small, AP_medium, AP_large, AR_at_100;
  std::vector<std::optional<double>> ap_per_threshold;

  static constexpr const char* kFieldNames[] = {"AP", "AP50", "AP75", "AP_small", "AP_medium", "AP_large", "AR_at_100"};

  std::vector<std::optional<double>> fields() const { return {AP, AP50, AP75, AP_small, AP_medium, AP_large, AR_at_100}; }
};

struct CurveSummary {
  std::optional<double> ap;      // nullopt when there is no non-ignored gt
  std::optional<double> recall;
};

// Precision at recall thresholds k / (points - 1), taken from the
// right-maximum precision envelope.
inline double interpolated_ap(const std::vector<double>& recall, const std::vector<double>& precision, int points) {
  std::vector<double> pr = precision;
  for (std::size_t i = pr.size(); i-- > 1;) pr[i - 1] = std::max(pr[i - 1], pr[i]);
  double sum = 0;
  for (int k = 0; k < points; ++k) {
    const double r = static_cast<double>(k) / (points - 1);
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) sum += pr[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / points;
}

using DetectionsByImage = std::map<std::int64_t, std::vector<Detection>>;

// AP and final recall for one class, IoU threshold and area range.
inline CurveSummary evaluate_curve(const std::vector<EvalImage>& images, const DetectionsByImage& dets, int class_id,
                                   double threshold, AreaRange range, const EvalParams& params) {
  struct Scored {
    double score;
    bool tp;
  };
  std::vector<Scored> scored;
  std::size_t n_gt = 0;
  for (const auto& img : images) {
    const double px = static_cast<double>(img.height) * img.width;
    auto in_range = [&](const BBox& b) {
      const double a = b.area() * px;
      return a >= range.lo && a <= range.hi;
    };
    std::vector<AnnotatedObject> gts;
    std::vector<bool> gt_ignore;
    for (const auto& o : img.objects) {
      if (o.class_id != class_id) continue;
      gts.push_back(o);
      gt_ignore.push_back(!in_range(o.box));
      n_gt += !gt_ignore.back();
    }
    std::vector<Detection> cls_dets;
    if (auto it = dets.find(img.image_id); it != dets.end())
      for (const auto& d : it->second)
        if (d.class_id == class_id) cls_dets.push_back(d);
    auto order = detail::score_order(cls_dets);
    if (static_cast<int>(order.size()) > params.max_detections) order.resize(static_cast<std::size_t>(params.max_detections));
    const auto match = detail::greedy_match(cls_dets, order, gts, gt_ignore, threshold);
    for (std::size_t di : order) {
      const int g = match[di];
      const bool ignore = g >= 0 ? gt_ignore[static_cast<std::size_t>(g)] : !in_range(cls_dets[di].box);
      if (!ignore) scored.push_back({cls_dets[di].score, g >= 0});
    }
  }
  if (n_gt == 0) return {};
  std::stable_sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
  std::vector<double> recall, precision;
  double tp = 0, fp = 0;
  for (const auto& s : scored) {
    (s.tp ? tp : fp) += 1;
    recall.push_back(tp / static_cast<double>(n_gt));
    precision.push_back(tp / (tp + fp));
  }
  return {interpolated_ap(recall, precision, params.recall_points), recall.empty() ? 0.0 : recall.back()};
}

namespace detail {
inline std::optional<double> mean_present(const std::vector<std::optional<double>>& values) {
  double sum = 0;
  int n = 0;
  for (const auto& v : values)
    if (v) sum += *v, ++n;
  if (n == 0) return std::nullopt;
  return sum / n;
}
}  // namespace detail

// Classes are those with at least one ground-truth object. Detection ties
// across images resolve by image order, then per-image score order.
inline EvalResult average_precision(const std::vector<EvalImage>& images, const DetectionsByImage& dets,
                                    const EvalParams& params = EvalParams::coco()) {
  std::set<int> classes;
  for (const auto& img : images)
    for (const auto& o : img.objects) classes.insert(o.class_id);

  auto collect = [&](AreaRange range, const std::vector<double>& thresholds, bool want_recall) {
    std::vector<std::optional<double>> values;
    for (double t : thresholds)
      for (int c : classes) {
        const auto s = evaluate_curve(images, dets, c, t, range, params);
        values.push_back(want_recall ? s.recall : s.ap);
      }
    return values;
  };
  const auto& th = params.iou_thresholds;
  EvalResult r;
  const auto all = collect(kAreaAll, th, false);
  r.AP = detail::mean_present(all);
  for (std::size_t t = 0; t < th.size(); ++t) {
    std::vector<std::optional<double>> slice(all.begin() + static_cast<std::ptrdiff_t>(t * classes.size()),
                                             all.begin() + static_cast<std::ptrdiff_t>((t + 1) * classes.size()));
    r.ap_per_threshold.push_back(detail::mean_present(slice));
  }
  r.AP50 = detail::mean_present(collect(kAreaAll, {0.5}, false));
  r.AP75 = detail::mean_present(collect(kAreaAll, {0.75}, false));
  r.AP_small = detail::mean_present(collect(kAreaSmall, th, false));
  r.AP_medium = detail::mean_present(collect(kAreaMedium, th, false));
  r.AP_large = detail::mean_present(collect(kAreaLarge, th, false));
  r.AR_at_100 = detail::mean_present(collect(kAreaAll, th, true));
  return r;
}

inline std::string format_metric(const std::optional<double>& v) {
  if (!v) return "absent";
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << *v;
  return os.str();
}

// key=value block, one metric per line.
inline void write_metrics_text(std::ostream& os, const EvalResult& r) {
  const auto f = r.fields();
  for (std::size_t i = 0; i < f.size(); ++i) os << EvalResult::kFieldNames[i] << '=' << format_metric(f[i]) << '\n';
}

inline nlohmann::ordered_json metrics_json(const EvalResult& r) {
  nlohmann::ordered_json j;
  const auto f = r.fields();
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (f[i])
      j[EvalResult::kFieldNames[i]] = *f[i];
    else
      j[EvalResult::kFieldNames[i]] = nullptr;
  }
  return j;
}

inline DetectionsByImage group_by_image(const std::vector<ImageDetection>& flat) {
  DetectionsByImage out;
  for (const auto& d : flat) out[d.image_id].push_back(d.detection);
  return out;
}

}  // namespace pix2seq
