#include <gtest/gtest.h>

#include <sstream>

#include "pix2seq/eval.hpp"
#include "pix2seq/rng.hpp"
#include "support/eval_instances.hpp"
#include "support/eval_oracle.hpp"

namespace pix2seq {
namespace {

using oracle::Instance;
using oracle::random_instance;

AnnotatedObject gt(double y0, double x0, double y1, double x1, int c = 0) { return {{y0, x0, y1, x1}, c}; }
Detection det(double y0, double x0, double y1, double x1, double s, int c = 0) { return {{y0, x0, y1, x1}, c, s}; }

TEST(IouTest, Examples) {
  EXPECT_DOUBLE_EQ(iou({0.1, 0.2, 0.5, 0.6}, {0.1, 0.2, 0.5, 0.6}), 1.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 0.2, 0.2}, {0.5, 0.5, 1, 1}), 0.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 1, 1}, {0, 0.5, 1, 1}), 0.5);
  EXPECT_DOUBLE_EQ(iou({0.5, 0.5, 0.5, 0.5}, {0.5, 0.5, 0.5, 0.5}), 0.0);
}

TEST(MatchTest, SingleExactDetectionIsTruePositive) {
  const auto r = match_detections({det(0.1, 0.1, 0.4, 0.4, 0.9)}, {gt(0.1, 0.1, 0.4, 0.4)}, 0.5);
  EXPECT_EQ(r.true_positive, std::vector<bool>{true});
  EXPECT_EQ(r.unmatched_gt, 0);
}

TEST(MatchTest, DuplicateIsFalsePositive) {
  // lower-score duplicate listed first to exercise the internal sort
  const auto r =
      match_detections({det(0.1, 0.1, 0.4, 0.4, 0.5), det(0.1, 0.1, 0.4, 0.4, 0.9)}, {gt(0.1, 0.1, 0.4, 0.4)}, 0.5);
  EXPECT_EQ(r.true_positive, (std::vector<bool>{false, true}));
  EXPECT_EQ(r.unmatched_gt, 0);
}

TEST(MatchTest, ClassMismatchNeverMatches) {
  const auto r = match_detections({det(0.1, 0.1, 0.4, 0.4, 0.9, 1)}, {gt(0.1, 0.1, 0.4, 0.4, 0)}, 0.5);
  EXPECT_EQ(r.true_positive, std::vector<bool>{false});
  EXPECT_EQ(r.unmatched_gt, 1);
}

TEST(MatchTest, CrossedOverlapsAgreeWithExhaustiveOracle) {
  // det0 (higher score) overlaps gt1 more than gt0, det1 overlaps both.
  const std::vector<AnnotatedObject> gts{gt(0, 0, 0.5, 0.5), gt(0, 0.2, 0.5, 0.7)};
  const std::vector<Detection> dets{det(0, 0.15, 0.5, 0.65, 0.9), det(0, 0.05, 0.5, 0.55, 0.8)};
  const auto r = match_detections(dets, gts, 0.5);
  EXPECT_EQ(r.matched_gt, oracle::exhaustive_match(dets, gts, 0.5));
  EXPECT_EQ(r.matched_gt, (std::vector<int>{1, 0}));
}

TEST(MatchTest, GreedyEqualsExhaustiveOracleOnRandomInstances) {
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    const auto in = random_instance(rng, 2);
    for (double t : {0.3, 0.5, 0.75}) {
      const auto r = match_detections(in.dets, in.gts, t);
      ASSERT_EQ(r.matched_gt, oracle::exhaustive_match(in.dets, in.gts, t)) << "instance " << i;
    }
  }
}

TEST(BruteForceApTest, HandComputedCurve) {
  // flags T F T with 3 gts: recall 1/3, 1/3, 2/3; precision 1, 1/2, 2/3.
  // r in [0, 1/3] -> 1 (34 points), (1/3, 2/3] -> 2/3 (33 points), above -> 0.
  const double expected = (34 * 1.0 + 33 * (2.0 / 3.0)) / 101.0;
  EXPECT_NEAR(oracle::brute_force_ap({true, false, true}, 3), expected, 1e-15);
  EXPECT_NEAR(interpolated_ap({1.0 / 3, 1.0 / 3, 2.0 / 3}, {1.0, 0.5, 2.0 / 3}, 101), expected, 1e-15);
}

EvalImage image_of(std::vector<AnnotatedObject> objs, std::int64_t id = 1, int h = 480, int w = 640) {
  return {id, h, w, std::move(objs)};
}

TEST(AveragePrecisionTest, PerfectDetections) {
  const std::vector<AnnotatedObject> objs{gt(0.1, 0.1, 0.3, 0.3, 0), gt(0.5, 0.5, 0.9, 0.9, 1)};
  DetectionsByImage dets{{1, {det(0.1, 0.1, 0.3, 0.3, 0.9, 0), det(0.5, 0.5, 0.9, 0.9, 0.8, 1)}}};
  const auto r = average_precision({image_of(objs)}, dets);
  EXPECT_DOUBLE_EQ(*r.AP, 1.0);
  EXPECT_DOUBLE_EQ(*r.AP50, 1.0);
  EXPECT_DOUBLE_EQ(*r.AP75, 1.0);
  EXPECT_DOUBLE_EQ(*r.AR_at_100, 1.0);
}

TEST(AveragePrecisionTest, NoDetections) {
  const auto r = average_precision({image_of({gt(0.1, 0.1, 0.3, 0.3)})}, {});
  EXPECT_EQ(*r.AP, 0.0);
  EXPECT_EQ(*r.AR_at_100, 0.0);
}

TEST(AveragePrecisionTest, EmptyGroundTruthIsAbsent) {
  DetectionsByImage dets{{1, {det(0.1, 0.1, 0.3, 0.3, 0.9)}}};
  const auto r = average_precision({image_of({})}, dets);
  for (const auto& f : r.fields()) EXPECT_FALSE(f.has_value());
  std::ostringstream os;
  write_metrics_text(os, r);
  EXPECT_NE(os.str().find("AP=absent"), std::string::npos);
  EXPECT_TRUE(metrics_json(r)["AP50"].is_null());
}

TEST(AveragePrecisionTest, ThreeObjectsWithDuplicateAndMissMatchesOracle) {
  const std::vector<AnnotatedObject> objs{gt(0.1, 0.1, 0.3, 0.3), gt(0.4, 0.4, 0.7, 0.7), gt(0.75, 0.1, 0.95, 0.3)};
  const std::vector<Detection> dets{det(0.1, 0.1, 0.3, 0.3, 0.9), det(0.11, 0.1, 0.3, 0.31, 0.8),
                                    det(0.42, 0.4, 0.7, 0.72, 0.7)};
  const auto r = average_precision({image_of(objs)}, {{1, dets}});
  EXPECT_EQ(*r.AP, *oracle::single_image_ap(dets, objs, EvalParams::coco().iou_thresholds));
  EXPECT_EQ(*r.AP50, *oracle::single_image_ap(dets, objs, {0.5}));
  // flags T F T over 3 gts at IoU 0.5
  EXPECT_NEAR(*r.AP50, (34 + 33 * 2.0 / 3.0) / 101.0, 1e-12);
}

TEST(AveragePrecisionTest, RandomInstancesMatchOracleExactly) {
  Rng rng(11);
  const auto th = EvalParams::coco().iou_thresholds;
  for (int i = 0; i < 300; ++i) {
    const auto in = random_instance(rng, 2);
    const auto r = average_precision({image_of(in.gts)}, {{1, in.dets}});
    ASSERT_EQ(r.AP, oracle::single_image_ap(in.dets, in.gts, th)) << "instance " << i;
    ASSERT_EQ(r.AP50, oracle::single_image_ap(in.dets, in.gts, {0.5})) << "instance " << i;
  }
}

TEST(AveragePrecisionTest, AreaBucketsUsePixelArea) {
  // 100x100 image: 0.2x0.2 box = 400 px (small), 0.5x0.5 = 2500 px (medium)
  const std::vector<AnnotatedObject> objs{gt(0, 0, 0.2, 0.2), gt(0.4, 0.4, 0.9, 0.9)};
  DetectionsByImage dets{{1, {det(0, 0, 0.2, 0.2, 0.9)}}};
  const auto r = average_precision({image_of(objs, 1, 100, 100)}, dets);
  EXPECT_DOUBLE_EQ(*r.AP_small, 1.0);
  EXPECT_DOUBLE_EQ(*r.AP_medium, 0.0);
  EXPECT_FALSE(r.AP_large.has_value());
}

struct Dataset {
  std::vector<EvalImage> images;
  DetectionsByImage dets;
};

Dataset random_dataset(Rng& rng) {
  Dataset d;
  for (int img = 0; img < 6; ++img) {
    std::vector<AnnotatedObject> objs;
    std::vector<Detection> ds;
    const int n = 1 + static_cast<int>(rng.below(5));
    for (int k = 0; k < n; ++k) {
      const double y = rng.uniform(0, 0.6), x = rng.uniform(0, 0.6), h = rng.uniform(0.05, 0.4), w = rng.uniform(0.05, 0.4);
      objs.push_back({{y, x, y + h, x + w}, static_cast<int>(rng.below(3))});
      for (int r = 0; r < static_cast<int>(rng.below(3)); ++r) {
        const double j = 0.08 * rng.normal();
        ds.push_back({BBox{y + j * h, x, y + h, x + w * (1 + j)}.clipped(), static_cast<int>(rng.below(3)),
                      rng.uniform()});
      }
    }
    d.dets[img] = ds;
    d.images.push_back(image_of(objs, img, 100 + 60 * img, 200));
  }
  return d;
}

TEST(AveragePrecisionTest, InvariantUnderDetectionPermutation) {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    auto d = random_dataset(rng);
    const auto a = average_precision(d.images, d.dets);
    for (auto& [id, v] : d.dets) rng.shuffle(v.begin(), v.end());
    const auto b = average_precision(d.images, d.dets);
    ASSERT_EQ(a.fields(), b.fields());
  }
}

TEST(AveragePrecisionTest, ThresholdDominanceAndRange) {
  Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    const auto d = random_dataset(rng);
    const auto r = average_precision(d.images, d.dets);
    EXPECT_GE(*r.AP50, *r.AP75);
    EXPECT_GE(*r.AP75, 0.0);
    for (const auto& f : r.fields())
      if (f) {
        EXPECT_TRUE(*f >= 0.0 && *f <= 1.0);
      }
    double mx = 0;
    for (const auto& t : r.ap_per_threshold) mx = std::max(mx, t.value_or(0));
    EXPECT_LE(*r.AP, mx + 1e-12);
  }
}

TEST(AveragePrecisionTest, RemovingFalsePositiveNeverLowersAp) {
  Rng rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    auto d = random_dataset(rng);
    const auto base = average_precision(d.images, d.dets, [] {
      EvalParams p;
      p.iou_thresholds = {0.5};
      return p;
    }());
    // find a detection that is a false positive at 0.5 in its image
    for (auto& img : d.images) {
      auto& v = d.dets[img.image_id];
      const auto m = match_detections(v, img.objects, 0.5);
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (m.true_positive[i]) continue;
        auto removed = d.dets;
        removed[img.image_id].erase(removed[img.image_id].begin() + static_cast<std::ptrdiff_t>(i));
        EvalParams p;
        p.iou_thresholds = {0.5};
        const auto after = average_precision(d.images, removed, p);
        EXPECT_GE(*after.AP + 1e-12, *base.AP);
        break;
      }
    }
  }
}

TEST(AveragePrecisionTest, MaxDetectionsCapsRecall) {
  std::vector<AnnotatedObject> objs;
  std::vector<Detection> dets;
  for (int i = 0; i < 120; ++i) {
    const double y = (i / 12) * 0.08, x = (i % 12) * 0.08;
    objs.push_back(gt(y, x, y + 0.07, x + 0.07));
    dets.push_back(det(y, x, y + 0.07, x + 0.07, 1.0 - i * 1e-3));
  }
  const auto r = average_precision({image_of(objs, 1, 1000, 1000)}, {{1, dets}});
  EXPECT_NEAR(*r.AR_at_100, 100.0 / 120.0, 1e-12);
}

TEST(MetricsIoTest, TextAndJsonFields) {
  EvalResult r;
  r.AP = 0.5;
  r.AP50 = 0.75;
  std::ostringstream os;
  write_metrics_text(os, r);
  EXPECT_EQ(os.str(),
            "AP=0.500000\nAP50=0.750000\nAP75=absent\nAP_small=absent\nAP_medium=absent\nAP_large=absent\n"
            "AR_at_100=absent\n");
  const auto j = metrics_json(r);
  EXPECT_DOUBLE_EQ(j["AP"].get<double>(), 0.5);
  EXPECT_EQ(j.size(), 7u);
}

TEST(MetricsIoTest, ReadsInferOutput) {
  std::stringstream ss;
  write_detection_lines(ss, 3, {det(0.1, 0.2, 0.3, 0.4, 0.5, 1)});
  write_detection_lines(ss, 4, {det(0.1, 0.2, 0.3, 0.4, 0.25, 0)});
  const auto grouped = group_by_image(read_detection_lines(ss));
  ASSERT_EQ(grouped.size(), 2u);
  EXPECT_EQ(grouped.at(3)[0].class_id, 1);
  EXPECT_DOUBLE_EQ(grouped.at(4)[0].score, 0.25);
}

}  // namespace
}  // namespace pix2seq
