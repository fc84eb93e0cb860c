#pragma once

#include <cstddef>
#include <vector>

// Detection evaluation: IoU, class-wise NMS, greedy matching, PR curves,
// 101-point interpolated AP, mAP@0.5 and mAP@[0.5:0.95].

namespace rfat {

/// Corner-form box in pixels.
struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
};

struct Detection {
  BBox box;
  int class_id = 0;
  double score = 0;
  std::size_t image_id = 0;
};

struct GroundTruth {
  BBox box;
  int class_id = 0;
  std::size_t image_id = 0;
};

/// Intersection over union; 0 when the union is empty.
double iou(const BBox& a, const BBox& b);

/// Indices of `dets` ordered by descending score, ties by index.
std::vector<std::size_t> rank_order(const std::vector<Detection>& dets);

/// Per class (and image), keep the best box and drop every box whose IoU with
/// an already-kept box exceeds `iou_thresh`. Survivors are returned ranked.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh);

struct Matching {
  std::vector<std::size_t> order;  // ranked detection indices
  std::vector<bool> tp;            // tp[i] describes dets[order[i]]
  std::vector<long> gt_index;      // matched ground truth or -1
};

/// Greedy score-ordered matching: each detection takes the unmatched
/// same-class, same-image ground truth of highest IoU >= iou_thresh (lowest
/// index on ties); each ground truth is consumed at most once.
Matching match_detections(const std::vector<Detection>& dets,
                          const std::vector<GroundTruth>& gts, double iou_thresh);

struct PrPoint {
  double recall = 0, precision = 0, score = 0;
};

struct PrCurve {
  int class_id = 0;
  std::vector<PrPoint> points;  // one per ranked detection
};

/// Cumulative precision/recall down a ranked TP/FP list. `scores` may be empty.
PrCurve pr_curve(const std::vector<bool>& ranked_tp, std::size_t num_gt,
                 const std::vector<double>& scores = {}, int class_id = 0);

/// (1/101) * sum over r in {0, 0.01, ..., 1} of the best precision at
/// recall >= r (0 where no point reaches r).
double average_precision(const PrCurve& curve);

constexpr int kIouThresholdCount = 10;  // 0.50, 0.55, ..., 0.95

struct Evaluation {
  double map50 = 0;
  double map50_95 = 0;
  /// Indexed by class id in [0, num_classes); NaN for classes without GT.
  std::vector<double> ap50;
  std::vector<double> ap50_95;
  std::vector<PrCurve> curves;  // IoU 0.5 curves, one per class id
  std::size_t excluded_classes = 0;  // detections present but no GT
};

/// Full protocol. Classes with no ground truth are excluded from the means;
/// throws ConfigError("empty evaluation") when no class remains. Class ids
/// must lie in [0, num_classes).
Evaluation evaluate(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                    int num_classes);

double map50(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts);
double map50_95(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts);

}  // namespace rfat
