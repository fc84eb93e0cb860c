#include "rfat/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "rfat/errors.hpp"

namespace rfat {

double iou(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double inter = iw > 0 && ih > 0 ? iw * ih : 0.0;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::vector<std::size_t> rank_order(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh) {
  std::vector<Detection> kept;
  for (std::size_t i : rank_order(dets)) {
    const Detection& d = dets[i];
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.class_id == d.class_id && k.image_id == d.image_id && iou(k.box, d.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

Matching match_detections(const std::vector<Detection>& dets,
                          const std::vector<GroundTruth>& gts, double iou_thresh) {
  Matching m;
  m.order = rank_order(dets);
  std::vector<bool> consumed(gts.size(), false);
  for (std::size_t i : m.order) {
    const Detection& d = dets[i];
    long best = -1;
    double best_iou = iou_thresh;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (consumed[g] || gts[g].class_id != d.class_id || gts[g].image_id != d.image_id) continue;
      const double v = iou(d.box, gts[g].box);
      if (v > best_iou || (best < 0 && v >= best_iou)) {
        best = static_cast<long>(g);
        best_iou = v;
      }
    }
    if (best >= 0) consumed[static_cast<std::size_t>(best)] = true;
    m.tp.push_back(best >= 0);
    m.gt_index.push_back(best);
  }
  return m;
}

PrCurve pr_curve(const std::vector<bool>& ranked_tp, std::size_t num_gt,
                 const std::vector<double>& scores, int class_id) {
  PrCurve c;
  c.class_id = class_id;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < ranked_tp.size(); ++i) {
    if (ranked_tp[i]) ++tp;
    PrPoint p;
    p.recall = num_gt ? static_cast<double>(tp) / static_cast<double>(num_gt) : 0.0;
    p.precision = static_cast<double>(tp) / static_cast<double>(i + 1);
    p.score = i < scores.size() ? scores[i] : 0.0;
    c.points.push_back(p);
  }
  return c;
}

double average_precision(const PrCurve& curve) {
  // Suffix maximum of precision gives the interpolated envelope.
  const auto& pts = curve.points;
  std::vector<double> envelope(pts.size());
  double best = 0;
  for (std::size_t i = pts.size(); i-- > 0;) {
    best = std::max(best, pts[i].precision);
    envelope[i] = best;
  }
  double total = 0;
  std::size_t j = 0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    while (j < pts.size() && pts[j].recall < level - 1e-12) ++j;
    if (j < pts.size()) total += envelope[j];
  }
  return total / 101.0;
}

Evaluation evaluate(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                    int num_classes) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  Evaluation ev;
  ev.ap50.assign(static_cast<std::size_t>(num_classes), nan);
  ev.ap50_95.assign(static_cast<std::size_t>(num_classes), nan);
  ev.curves.resize(static_cast<std::size_t>(num_classes));

  std::vector<std::vector<Detection>> dets_by(num_classes);
  std::vector<std::vector<GroundTruth>> gts_by(num_classes);
  auto check_id = [&](int c) {
    if (c < 0 || c >= num_classes) {
      throw ConfigError("evaluate: class id " + std::to_string(c) + " outside [0, " +
                        std::to_string(num_classes) + ")");
    }
  };
  for (const auto& d : dets) {
    check_id(d.class_id);
    dets_by[d.class_id].push_back(d);
  }
  for (const auto& g : gts) {
    check_id(g.class_id);
    gts_by[g.class_id].push_back(g);
  }

  int valid = 0;
  double sum50 = 0, sum50_95 = 0;
  for (int c = 0; c < num_classes; ++c) {
    ev.curves[c].class_id = c;
    if (gts_by[c].empty()) {
      if (!dets_by[c].empty()) ++ev.excluded_classes;
      continue;
    }
    double ap_sum = 0;
    for (int t = 0; t < kIouThresholdCount; ++t) {
      const double thresh = (50.0 + 5.0 * t) / 100.0;
      const Matching m = match_detections(dets_by[c], gts_by[c], thresh);
      std::vector<double> scores;
      for (std::size_t i : m.order) scores.push_back(dets_by[c][i].score);
      PrCurve curve = pr_curve(m.tp, gts_by[c].size(), scores, c);
      const double ap = average_precision(curve);
      ap_sum += ap;
      if (t == 0) {
        ev.ap50[c] = ap;
        ev.curves[c] = std::move(curve);
      }
    }
    ev.ap50_95[c] = ap_sum / kIouThresholdCount;
    sum50 += ev.ap50[c];
    sum50_95 += ev.ap50_95[c];
    ++valid;
  }
  if (valid == 0) throw ConfigError("empty evaluation");
  ev.map50 = sum50 / valid;
  ev.map50_95 = sum50_95 / valid;
  return ev;
}

namespace {

int class_count(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts) {
  int n = 0;
  for (const auto& d : dets) n = std::max(n, d.class_id + 1);
  for (const auto& g : gts) n = std::max(n, g.class_id + 1);
  return n;
}

}  // namespace

double map50(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts) {
  return evaluate(dets, gts, class_count(dets, gts)).map50;
}

double map50_95(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts) {
  return evaluate(dets, gts, class_count(dets, gts)).map50_95;
}

}  // namespace rfat
