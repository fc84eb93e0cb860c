#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "rfat/blocks.hpp"
#include "rfat/metrics.hpp"
#include "rfat/params.hpp"
#include "rfat/random.hpp"

// Miniature anchor-free multi-scale detector: stem, four stride-2 stages
// (P2..P5), SPPF, top-down neck, and one unshared head per output level.

namespace rfat {

struct ModelConfig {
  std::size_t img_size = 64;  // square input, multiple of 32
  std::size_t base_width = 16;
  std::size_t depth = 1;  // bottlenecks per C2f
  bool use_rfaconv = false;
  bool use_triplet = false;
  bool use_p2 = false;
  int num_classes = 3;
  std::size_t triplet_k = 7;
  bool share_attention_across_channels = false;
  bool rfa_single_conv = false;
  std::uint64_t seed = 7;

  /// Throws ConfigError on invalid values.
  void validate() const;
  /// Feature strides of the head levels, finest first.
  std::vector<std::size_t> strides() const;
};

template <typename T>
struct BackboneStage {
  ConvBlockParams<T> down;  // 3x3, stride 2
  C2fParams<T> c2f;
  TripletAttentionParams<T> triplet;  // used only when cfg.use_triplet
};

template <typename T>
struct HeadParams {
  ConvBlockParams<T> cv1, cv2;  // 3x3, stride 1
  Tensor<T> box_kernel, box_bias;  // 1x1 -> 4
  Tensor<T> obj_kernel, obj_bias;  // 1x1 -> 1
  Tensor<T> cls_kernel, cls_bias;  // 1x1 -> num_classes
  std::size_t stride = 0;
};

template <typename T>
struct DetectorModel {
  ModelConfig cfg;
  ConvBlockParams<T> stem;
  BackboneStage<T> stages[4];  // outputs at strides 4, 8, 16, 32
  SPPFParams<T> sppf;
  C2fParams<T> neck_p4, neck_p3, neck_p2;  // neck_p2 only with use_p2
  std::vector<HeadParams<T>> heads;        // finest level first

  /// Every learnable tensor, in a fixed order with unique names.
  ParamList<T> parameters() const;
};

template <typename T>
struct HeadOutput {
  Tensor<T> box;  // (N, 4, G, G): raw (t_x, t_y, t_w, t_h)
  Tensor<T> obj;  // (N, 1, G, G) logits
  Tensor<T> cls;  // (N, num_classes, G, G) logits
  std::size_t stride = 0;
};

template <typename T>
DetectorModel<T> build_model(const ModelConfig& cfg);

/// Forward pass for images (N, 3, S, S) with S == cfg.img_size.
template <typename T>
std::vector<HeadOutput<T>> forward(const DetectorModel<T>& model, const Tensor<T>& images);

// --- targets and loss ---------------------------------------------------------

struct PositiveTarget {
  std::size_t image = 0, gy = 0, gx = 0;
  double tx = 0, ty = 0;  // center offset within the cell, [0, 1)
  double tw = 0, th = 0;  // size in cell units
  int class_id = 0;
};

struct LevelTargets {
  std::size_t stride = 0, grid = 0;
  std::vector<PositiveTarget> positives;
};

struct Targets {
  std::size_t batch = 0;
  std::vector<LevelTargets> levels;  // same order as forward() outputs
  std::size_t skipped = 0;     // degenerate boxes (w or h <= 1 px)
  std::size_t collisions = 0;  // overwritten by a later box in the same cell
};

/// Index of the output level a box of this size is routed to.
std::size_t level_for_box(const BBox& box, const ModelConfig& cfg);

/// Single-cell center assignment with size-bracket level routing.
Targets assign_targets(const std::vector<std::vector<GroundTruth>>& gts, const ModelConfig& cfg);

struct LossWeights {
  double box = 5.0, obj = 1.0, cls = 1.0;
};

struct LossReport {
  double total = 0, box = 0, obj = 0, cls = 0;  // weighted, normalized parts
  std::size_t positives = 0;
};

/// (lambda_box * sum_pos (1 - IoU) + lambda_obj * sum_cells BCE(obj)
///  + lambda_cls * sum_pos BCE(cls)) / max(positives, 1), with predicted boxes
/// decoded in cell units as (g + sigmoid(t_xy), exp(min(t_wh, 4))).
/// Throws NumericalError if the loss is not finite.
template <typename T>
Tensor<T> detection_loss(const std::vector<HeadOutput<T>>& outputs, const Targets& targets,
                         LossReport* report = nullptr, const LossWeights& weights = {});

constexpr double kMaxLogSize = 4.0;

/// Per-image detections in pixel corner form after class-wise NMS, sorted by
/// descending score.
template <typename T>
std::vector<std::vector<Detection>> decode_predictions(const std::vector<HeadOutput<T>>& outputs,
                                                       std::size_t img_size, double conf_thresh,
                                                       double nms_iou);

// --- optimization -------------------------------------------------------------

struct SgdOptions {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t warmup_steps = 20;
};

struct TrainState {
  ParamList<float> params;
  std::vector<std::vector<float>> velocity;
  std::size_t step = 0;

  explicit TrainState(ParamList<float> p);
};

/// Linear warmup from lr / warmup_steps to lr, then constant.
double learning_rate(const SgdOptions& opt, std::size_t step);

/// v <- momentum * v + g + wd * w (wd for weights only); w <- w - lr * v.
/// Reads gradients from the parameters' grad buffers; clears them afterwards.
void sgd_step(TrainState& state, double lr, double momentum, double weight_decay);

}  // namespace rfat
