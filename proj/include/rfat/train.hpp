#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "rfat/data.hpp"
#include "rfat/detector.hpp"
#include "rfat/metrics.hpp"

// Mini-batch training and evaluation loops over the synthetic dataset.

namespace rfat {

struct Batch {
  Tensor<float> images;  // (B, 3, S, S)
  std::vector<std::vector<GroundTruth>> gts;
};

Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices);

/// Fisher-Yates over [0, n) driven by the library PRNG, so the order is fixed
/// by the seed independently of the standard library in use.
std::vector<std::size_t> shuffled_indices(std::size_t n, Xoshiro256pp& rng);

struct StepRecord {
  std::size_t step = 0;  // 1-based
  std::size_t epoch = 0;
  double lr = 0;
  LossReport loss;
};

struct TrainOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  SgdOptions sgd;
  std::uint64_t shuffle_seed = 7;
};

/// One forward/backward/SGD update. Returns the loss before the update.
LossReport train_step(DetectorModel<float>& model, TrainState& state, const Batch& batch,
                      double lr, const SgdOptions& opt);

/// Runs all epochs; `on_step` fires after every update and `on_epoch` after
/// every epoch (1-based epoch number). Returns the per-step records.
std::vector<StepRecord> train(DetectorModel<float>& model, const std::vector<Sample>& data,
                              const TrainOptions& opt,
                              const std::function<void(const StepRecord&)>& on_step = {},
                              const std::function<void(std::size_t)>& on_epoch = {});

struct EvalOptions {
  double conf_thresh = 0.001;  // mAP ranks the whole list; 0.25 is a deployment cut
  double nms_iou = 0.5;
  std::size_t batch_size = 16;
};

/// Detections (image ids are indices into `data`) for the whole split.
std::vector<Detection> predict(const DetectorModel<float>& model, const std::vector<Sample>& data,
                               const EvalOptions& opt);

std::vector<GroundTruth> ground_truth(const std::vector<Sample>& data);

Evaluation evaluate_model(const DetectorModel<float>& model, const std::vector<Sample>& data,
                          const EvalOptions& opt);

/// Mean of the first `window` step losses; the baseline for trainability.
double initial_moving_average(const std::vector<StepRecord>& steps, std::size_t window = 10);

}  // namespace rfat
