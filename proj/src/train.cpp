#include "rfat/train.hpp"

#include <algorithm>
#include <cstring>

#include "rfat/autograd.hpp"
#include "rfat/errors.hpp"

namespace rfat {

Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ConfigError("make_batch: empty batch");
  const Shape img = samples.at(indices[0]).image.shape();
  const std::size_t per = numel_of(img);
  Batch b;
  b.images = Tensor<float>(Shape{indices.size(), img[0], img[1], img[2]});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Sample& s = samples.at(indices[i]);
    if (s.image.shape() != img) throw ShapeError("make_batch: images differ in size");
    std::memcpy(b.images.data().data() + i * per, s.image.data().data(), per * sizeof(float));
    b.gts.push_back(s.labels);
  }
  return b;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Xoshiro256pp& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

LossReport train_step(DetectorModel<float>& model, TrainState& state, const Batch& batch,
                      double lr, const SgdOptions& opt) {
  for (auto& np : state.params) np.tensor.set_requires_grad(true);
  const Targets targets = assign_targets(batch.gts, model.cfg);
  LossReport report;
  Tape tape;
  Tensor<float> loss;
  {
    TapeScope scope(tape);
    loss = detection_loss(forward(model, batch.images), targets, &report);
  }
  backward(tape, loss);
  sgd_step(state, lr, opt.momentum, opt.weight_decay);
  return report;
}

std::vector<StepRecord> train(DetectorModel<float>& model, const std::vector<Sample>& data,
                              const TrainOptions& opt,
                              const std::function<void(const StepRecord&)>& on_step,
                              const std::function<void(std::size_t)>& on_epoch) {
  if (data.empty()) throw ConfigError("train: no training samples");
  if (opt.batch_size == 0) throw ConfigError("train: batch_size must be positive");
  TrainState state(model.parameters());
  Xoshiro256pp rng(opt.shuffle_seed);
  std::vector<StepRecord> records;
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    const auto order = shuffled_indices(data.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      const Batch batch =
          make_batch(data, std::vector<std::size_t>(order.begin() + start, order.begin() + end));
      StepRecord rec;
      rec.epoch = epoch;
      rec.lr = learning_rate(opt.sgd, state.step);
      rec.loss = train_step(model, state, batch, rec.lr, opt.sgd);
      rec.step = state.step;
      records.push_back(rec);
      if (on_step) on_step(rec);
    }
    if (on_epoch) on_epoch(epoch);
  }
  return records;
}

std::vector<Detection> predict(const DetectorModel<float>& model, const std::vector<Sample>& data,
                               const EvalOptions& opt) {
  NoGradScope no_grad;
  std::vector<Detection> out;
  for (std::size_t start = 0; start < data.size(); start += opt.batch_size) {
    const std::size_t end = std::min(data.size(), start + opt.batch_size);
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < end; ++i) idx.push_back(i);
    const Batch batch = make_batch(data, idx);
    const auto per_image = decode_predictions(forward(model, batch.images), model.cfg.img_size,
                                              opt.conf_thresh, opt.nms_iou);
    for (std::size_t i = 0; i < per_image.size(); ++i) {
      for (Detection d : per_image[i]) {
        d.image_id = start + i;
        out.push_back(d);
      }
    }
  }
  return out;
}

std::vector<GroundTruth> ground_truth(const std::vector<Sample>& data) {
  std::vector<GroundTruth> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (GroundTruth g : data[i].labels) {
      g.image_id = i;
      out.push_back(g);
    }
  }
  return out;
}

Evaluation evaluate_model(const DetectorModel<float>& model, const std::vector<Sample>& data,
                          const EvalOptions& opt) {
  return evaluate(predict(model, data, opt), ground_truth(data), model.cfg.num_classes);
}

double initial_moving_average(const std::vector<StepRecord>& steps, std::size_t window) {
  const std::size_t n = std::min(window, steps.size());
  if (n == 0) return 0.0;
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += steps[i].loss.total;
  return s / static_cast<double>(n);
}

}  // namespace rfat
