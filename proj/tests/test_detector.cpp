#include <gtest/gtest.h>

#include <cmath>

#include "rfat/autograd.hpp"
#include "rfat/detector.hpp"
#include "rfat/errors.hpp"
#include "test_util.hpp"

using namespace rfat;
using rfat::testing::check_grad;
using rfat::testing::random_tensor;

namespace {

ModelConfig tiny(bool improved = false) {
  ModelConfig c;
  c.img_size = 32;
  c.base_width = 8;
  c.depth = 1;
  c.num_classes = 2;
  c.triplet_k = 3;
  c.use_rfaconv = c.use_triplet = c.use_p2 = improved;
  return c;
}

GroundTruth box(double x1, double y1, double x2, double y2, int cls = 0) {
  GroundTruth g;
  g.box = BBox{x1, y1, x2, y2};
  g.class_id = cls;
  return g;
}

double logit(double p) { return std::log(p / (1 - p)); }

// Head outputs whose decoded boxes, objectness and classes reproduce the
// targets exactly (|logit| = 10 for the binary terms).
std::vector<HeadOutput<double>> perfect_outputs(const Targets& t, int num_classes) {
  std::vector<HeadOutput<double>> out;
  const auto nc = static_cast<std::size_t>(num_classes);
  for (const auto& lt : t.levels) {
    const std::size_t G = lt.grid, cells = G * G;
    HeadOutput<double> o;
    o.stride = lt.stride;
    o.box = Tensor<double>(Shape{t.batch, 4, G, G});
    o.obj = Tensor<double>(Shape{t.batch, 1, G, G}, -10.0);
    o.cls = Tensor<double>(Shape{t.batch, nc, G, G}, -10.0);
    for (const auto& p : lt.positives) {
      const std::size_t cell = p.gy * G + p.gx;
      auto at = [&](std::size_t ch, std::size_t C) { return (p.image * C + ch) * cells + cell; };
      o.box.data()[at(0, 4)] = logit(p.tx);
      o.box.data()[at(1, 4)] = logit(p.ty);
      o.box.data()[at(2, 4)] = std::log(p.tw);
      o.box.data()[at(3, 4)] = std::log(p.th);
      o.obj.data()[p.image * cells + cell] = 10.0;
      o.cls.data()[at(static_cast<std::size_t>(p.class_id), nc)] = 10.0;
    }
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace

TEST(Model, DeterministicInitialization) {
  auto a = build_model<float>(tiny(true)).parameters();
  auto b = build_model<float>(tiny(true)).parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    ASSERT_EQ(a[i].tensor.shape(), b[i].tensor.shape());
    for (std::size_t j = 0; j < a[i].tensor.numel(); ++j)
      ASSERT_EQ(a[i].tensor.data()[j], b[i].tensor.data()[j]);
  }
  ModelConfig other = tiny(true);
  other.seed = 8;
  auto c = build_model<float>(other).parameters();
  EXPECT_NE(a[0].tensor.data()[0], c[0].tensor.data()[0]);
}

TEST(Model, NamesAreUnique) {
  auto params = build_model<float>(tiny(true)).parameters();
  std::set<std::string> names;
  for (const auto& p : params) EXPECT_TRUE(names.insert(p.name).second) << p.name;
}

TEST(Model, HeadCountFollowsP2Flag) {
  auto cfg = tiny();
  EXPECT_EQ(build_model<float>(cfg).heads.size(), 3u);
  cfg.use_p2 = true;
  EXPECT_EQ(build_model<float>(cfg).heads.size(), 4u);
}

TEST(Model, TripletAddsClosedFormParameterCount) {
  for (std::size_t k : {3, 7}) {
    auto cfg = tiny();
    cfg.triplet_k = k;
    const auto base = count_scalars(build_model<float>(cfg).parameters());
    cfg.use_triplet = true;
    const auto with = count_scalars(build_model<float>(cfg).parameters());
    EXPECT_EQ(with - base, 4 * 3 * (2 * k * k + 1));
  }
}

TEST(Model, ImprovedVariantHasMoreParameters) {
  ModelConfig base, improved;
  improved.use_rfaconv = improved.use_triplet = improved.use_p2 = true;
  EXPECT_GT(count_scalars(build_model<float>(improved).parameters()),
            count_scalars(build_model<float>(base).parameters()));
}

TEST(Model, ConfigValidation) {
  auto bad = tiny();
  bad.img_size = 48;
  EXPECT_THROW(build_model<float>(bad), ConfigError);
  bad = tiny();
  bad.base_width = 7;
  EXPECT_THROW(build_model<float>(bad), ConfigError);
  bad = tiny();
  bad.num_classes = 0;
  EXPECT_THROW(build_model<float>(bad), ConfigError);
  bad = tiny();
  bad.triplet_k = 4;
  EXPECT_THROW(build_model<float>(bad), ConfigError);
}

TEST(Forward, StrideGeometryAndVariantParity) {
  std::mt19937_64 rng(1);
  ModelConfig base;  // 64 px
  ModelConfig improved = base;
  improved.use_rfaconv = improved.use_triplet = improved.use_p2 = true;
  auto x = random_tensor<float>({2, 3, 64, 64}, rng, 0, 1);
  auto ob = forward(build_model<float>(base), x);
  auto oi = forward(build_model<float>(improved), x);
  ASSERT_EQ(ob.size(), 3u);
  ASSERT_EQ(oi.size(), 4u);
  EXPECT_EQ(ob[0].stride, 8u);
  EXPECT_EQ(ob[0].box.shape(), (Shape{2, 4, 8, 8}));
  EXPECT_EQ(oi[0].obj.shape(), (Shape{2, 1, 16, 16}));
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_EQ(ob[l].box.shape(), oi[l + 1].box.shape());
    EXPECT_EQ(ob[l].obj.shape(), oi[l + 1].obj.shape());
    EXPECT_EQ(ob[l].cls.shape(), oi[l + 1].cls.shape());
    EXPECT_EQ(ob[l].box.dim(2), 64 / ob[l].stride);
  }
  for (const auto& o : oi)
    for (const auto* t : {&o.box, &o.obj, &o.cls})
      for (float v : t->data()) ASSERT_TRUE(std::isfinite(v));
  EXPECT_THROW(forward(build_model<float>(base), Tensor<float>({1, 3, 32, 32})), ShapeError);
}

TEST(Forward, CompositeGradient) {
  std::mt19937_64 rng(2);
  for (bool improved : {false, true}) {
    auto model = build_model<double>(tiny(improved));
    auto x = random_tensor<double>({1, 3, 32, 32}, rng, 0, 1);
    std::vector<Tensor<double>> inputs{x};
    for (auto& p : model.parameters()) inputs.push_back(p.tensor);
    auto f = [&] {
      std::vector<Tensor<double>> parts;
      for (const auto& o : forward(model, x)) {
        parts.push_back(reshape(o.box, {o.box.numel()}));
        parts.push_back(reshape(o.obj, {o.obj.numel()}));
        parts.push_back(reshape(o.cls, {o.cls.numel()}));
      }
      return concat(parts, 0);
    };
    auto report = check_grad(f, inputs, 3, 4);
    EXPECT_LT(report.max_rel_error, 1e-3) << "improved=" << improved << " worst input "
                                          << report.worst_input;
  }
}

TEST(Assign, HandExample) {
  ModelConfig cfg;  // 64 px, P3-P5
  auto t = assign_targets({{box(12, 12, 52, 52, 1)}}, cfg);
  ASSERT_EQ(t.levels.size(), 3u);
  const auto& p4 = t.levels[1];
  EXPECT_EQ(p4.stride, 16u);
  ASSERT_EQ(p4.positives.size(), 1u);
  const auto& p = p4.positives[0];
  EXPECT_EQ(p.gx, 2u);
  EXPECT_EQ(p.gy, 2u);
  EXPECT_DOUBLE_EQ(p.tx, 0.0);
  EXPECT_DOUBLE_EQ(p.ty, 0.0);
  EXPECT_DOUBLE_EQ(p.tw, 2.5);
  EXPECT_DOUBLE_EQ(p.th, 2.5);
  EXPECT_EQ(p.class_id, 1);
  EXPECT_TRUE(t.levels[0].positives.empty());
  EXPECT_TRUE(t.levels[2].positives.empty());
}

TEST(Assign, SizeBracketsAndP2Routing) {
  ModelConfig cfg;
  const auto small = box(0, 0, 10, 10).box, mid = box(0, 0, 20, 20).box;
  const auto large = box(0, 0, 40, 40).box, huge = box(0, 0, 64, 64).box;
  EXPECT_EQ(level_for_box(small, cfg), 0u);  // P3 without P2
  EXPECT_EQ(level_for_box(mid, cfg), 0u);
  EXPECT_EQ(level_for_box(large, cfg), 1u);
  EXPECT_EQ(level_for_box(huge, cfg), 2u);
  cfg.use_p2 = true;
  EXPECT_EQ(level_for_box(small, cfg), 0u);  // P2
  EXPECT_EQ(level_for_box(mid, cfg), 1u);
  EXPECT_EQ(level_for_box(large, cfg), 2u);
  EXPECT_EQ(level_for_box(huge, cfg), 3u);
  EXPECT_EQ(level_for_box(box(0, 0, 16, 16).box, cfg), 1u);  // 16 is not small
}

TEST(Assign, CollisionsAndDegenerateBoxes) {
  ModelConfig cfg;
  auto t = assign_targets({{box(1, 1, 21, 21, 0), box(40, 40, 60, 60, 1)}}, cfg);
  EXPECT_EQ(t.levels[0].positives.size(), 2u);
  EXPECT_EQ(t.collisions, 0u);

  t = assign_targets({{box(0, 0, 20, 20, 0), box(1, 1, 19, 19, 2)}}, cfg);
  ASSERT_EQ(t.levels[0].positives.size(), 1u);
  EXPECT_EQ(t.collisions, 1u);
  EXPECT_EQ(t.levels[0].positives[0].class_id, 2);

  t = assign_targets({{box(5, 5, 6, 30), box(5, 5, 30, 5.5)}, {}}, cfg);
  EXPECT_EQ(t.skipped, 2u);
  EXPECT_EQ(t.batch, 2u);
  for (const auto& lt : t.levels) EXPECT_TRUE(lt.positives.empty());
}

TEST(Loss, PerfectFitIsNearZero) {
  ModelConfig cfg;
  cfg.num_classes = 3;
  auto t = assign_targets({{box(3.3, 5.1, 17.9, 20.2, 0), box(30.5, 22.2, 61.1, 50.7, 2)},
                           {box(10.2, 40.6, 52.7, 63.3, 1)}},
                          cfg);
  LossReport r;
  auto loss = detection_loss(perfect_outputs(t, 3), t, &r);
  EXPECT_LT(loss.item(), 0.01);
  EXPECT_GE(loss.item(), 0.0);
  EXPECT_EQ(r.positives, 3u);
  EXPECT_LT(r.box, 1e-9);
  EXPECT_NEAR(r.total, r.box + r.obj + r.cls, 1e-12);
}

TEST(Loss, NoPositivesLeavesObjectnessOnly) {
  ModelConfig cfg = tiny();
  std::mt19937_64 rng(3);
  auto t = assign_targets({{}, {}}, cfg);
  std::vector<HeadOutput<double>> outs;
  double expect = 0;
  for (const auto& lt : t.levels) {
    HeadOutput<double> o;
    o.stride = lt.stride;
    o.box = random_tensor<double>({2, 4, lt.grid, lt.grid}, rng);
    o.obj = random_tensor<double>({2, 1, lt.grid, lt.grid}, rng, -3, 3);
    o.cls = random_tensor<double>({2, 2, lt.grid, lt.grid}, rng);
    for (double z : o.obj.data()) expect += std::log1p(std::exp(z));  // BCE(z, 0)
    outs.push_back(o);
  }
  LossReport r;
  auto loss = detection_loss(outs, t, &r);
  EXPECT_NEAR(loss.item(), expect, 1e-10);
  EXPECT_EQ(r.box, 0.0);
  EXPECT_EQ(r.cls, 0.0);
}

TEST(Loss, GradientAgainstFiniteDifferences) {
  ModelConfig cfg = tiny();
  std::mt19937_64 rng(4);
  auto t = assign_targets(
      {{box(2.5, 3.1, 12.2, 13.7, 0), box(14.3, 1.2, 30.9, 29.1, 1)}, {box(5.2, 6.9, 20.4, 25.8, 1)}},
      cfg);
  auto outs = perfect_outputs(t, 2);
  std::vector<Tensor<double>> inputs;
  for (auto& o : outs) {
    // Move every logit off the optimum while keeping each box overlapping its target.
    for (double& v : o.box.data()) v += std::uniform_real_distribution<double>(-0.6, 0.6)(rng);
    for (double& v : o.obj.data()) v = std::uniform_real_distribution<double>(-3, 3)(rng);
    for (double& v : o.cls.data()) v = std::uniform_real_distribution<double>(-3, 3)(rng);
    inputs.insert(inputs.end(), {o.box, o.obj, o.cls});
  }
  GradCheckOptions opt;
  opt.coords_per_tensor = 256;
  auto report = grad_check([&] { return detection_loss(outs, t); }, inputs, opt);
  EXPECT_LT(report.max_rel_error, 1e-4);
}

TEST(Loss, NonFiniteIsReported) {
  ModelConfig cfg = tiny();
  auto t = assign_targets({{box(2, 2, 12, 12)}}, cfg);
  auto outs = perfect_outputs(t, 2);
  outs[0].obj.data()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    detection_loss(outs, t);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite=1"), std::string::npos) << e.what();
  }
}

TEST(Decode, AllNegativeObjectnessIsEmpty) {
  ModelConfig cfg = tiny();
  auto t = assign_targets({{}}, cfg);
  auto outs = perfect_outputs(t, 2);
  for (const auto& dets : decode_predictions(outs, cfg.img_size, 0.25, 0.5)) EXPECT_TRUE(dets.empty());
}

TEST(Decode, SingleHotCellByHand) {
  // Stride-8 cell (gx=1, gy=2); t = 0 gives center offset 0.5 and size 1 cell,
  // then t_w = log 2 doubles the width: center (12, 20), size 16 x 8.
  HeadOutput<double> o;
  o.stride = 8;
  o.box = Tensor<double>(Shape{1, 4, 4, 4});
  o.obj = Tensor<double>(Shape{1, 1, 4, 4}, -10.0);
  o.cls = Tensor<double>(Shape{1, 2, 4, 4}, -10.0);
  const std::size_t cell = 2 * 4 + 1;
  o.box.data()[2 * 16 + cell] = std::log(2.0);
  o.obj.data()[cell] = 10.0;
  o.cls.data()[16 + cell] = 10.0;
  auto dets = decode_predictions<double>({o}, 32, 0.25, 0.5);
  ASSERT_EQ(dets[0].size(), 1u);
  const auto& d = dets[0][0];
  EXPECT_EQ(d.class_id, 1);
  EXPECT_NEAR(d.box.x1, 4.0, 1e-12);
  EXPECT_NEAR(d.box.x2, 20.0, 1e-12);
  EXPECT_NEAR(d.box.y1, 16.0, 1e-12);
  EXPECT_NEAR(d.box.y2, 24.0, 1e-12);
  EXPECT_NEAR(d.score, 1.0 / (1 + std::exp(-10.0)) / (1 + std::exp(-10.0)), 1e-12);
}

TEST(Decode, EncodeDecodeRoundTripAndBounds) {
  ModelConfig cfg;
  cfg.use_p2 = true;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> pos(0, 50), size(2.5, 14);
  for (int trial = 0; trial < 50; ++trial) {
    const double x = pos(rng), y = pos(rng), w = size(rng), h = size(rng);
    auto t = assign_targets({{box(x, y, x + w, y + h, trial % 3)}}, cfg);
    auto dets = decode_predictions(perfect_outputs(t, 3), cfg.img_size, 0.25, 0.5);
    ASSERT_EQ(dets[0].size(), 1u);
    const auto& d = dets[0][0];
    EXPECT_EQ(d.class_id, trial % 3);
    EXPECT_NEAR(d.box.x1, x, 1e-3);
    EXPECT_NEAR(d.box.y1, y, 1e-3);
    EXPECT_NEAR(d.box.x2, x + w, 1e-3);
    EXPECT_NEAR(d.box.y2, y + h, 1e-3);
  }
  // Random logits: every decoded box is ordered and inside the image.
  auto model = build_model<float>(cfg);
  auto outs = forward(model, random_tensor<float>({2, 3, 64, 64}, rng, 0, 1));
  for (auto& o : outs) {
    for (float& v : o.obj.data()) v = 3.0f;
    for (float& v : o.box.data()) v *= 6.0f;
  }
  for (const auto& dets : decode_predictions(outs, 64, 0.25, 0.5)) {
    for (std::size_t i = 0; i < dets.size(); ++i) {
      const auto& b = dets[i].box;
      EXPECT_LE(b.x1, b.x2);
      EXPECT_LE(b.y1, b.y2);
      EXPECT_GE(b.x1, 0);
      EXPECT_LE(b.x2, 64);
      EXPECT_GE(b.y1, 0);
      EXPECT_LE(b.y2, 64);
      if (i) EXPECT_GE(dets[i - 1].score, dets[i].score);
    }
  }
}

TEST(Sgd, ZeroGradientIsNoOp) {
  Tensor<float> w({3}, {1, -2, 3});
  TrainState s({{"w", w, ParamRole::kWeight}});
  sgd_step(s, 0.1, 0.9, 0.0);
  EXPECT_EQ(w.data()[0], 1.0f);
  EXPECT_EQ(w.data()[1], -2.0f);
  EXPECT_EQ(s.step, 1u);
}

TEST(Sgd, QuadraticStep) {
  Tensor<float> w({1}, {1.0f});
  TrainState s({{"w", w, ParamRole::kWeight}});
  w.set_requires_grad(true);
  Tape tape;
  Tensor<float> loss;
  {
    TapeScope scope(tape);
    loss = sum(mul(w, w));
  }
  backward(tape, loss);
  sgd_step(s, 0.1, 0.0, 0.0);
  EXPECT_FLOAT_EQ(w.item(), 0.8f);
  EXPECT_FALSE(w.has_grad());
}

TEST(Sgd, MomentumClosedFormAndDecayRoles) {
  Tensor<float> w({1}, {0.0f}), b({1}, {2.0f}), wd({1}, {2.0f});
  TrainState s({{"w", w, ParamRole::kWeight},
                {"b", b, ParamRole::kBias},
                {"wd", wd, ParamRole::kWeight}});
  const float g = 0.5f, mu = 0.9f;
  for (int i = 0; i < 2; ++i) {
    w.ensure_grad();
    w.grad()[0] = g;
    sgd_step(s, 1.0, mu, 0.0);
  }
  EXPECT_FLOAT_EQ(s.velocity[0][0], g * (1 + mu));
  EXPECT_FLOAT_EQ(w.item(), -(g + g * (1 + mu)));

  Tensor<float> w2({1}, {2.0f}), b2({1}, {2.0f}), a2({1}, {2.0f});
  TrainState d({{"w", w2, ParamRole::kWeight}, {"b", b2, ParamRole::kBias},
                {"a", a2, ParamRole::kAffine}});
  sgd_step(d, 0.1, 0.0, 0.5);
  EXPECT_FLOAT_EQ(w2.item(), 2.0f - 0.1f * 0.5f * 2.0f);
  EXPECT_EQ(b2.item(), 2.0f);
  EXPECT_EQ(a2.item(), 2.0f);
}

TEST(Sgd, WarmupSchedule) {
  SgdOptions opt;
  opt.lr = 0.01;
  opt.warmup_steps = 20;
  EXPECT_DOUBLE_EQ(learning_rate(opt, 0), 0.01 / 20);
  EXPECT_DOUBLE_EQ(learning_rate(opt, 19), 0.01);
  EXPECT_DOUBLE_EQ(learning_rate(opt, 100), 0.01);
  opt.warmup_steps = 0;
  EXPECT_DOUBLE_EQ(learning_rate(opt, 0), 0.01);
}
