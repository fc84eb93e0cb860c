#include <gtest/gtest.h>

#include "rfat/blocks.hpp"
#include "rfat/errors.hpp"
#include "test_util.hpp"

using namespace rfat;
using rfat::testing::check_grad;
using rfat::testing::random_tensor;

namespace {

template <typename P>
std::vector<Tensor<double>> inputs_of(const Tensor<double>& x, const P& params) {
  ParamList<double> list;
  params.collect(list, "p");
  std::vector<Tensor<double>> out{x};
  for (auto& np : list) out.push_back(np.tensor);
  return out;
}

// Move every affine/bias slightly off its init so their gradients are tested
// away from the trivial point.
template <typename P>
void perturb(P& params, std::mt19937_64& rng) {
  ParamList<double> list;
  params.collect(list, "p");
  std::uniform_real_distribution<double> d(-0.3, 0.3);
  for (auto& np : list)
    if (np.role != ParamRole::kWeight)
      for (double& v : np.tensor.data()) v += d(rng);
}

template <typename T>
void expect_near_all(const Tensor<T>& a, const Tensor<T>& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], tol);
}

}  // namespace

TEST(ConvBlock, IdentityKernelWithoutActivation) {
  std::mt19937_64 rng(1);
  auto p = ConvBlockParams<float>::zeros(3, 3, 1, 1, Activation::kNone);
  for (std::size_t c = 0; c < 3; ++c) p.kernel.data()[c * 3 + c] = 1.0f;
  auto x = random_tensor<float>({2, 3, 4, 5}, rng);
  auto y = conv_block(x, p);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(ConvBlock, ZeroGainGivesSiluOfBeta) {
  std::mt19937_64 rng(2);
  Xoshiro256pp init(2);
  auto p = ConvBlockParams<double>::init(3, 2, 3, 1, init);
  p.gain = Tensor<double>(p.gain.shape());
  p.beta = Tensor<double>({1, 2, 1, 1}, {-1.5, 2.0});
  auto y = conv_block(random_tensor<double>({1, 3, 4, 4}, rng), p);
  const double expect[] = {-1.5 / (1 + std::exp(1.5)), 2.0 / (1 + std::exp(-2.0))};
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(y.data()[c * 16 + i], expect[c], 1e-15);
}

TEST(ConvBlock, Gradient) {
  std::mt19937_64 rng(3);
  Xoshiro256pp init(3);
  for (std::size_t stride : {1, 2}) {
    auto p = ConvBlockParams<double>::init(3, 4, 3, stride, init);
    perturb(p, rng);
    auto x = random_tensor<double>({2, 3, 5, 6}, rng);
    EXPECT_LT(check_grad([&] { return conv_block(x, p); }, inputs_of(x, p)).max_rel_error, 1e-4);
  }
}

TEST(Bottleneck, ZeroPathLeavesResidual) {
  std::mt19937_64 rng(4);
  auto x = random_tensor<float>({2, 4, 5, 5}, rng);
  for (auto kind : {BottleneckKind::kConv, BottleneckKind::kRfa, BottleneckKind::kRfaSingle}) {
    auto y = bottleneck(x, BottleneckParams<float>::zeros(4, kind));
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
    auto z = bottleneck(x, BottleneckParams<float>::zeros(4, kind, false));
    for (float v : z.data()) EXPECT_EQ(v, 0.0f);
  }
}

TEST(Bottleneck, Gradient) {
  std::mt19937_64 rng(5);
  Xoshiro256pp init(5);
  auto x = random_tensor<double>({1, 3, 5, 4}, rng);
  for (auto kind : {BottleneckKind::kConv, BottleneckKind::kRfa, BottleneckKind::kRfaSingle}) {
    auto p = BottleneckParams<double>::init(3, kind, true, false, init);
    perturb(p, rng);
    EXPECT_LT(check_grad([&] { return bottleneck(x, p); }, inputs_of(x, p)).max_rel_error, 1e-4);
  }
}

TEST(C2f, ZeroBottleneckAppendsItsInput) {
  std::mt19937_64 rng(6);
  Xoshiro256pp init(6);
  auto p = C2fParams<double>::init(4, 6, 1, BottleneckKind::kConv, true, false, init);
  p.m[0] = BottleneckParams<double>::zeros(3, BottleneckKind::kConv);
  auto x = random_tensor<double>({1, 4, 5, 5}, rng);
  // With an identity bottleneck the concat is [a, b, b].
  auto u = conv_block(x, p.cv1);
  auto halves = split(u, {3, 3}, 1);
  auto expected = conv_block(concat<double>({halves[0], halves[1], halves[1]}, 1), p.cv2);
  auto y = c2f(x, p);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y.data()[i], expected.data()[i]);
}

TEST(C2f, ShapesAcrossConfigs) {
  Xoshiro256pp init(7);
  std::mt19937_64 rng(7);
  for (std::size_t c_in : {2, 3, 8})
    for (std::size_t c_out : {2, 4, 8})
      for (std::size_t n : {1, 2})
        for (auto kind : {BottleneckKind::kConv, BottleneckKind::kRfa, BottleneckKind::kRfaSingle}) {
          auto p = C2fParams<float>::init(c_in, c_out, n, kind, true, false, init);
          EXPECT_EQ(p.cv1.out_channels(), c_out);
          EXPECT_EQ(p.cv2.in_channels(), (2 + n) * (c_out / 2));
          auto x = random_tensor<float>({2, c_in, 5, 7}, rng);
          auto y = kind == BottleneckKind::kConv ? c2f(x, p) : c2f_rfaconv(x, p);
          EXPECT_EQ(y.shape(), (Shape{2, c_out, 5, 7}));
        }
}

TEST(C2f, ConfigErrors) {
  Xoshiro256pp init(8);
  EXPECT_THROW(C2fParams<float>::init(4, 5, 1, BottleneckKind::kConv, true, false, init),
               ConfigError);
  EXPECT_THROW(C2fParams<float>::init(4, 4, 0, BottleneckKind::kConv, true, false, init),
               ConfigError);
  auto conv = C2fParams<float>::init(4, 4, 1, BottleneckKind::kConv, true, false, init);
  auto rfa = C2fParams<float>::init(4, 4, 1, BottleneckKind::kRfa, true, false, init);
  Tensor<float> x({1, 4, 3, 3});
  EXPECT_THROW(c2f_rfaconv(x, conv), ConfigError);
  EXPECT_THROW(c2f(x, rfa), ConfigError);
}

TEST(C2f, RfaWithUniformAttentionMatchesScaledConv) {
  std::mt19937_64 rng(9);
  Xoshiro256pp init(9);
  auto base = C2fParams<float>::init(4, 6, 2, BottleneckKind::kConv, true, false, init);
  auto twin = base;
  twin.kind = BottleneckKind::kRfa;
  for (auto& b : twin.m) {
    for (UnitParams<float>* u : {&b.cv_a, &b.cv_b}) {
      auto rb = RfaBlockParams<float>::zeros(3, 3, 3);
      rb.conv.kernel = scale(u->conv.kernel, 9.0f);
      rb.gain = u->conv.gain;
      rb.beta = u->conv.beta;
      u->rfa = true;
      u->rfa_block = rb;
    }
  }
  auto x = random_tensor<float>({2, 4, 7, 6}, rng);
  expect_near_all(c2f_rfaconv(x, twin), c2f(x, base), 1e-4);
}

TEST(C2f, Gradient) {
  std::mt19937_64 rng(10);
  Xoshiro256pp init(10);
  auto x = random_tensor<double>({1, 3, 4, 5}, rng);
  auto pc = C2fParams<double>::init(3, 4, 1, BottleneckKind::kConv, true, false, init);
  perturb(pc, rng);
  EXPECT_LT(check_grad([&] { return c2f(x, pc); }, inputs_of(x, pc)).max_rel_error, 1e-4);
  auto pr = C2fParams<double>::init(3, 4, 1, BottleneckKind::kRfa, true, false, init);
  perturb(pr, rng);
  EXPECT_LT(check_grad([&] { return c2f_rfaconv(x, pr); }, inputs_of(x, pr)).max_rel_error,
            1e-4);
}

TEST(SPPF, ConstantInputPoolsToItself) {
  Xoshiro256pp init(11);
  auto p = SPPFParams<float>::init(4, 6, init);
  Tensor<float> x({1, 4, 6, 6}, 0.7f);
  auto y0 = conv_block(x, p.cv1);
  auto expected = conv_block(concat<float>({y0, y0, y0, y0}, 1), p.cv2);
  auto y = sppf(x, p);
  ASSERT_EQ(y.shape(), (Shape{1, 6, 6, 6}));
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y.data()[i], expected.data()[i]);
}

TEST(SPPF, Gradient) {
  std::mt19937_64 rng(12);
  Xoshiro256pp init(12);
  auto p = SPPFParams<double>::init(4, 3, init);
  perturb(p, rng);
  auto x = random_tensor<double>({2, 4, 6, 5}, rng);
  EXPECT_LT(check_grad([&] { return sppf(x, p); }, inputs_of(x, p)).max_rel_error, 1e-4);
}

TEST(AttachTriplet, DisabledEnabledAndGradient) {
  std::mt19937_64 rng(13);
  auto x = random_tensor<float>({1, 3, 4, 4}, rng);
  auto zero = TripletAttentionParams<float>::zeros(3);
  EXPECT_TRUE(attach_triplet(x, zero, false).same_storage(x));
  auto y = attach_triplet(x, zero, true);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_FLOAT_EQ(y.data()[i], 0.5f * x.data()[i]);

  Xoshiro256pp init(13);
  auto p = TripletAttentionParams<double>::init(3, init);
  auto xd = random_tensor<double>({1, 3, 4, 5}, rng);
  EXPECT_LT(
      check_grad([&] { return attach_triplet(xd, p, true); }, inputs_of(xd, p)).max_rel_error,
      1e-4);
}
