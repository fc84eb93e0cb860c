#include <gtest/gtest.h>

#include <cmath>

#include "rfat/autograd.hpp"
#include "rfat/errors.hpp"
#include "rfat/rfaconv.hpp"
#include "test_util.hpp"

using namespace rfat;
using rfat::testing::check_grad;
using rfat::testing::random_tensor;

namespace {

template <typename T>
RfaConvParams<T> random_layer(std::size_t c_in, std::size_t c_out, std::size_t k,
                              std::size_t stride, bool shared, std::mt19937_64& rng) {
  auto p = RfaConvParams<T>::zeros(c_in, c_out, k, stride, true, shared);
  for (Tensor<T>* t : {&p.attn_kernel, &p.attn_bias, &p.kernel, &p.bias}) {
    *t = random_tensor<T>(t->shape(), rng);
  }
  return p;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
  return m;
}

}  // namespace

TEST(RfaAttention, KernelOneIsAllOnes) {
  std::mt19937_64 rng(1);
  auto p = random_layer<float>(3, 2, 1, 1, false, rng);
  auto a = rfa_attention(random_tensor<float>({2, 3, 4, 5}, rng), p);
  ASSERT_EQ(a.shape(), (Shape{2, 3, 1, 4, 5}));
  for (float v : a.data()) EXPECT_EQ(v, 1.0f);
}

TEST(RfaAttention, ZeroGeneratorIsUniform) {
  std::mt19937_64 rng(2);
  auto p = RfaConvParams<float>::zeros(4, 2, 3);
  auto a = rfa_attention(random_tensor<float>({2, 4, 6, 6}, rng), p);
  for (float v : a.data()) EXPECT_FLOAT_EQ(v, 1.0f / 9.0f);
}

TEST(RfaAttention, NormalizedOverReceptiveField) {
  std::mt19937_64 rng(3);
  for (bool shared : {false, true}) {
    for (std::size_t k : {3, 5}) {
      auto p = random_layer<float>(3, 2, k, 2, shared, rng);
      for (auto* t : {&p.attn_kernel, &p.attn_bias}) *t = scale(*t, 4.0f);
      auto a = rfa_attention(random_tensor<float>({2, 3, 9, 7}, rng, -3, 3), p);
      const std::size_t kk = k * k, cells = a.dim(3) * a.dim(4);
      const std::size_t slabs = a.dim(0) * a.dim(1);
      for (std::size_t s = 0; s < slabs; ++s) {
        for (std::size_t pos = 0; pos < cells; ++pos) {
          double total = 0;
          for (std::size_t r = 0; r < kk; ++r) {
            const float v = a.data()[(s * kk + r) * cells + pos];
            EXPECT_GT(v, 0.0f);
            EXPECT_LT(v, 1.0f);
            total += v;
          }
          EXPECT_NEAR(total, 1.0, 1e-6);
        }
      }
    }
  }
}

TEST(RfaConv, MatchesReferenceOnRandomShapes) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> small(1, 4), side(1, 9), pick(0, 2);
  const std::size_t ks[] = {1, 3, 5};
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = small(rng) % 2 + 1, c_in = small(rng), c_out = small(rng);
    const std::size_t h = side(rng), w = side(rng), k = ks[pick(rng)];
    const std::size_t stride = 1 + trial % 2;
    const bool shared = trial % 5 == 4;
    SCOPED_TRACE(::testing::Message() << n << "x" << c_in << "x" << h << "x" << w << " k=" << k
                                      << " s=" << stride << " -> " << c_out);
    auto pf = random_layer<float>(c_in, c_out, k, stride, shared, rng);
    auto xf = random_tensor<float>({n, c_in, h, w}, rng);
    EXPECT_LT(max_abs_diff(rfa_conv(xf, pf), rfa_conv_reference(xf, pf)), 1e-5);

    auto pd = random_layer<double>(c_in, c_out, k, stride, shared, rng);
    auto xd = random_tensor<double>({n, c_in, h, w}, rng);
    EXPECT_LT(max_abs_diff(rfa_conv(xd, pd), rfa_conv_reference(xd, pd)), 1e-10);
  }
}

TEST(RfaConv, UniformAttentionReducesToScaledConv) {
  std::mt19937_64 rng(5);
  for (std::size_t k : {3, 5}) {
    for (std::size_t stride : {1, 2}) {
      auto p = RfaConvParams<float>::zeros(4, 3, k, stride);
      p.kernel = random_tensor<float>(p.kernel.shape(), rng);
      p.bias = random_tensor<float>(p.bias.shape(), rng);
      auto x = random_tensor<float>({2, 4, 9, 9}, rng);
      const auto expected =
          conv2d(x, scale(p.kernel, 1.0f / static_cast<float>(k * k)), p.bias, p.spec);
      EXPECT_LT(max_abs_diff(rfa_conv(x, p), expected), 1e-5);
    }
  }
}

TEST(RfaConv, KernelOneEqualsPointwiseConv) {
  std::mt19937_64 rng(6);
  auto p = random_layer<float>(5, 3, 1, 1, false, rng);
  auto x = random_tensor<float>({2, 5, 4, 6}, rng);
  auto y = rfa_conv(x, p);
  auto ref = conv2d(x, p.kernel, p.bias, ConvSpec{1, 1, 0, 1});
  ASSERT_EQ(y.shape(), ref.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y.data()[i], ref.data()[i]);
}

TEST(RfaConv, SingleReceptiveFieldByHand) {
  // One 3x3 window, no padding. Attention logits log(1..9) give A_r = r / 45;
  // with X_r = r and K_r = 1 the output is sum r^2 / 45 = 285 / 45.
  auto p = RfaConvParams<double>::zeros(1, 1, 3, 1, false);
  p.spec.padding = 0;
  for (std::size_t r = 0; r < 9; ++r) p.attn_bias.data()[r] = std::log(double(r + 1));
  p.kernel = Tensor<double>({1, 1, 3, 3}, 1.0);
  Tensor<double> x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto y = rfa_conv(x, p);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_NEAR(y.item(), 285.0 / 45.0, 1e-12);
  EXPECT_NEAR(rfa_conv_reference(x, p).item(), 285.0 / 45.0, 1e-12);
}

TEST(RfaConv, Gradient) {
  std::mt19937_64 rng(7);
  struct Case {
    std::size_t k, stride;
    bool shared;
  };
  for (Case c : {Case{3, 1, false}, Case{3, 2, false}, Case{1, 1, false}, Case{3, 1, true},
                 Case{5, 2, false}}) {
    auto p = random_layer<double>(3, 2, c.k, c.stride, c.shared, rng);
    auto x = random_tensor<double>({2, 3, 6, 5}, rng);
    auto report = check_grad([&] { return rfa_conv(x, p); },
                             {x, p.attn_kernel, p.attn_bias, p.kernel, p.bias});
    EXPECT_LT(report.max_rel_error, 1e-4) << "k=" << c.k << " stride=" << c.stride;
  }
}

TEST(RfaConv, TrainedKernelsDifferAcrossPositions) {
  std::mt19937_64 rng(8);
  Xoshiro256pp init(8);
  auto p = RfaConvParams<double>::init(2, 2, 3, 1, true, false, init);
  auto x = random_tensor<double>({1, 2, 6, 6}, rng);
  auto target = random_tensor<double>({1, 2, 6, 6}, rng);
  ParamList<double> params;
  p.collect(params, "rfa");
  for (int step = 0; step < 5; ++step) {
    for (auto& np : params) np.tensor.set_requires_grad(true);
    Tape tape;
    Tensor<double> loss;
    {
      TapeScope scope(tape);
      auto d = sub(rfa_conv(x, p), target);
      loss = mean(mul(d, d));
    }
    backward(tape, loss);
    NoGradScope off;
    for (auto& np : params) {
      auto g = np.tensor.grad();
      auto w = np.tensor.data();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 0.1 * g[i];
      np.tensor.drop_grad();
    }
  }
  auto a = rfa_attention(x, p);
  // Effective kernel at output position (p, q): A[0, c, r, p, q] * K[o, c, r].
  auto effective = [&](std::size_t row, std::size_t col) {
    std::vector<double> out;
    for (std::size_t o = 0; o < 2; ++o)
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t r = 0; r < 9; ++r)
          out.push_back(a.data()[((c * 9 + r) * 6 + row) * 6 + col] *
                        p.kernel.data()[(o * 2 + c) * 9 + r]);
    return out;
  };
  const auto k1 = effective(1, 1), k2 = effective(3, 4);
  double diff = 0;
  for (std::size_t i = 0; i < k1.size(); ++i) diff = std::max(diff, std::abs(k1[i] - k2[i]));
  EXPECT_GT(diff, 1e-3);
}

TEST(RfaConv, RejectsBadShapes) {
  auto p = RfaConvParams<float>::zeros(3, 2, 3);
  EXPECT_THROW(rfa_conv(Tensor<float>({1, 4, 5, 5}), p), ShapeError);
  EXPECT_THROW(RfaConvParams<float>::zeros(3, 2, 4), ConfigError);
  p.attn_kernel = Tensor<float>({9, 1, 1, 1});
  EXPECT_THROW(rfa_attention(Tensor<float>({1, 3, 5, 5}), p), ShapeError);
}
