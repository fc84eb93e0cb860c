#include <gtest/gtest.h>

#include <cmath>

#include "rfat/attention.hpp"
#include "rfat/ops.hpp"
#include "test_util.hpp"

using namespace rfat;
using rfat::testing::check_grad;
using rfat::testing::random_tensor;

namespace {

template <typename T>
void expect_same_shape_all(const Tensor<T>& x, Xoshiro256pp& rng) {
  const std::size_t C = x.dim(1);
  const std::size_t r = C % 4 == 0 ? 4 : 1;
  EXPECT_EQ(triplet_attention(x, TripletAttentionParams<T>::init(7, rng)).shape(), x.shape());
  EXPECT_EQ(se_forward(x, SEParams<T>::init(C, r, rng)).shape(), x.shape());
  EXPECT_EQ(cbam_forward(x, CBAMParams<T>::init(C, r, rng)).shape(), x.shape());
  EXPECT_EQ(gc_forward(x, GCParams<T>::init(C, r, rng)).shape(), x.shape());
}

// Randomize biases too so the gradient check covers them.
template <typename T>
void jitter(ParamList<T>& params, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-0.5, 0.5);
  for (auto& p : params)
    for (T& v : p.tensor.data()) v += static_cast<T>(d(rng));
}

}  // namespace

TEST(ZPool, MaxThenMean) {
  Tensor<float> x({1, 3, 1, 1}, {1, 2, 3});
  auto z = z_pool(x, 1);
  ASSERT_EQ(z.shape(), (Shape{1, 2, 1, 1}));
  EXPECT_EQ(z.data()[0], 3.0f);
  EXPECT_EQ(z.data()[1], 2.0f);

  Tensor<float> one({2, 1, 2, 2}, 4.5f);
  auto z1 = z_pool(one, 1);
  for (float v : z1.data()) EXPECT_EQ(v, 4.5f);

  auto zw = z_pool(Tensor<float>({1, 2, 3, 4}, 1.0f), 3);
  EXPECT_EQ(zw.shape(), (Shape{1, 2, 3, 2}));
  EXPECT_THROW(z_pool(x, 4), ShapeError);
}

TEST(ZPool, Gradient) {
  std::mt19937_64 rng(1);
  auto x = random_tensor<double>({2, 5, 3, 4}, rng);
  for (std::size_t axis = 1; axis < 4; ++axis) {
    EXPECT_LT(check_grad([&] { return z_pool(x, axis); }, {x}).max_rel_error, 1e-4);
  }
}

TEST(Triplet, ZeroParametersHalveInput) {
  std::mt19937_64 rng(2);
  auto x = random_tensor<float>({2, 4, 5, 6}, rng, -10, 10);
  auto y = triplet_attention(x, TripletAttentionParams<float>::zeros(7));
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_FLOAT_EQ(y.data()[i], 0.5f * x.data()[i]);
}

TEST(Triplet, PreservesShape) {
  Xoshiro256pp init(3);
  std::mt19937_64 rng(3);
  auto x = random_tensor<float>({2, 16, 8, 10}, rng);
  EXPECT_EQ(triplet_attention(x, TripletAttentionParams<float>::init(7, init)).shape(), x.shape());
}

TEST(Triplet, RejectsEvenKernel) {
  EXPECT_THROW(TripletAttentionParams<float>::zeros(4), ConfigError);
  auto p = TripletAttentionParams<float>::zeros(3);
  p.k = 2;
  EXPECT_THROW(triplet_attention(Tensor<float>({1, 1, 2, 2}), p), ConfigError);
}

TEST(Triplet, Gradient) {
  std::mt19937_64 rng(4);
  Xoshiro256pp init(4);
  auto x = random_tensor<double>({2, 3, 5, 4}, rng);
  for (std::size_t k : {3, 7}) {
    auto p = TripletAttentionParams<double>::init(k, init);
    ParamList<double> params;
    p.collect(params, "t");
    jitter(params, rng);
    std::vector<Tensor<double>> inputs{x};
    for (auto& np : params) inputs.push_back(np.tensor);
    EXPECT_LT(check_grad([&] { return triplet_attention(x, p); }, inputs).max_rel_error, 1e-4);
  }
}

TEST(Triplet, TransposeEquivariance) {
  // Swapping H and W exchanges the roles of the CW and CH branches; their
  // kernels swap and transpose, and the HW kernel transposes.
  std::mt19937_64 rng(5);
  Xoshiro256pp init(5);
  auto x = random_tensor<double>({2, 3, 4, 6}, rng);
  auto p = TripletAttentionParams<double>::init(5, init);
  p.cw_bias.data()[0] = 0.3;
  p.ch_bias.data()[0] = -0.2;
  p.hw_bias.data()[0] = 0.1;
  auto transpose_kernel = [](const Tensor<double>& k) { return permute(k, {0, 1, 3, 2}); };
  TripletAttentionParams<double> q = p;
  q.cw_kernel = transpose_kernel(p.ch_kernel);
  q.ch_kernel = transpose_kernel(p.cw_kernel);
  q.cw_bias = p.ch_bias;
  q.ch_bias = p.cw_bias;
  q.hw_kernel = transpose_kernel(p.hw_kernel);

  auto lhs = triplet_attention(permute(x, {0, 1, 3, 2}), q);
  auto rhs = permute(triplet_attention(x, p), {0, 1, 3, 2});
  ASSERT_EQ(lhs.shape(), rhs.shape());
  for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs.data()[i], rhs.data()[i], 1e-12);
}

TEST(SE, ZeroParametersHalveInput) {
  std::mt19937_64 rng(6);
  auto x = random_tensor<float>({2, 8, 3, 3}, rng);
  auto y = se_forward(x, SEParams<float>::zeros(8, 4));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], 0.5f * x.data()[i]);
  EXPECT_THROW(SEParams<float>::zeros(6, 4), ConfigError);
}

TEST(CBAM, ZeroParametersQuarterInput) {
  std::mt19937_64 rng(7);
  auto x = random_tensor<float>({2, 8, 5, 4}, rng);
  auto y = cbam_forward(x, CBAMParams<float>::zeros(8, 4));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], 0.25f * x.data()[i]);
}

TEST(GC, ZeroExpandIsIdentityAndWeightsSumToOne) {
  std::mt19937_64 rng(8);
  Xoshiro256pp init(8);
  auto x = random_tensor<float>({2, 8, 4, 5}, rng);
  auto p = GCParams<float>::init(8, 4, init);
  p.expand_kernel = Tensor<float>(p.expand_kernel.shape());
  p.expand_bias = Tensor<float>(p.expand_bias.shape());
  auto y = gc_forward(x, p);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
  auto a = gc_attention(x, p);
  for (std::size_t n = 0; n < 2; ++n) {
    double s = 0;
    for (std::size_t j = 0; j < 20; ++j) s += a.data()[n * 20 + j];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Baselines, Gradients) {
  std::mt19937_64 rng(9);
  Xoshiro256pp init(9);
  auto x = random_tensor<double>({2, 8, 4, 3}, rng);
  auto run = [&](auto params, auto fwd) {
    ParamList<double> list;
    params.collect(list, "m");
    jitter(list, rng);
    std::vector<Tensor<double>> inputs{x};
    for (auto& np : list) inputs.push_back(np.tensor);
    return check_grad([&] { return fwd(x, params); }, inputs).max_rel_error;
  };
  EXPECT_LT(run(SEParams<double>::init(8, 4, init),
                [](const auto& v, const auto& p) { return se_forward(v, p); }),
            1e-4);
  EXPECT_LT(run(CBAMParams<double>::init(8, 4, init),
                [](const auto& v, const auto& p) { return cbam_forward(v, p); }),
            1e-4);
  EXPECT_LT(run(GCParams<double>::init(8, 4, init),
                [](const auto& v, const auto& p) { return gc_forward(v, p); }),
            1e-4);
}

TEST(Attention, ShapePreservationMatrix) {
  Xoshiro256pp init(10);
  std::mt19937_64 rng(10);
  const std::size_t dims[] = {1, 2, 3, 5, 8};
  for (std::size_t n : dims)
    for (std::size_t c : dims)
      for (std::size_t h : dims)
        for (std::size_t w : dims) expect_same_shape_all(random_tensor<float>({n, c, h, w}, rng), init);
}

TEST(Attention, MultiplicativeGatesShrink) {
  Xoshiro256pp init(11);
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor<double>({2, 8, 5, 6}, rng, -3, 3);
    auto t = triplet_attention(x, TripletAttentionParams<double>::init(7, init));
    auto s = se_forward(x, SEParams<double>::init(8, 4, init));
    auto c = cbam_forward(x, CBAMParams<double>::init(8, 4, init));
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double ax = std::abs(x.data()[i]);
      EXPECT_LE(std::abs(t.data()[i]), ax);
      EXPECT_LE(std::abs(s.data()[i]), ax);
      EXPECT_LE(std::abs(c.data()[i]), ax);
    }
  }
}

TEST(Attention, Deterministic) {
  Xoshiro256pp a(12), b(12);
  std::mt19937_64 rng(12);
  auto x = random_tensor<float>({1, 4, 6, 6}, rng);
  auto y1 = triplet_attention(x, TripletAttentionParams<float>::init(7, a));
  auto y2 = triplet_attention(x, TripletAttentionParams<float>::init(7, b));
  for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_EQ(y1.data()[i], y2.data()[i]);
}
