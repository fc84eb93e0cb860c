#include "rfat/rfaconv.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "rfat/errors.hpp"

namespace rfat {

namespace {

template <typename T>
void validate(const RfaConvParams<T>& p) {
  if (p.spec.k == 0 || p.spec.k % 2 == 0) {
    throw ConfigError("rfa_conv: kernel size must be odd, got " + std::to_string(p.spec.k));
  }
  if (p.spec.stride == 0) throw ConfigError("rfa_conv: stride must be positive");
  if (!p.kernel.defined() || p.kernel.rank() != 4 || p.kernel.dim(2) != p.spec.k ||
      p.kernel.dim(3) != p.spec.k) {
    throw ShapeError("rfa_conv: kernel must be (C_out, C_in, k, k) with k = " +
                     std::to_string(p.spec.k));
  }
  const std::size_t kk = p.spec.k * p.spec.k;
  const std::size_t c = p.kernel.dim(1);
  const Shape want = p.share_attention_across_channels ? Shape{kk, c, 1, 1} : Shape{c * kk, 1, 1, 1};
  if (p.attn_kernel.shape() != want || p.attn_bias.shape() != Shape{want[0]}) {
    throw ShapeError("rfa_conv: attention generator is " + shape_str(p.attn_kernel.shape()) +
                     ", expected " + shape_str(want));
  }
}

template <typename T>
void check_input(const Tensor<T>& x, const RfaConvParams<T>& p) {
  validate(p);
  if (x.rank() != 4 || x.dim(1) != p.in_channels()) {
    throw ShapeError("rfa_conv: input " + shape_str(x.shape()) + " does not have " +
                     std::to_string(p.in_channels()) + " channels");
  }
}

}  // namespace

template <typename T>
RfaConvParams<T> RfaConvParams<T>::zeros(std::size_t c_in, std::size_t c_out, std::size_t k,
                                         std::size_t stride, bool with_bias,
                                         bool share_attention) {
  RfaConvParams p;
  p.spec = ConvSpec::same(k, stride);
  p.share_attention_across_channels = share_attention;
  const std::size_t kk = k * k;
  if (share_attention) {
    p.attn_kernel = Tensor<T>(Shape{kk, c_in, 1, 1});
    p.attn_bias = Tensor<T>(Shape{kk});
  } else {
    p.attn_kernel = Tensor<T>(Shape{c_in * kk, 1, 1, 1});
    p.attn_bias = Tensor<T>(Shape{c_in * kk});
  }
  p.kernel = Tensor<T>(Shape{c_out, c_in, k, k});
  if (with_bias) p.bias = Tensor<T>(Shape{c_out});
  validate(p);
  return p;
}

template <typename T>
RfaConvParams<T> RfaConvParams<T>::init(std::size_t c_in, std::size_t c_out, std::size_t k,
                                        std::size_t stride, bool with_bias, bool share_attention,
                                        Xoshiro256pp& rng) {
  auto p = zeros(c_in, c_out, k, stride, with_bias, share_attention);
  p.attn_kernel = kaiming_uniform<T>(p.attn_kernel.shape(), rng, kGainLinear);
  p.kernel = kaiming_uniform<T>(p.kernel.shape(), rng, kGainSilu);
  return p;
}

template <typename T>
void RfaConvParams<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".attn_kernel", attn_kernel, ParamRole::kWeight});
  out.push_back({prefix + ".attn_bias", attn_bias, ParamRole::kBias});
  out.push_back({prefix + ".kernel", kernel, ParamRole::kWeight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, ParamRole::kBias});
}

template <typename T>
Tensor<T> rfa_attention(const Tensor<T>& x, const RfaConvParams<T>& p) {
  check_input(x, p);
  const std::size_t n = x.dim(0), c = x.dim(1), kk = p.spec.k * p.spec.k;
  // Pooling with the unfold window keeps the attention grid aligned with the
  // patch grid by construction.
  const auto pooled = avgpool2d(x, ConvSpec{p.spec.k, p.spec.stride, p.spec.padding, 1});
  const std::size_t ho = pooled.dim(2), wo = pooled.dim(3);
  Tensor<T> logits;
  if (p.share_attention_across_channels) {
    logits = reshape(conv2d(pooled, p.attn_kernel, p.attn_bias, ConvSpec{1, 1, 0, 1}),
                     {n, 1, kk, ho, wo});
  } else {
    logits = reshape(conv2d(pooled, p.attn_kernel, p.attn_bias, ConvSpec{1, 1, 0, c}),
                     {n, c, kk, ho, wo});
  }
  return softmax(logits, 2);
}

template <typename T>
Tensor<T> rfa_conv(const Tensor<T>& x, const RfaConvParams<T>& p) {
  const auto attn = rfa_attention(x, p);
  const auto patches = unfold(x, p.spec);
  return patch_contract(mul(attn, patches), p.kernel, p.bias);
}

template <typename T>
Tensor<T> rfa_conv_reference(const Tensor<T>& x, const RfaConvParams<T>& p) {
  check_input(x, p);
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = p.out_channels(), k = p.spec.k, s = p.spec.stride, kk = k * k;
  const auto pad = static_cast<long>(p.spec.padding);
  const std::size_t Ho = p.spec.out_size(H), Wo = p.spec.out_size(W);
  const auto xd = x.data();
  auto xpad = [&](std::size_t n, std::size_t c, std::size_t row, std::size_t col) -> double {
    const long r = static_cast<long>(row) - pad, q = static_cast<long>(col) - pad;
    if (r < 0 || q < 0 || r >= static_cast<long>(H) || q >= static_cast<long>(W)) return 0.0;
    return static_cast<double>(xd[((n * C + c) * H + r) * W + q]);
  };
  const auto ak = p.attn_kernel.data();
  const auto ab = p.attn_bias.data();
  const auto K = p.kernel.data();

  Tensor<T> y(Shape{N, O, Ho, Wo});
  std::vector<double> pooled(C), weights(C * kk);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t i = 0; i < Ho; ++i) {
      for (std::size_t j = 0; j < Wo; ++j) {
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0;
          for (std::size_t u = 0; u < k; ++u)
            for (std::size_t v = 0; v < k; ++v) acc += xpad(n, c, i * s + u, j * s + v);
          pooled[c] = acc / static_cast<double>(kk);
        }
        for (std::size_t c = 0; c < C; ++c) {
          double peak = -INFINITY;
          for (std::size_t r = 0; r < kk; ++r) {
            double logit;
            if (p.share_attention_across_channels) {
              logit = static_cast<double>(ab[r]);
              for (std::size_t c2 = 0; c2 < C; ++c2)
                logit += static_cast<double>(ak[r * C + c2]) * pooled[c2];
            } else {
              logit = static_cast<double>(ak[c * kk + r]) * pooled[c] +
                      static_cast<double>(ab[c * kk + r]);
            }
            weights[c * kk + r] = logit;
            peak = std::max(peak, logit);
          }
          double total = 0;
          for (std::size_t r = 0; r < kk; ++r) {
            weights[c * kk + r] = std::exp(weights[c * kk + r] - peak);
            total += weights[c * kk + r];
          }
          for (std::size_t r = 0; r < kk; ++r) weights[c * kk + r] /= total;
        }
        for (std::size_t o = 0; o < O; ++o) {
          double acc = p.bias.defined() ? static_cast<double>(p.bias.data()[o]) : 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t v = 0; v < k; ++v)
                acc += static_cast<double>(K[((o * C + c) * k + u) * k + v]) *
                       weights[c * kk + u * k + v] * xpad(n, c, i * s + u, j * s + v);
          y.data()[((n * O + o) * Ho + i) * Wo + j] = static_cast<T>(acc);
        }
      }
    }
  }
  return y;
}

#define RFAT_INSTANTIATE_RFACONV(T)                                                   \
  template struct RfaConvParams<T>;                                                   \
  template Tensor<T> rfa_attention<T>(const Tensor<T>&, const RfaConvParams<T>&);     \
  template Tensor<T> rfa_conv<T>(const Tensor<T>&, const RfaConvParams<T>&);          \
  template Tensor<T> rfa_conv_reference<T>(const Tensor<T>&, const RfaConvParams<T>&);

RFAT_INSTANTIATE_RFACONV(float)
RFAT_INSTANTIATE_RFACONV(double)

}  // namespace rfat
