#pragma once

#include <cstddef>
#include <string>

#include "rfat/ops.hpp"
#include "rfat/params.hpp"
#include "rfat/tensor.hpp"

namespace rfat {

/// Receptive-field attention convolution. Every k x k receptive field gets its
/// own softmax weights over the k*k positions, so the effective kernel
/// A[.., p, q] * K differs from one output position to the next.
template <typename T>
struct RfaConvParams {
  // Per-channel: grouped 1x1 conv, (C_in*k*k, 1, 1, 1), groups = C_in.
  // Shared:      dense 1x1 conv,   (k*k, C_in, 1, 1).
  Tensor<T> attn_kernel, attn_bias;
  Tensor<T> kernel;  // (C_out, C_in, k, k)
  Tensor<T> bias;    // (C_out), or undefined for none
  ConvSpec spec;     // padding defaults to (k - 1) / 2
  bool share_attention_across_channels = false;

  std::size_t in_channels() const { return kernel.dim(1); }
  std::size_t out_channels() const { return kernel.dim(0); }

  static RfaConvParams zeros(std::size_t c_in, std::size_t c_out, std::size_t k,
                             std::size_t stride = 1, bool with_bias = true,
                             bool share_attention = false);
  static RfaConvParams init(std::size_t c_in, std::size_t c_out, std::size_t k,
                            std::size_t stride, bool with_bias, bool share_attention,
                            Xoshiro256pp& rng);
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// Attention map A of shape (N, C_in, k*k, H', W'), normalized over axis 2.
/// With shared attention the channel extent is 1 and broadcasts.
template <typename T>
Tensor<T> rfa_attention(const Tensor<T>& x, const RfaConvParams<T>& p);

/// y = bias + sum_{c,r} K[o,c,r] * A[n,c,r,p,q] * unfold(x)[n,c,r,p,q].
template <typename T>
Tensor<T> rfa_conv(const Tensor<T>& x, const RfaConvParams<T>& p);

/// Loop-by-loop evaluation of rfa_conv, attention included, accumulated in
/// double. No autograd; meant as a test oracle.
template <typename T>
Tensor<T> rfa_conv_reference(const Tensor<T>& x, const RfaConvParams<T>& p);

}  // namespace rfat
