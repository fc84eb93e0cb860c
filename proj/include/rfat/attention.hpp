#pragma once

#include <cstddef>
#include <string>

#include "rfat/params.hpp"
#include "rfat/tensor.hpp"

namespace rfat {

/// Three-branch rotate-and-gate attention. Each branch owns one 2->1
/// k x k conv (plus scalar bias) applied to a Z-pooled map.
template <typename T>
struct TripletAttentionParams {
  Tensor<T> cw_kernel, cw_bias;  // gate over (C, W), pooled across H
  Tensor<T> ch_kernel, ch_bias;  // gate over (H, C), pooled across W
  Tensor<T> hw_kernel, hw_bias;  // gate over (H, W), pooled across C
  std::size_t k = 7;

  static TripletAttentionParams zeros(std::size_t k = 7);
  static TripletAttentionParams init(std::size_t k, Xoshiro256pp& rng);
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// Squeeze-and-excitation: GAP -> 1x1 reduce -> ReLU -> 1x1 expand -> sigmoid.
template <typename T>
struct SEParams {
  Tensor<T> reduce_kernel, reduce_bias;
  Tensor<T> expand_kernel, expand_bias;
  std::size_t ratio = 4;

  static SEParams zeros(std::size_t channels, std::size_t ratio = 4);
  static SEParams init(std::size_t channels, std::size_t ratio, Xoshiro256pp& rng);
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// CBAM: shared channel MLP over GAP and GMP, then a 7x7 spatial gate.
template <typename T>
struct CBAMParams {
  Tensor<T> reduce_kernel, reduce_bias;
  Tensor<T> expand_kernel, expand_bias;
  Tensor<T> spatial_kernel, spatial_bias;
  std::size_t ratio = 4;

  static CBAMParams zeros(std::size_t channels, std::size_t ratio = 4);
  static CBAMParams init(std::size_t channels, std::size_t ratio, Xoshiro256pp& rng);
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// Global context block: softmax-pooled context, bottleneck transform with
/// layer norm, broadcast add.
template <typename T>
struct GCParams {
  Tensor<T> context_kernel;  // (1, C, 1, 1)
  Tensor<T> reduce_kernel, reduce_bias;
  Tensor<T> ln_gain, ln_bias;  // (1, C/r, 1, 1)
  Tensor<T> expand_kernel, expand_bias;
  std::size_t ratio = 4;

  static GCParams zeros(std::size_t channels, std::size_t ratio = 4);
  static GCParams init(std::size_t channels, std::size_t ratio, Xoshiro256pp& rng);
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// Stacks max (slice 0) and mean (slice 1) over `axis`; that axis becomes 2.
template <typename T>
Tensor<T> z_pool(const Tensor<T>& x, std::size_t axis);

/// (y_cw + y_ch + y_hw) / 3; output shape equals input shape.
template <typename T>
Tensor<T> triplet_attention(const Tensor<T>& x, const TripletAttentionParams<T>& p);

template <typename T>
Tensor<T> se_forward(const Tensor<T>& x, const SEParams<T>& p);

template <typename T>
Tensor<T> cbam_forward(const Tensor<T>& x, const CBAMParams<T>& p);

template <typename T>
Tensor<T> gc_forward(const Tensor<T>& x, const GCParams<T>& p);

/// GC's spatial attention weights (N, 1, H*W); exposed for inspection.
template <typename T>
Tensor<T> gc_attention(const Tensor<T>& x, const GCParams<T>& p);

}  // namespace rfat
