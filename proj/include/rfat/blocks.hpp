#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "rfat/attention.hpp"
#include "rfat/ops.hpp"
#include "rfat/params.hpp"
#include "rfat/rfaconv.hpp"

// YOLO-style building blocks. Batch norm is replaced by a learnable
// per-channel affine so every block is a pure, batch-independent function.

namespace rfat {

enum class Activation { kSilu, kNone };

/// act(gain * conv(x) + beta); the conv has no bias of its own.
template <typename T>
struct ConvBlockParams {
  Tensor<T> kernel;      // (C_out, C_in / groups, k, k)
  Tensor<T> gain, beta;  // (1, C_out, 1, 1)
  ConvSpec spec;
  Activation act = Activation::kSilu;

  std::size_t in_channels() const { return kernel.dim(1) * spec.groups; }
  std::size_t out_channels() const { return kernel.dim(0); }

  /// Zero kernel, gain 1, beta 0.
  static ConvBlockParams zeros(std::size_t c_in, std::size_t c_out, std::size_t k,
                               std::size_t stride = 1, Activation act = Activation::kSilu);
  static ConvBlockParams init(std::size_t c_in, std::size_t c_out, std::size_t k,
                              std::size_t stride, Xoshiro256pp& rng,
                              Activation act = Activation::kSilu);
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// The same affine + activation tail around an RFAConv (no conv bias).
template <typename T>
struct RfaBlockParams {
  RfaConvParams<T> conv;
  Tensor<T> gain, beta;
  Activation act = Activation::kSilu;

  static RfaBlockParams zeros(std::size_t c_in, std::size_t c_out, std::size_t k,
                              bool share_attention = false);
  static RfaBlockParams init(std::size_t c_in, std::size_t c_out, std::size_t k,
                             bool share_attention, Xoshiro256pp& rng);
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

enum class BottleneckKind {
  kConv,       // two 3x3 conv blocks
  kRfa,        // both 3x3 convs replaced by RFAConv
  kRfaSingle,  // only the second 3x3 conv replaced
};

/// One 3x3 unit inside a bottleneck: a conv block or an RFA block.
template <typename T>
struct UnitParams {
  bool rfa = false;
  ConvBlockParams<T> conv;
  RfaBlockParams<T> rfa_block;

  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct BottleneckParams {
  UnitParams<T> cv_a, cv_b;
  bool residual = true;

  static BottleneckParams zeros(std::size_t width, BottleneckKind kind, bool residual = true,
                                bool share_attention = false);
  static BottleneckParams init(std::size_t width, BottleneckKind kind, bool residual,
                               bool share_attention, Xoshiro256pp& rng);
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// cv1 (1x1, C_in -> 2h), split, n chained bottlenecks on the second half
/// with every intermediate kept, concat, cv2 (1x1, (2+n)h -> C_out).
template <typename T>
struct C2fParams {
  ConvBlockParams<T> cv1, cv2;
  std::vector<BottleneckParams<T>> m;
  std::size_t hidden = 0;
  BottleneckKind kind = BottleneckKind::kConv;

  /// Hidden width is c_out / 2; c_out must be even.
  static C2fParams init(std::size_t c_in, std::size_t c_out, std::size_t n, BottleneckKind kind,
                        bool residual, bool share_attention, Xoshiro256pp& rng);
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// cv1 (1x1, C -> C/2), three chained 5x5 max pools, concat of four, cv2.
template <typename T>
struct SPPFParams {
  ConvBlockParams<T> cv1, cv2;
  std::size_t pool_k = 5;

  static SPPFParams init(std::size_t c_in, std::size_t c_out, Xoshiro256pp& rng);
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
Tensor<T> conv_block(const Tensor<T>& x, const ConvBlockParams<T>& p);

template <typename T>
Tensor<T> rfa_block(const Tensor<T>& x, const RfaBlockParams<T>& p);

template <typename T>
Tensor<T> bottleneck(const Tensor<T>& x, const BottleneckParams<T>& p);

/// C2f with conv bottlenecks; throws ConfigError if given RFA bottlenecks.
template <typename T>
Tensor<T> c2f(const Tensor<T>& x, const C2fParams<T>& p);

/// Same topology with RFAConv bottlenecks; throws ConfigError otherwise.
template <typename T>
Tensor<T> c2f_rfaconv(const Tensor<T>& x, const C2fParams<T>& p);

template <typename T>
Tensor<T> sppf(const Tensor<T>& x, const SPPFParams<T>& p);

/// triplet_attention(x, p) when enabled, otherwise x itself.
template <typename T>
Tensor<T> attach_triplet(const Tensor<T>& x, const TripletAttentionParams<T>& p, bool enabled);

}  // namespace rfat
