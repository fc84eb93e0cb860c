#pragma once

#include <cstddef>
#include <vector>

#include "rfat/tensor.hpp"

// Differentiable tensor operations. Every op returns a fresh tensor and, when
// a Tape is active and any input requires a gradient, records its backward
// rule on that tape. Layout is NCHW throughout.

namespace rfat {

/// Square-kernel sliding window geometry shared by conv, unfold and pooling.
struct ConvSpec {
  std::size_t k = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;

  /// floor((in + 2*padding - k) / stride) + 1, or throws when < 1.
  std::size_t out_size(std::size_t in) const;
  /// Same-size padding (k - 1) / 2 with the given stride.
  static ConvSpec same(std::size_t k, std::size_t stride = 1);
};

// --- convolution and receptive fields -------------------------------------

/// kernel: (C_out, C_in / groups, k, k); bias: (C_out) or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 const ConvSpec& spec);

/// (N, C, H, W) -> (N, C, k*k, H', W'); out[n,c,i*k+j,p,q] = x_pad[n,c,p*s+i,q*s+j].
template <typename T>
Tensor<T> unfold(const Tensor<T>& x, const ConvSpec& spec);

/// Contracts unfolded patches (N, C, k*k, H', W') with a (C_out, C, k, k)
/// kernel: y[n,o,p,q] = bias[o] + sum_{c,r} kernel[o,c,r] * patches[n,c,r,p,q].
template <typename T>
Tensor<T> patch_contract(const Tensor<T>& patches, const Tensor<T>& kernel,
                         const Tensor<T>& bias);

// --- pooling ----------------------------------------------------------------

/// Windowed max; padded cells never win. Ties route gradient to the first
/// row-major maximum.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, const ConvSpec& spec);

/// Windowed mean; zero padding counts toward the k*k divisor.
template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, const ConvSpec& spec);

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);
template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x);

/// Reductions along one axis, keeping it with extent 1.
template <typename T>
Tensor<T> max_axis(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis);

/// Sum over the listed axes, keeping them with extent 1.
template <typename T>
Tensor<T> sum_axes(const Tensor<T>& x, const std::vector<std::size_t>& axes);

/// Sum of all elements as a shape-{1} tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// --- layout -----------------------------------------------------------------

/// out.shape[i] = x.shape[order[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, const std::vector<std::size_t>& sizes,
                             std::size_t axis);

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x);

// --- elementwise ------------------------------------------------------------

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> silu(const Tensor<T>& x);

/// Same-rank operands; axes must match or be 1 on one side.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

// --- normalization ----------------------------------------------------------

/// Max-subtracted exponential normalization along one axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

/// (x - mean) / sqrt(var + eps), statistics taken jointly over `axes`.
template <typename T>
Tensor<T> normalize(const Tensor<T>& x, const std::vector<std::size_t>& axes, T eps);

/// normalize() followed by broadcast gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     const std::vector<std::size_t>& axes, T eps = T(1e-5));

/// Throws NumericalError naming `where` if x holds NaN or Inf. Ops call this
/// on their outputs when built with RFAT_CHECK_FINITE.
template <typename T>
void check_finite(const Tensor<T>& x, const char* where);

}  // namespace rfat
