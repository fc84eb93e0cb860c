#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "rfat/random.hpp"
#include "rfat/tensor.hpp"

namespace rfat {

/// Weight decay applies to kWeight only.
enum class ParamRole { kWeight, kBias, kAffine };

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  ParamRole role;
};

/// Flat, ordered view of every learnable tensor in a model. Tensors are
/// shared handles, so optimizers and checkpoints update the model in place.
template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
std::size_t count_scalars(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

// Kaiming gains for the nonlinearity that consumes the conv output.
constexpr double kGainLinear = 1.0;  // also sigmoid/softmax generators
constexpr double kGainRelu = 1.4142135623730951;
// SiLU's variance-preserving gain is ~1.68, but the C2f concats and residuals
// then grow activations until early steps diverge; 1.6 keeps deep features
// alive without that.
constexpr double kGainSilu = 1.6;

/// Kaiming-uniform over fan-in: U(-b, b) with b = gain * sqrt(3 / fan_in),
/// where fan_in is the product of all but the leading extent.
template <typename T>
Tensor<T> kaiming_uniform(Shape shape, Xoshiro256pp& rng, double gain = kGainRelu) {
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace rfat
