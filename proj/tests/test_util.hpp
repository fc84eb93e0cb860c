#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "rfat/autograd.hpp"
#include "rfat/gradcheck.hpp"
#include "rfat/ops.hpp"
#include "rfat/tensor.hpp"

namespace rfat::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

/// Scalarizes a tensor-valued function with a fixed random projection so
/// every output element contributes a distinct weight.
inline GradCheckReport check_grad(const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> inputs, std::uint64_t seed = 11,
                                  std::size_t coords = 64) {
  Shape out_shape;
  {
    NoGradScope guard;
    out_shape = f().shape();
  }
  std::mt19937_64 rng(seed);
  auto proj = random_tensor<double>(out_shape, rng);
  GradCheckOptions opt;
  opt.seed = seed;
  opt.coords_per_tensor = coords;
  return grad_check([&] { return sum(mul(f(), proj)); }, std::move(inputs), opt);
}

}  // namespace rfat::testing
