#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rfat/tensor.hpp"

namespace rfat {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Coordinates sampled per input tensor; smaller tensors are checked fully.
  std::size_t coords_per_tensor = 64;
  std::uint64_t seed = 1;
  /// Gradients below scale_floor * max(1, |f(x)|) sit under central-difference
  /// roundoff (~1e-16 |f| / eps); they are compared against that floor
  /// instead of their own magnitude.
  double scale_floor = 1e-6;
  /// Five-point central stencil, O(eps^4) truncation, twice the evaluations.
  bool fourth_order = false;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool passed(double tol) const { return max_rel_error < tol; }
};

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-8);

/// Compares reverse-mode gradients of the scalar `f` with respect to every
/// tensor in `inputs` against central differences (f(x+e) - f(x-e)) / 2e.
///
/// `f` must rebuild its graph from the (aliased) input tensors on each call;
/// the checker perturbs their values in place and restores them afterwards.
GradCheckReport grad_check(const std::function<Tensor<double>()>& f,
                           std::vector<Tensor<double>> inputs,
                           const GradCheckOptions& options = {});

}  // namespace rfat
