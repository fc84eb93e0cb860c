#include "rfat/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "rfat/autograd.hpp"

namespace rfat {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const std::function<Tensor<double>()>& f,
                           std::vector<Tensor<double>> inputs, const GradCheckOptions& options) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.drop_grad();
    t.ensure_grad();
  }
  double f0 = 0;
  {
    Tape tape;
    Tensor<double> loss;
    {
      TapeScope scope(tape);
      loss = f();
    }
    if (loss.numel() != 1) {
      throw ShapeError("grad_check: function must return a scalar, got " +
                       shape_str(loss.shape()));
    }
    tape.backward(loss);
    f0 = loss.item();
  }
  const double floor = std::max(1e-8, options.scale_floor * std::max(1.0, std::abs(f0)));

  std::mt19937_64 rng(options.seed);
  GradCheckReport report;
  NoGradScope no_grad;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > options.coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double analytic = t.grad()[i];
      const double orig = t.data()[i];
      auto at = [&](double offset) {
        t.data()[i] = orig + offset;
        const double v = f().item();
        t.data()[i] = orig;
        if (!std::isfinite(v)) {
          throw NumericalError("grad_check: non-finite value at input " + std::to_string(ti) +
                               " coordinate " + std::to_string(i));
        }
        return v;
      };
      const double e = options.eps;
      const double d1 = at(e) - at(-e);
      double numeric = d1 / (2.0 * e);
      if (options.fourth_order) numeric = (8.0 * d1 - (at(2 * e) - at(-2 * e))) / (12.0 * e);
      if (!std::isfinite(analytic)) {
        throw NumericalError("grad_check: non-finite analytic gradient at input " +
                             std::to_string(ti) + " coordinate " + std::to_string(i));
      }
      const double err = relative_error(analytic, numeric, floor);
      ++report.coords_checked;
      if (err > report.max_rel_error || report.coords_checked == 1) {
        report.max_rel_error = err;
        report.worst_input = ti;
        report.worst_index = i;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace rfat
