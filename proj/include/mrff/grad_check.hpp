#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mrff/tensor.hpp"

namespace mrff {

struct GradCheckResult {
  double max_rel_error = 0.0;
  // Location of the worst coordinate, for diagnostics.
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

// Gradients whose true value is zero (e.g. a key bias under softmax shift
// invariance) come back from central differences as roundoff around 1e-11, so
// the denominator is floored: below 1e-6 the comparison is effectively absolute.
inline constexpr double kGradRelFloor = 1e-6;

inline double grad_rel_error(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), kGradRelFloor});
  return std::fabs(analytic - numeric) / denom;
}

// Compares backward() against central differences for every coordinate of
// `params`. `f` must rebuild the graph from the current parameter values.
inline GradCheckResult grad_check(const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> params, double eps = 1e-5) {
  for (auto& p : params) p.zero_grad();
  Tensor<double> out = f();
  backward(out);

  GradCheckResult result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto values = p.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double plus = f().item();
      values[i] = saved - eps;
      const double minus = f().item();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double analytic = p.has_grad() ? p.grad()[i] : 0.0;
      const double err = grad_rel_error(analytic, numeric);
      ++result.coordinates;
      if (err > result.max_rel_error || result.coordinates == 1) {
        result.max_rel_error = std::max(result.max_rel_error, err);
        result.worst_param = k;
        result.worst_index = i;
        result.worst_analytic = analytic;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace mrff
