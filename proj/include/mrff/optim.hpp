#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>

#include "mrff/errors.hpp"

namespace mrff {

template <typename Real>
void sgd_step(std::span<Real> params, std::span<const Real> grads, double lr) {
  if (params.size() != grads.size()) {
    throw DimensionError("sgd_step: " + std::to_string(params.size()) + " params vs " +
                         std::to_string(grads.size()) + " grads");
  }
  const Real rate = static_cast<Real>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= rate * grads[i];
}

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moments for one parameter tensor. Lives on the client and is never uploaded.
template <typename Real>
struct AdamMoments {
  std::vector<Real> m;
  std::vector<Real> v;
  std::int64_t step = 0;
};

template <typename Real>
void adam_step(std::span<Real> params, std::span<const Real> grads, AdamMoments<Real>& state,
               const AdamHyper& hyper) {
  if (params.size() != grads.size()) {
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " params vs " +
                         std::to_string(grads.size()) + " grads");
  }
  if (state.m.empty()) {
    state.m.assign(params.size(), Real(0));
    state.v.assign(params.size(), Real(0));
  } else if (state.m.size() != params.size()) {
    throw DimensionError("adam_step: moment buffer size mismatch");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  const Real b1 = static_cast<Real>(hyper.beta1);
  const Real b2 = static_cast<Real>(hyper.beta2);
  const Real step_size = static_cast<Real>(hyper.lr / bc1);
  const Real inv_bc2 = static_cast<Real>(1.0 / bc2);
  const Real eps = static_cast<Real>(hyper.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Real g = grads[i];
    state.m[i] = b1 * state.m[i] + (Real(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (Real(1) - b2) * g * g;
    params[i] -= step_size * state.m[i] / (std::sqrt(state.v[i] * inv_bc2) + eps);
  }
}

}  // namespace mrff
