#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mrff/errors.hpp"
#include "mrff/ops.hpp"
#include "mrff/tensor.hpp"

namespace mrff {

// f[l][i]: fraction of users routed to group i at block l. Row-stochastic.
struct GroupProportions {
  std::size_t blocks = 0;
  std::size_t groups = 0;
  std::vector<double> values;  // row-major [blocks x groups]

  static GroupProportions uniform(std::size_t blocks, std::size_t groups) {
    return {blocks, groups, std::vector<double>(blocks * groups, 1.0 / static_cast<double>(groups))};
  }

  double at(std::size_t block, std::size_t group) const { return values.at(block * groups + group); }
  double& at(std::size_t block, std::size_t group) { return values.at(block * groups + group); }

  double max_share() const {
    double m = 0.0;
    for (double v : values) m = std::max(m, v);
    return m;
  }

  bool row_stochastic(double tol = 1e-6) const {
    if (values.size() != blocks * groups) return false;
    for (std::size_t l = 0; l < blocks; ++l) {
      double s = 0;
      for (std::size_t i = 0; i < groups; ++i) {
        const double v = at(l, i);
        if (v < 0.0 || v > 1.0) return false;
        s += v;
      }
      if (std::fabs(s - 1.0) > tol) return false;
    }
    return true;
  }

  bool operator==(const GroupProportions&) const = default;
};

// Stable BCE from a pre-sigmoid logit: max(x,0) - x*y + log1p(exp(-|x|)).
// Gradient is sigmoid(x) - y.
template <typename Real>
Tensor<Real> bce_with_logits(const Tensor<Real>& logit, int label) {
  if (logit.numel() != 1) throw DimensionError("bce_with_logits expects a scalar logit, got " + shape_str(logit.shape()));
  if (label != 0 && label != 1) throw ContractError("label must be 0 or 1, got " + std::to_string(label));
  const Real x = logit.item();
  const Real y = static_cast<Real>(label);
  const Real loss = std::max(x, Real(0)) - x * y + std::log1p(std::exp(-std::fabs(x)));
  auto result = Tensor<Real>::from_op({1, 1}, {loss}, {logit}, [](detail::Node<Real>& node) {
    const Real sign = debug::fault_sign<Real>(OpKind::kBce);
    if (Real* d = detail::grad_slot(node, 0)) {
      const Real x = node.inputs[0]->value[0];
      d[0] += sign * node.grad[0] * (sigmoid_value(x) - node.scalar);
    }
  });
  if (auto* node = detail::recorded(result)) node->scalar = y;
  return result;
}

// N * sum_l sum_i f[l][i] * p[l][i]. `gate_probs[l]` is a [1, N] tensor; f is
// a constant (no gradient flows into the population statistic).
template <typename Real>
Tensor<Real> balance_loss(const std::vector<Tensor<Real>>& gate_probs, const GroupProportions& f) {
  if (gate_probs.size() != f.blocks) {
    throw DimensionError("balance_loss: " + std::to_string(gate_probs.size()) + " blocks of probabilities vs " +
                         std::to_string(f.blocks) + " rows of proportions");
  }
  if (gate_probs.empty()) throw DimensionError("balance_loss: no blocks");
  std::vector<Tensor<Real>> terms;
  terms.reserve(f.blocks);
  for (std::size_t l = 0; l < f.blocks; ++l) {
    if (gate_probs[l].numel() != f.groups) {
      throw DimensionError("balance_loss: block " + std::to_string(l) + " has " +
                           std::to_string(gate_probs[l].numel()) + " probabilities, expected " +
                           std::to_string(f.groups));
    }
    std::vector<Real> row(f.groups);
    for (std::size_t i = 0; i < f.groups; ++i) row[i] = static_cast<Real>(f.at(l, i));
    const auto fl = Tensor<Real>::from(gate_probs[l].shape(), std::move(row));
    terms.push_back(mul(gate_probs[l], fl));
  }
  const auto all = terms.size() == 1 ? terms.front() : concat(terms, 1);
  return scale(sum(all), static_cast<Real>(f.groups));
}

// Mean recommendation loss plus alpha times mean balance loss.
template <typename Real>
Tensor<Real> local_loss(const std::vector<Tensor<Real>>& rec_losses, const std::vector<Tensor<Real>>& balance_losses,
                        double alpha) {
  if (rec_losses.empty()) throw DegenerateInputError("local_loss: empty batch");
  if (alpha < 0.0) throw ContractError("local_loss: alpha must be >= 0");
  auto rec = mean(rec_losses.size() == 1 ? rec_losses.front() : concat(rec_losses, 0));
  if (alpha == 0.0 || balance_losses.empty()) return rec;
  auto bal = mean(balance_losses.size() == 1 ? balance_losses.front() : concat(balance_losses, 0));
  return add(rec, scale(bal, static_cast<Real>(alpha)));
}

}  // namespace mrff
