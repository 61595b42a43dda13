#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mrff/errors.hpp"
#include "mrff/rng.hpp"
#include "mrff/tensor.hpp"

// Differentiable primitives. Every op validates shapes, computes its forward
// value eagerly and records a backward that scatter-adds into inputs.
namespace mrff {

namespace detail {

template <typename Real>
Real* grad_slot(Node<Real>& n, std::size_t i) {
  auto& in = *n.inputs[i];
  return in.requires_grad ? in.grad.data() : nullptr;
}

// Op state lives on the node so backward functions need no captures.
template <typename Real>
Node<Real>* recorded(const Tensor<Real>& t) {
  return t.records_graph() ? t.node().get() : nullptr;
}

template <typename Real>
std::vector<Real>& scratch() {
  thread_local std::vector<Real> buf;
  return buf;
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) {
    throw DimensionError(std::string(op) + " expects a rank-2 tensor, got " + shape_str(s));
  }
}

// Row broadcast: b is either a's shape or [1, cols(a)].
inline bool row_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return false;
  if (a.size() == 2 && b.size() == 2 && b[0] == 1 && b[1] == a[1]) return true;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b));
}

}  // namespace detail

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_rank2(a.shape(), "matmul");
  detail::require_rank2(b.shape(), "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<Real> out(m * n, Real(0));
  const Real* __restrict A = a.data().data();
  const Real* __restrict B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    Real* __restrict row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = A[i * k + p];
      const Real* __restrict brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  auto result = Tensor<Real>::from_op({m, n}, std::move(out), {a, b}, [](detail::Node<Real>& node) {
    const Real sign = debug::fault_sign<Real>(OpKind::kMatmul);
    const std::size_t m = node.meta[0], k = node.meta[1], n = node.meta[2];
    const Real* __restrict dC = node.grad.data();
    const Real* __restrict A = node.inputs[0]->value.data();
    const Real* __restrict B = node.inputs[1]->value.data();
    if (Real* __restrict dA = detail::grad_slot(node, 0)) {
      // dA = dC * B^T, with B^T materialized so the inner loop is contiguous
      auto& bt = detail::scratch<Real>();
      bt.resize(n * k);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = sign * B[p * n + j];
      const Real* __restrict Bt = bt.data();
      for (std::size_t i = 0; i < m; ++i) {
        Real* __restrict drow = dA + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const Real g = dC[i * n + j];
          const Real* __restrict brow = Bt + j * k;
          for (std::size_t p = 0; p < k; ++p) drow[p] += g * brow[p];
        }
      }
    }
    if (Real* __restrict dB = detail::grad_slot(node, 1)) {
      for (std::size_t i = 0; i < m; ++i) {
        const Real* __restrict grow = dC + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const Real av = sign * A[i * k + p];
          Real* __restrict drow = dB + p * n;
          for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
        }
      }
    }
  });
  if (auto* node = detail::recorded(result)) node->meta = {m, k, n, 0};
  return result;
}

// Elementwise sum; `b` may be a [1, n] row broadcast over the rows of `a`.
template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  const bool bcast = detail::row_broadcast(a.shape(), b.shape(), "add");
  const std::size_t cols = bcast ? a.dim(1) : a.numel();
  std::vector<Real> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[bcast ? i % cols : i];
  auto result = Tensor<Real>::from_op(a.shape(), std::move(out), {a, b}, [](detail::Node<Real>& node) {
    const Real sign = debug::fault_sign<Real>(OpKind::kAdd);
    const bool bcast = node.meta[0] != 0;
    const std::size_t cols = node.meta[1];
    const std::size_t n = node.value.size();
    if (Real* da = detail::grad_slot(node, 0)) {
      for (std::size_t i = 0; i < n; ++i) da[i] += sign * node.grad[i];
    }
    if (Real* db = detail::grad_slot(node, 1)) {
      for (std::size_t i = 0; i < n; ++i) db[bcast ? i % cols : i] += sign * node.grad[i];
    }
  });
  if (auto* node = detail::recorded(result)) node->meta = {bcast ? 1u : 0u, cols, 0, 0};
  return result;
}

// Elementwise product; `b` may be a [1, n] row broadcast.
template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  const bool bcast = detail::row_broadcast(a.shape(), b.shape(), "mul");
  const std::size_t cols = bcast ? a.dim(1) : a.numel();
  std::vector<Real> out(a.numel());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[bcast ? i % cols : i];
  auto result = Tensor<Real>::from_op(a.shape(), std::move(out), {a, b}, [](detail::Node<Real>& node) {
    const Real sign = debug::fault_sign<Real>(OpKind::kMul);
    const bool bcast = node.meta[0] != 0;
    const std::size_t cols = node.meta[1];
    const std::size_t n = node.value.size();
    const Real* A = node.inputs[0]->value.data();
    const Real* B = node.inputs[1]->value.data();
    if (Real* da = detail::grad_slot(node, 0)) {
      for (std::size_t i = 0; i < n; ++i) da[i] += sign * node.grad[i] * B[bcast ? i % cols : i];
    }
    if (Real* db = detail::grad_slot(node, 1)) {
      for (std::size_t i = 0; i < n; ++i) db[bcast ? i % cols : i] += sign * node.grad[i] * A[i];
    }
  });
  if (auto* node = detail::recorded(result)) node->meta = {bcast ? 1u : 0u, cols, 0, 0};
  return result;
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
  std::vector<Real> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= c;
  auto result = Tensor<Real>::from_op(a.shape(), std::move(out), {a}, [](detail::Node<Real>& node) {
    const Real sign = debug::fault_sign<Real>(OpKind::kScale);
    const Real c = node.scalar;
    if (Real* da = detail::grad_slot(node, 0)) {
      for (std::size_t i = 0; i < node.value.size(); ++i) da[i] += sign * c * node.grad[i];
    }
  });
  if (auto* node = detail::recorded(result)) node->scalar = c;
  return result;
}

// Sum of all elements as a [1, 1] tensor.
template <typename Real>
Tensor<Real> sum(const Tensor<Real>& a) {
  Real acc = 0;
  for (Real v : a.data()) acc += v;
  return Tensor<Real>::from_op({1, 1}, {acc}, {a}, [](detail::Node<Real>& node) {
    const Real g = debug::fault_sign<Real>(OpKind::kSum) * node.grad[0];
    if (Real* da = detail::grad_slot(node, 0)) {
      const std::size_t n = node.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) da[i] += g;
    }
  });
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& a) {
  if (a.numel() == 0) throw DegenerateInputError("mean of an empty tensor");
  return scale(sum(a), Real(1) / static_cast<Real>(a.numel()));
}

template <typename Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  Shape out_shape = first;
  std::size_t total = 0;
  std::vector<detail::AxisSplit> splits;
  splits.reserve(parts.size());
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size() && axis < s.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " +
                           shape_str(first) + " along axis " + std::to_string(axis));
    }
    splits.push_back(detail::split_axis(s, axis));
    total += s[axis];
  }
  out_shape[axis] = total;
  const std::size_t outer = splits.front().outer;
  const std::size_t inner = splits.front().inner;
  std::vector<Real> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].data();
    const std::size_t chunk = splits[k].len * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.data() + o * chunk, chunk, out.data() + o * total * inner + offset * inner);
    }
    offset += splits[k].len;
  }
  auto result = Tensor<Real>::from_op(
      std::move(out_shape), std::move(out), parts,
      [](detail::Node<Real>& node) {
        const Real sign = debug::fault_sign<Real>(OpKind::kConcat);
        const std::size_t outer = node.meta[0], inner = node.meta[1], total = node.meta[2];
        const auto& lens = node.saved_index;
        std::size_t offset = 0;
        for (std::size_t k = 0; k < lens.size(); ++k) {
          const std::size_t len = static_cast<std::size_t>(lens[k]);
          const std::size_t chunk = len * inner;
          if (Real* d = detail::grad_slot(node, k)) {
            for (std::size_t o = 0; o < outer; ++o) {
              const Real* g = node.grad.data() + o * total * inner + offset * inner;
              for (std::size_t i = 0; i < chunk; ++i) d[o * chunk + i] += sign * g[i];
            }
          }
          offset += len;
        }
      });
  if (auto* node = detail::recorded(result)) {
    node->meta = {outer, inner, total, 0};
    node->saved_index.reserve(splits.size());
    for (const auto& sp : splits) node->saved_index.push_back(static_cast<std::int64_t>(sp.len));
  }
  return result;
}

// Half-open range [begin, end) along `axis`.
template <typename Real>
Tensor<Real> slice(const Tensor<Real>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto s = detail::split_axis(x.shape(), axis);
  if (begin >= end || end > s.len) {
    throw IndexError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of range for axis " + std::to_string(axis) + " of " +
                     shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t width = end - begin;
  std::vector<Real> out(s.outer * width * s.inner);
  const auto src = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(src.data() + (o * s.len + begin) * s.inner, width * s.inner,
                out.data() + o * width * s.inner);
  }
  auto result = Tensor<Real>::from_op(std::move(out_shape), std::move(out), {x}, [](detail::Node<Real>& node) {
    const Real sign = debug::fault_sign<Real>(OpKind::kSlice);
    Real* d = detail::grad_slot(node, 0);
    if (!d) return;
    const std::size_t outer = node.meta[0], len = node.meta[1], inner = node.meta[2], begin = node.meta[3];
    const std::size_t width = node.shape.size() ? node.value.size() / (outer * inner) : 0;
    for (std::size_t o = 0; o < outer; ++o) {
      Real* dst = d + (o * len + begin) * inner;
      const Real* g = node.grad.data() + o * width * inner;
      for (std::size_t i = 0; i < width * inner; ++i) dst[i] += sign * g[i];
    }
  });
  if (auto* node = detail::recorded(result)) node->meta = {s.outer, s.len, s.inner, begin};
  return result;
}

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& x) {
  detail::require_rank2(x.shape(), "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<Real> out(r * c);
  const auto src = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = src[i * c + j];
  return Tensor<Real>::from_op({c, r}, std::move(out), {x}, [](detail::Node<Real>& node) {
    const Real sign = debug::fault_sign<Real>(OpKind::kTranspose);
    const std::size_t c = node.shape[0], r = node.shape[1];
    if (Real* d = detail::grad_slot(node, 0)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) d[i * c + j] += sign * node.grad[j * r + i];
    }
  });
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& x) {
  std::vector<Real> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > Real(0) ? v : Real(0);
  return Tensor<Real>::from_op(x.shape(), std::move(out), {x}, [](detail::Node<Real>& node) {
    const Real sign = debug::fault_sign<Real>(OpKind::kRelu);
    if (Real* d = detail::grad_slot(node, 0)) {
      const Real* in = node.inputs[0]->value.data();
      for (std::size_t i = 0; i < node.value.size(); ++i)
        if (in[i] > Real(0)) d[i] += sign * node.grad[i];
    }
  });
}

template <typename Real>
Real sigmoid_value(Real x) {
  if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& x) {
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_value(x.data()[i]);
  return Tensor<Real>::from_op(x.shape(), std::move(out), {x}, [](detail::Node<Real>& node) {
    const Real sign = debug::fault_sign<Real>(OpKind::kSigmoid);
    if (Real* d = detail::grad_slot(node, 0)) {
      for (std::size_t i = 0; i < node.value.size(); ++i) {
        const Real y = node.value[i];
        d[i] += sign * node.grad[i] * y * (Real(1) - y);
      }
    }
  });
}

namespace detail {

template <typename Real>
void softmax_backward(Node<Real>& node, const AxisSplit& s, Real sign) {
  Real* d = grad_slot(node, 0);
  if (!d) return;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      Real dot = 0;
      for (std::size_t i = 0; i < s.len; ++i) {
        const std::size_t idx = base + i * s.inner;
        dot += node.grad[idx] * node.value[idx];
      }
      for (std::size_t i = 0; i < s.len; ++i) {
        const std::size_t idx = base + i * s.inner;
        d[idx] += sign * node.value[idx] * (node.grad[idx] - dot);
      }
    }
  }
}

}  // namespace detail

// Softmax along `axis` with max subtraction. Non-finite input is rejected.
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis);
  const auto src = x.data();
  for (Real v : src) {
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
  }
  std::vector<Real> out(src.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      Real mx = src[base];
      for (std::size_t i = 1; i < s.len; ++i) mx = std::max(mx, src[base + i * s.inner]);
      Real z = 0;
      for (std::size_t i = 0; i < s.len; ++i) {
        const std::size_t idx = base + i * s.inner;
        out[idx] = std::exp(src[idx] - mx);
        z += out[idx];
      }
      for (std::size_t i = 0; i < s.len; ++i) out[base + i * s.inner] /= z;
    }
  }
  auto result = Tensor<Real>::from_op(x.shape(), std::move(out), {x}, [](detail::Node<Real>& node) {
    const detail::AxisSplit s{node.meta[0], node.meta[1], node.meta[2]};
    detail::softmax_backward(node, s, debug::fault_sign<Real>(OpKind::kSoftmax));
  });
  if (auto* node = detail::recorded(result)) node->meta = {s.outer, s.len, s.inner, 0};
  return result;
}

// Row-wise softmax of a [rows, cols] tensor over entries where keep != 0.
// Masked entries get probability 0; a fully masked row is all zeros.
template <typename Real>
Tensor<Real> masked_softmax(const Tensor<Real>& x, std::span<const std::uint8_t> keep) {
  detail::require_rank2(x.shape(), "masked_softmax");
  if (keep.size() != x.numel()) {
    throw DimensionError("masked_softmax: mask of " + std::to_string(keep.size()) +
                         " entries for shape " + shape_str(x.shape()));
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const auto src = x.data();
  std::vector<Real> out(src.size(), Real(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * cols;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (!keep[base + c]) continue;
      if (!std::isfinite(src[base + c])) throw NumericError("masked_softmax: non-finite input");
      mx = std::max(mx, src[base + c]);
    }
    if (mx == -std::numeric_limits<Real>::infinity()) continue;
    Real z = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!keep[base + c]) continue;
      out[base + c] = std::exp(src[base + c] - mx);
      z += out[base + c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[base + c] /= z;
  }
  return Tensor<Real>::from_op(x.shape(), std::move(out), {x}, [](detail::Node<Real>& node) {
    // Masked entries have value 0, so the generic softmax Jacobian leaves them untouched.
    const detail::AxisSplit s{node.shape[0], node.shape[1], 1};
    detail::softmax_backward(node, s, debug::fault_sign<Real>(OpKind::kMaskedSoftmax));
  });
}

inline constexpr double kLayerNormEpsilon = 1e-5;

// Normalizes over the last axis, then applies gain and bias (each of width n).
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias) {
  const std::size_t n = x.shape().back();
  if (n < 2) throw DimensionError("layer_norm: normalized axis must have length >= 2");
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " do not match width " + std::to_string(n));
  }
  const std::size_t rows = x.numel() / n;
  const auto src = x.data();
  const auto g = gain.data();
  const auto b = bias.data();
  std::vector<Real> out(src.size());
  // xhat followed by one inverse sigma per row; kept for the backward
  std::vector<Real> saved(src.size() + rows);
  Real* xhat = saved.data();
  Real* inv_sigma = saved.data() + src.size();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = src.data() + r * n;
    Real mu = 0;
    for (std::size_t i = 0; i < n; ++i) mu += row[i];
    mu /= static_cast<Real>(n);
    Real var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<Real>(n);
    const Real inv = Real(1) / std::sqrt(var + static_cast<Real>(kLayerNormEpsilon));
    inv_sigma[r] = inv;
    for (std::size_t i = 0; i < n; ++i) {
      xhat[r * n + i] = (row[i] - mu) * inv;
      out[r * n + i] = g[i] * xhat[r * n + i] + b[i];
    }
  }
  auto result = Tensor<Real>::from_op(
      x.shape(), std::move(out), {x, gain, bias},
      [](detail::Node<Real>& node) {
        const Real sign = debug::fault_sign<Real>(OpKind::kLayerNorm);
        const std::size_t n = node.meta[0], rows = node.meta[1];
        const Real* xhat = node.saved.data();
        const Real* inv_sigma = node.saved.data() + n * rows;
        const Real* dy = node.grad.data();
        const Real* g = node.inputs[1]->value.data();
        Real* dx = detail::grad_slot(node, 0);
        Real* dg = detail::grad_slot(node, 1);
        Real* db = detail::grad_slot(node, 2);
        for (std::size_t r = 0; r < rows; ++r) {
          const Real* dyr = dy + r * n;
          const Real* xh = xhat + r * n;
          if (dg)
            for (std::size_t i = 0; i < n; ++i) dg[i] += sign * dyr[i] * xh[i];
          if (db)
            for (std::size_t i = 0; i < n; ++i) db[i] += sign * dyr[i];
          if (!dx) continue;
          Real mean_d = 0, mean_dx = 0;
          for (std::size_t i = 0; i < n; ++i) {
            const Real d = dyr[i] * g[i];
            mean_d += d;
            mean_dx += d * xh[i];
          }
          mean_d /= static_cast<Real>(n);
          mean_dx /= static_cast<Real>(n);
          for (std::size_t i = 0; i < n; ++i) {
            const Real d = dyr[i] * g[i];
            dx[r * n + i] += sign * inv_sigma[r] * (d - mean_d - xh[i] * mean_dx);
          }
        }
      });
  if (auto* node = detail::recorded(result)) {
    node->meta = {n, rows, 0, 0};
    node->saved = std::move(saved);
  }
  return result;
}

// Row gather from a [V, d] table; backward scatter-adds (duplicates accumulate).
template <typename Real>
Tensor<Real> embedding_lookup(const Tensor<Real>& table, std::span<const std::int64_t> ids) {
  detail::require_rank2(table.shape(), "embedding_lookup");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<Real> out(ids.size() * d);
  const auto src = table.data();
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
      throw IndexError("embedding id " + std::to_string(ids[t]) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
    std::copy_n(src.data() + static_cast<std::size_t>(ids[t]) * d, d, out.data() + t * d);
  }
  auto result = Tensor<Real>::from_op({ids.size(), d}, std::move(out), {table}, [](detail::Node<Real>& node) {
    const Real sign = debug::fault_sign<Real>(OpKind::kEmbedding);
    Real* dt = detail::grad_slot(node, 0);
    if (!dt) return;
    const auto& rows = node.saved_index;
    const std::size_t d = node.shape[1];
    for (std::size_t t = 0; t < rows.size(); ++t) {
      Real* dst = dt + static_cast<std::size_t>(rows[t]) * d;
      for (std::size_t i = 0; i < d; ++i) dst[i] += sign * node.grad[t * d + i];
    }
  });
  if (auto* node = detail::recorded(result)) node->saved_index.assign(ids.begin(), ids.end());
  return result;
}

// Average of the rows of x[T, D] where mask != 0, as [1, D].
template <typename Real>
Tensor<Real> mean_pool(const Tensor<Real>& x, std::span<const std::uint8_t> mask) {
  detail::require_rank2(x.shape(), "mean_pool");
  const std::size_t T = x.dim(0), D = x.dim(1);
  if (mask.size() != T) {
    throw DimensionError("mean_pool: mask length " + std::to_string(mask.size()) +
                         " for shape " + shape_str(x.shape()));
  }
  std::size_t count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  if (count == 0) throw DegenerateInputError("mean_pool: mask selects no positions");
  const Real w = Real(1) / static_cast<Real>(count);
  std::vector<Real> out(D, Real(0));
  const auto src = x.data();
  for (std::size_t t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    for (std::size_t i = 0; i < D; ++i) out[i] += src[t * D + i];
  }
  for (auto& v : out) v *= w;
  auto result = Tensor<Real>::from_op({1, D}, std::move(out), {x}, [](detail::Node<Real>& node) {
    const Real sign = debug::fault_sign<Real>(OpKind::kMeanPool);
    Real* dx = detail::grad_slot(node, 0);
    if (!dx) return;
    const std::size_t D = node.shape[1];
    const Real w = node.scalar;
    for (const std::int64_t t : node.saved_index) {
      for (std::size_t i = 0; i < D; ++i) dx[static_cast<std::size_t>(t) * D + i] += sign * w * node.grad[i];
    }
  });
  if (auto* node = detail::recorded(result)) {
    node->scalar = w;
    for (std::size_t t = 0; t < T; ++t)
      if (mask[t]) node->saved_index.push_back(static_cast<std::int64_t>(t));
  }
  return result;
}

// Inverted dropout; identity (same handle) outside training or when p == 0.
template <typename Real>
Tensor<Real> dropout(const Tensor<Real>& x, double p, Rng* rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw ContractError("dropout probability must be < 1");
  if (rng == nullptr) throw ContractError("dropout in training mode needs an Rng");
  const Real keep_scale = Real(1) / static_cast<Real>(1.0 - p);
  std::vector<Real> mask(x.numel());
  for (auto& m : mask) m = rng->uniform() < p ? Real(0) : keep_scale;
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  auto result = Tensor<Real>::from_op(x.shape(), std::move(out), {x}, [](detail::Node<Real>& node) {
    const Real sign = debug::fault_sign<Real>(OpKind::kDropout);
    const auto& mask = node.saved;
    if (Real* d = detail::grad_slot(node, 0)) {
      for (std::size_t i = 0; i < mask.size(); ++i) d[i] += sign * mask[i] * node.grad[i];
    }
  });
  if (auto* node = detail::recorded(result)) node->saved = std::move(mask);
  return result;
}

}  // namespace mrff
