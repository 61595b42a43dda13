#pragma once

#include <algorithm>
#include <array>
#include <initializer_list>
#include <iterator>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mrff/errors.hpp"

namespace mrff {

// Dimension list with inline storage (rank <= 4); graphs create many of these.
class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) { assign(dims.begin(), dims.end()); }
  explicit Shape(const std::vector<std::size_t>& dims) { assign(dims.begin(), dims.end()); }

  std::size_t size() const { return rank_; }
  bool empty() const { return rank_ == 0; }
  std::size_t& operator[](std::size_t i) { return dims_[i]; }
  std::size_t operator[](std::size_t i) const { return dims_[i]; }
  std::size_t at(std::size_t i) const {
    if (i >= rank_) throw DimensionError("axis " + std::to_string(i) + " out of range for rank " + std::to_string(rank_));
    return dims_[i];
  }
  std::size_t back() const { return dims_[rank_ - 1]; }
  const std::size_t* begin() const { return dims_.data(); }
  const std::size_t* end() const { return dims_.data() + rank_; }
  std::vector<std::size_t> to_vector() const { return {begin(), end()}; }

  bool operator==(const Shape& o) const { return rank_ == o.rank_ && std::equal(begin(), end(), o.begin()); }

 private:
  template <typename It>
  void assign(It first, It last) {
    const auto n = static_cast<std::size_t>(std::distance(first, last));
    if (n > kMaxRank) throw DimensionError("rank " + std::to_string(n) + " exceeds the supported maximum of 4");
    std::copy(first, last, dims_.begin());
    rank_ = n;
  }

  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Identifies the differentiable operations for the fault-injection hook used
// by the verification harness to prove that gradient checks catch bad backwards.
enum class OpKind {
  kNone = 0,
  kMatmul,
  kAdd,
  kMul,
  kScale,
  kSum,
  kConcat,
  kSlice,
  kTranspose,
  kRelu,
  kSigmoid,
  kSoftmax,
  kMaskedSoftmax,
  kLayerNorm,
  kEmbedding,
  kMeanPool,
  kDropout,
  kBce,
};

namespace debug {

inline std::atomic<int>& injected_fault_storage() {
  static std::atomic<int> fault{0};
  return fault;
}

// Flips the sign of the chosen op's backward pass. Test and verify use only.
inline void inject_fault(OpKind op) { injected_fault_storage().store(static_cast<int>(op)); }
inline void clear_fault() { injected_fault_storage().store(0); }

template <typename Real>
inline Real fault_sign(OpKind op) {
  return injected_fault_storage().load(std::memory_order_relaxed) == static_cast<int>(op) ? Real(-1)
                                                                                         : Real(1);
}

}  // namespace debug

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  // Set on leaves reached by the most recent backward pass.
  bool touched = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads. Built-in
  // ops use the plain function pointer with state in the fields below;
  // `backward` serves ops defined outside this header.
  void (*backward_fn)(Node&) = nullptr;
  std::function<void(Node&)> backward;
  std::array<std::size_t, 4> meta{};
  Real scalar = Real(0);
  std::vector<Real> saved;
  std::vector<std::int64_t> saved_index;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
  }
};

}  // namespace detail

// Disables graph recording on this thread for its lifetime (evaluation paths).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Dense row-major array with an optional node in a define-by-run graph.
// Copies are shallow handles; clone() makes an independent leaf.
template <typename Real>
class Tensor {
 public:
  using value_type = Real;
  using NodePtr = std::shared_ptr<detail::Node<Real>>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<Real> data(shape_numel(shape), Real(0));
    return from(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor filled(Shape shape, Real v, bool requires_grad = false) {
    std::vector<Real> data(shape_numel(shape), v);
    return from(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<Real> data, bool requires_grad = false) {
    for (std::size_t d : shape) {
      if (d == 0 && shape.size() != 2) {
        throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
      }
    }
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
    auto node = std::make_shared<detail::Node<Real>>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(Real v, bool requires_grad = false) {
    return from({1, 1}, {v}, requires_grad);
  }

  // Builds the result of a differentiable op. The backward is recorded only
  // when grad mode is on and some input requires grad; `node()` of the result
  // is then non-leaf and the op may stash state in its meta/saved fields.
  static Tensor from_op(Shape shape, std::vector<Real> data, std::initializer_list<Tensor> inputs,
                        void (*backward_fn)(detail::Node<Real>&)) {
    return make_op(std::move(shape), std::move(data), inputs.begin(), inputs.end(), backward_fn, {});
  }

  static Tensor from_op(Shape shape, std::vector<Real> data, const std::vector<Tensor>& inputs,
                        void (*backward_fn)(detail::Node<Real>&)) {
    return make_op(std::move(shape), std::move(data), inputs.begin(), inputs.end(), backward_fn, {});
  }

  // Variant for ops defined outside this library.
  static Tensor from_custom_op(Shape shape, std::vector<Real> data, std::initializer_list<Tensor> inputs,
                               std::function<void(detail::Node<Real>&)> backward) {
    return make_op(std::move(shape), std::move(data), inputs.begin(), inputs.end(), nullptr, std::move(backward));
  }

  // True when this tensor records a backward (op state may be attached).
  bool records_graph() const { return node_ && !node_->is_leaf; }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  bool touched() const { return node_->touched; }
  void set_touched(bool t) { node_->touched = t; }

  std::span<Real> data() { return node_->value; }
  std::span<const Real> data() const { return node_->value; }

  // Gradient buffer; empty until a backward pass reaches this tensor.
  std::span<Real> grad() { return node_->grad; }
  std::span<const Real> grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  Real item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  Real at(std::size_t i) const { return node_->value.at(i); }
  Real at(std::size_t r, std::size_t c) const {
    return node_->value.at(r * node_->shape.back() + c);
  }

  void zero_grad() {
    node_->grad.assign(node_->value.size(), Real(0));
    node_->touched = false;
  }

  void set_requires_grad(bool v) { node_->requires_grad = v; }

  // Independent leaf with copied values.
  Tensor clone(bool requires_grad) const {
    return from(node_->shape, node_->value, requires_grad);
  }

  // Same values, no graph history.
  Tensor detach() const { return from(node_->shape, node_->value, false); }

  const NodePtr& node() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  template <typename It>
  static Tensor make_op(Shape shape, std::vector<Real> data, It first, It last,
                        void (*backward_fn)(detail::Node<Real>&), std::function<void(detail::Node<Real>&)> backward) {
    Tensor out = from(std::move(shape), std::move(data));
    if (!grad_enabled()) return out;
    bool needs = false;
    for (It it = first; it != last; ++it) needs = needs || it->requires_grad();
    if (!needs) return out;
    auto& node = *out.node_;
    node.requires_grad = true;
    node.is_leaf = false;
    node.inputs.reserve(static_cast<std::size_t>(std::distance(first, last)));
    for (It it = first; it != last; ++it) node.inputs.push_back(it->node_);
    node.backward_fn = backward_fn;
    node.backward = std::move(backward);
    return out;
  }

  NodePtr node_;
};

// Reverse-mode pass from a scalar root. Intermediate gradients are reset on
// entry; leaf gradients accumulate, so a second call without zero_grad doubles them.
template <typename Real>
void backward(const Tensor<Real>& root) {
  if (!root.defined() || root.numel() != 1) {
    throw ContractError("backward() requires a scalar root, got shape " +
                        (root.defined() ? shape_str(root.shape()) : std::string("<undefined>")));
  }
  using Node = detail::Node<Real>;
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->is_leaf) {
      n->ensure_grad();
      n->touched = true;
    } else {
      n->grad.assign(n->value.size(), Real(0));
    }
  }
  order.back()->grad[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& n = **it;
    if (n.is_leaf) continue;
    if (n.backward_fn) n.backward_fn(n);
    else if (n.backward) n.backward(n);
  }
}

}  // namespace mrff
