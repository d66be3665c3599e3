#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "serpent/error.hpp"

namespace serpent {

/// Dense shape of rank 1..4. Rank-4 shapes are (N, C, H, W); token
/// sequences use rank 3 (N, L, C); matrices rank 2; vectors rank 1.
class Shape {
 public:
  static constexpr int kMaxRank = 4;

  Shape() = default;
  Shape(std::initializer_list<int> dims) {
    detail::require(dims.size() >= 1 && dims.size() <= kMaxRank, "Shape: rank must be in [1, 4]");
    for (int d : dims) {
      detail::require(d >= 0, "Shape: negative dimension");
      dims_[rank_++] = d;
    }
  }
  template <typename It>
  Shape(It first, It last) {
    for (; first != last; ++first) {
      detail::require(rank_ < kMaxRank, "Shape: rank must be in [1, 4]");
      detail::require(*first >= 0, "Shape: negative dimension");
      dims_[rank_++] = static_cast<int>(*first);
    }
  }

  int rank() const noexcept { return rank_; }
  int operator[](int i) const noexcept { return dims_[i]; }
  std::size_t numel() const noexcept {
    if (rank_ == 0) return 0;
    std::size_t n = 1;
    for (int i = 0; i < rank_; ++i) n *= static_cast<std::size_t>(dims_[i]);
    return n;
  }

  std::string str() const {
    std::ostringstream os;
    os << '(';
    for (int i = 0; i < rank_; ++i) os << (i ? "," : "") << dims_[i];
    os << ')';
    return os.str();
  }

  friend bool operator==(const Shape& a, const Shape& b) noexcept {
    if (a.rank_ != b.rank_) return false;
    for (int i = 0; i < a.rank_; ++i)
      if (a.dims_[i] != b.dims_[i]) return false;
    return true;
  }

 private:
  std::array<int, kMaxRank> dims_{};
  int rank_ = 0;
};

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables tape recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Reference-counted handle to a tensor node on the recording tape.
///
/// Copies share the same node. Values are treated as immutable once an op
/// has consumed them; the only in-place mutation paths are gradient
/// accumulation during backward and optimizer updates of leaf parameters.
template <typename T>
class Tensor {
 public:
  using Scalar = T;
  using Node = detail::Node<T>;

  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return from(shape, std::vector<T>(shape.numel(), T(0)), requires_grad);
  }

  static Tensor full(const Shape& shape, T value, bool requires_grad = false) {
    return from(shape, std::vector<T>(shape.numel(), value), requires_grad);
  }

  static Tensor from(const Shape& shape, std::vector<T> values, bool requires_grad = false) {
    detail::require(values.size() == shape.numel(),
                    "Tensor: data length " + std::to_string(values.size()) + " does not match shape " + shape.str());
    auto node = std::make_shared<Node>();
    node->shape = shape;
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[i]; }
  int rank() const { return node_->shape.rank(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// Direct write access; intended for leaf parameters and test fixtures.
  std::span<T> mutable_data() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    detail::require(numel() == 1, "Tensor::item on tensor of shape " + shape().str());
    return node_->value[0];
  }

  /// Same values, fresh leaf node with no history.
  Tensor detach(bool requires_grad = false) const { return from(shape(), node_->value, requires_grad); }

  /// Reverse-mode pass from a scalar; gradients accumulate into every
  /// reachable node that requires grad.
  void backward() const;

  Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const noexcept { return node_; }

  /// Records a new op result. `backward_fn` receives the result node with
  /// its gradient populated and must accumulate into the inputs.
  static Tensor make_result(const Shape& shape, std::vector<T> values, std::initializer_list<Tensor> inputs,
                            std::function<void(Node&)> backward_fn) {
    return make_result(shape, std::move(values), std::vector<Tensor>(inputs), std::move(backward_fn));
  }

  static Tensor make_result(const Shape& shape, std::vector<T> values, const std::vector<Tensor>& inputs,
                            std::function<void(Node&)> backward_fn) {
    Tensor out = from(shape, std::move(values), false);
    if (!grad_enabled()) return out;
    for (const auto& in : inputs) {
      if (in.defined() && in.requires_grad()) {
        out.node_->requires_grad = true;
        out.node_->parents.push_back(in.node_);
      }
    }
    if (out.node_->requires_grad) out.node_->backward_fn = std::move(backward_fn);
    return out;
  }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

template <typename T>
void Tensor<T>::backward() const {
  detail::require(numel() == 1, "backward: loss must be a scalar, got shape " + shape().str());
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

template <typename T>
Tensor<T> cast_tensor(const Tensor<float>& t, bool requires_grad = false) {
  std::vector<T> v(t.data().begin(), t.data().end());
  return Tensor<T>::from(t.shape(), std::move(v), requires_grad);
}

namespace detail {

inline void require_shape(const Shape& got, const Shape& want, const char* op) {
  if (!(got == want))
    contract_fail(std::string(op) + ": shape mismatch " + got.str() + " vs " + want.str());
}

inline void require_rank(const Shape& s, int rank, const char* op) {
  if (s.rank() != rank)
    contract_fail(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " + s.str());
}

}  // namespace detail
}  // namespace serpent
