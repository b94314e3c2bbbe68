#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// Every taped operation returns a fresh tensor whose TapeNode remembers the
// inputs and a closure that pushes the output gradient back into them. The
// graph is rebuilt on each forward pass and is retained after backward(), so
// calling backward() twice accumulates leaf gradients twice.
//
// The scalar type is a template parameter: training runs on float, gradient
// checks run the exact same code on double.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hypersort/error.hpp"

#if !defined(NDEBUG) && !defined(HYPERSORT_CHECK_FINITE)
#define HYPERSORT_CHECK_FINITE 1
#endif

namespace hypersort {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
class BasicTensor;

namespace detail {

template <class T>
struct Storage;

template <class T>
struct TapeNode {
  std::string_view op;
  std::vector<std::shared_ptr<Storage<T>>> inputs;
  // Reads the output's grad and adds into the grads of `inputs`.
  std::function<void(const Storage<T>& out)> backward;
};

template <class T>
struct Storage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::shared_ptr<TapeNode<T>> node;

  bool is_leaf() const { return node == nullptr; }

  // Lazily materialized gradient buffer.
  std::span<T> grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
    return grad;
  }
};

template <class T>
void check_finite([[maybe_unused]] const Storage<T>& s,
                  [[maybe_unused]] std::string_view op) {
#if HYPERSORT_CHECK_FINITE
  for (T v : s.data) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " + std::string(op));
    }
  }
#endif
}

}  // namespace detail

template <class T>
class BasicTensor {
 public:
  using value_type = T;
  using StoragePtr = std::shared_ptr<detail::Storage<T>>;

  BasicTensor() : s_(std::make_shared<detail::Storage<T>>()) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T{0}, requires_grad);
  }

  static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> data(shape_numel(shape), value);
    return from_data(std::move(shape), std::move(data), requires_grad);
  }

  static BasicTensor from_data(Shape shape, std::vector<T> data,
                               bool requires_grad = false) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dims must be positive: " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) +
                           " values, got " + std::to_string(data.size()));
    }
    auto s = std::make_shared<detail::Storage<T>>();
    s->shape = std::move(shape);
    s->data = std::move(data);
    s->requires_grad = requires_grad;
    return BasicTensor(std::move(s));
  }

  static BasicTensor scalar(T value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->data.size(); }
  bool empty() const { return s_->data.empty(); }

  std::span<const T> data() const { return s_->data; }
  // Writable view for leaves (parameters, inputs). Mutating a tensor that is
  // already part of a recorded graph invalidates that graph.
  std::span<T> mutable_data() { return s_->data; }
  T operator[](std::size_t i) const { return s_->data[i]; }

  T item() const {
    if (numel() != 1) {
      throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    }
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  BasicTensor& set_requires_grad(bool on) {
    if (!s_->is_leaf()) throw ContractError("requires_grad can only be set on leaves");
    s_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return s_->is_leaf(); }

  bool has_grad() const { return s_->grad.size() == s_->data.size() && !s_->data.empty(); }
  std::span<const T> grad() const { return s_->grad; }
  void zero_grad() {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), T{0});
  }

  std::string_view op_name() const { return s_->node ? s_->node->op : "leaf"; }

  // Copy of the values, cut off from any graph.
  BasicTensor detach() const { return from_data(shape(), s_->data, false); }

  std::vector<T> to_vector() const { return s_->data; }

  const StoragePtr& storage() const { return s_; }
  explicit BasicTensor(StoragePtr s) : s_(std::move(s)) {}

 private:
  StoragePtr s_;
};

using Tensor = BasicTensor<float>;

namespace detail {

template <class T>
using Inputs = std::vector<std::shared_ptr<Storage<T>>>;

// Builds a taped result. The node is attached only when some input tracks
// gradients, so frozen computations carry no graph.
template <class T, class Backward>
BasicTensor<T> make_result(std::string_view op, Shape shape, std::vector<T> data,
                           Inputs<T> inputs, Backward&& backward) {
  auto s = std::make_shared<Storage<T>>();
  s->shape = std::move(shape);
  s->data = std::move(data);
  check_finite(*s, op);
  bool track = std::any_of(inputs.begin(), inputs.end(),
                           [](const auto& in) { return in->requires_grad; });
  if (track) {
    s->requires_grad = true;
    auto node = std::make_shared<TapeNode<T>>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = std::forward<Backward>(backward);
    s->node = std::move(node);
  }
  return BasicTensor<T>(std::move(s));
}

// Reverse topological order (outputs last) of every tracked storage reachable
// from `root`. Iterative to stay safe on deep graphs.
template <class T>
std::vector<Storage<T>*> topo_order(Storage<T>* root) {
  std::vector<Storage<T>*> order;
  std::unordered_set<Storage<T>*> seen;
  std::vector<std::pair<Storage<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [s, next] = stack.back();
    if (s->node && next < s->node->inputs.size()) {
      Storage<T>* child = s->node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(s);
    stack.pop_back();
  }
  return order;
}

}  // namespace detail

// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
// `loss`. Interior gradients are scratch space and are released afterwards.
template <class T>
void backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  auto* root = loss.storage().get();
  if (!root->requires_grad) return;
  auto order = detail::topo_order(root);
  for (auto* s : order) {
    if (!s->is_leaf()) s->grad.assign(s->data.size(), T{0});
  }
  root->grad_buffer()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->node->backward(**it);
  }
  for (auto* s : order) {
    if (!s->is_leaf()) {
      s->grad.clear();
      s->grad.shrink_to_fit();
    }
  }
}

}  // namespace hypersort
