#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "statdistill/errors.hpp"

namespace sdt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct TensorImpl;

// One executed operation. The node owns its inputs; the output is observed
// through a weak pointer so the graph never forms a reference cycle.
template <typename T>
struct Node {
  // grad_inputs[i] is empty when input i does not need a gradient.
  // Implementations must accumulate (+=) into the provided spans.
  using BackwardFn = std::function<void(std::span<const T> grad_output,
                                        std::span<const std::span<T>> grad_inputs)>;

  std::string op;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  BackwardFn backward;
  std::weak_ptr<TensorImpl<T>> output;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // sized iff requires_grad
  bool requires_grad = false;
  std::shared_ptr<Node<T>> grad_fn;  // null for leaves
};

}  // namespace detail

/// Whether operations executed on this thread record a computation graph.
bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor handle. Copies share storage; use clone() for a
/// deep copy. Values are fixed once an operation has produced them; only the
/// gradient accumulator (and leaf values, via mutable_values) change.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T{1}); }
  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const T> values() const;
  // Leaf tensors only; throws UsageError for graph outputs.
  std::span<T> mutable_values();
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// Same values, no graph history, no gradient.
  Tensor detach() const;
  /// Deep copy of values and the requires_grad flag (leaf result).
  Tensor clone() const;
  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    auto src = values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(src[i]);
    return Tensor<U>(shape(), std::move(out));
  }

  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }
  static Tensor from_impl(std::shared_ptr<detail::TensorImpl<T>> impl);

 private:
  void require_defined() const;
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Builds an operation result, recording a graph node when grad is enabled
/// and at least one input requires grad.
template <typename T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> values,
                      std::initializer_list<Tensor<T>> inputs,
                      typename detail::Node<T>::BackwardFn backward);

/// Reverse-mode sweep from a scalar loss. Accumulates into the grad of every
/// requires_grad tensor reachable from loss.
template <typename T>
void backward(const Tensor<T>& loss);

/// Nodes reachable from root, in topological (execution) order.
template <typename T>
std::vector<const detail::Node<T>*> topological_order(const Tensor<T>& root);

}  // namespace sdt
