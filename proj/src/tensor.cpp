#include "statdistill/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace sdt {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {
thread_local bool t_grad_enabled = true;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  if (shape.size() > 4) throw DimensionError("tensor rank " + std::to_string(shape.size()) + " exceeds 4");
  impl_->values.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  if (shape.size() > 4) throw DimensionError("tensor rank " + std::to_string(shape.size()) + " exceeds 4");
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
}

template <typename T>
Tensor<T> Tensor<T>::from_impl(std::shared_ptr<detail::TensorImpl<T>> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

template <typename T>
void Tensor<T>::require_defined() const {
  if (!impl_) throw UsageError("operation on an undefined tensor");
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  require_defined();
  return impl_->shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  require_defined();
  return impl_->values.size();
}

template <typename T>
std::span<const T> Tensor<T>::values() const {
  require_defined();
  return impl_->values;
}

template <typename T>
std::span<T> Tensor<T>::mutable_values() {
  require_defined();
  if (impl_->grad_fn) throw UsageError("cannot mutate the values of an operation result");
  return impl_->values;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw UsageError("item() on a tensor of shape " + shape_str(shape()));
  return impl_->values[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank does not match shape " + shape_str(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw DimensionError("index out of range on axis " + std::to_string(axis));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return impl_->values[flat];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  require_defined();
  if (impl_->grad_fn) throw UsageError("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = on;
  if (on) {
    impl_->grad.assign(impl_->values.size(), T{0});
  } else {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }
  return *this;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  require_defined();
  return impl_->grad_fn == nullptr;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  require_defined();
  return impl_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  require_defined();
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  require_defined();
  std::fill(impl_->grad.begin(), impl_->grad.end(), T{0});
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  require_defined();
  return Tensor(impl_->shape, impl_->values);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out = detach();
  if (requires_grad()) out.set_requires_grad(true);
  return out;
}

template <typename T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> values,
                      std::initializer_list<Tensor<T>> inputs,
                      typename detail::Node<T>::BackwardFn backward) {
  Tensor<T> out(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;

  auto node = std::make_shared<detail::Node<T>>();
  node->op = std::move(op);
  node->inputs.reserve(inputs.size());
  for (const auto& in : inputs) node->inputs.push_back(in.impl());
  node->backward = std::move(backward);
  node->output = out.impl();
  out.impl()->grad_fn = node;
  out.impl()->requires_grad = true;
  out.impl()->grad.assign(out.numel(), T{0});
  return out;
}

template <typename T>
std::vector<const detail::Node<T>*> topological_order(const Tensor<T>& root) {
  std::vector<const detail::Node<T>*> order;
  if (!root.defined() || !root.impl()->grad_fn) return order;
  std::unordered_set<const detail::Node<T>*> visited;
  // Iterative post-order DFS: (node, index of next input to visit).
  std::vector<std::pair<const detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.impl()->grad_fn.get(), 0);
  visited.insert(root.impl()->grad_fn.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const auto* child = node->inputs[next++]->grad_fn.get();
      if (child && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw UsageError("backward on an undefined tensor");
  if (loss.numel() != 1) throw UsageError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  auto& root = *loss.impl();
  if (!root.grad_fn) {
    if (!root.requires_grad) throw UsageError("backward on a tensor that is not part of a computation graph");
    root.grad[0] += T{1};
    return;
  }

  const auto order = topological_order(loss);
  // Gradients of intermediate results live here for the duration of the
  // sweep so repeated backward calls never double count.
  std::unordered_map<const detail::Node<T>*, std::vector<T>> pending;
  pending[root.grad_fn.get()] = std::vector<T>{T{1}};

  std::vector<std::span<T>> grad_inputs;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const auto* node = *it;
    auto found = pending.find(node);
    if (found == pending.end()) continue;
    std::vector<T> grad_out = std::move(found->second);
    pending.erase(found);

    if (auto out = node->output.lock()) {
      for (std::size_t i = 0; i < grad_out.size(); ++i) out->grad[i] += grad_out[i];
    }

    grad_inputs.assign(node->inputs.size(), std::span<T>{});
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      auto& in = *node->inputs[i];
      if (in.grad_fn) {
        auto& buf = pending[in.grad_fn.get()];
        if (buf.empty()) buf.assign(in.values.size(), T{0});
        grad_inputs[i] = buf;
      } else if (in.requires_grad) {
        grad_inputs[i] = in.grad;
      }
    }
    node->backward(grad_out, grad_inputs);
  }
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_result(std::string, Shape, std::vector<float>, std::initializer_list<Tensor<float>>,
                                   detail::Node<float>::BackwardFn);
template Tensor<double> make_result(std::string, Shape, std::vector<double>, std::initializer_list<Tensor<double>>,
                                    detail::Node<double>::BackwardFn);
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);
template std::vector<const detail::Node<float>*> topological_order(const Tensor<float>&);
template std::vector<const detail::Node<double>*> topological_order(const Tensor<double>&);

}  // namespace sdt
