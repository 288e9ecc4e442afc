#include "nearquery/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace nq {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) {
    if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T v, bool requires_grad) {
  auto n = std::make_shared<detail::Node<T>>();
  n->value.assign(static_cast<std::size_t>(nq::numel(shape)), v);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

template <class T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (static_cast<Index>(values.size()) != nq::numel(shape)) {
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(shape));
  }
  auto n = std::make_shared<detail::Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T v, bool requires_grad) {
  return full(Shape{}, v, requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::make_result(Shape shape, std::vector<T> values, const char* op,
                                 std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  auto n = std::make_shared<detail::Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->op = op;
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor* t : inputs) any = any || t->requires_grad();
    if (any) {
      n->requires_grad = true;
      n->inputs.reserve(inputs.size());
      for (const Tensor* t : inputs) n->inputs.push_back(t->node_);
      n->backward_fn = std::move(fn);
    }
  }
  return Tensor(std::move(n));
}

template <class T>
Tensor<T> Tensor<T>::make_result(Shape shape, std::vector<T> values, const char* op,
                                 const std::vector<Tensor>& inputs, BackwardFn fn) {
  auto n = std::make_shared<detail::Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->op = op;
  if (g_grad_enabled) {
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      n->requires_grad = true;
      n->inputs.reserve(inputs.size());
      for (const Tensor& t : inputs) n->inputs.push_back(t.node_);
      n->backward_fn = std::move(fn);
    }
  }
  return Tensor(std::move(n));
}

template <class T>
const Shape& Tensor<T>::shape() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->shape;
}

template <class T>
Index Tensor<T>::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape()));
  }
  return shape()[static_cast<std::size_t>(axis)];
}

template <class T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->inputs.empty()) throw std::logic_error("mutable_data on a non-leaf tensor");
  return node_->value;
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <class T>
T Tensor<T>::at(std::initializer_list<Index> idx) const {
  const Shape& s = shape();
  if (idx.size() != s.size()) throw ShapeError("at(): index rank mismatch for " + shape_str(s));
  Index flat = 0;
  std::size_t d = 0;
  for (Index i : idx) {
    if (i < 0 || i >= s[d]) throw ShapeError("at(): index out of range for " + shape_str(s));
    flat = flat * s[d] + i;
    ++d;
  }
  return node_->value[static_cast<std::size_t>(flat)];
}

template <class T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      detail::Node<T>* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

template <class T>
void Tensor<T>::zero_grad() {
  if (node_) node_->grad.clear();
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), node_->value, false);
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace nq
