#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace nq {

using Index = std::int64_t;
using Shape = std::vector<Index>;

enum class Dtype { f32, f64 };

template <class T>
inline constexpr Dtype dtype_of = std::is_same_v<T, float> ? Dtype::f32 : Dtype::f64;

const char* dtype_name(Dtype d);

Index numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Thrown when operand shapes do not conform to an op's rule.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Thrown on NaN / non-finite inputs where an op refuses to propagate them.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until the first contribution
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into inputs that require grad.
  std::function<void(Node&)> backward_fn;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Graph recording is on by default; NoGradGuard disables it for the current thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Dense row-major array with an optional autodiff node.
///
/// Tensors are handles: copies share the same node. Values are immutable after
/// creation except for leaf parameters, which the optimizer updates in place
/// through mutable_data().
template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;
  using BackwardFn = std::function<void(detail::Node<T>&)>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T v, bool requires_grad = false);

  // Result constructor used by ops. Inputs and the backward closure are kept
  // only when recording is enabled and some input requires grad.
  static Tensor make_result(Shape shape, std::vector<T> values, const char* op,
                            std::initializer_list<const Tensor*> inputs, BackwardFn fn);
  static Tensor make_result(Shape shape, std::vector<T> values, const char* op,
                            const std::vector<Tensor>& inputs, BackwardFn fn);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  Index dim(int axis) const;
  Index numel() const { return static_cast<Index>(node_->value.size()); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data();
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return defined() && !node_->grad.empty(); }
  bool requires_grad() const { return defined() && node_->requires_grad; }
  const char* op() const { return node_->op; }

  T item() const;
  T at(std::initializer_list<Index> idx) const;

  // Reverse-mode sweep from this scalar. Gradients accumulate into every
  // reachable tensor that requires grad.
  void backward() const;
  void zero_grad();
  Tensor detach() const;

  const NodePtr& node() const { return node_; }

 private:
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}
  NodePtr node_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

template <class To, class From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> v(t.data().begin(), t.data().end());
  return Tensor<To>::from(t.shape(), std::move(v));
}

}  // namespace nq
