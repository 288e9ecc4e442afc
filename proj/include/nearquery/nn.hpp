#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nearquery/ops.hpp"
#include "nearquery/tensor.hpp"

namespace nq {

enum class Init { zeros, ones, xavier_uniform, normal_002, normal_unit };

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

// Owns every trainable tensor of a model in registration order. Each
// parameter is initialised from its own counter-RNG stream, so adding a
// parameter never shifts the values of the others.
template <class T>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  Tensor<T> add(const std::string& name, Shape shape, Init init, Index fan_in = 0,
                Index fan_out = 0);
  Tensor<T> add_values(const std::string& name, Shape shape, const std::vector<double>& values);

  const std::vector<NamedParam<T>>& params() const { return params_; }
  std::vector<Tensor<T>> tensors() const;
  const Tensor<T>& get(const std::string& name) const;
  Tensor<T>& get(const std::string& name);
  bool contains(const std::string& name) const;
  Index total_size() const;
  void zero_grad();

 private:
  std::uint64_t seed_;
  std::vector<NamedParam<T>> params_;
};

template <class T>
struct Linear {
  Tensor<T> w;  // [in x out]
  Tensor<T> b;  // [out]

  static Linear create(ParamStore<T>& ps, const std::string& name, Index in, Index out,
                       Init w_init = Init::xavier_uniform);
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, w, b); }
};

template <class T>
struct Conv2d {
  Tensor<T> w;  // [out x in x k x k]
  Tensor<T> b;
  Index stride = 1, pad = 0;

  static Conv2d create(ParamStore<T>& ps, const std::string& name, Index in, Index out, Index k,
                       Index stride, Index pad);
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  static LayerNorm create(ParamStore<T>& ps, const std::string& name, Index dim);
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

extern template class ParamStore<float>;
extern template class ParamStore<double>;
extern template struct Linear<float>;
extern template struct Linear<double>;
extern template struct Conv2d<float>;
extern template struct Conv2d<double>;
extern template struct LayerNorm<float>;
extern template struct LayerNorm<double>;

}  // namespace nq
