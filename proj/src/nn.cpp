#include "nearquery/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "nearquery/rng.hpp"

namespace nq {

template <class T>
Tensor<T> ParamStore<T>::add(const std::string& name, Shape shape, Init init, Index fan_in,
                             Index fan_out) {
  const Index n = numel(shape);
  std::vector<double> v(static_cast<std::size_t>(n), 0.0);
  CounterRng rng(seed_, static_cast<std::uint64_t>(params_.size()) + 1);
  switch (init) {
    case Init::zeros:
      break;
    case Init::ones:
      std::fill(v.begin(), v.end(), 1.0);
      break;
    case Init::xavier_uniform: {
      if (fan_in <= 0 || fan_out <= 0) {
        throw std::invalid_argument("xavier init for '" + name + "' needs fan_in and fan_out");
      }
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (auto& x : v) x = rng.uniform(-bound, bound);
      break;
    }
    case Init::normal_002:
      for (auto& x : v) x = 0.02 * rng.normal();
      break;
    case Init::normal_unit:
      for (auto& x : v) x = rng.normal();
      break;
  }
  return add_values(name, std::move(shape), v);
}

template <class T>
Tensor<T> ParamStore<T>::add_values(const std::string& name, Shape shape,
                                    const std::vector<double>& values) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  std::vector<T> tv(values.begin(), values.end());
  auto t = Tensor<T>::from(std::move(shape), std::move(tv), true);
  params_.push_back({name, t});
  return t;
}

template <class T>
std::vector<Tensor<T>> ParamStore<T>::tensors() const {
  std::vector<Tensor<T>> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

template <class T>
const Tensor<T>& ParamStore<T>::get(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

template <class T>
Tensor<T>& ParamStore<T>::get(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

template <class T>
bool ParamStore<T>::contains(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return true;
  }
  return false;
}

template <class T>
Index ParamStore<T>::total_size() const {
  Index n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <class T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <class T>
Linear<T> Linear<T>::create(ParamStore<T>& ps, const std::string& name, Index in, Index out,
                            Init w_init) {
  Linear l;
  l.w = ps.add(name + ".weight", {in, out}, w_init, in, out);
  l.b = ps.add(name + ".bias", {out}, Init::zeros);
  return l;
}

template <class T>
Conv2d<T> Conv2d<T>::create(ParamStore<T>& ps, const std::string& name, Index in, Index out,
                            Index k, Index stride, Index pad) {
  Conv2d c;
  c.w = ps.add(name + ".weight", {out, in, k, k}, Init::xavier_uniform, in * k * k, out * k * k);
  c.b = ps.add(name + ".bias", {out}, Init::zeros);
  c.stride = stride;
  c.pad = pad;
  return c;
}

template <class T>
LayerNorm<T> LayerNorm<T>::create(ParamStore<T>& ps, const std::string& name, Index dim) {
  LayerNorm n;
  n.gamma = ps.add(name + ".gamma", {dim}, Init::ones);
  n.beta = ps.add(name + ".beta", {dim}, Init::zeros);
  return n;
}

template class ParamStore<float>;
template class ParamStore<double>;
template struct Linear<float>;
template struct Linear<double>;
template struct Conv2d<float>;
template struct Conv2d<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;

}  // namespace nq
