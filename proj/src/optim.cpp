#include "nearquery/optim.hpp"

#include <algorithm>
#include <cmath>


namespace nq {

template <class T>
void adam_step(std::vector<Tensor<T>>& params, const std::vector<std::vector<T>>& grads,
               AdamState<T>& state) {
  if (grads.size() != params.size()) {
    throw ShapeError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  }
  if (!(state.lr > 0)) throw std::invalid_argument("adam_step: lr must be positive");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].empty() && static_cast<Index>(grads[i].size()) != params[i].numel()) {
      throw ShapeError("adam_step: gradient " + std::to_string(i) + " has " +
                       std::to_string(grads[i].size()) + " values for parameter of shape " +
                       shape_str(params[i].shape()));
    }
  }
  state.first_moment.resize(params.size());
  state.second_moment.resize(params.size());
  state.step_count += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.empty()) m.assign(p.size(), T(0));
    if (v.empty()) v.assign(p.size(), T(0));
    if (m.size() != p.size() || v.size() != p.size()) {
      throw ShapeError("adam_step: moment buffers do not match parameter " + std::to_string(i));
    }
    const auto& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g.empty() ? 0.0 : static_cast<double>(g[k]);
      const double mk = b1 * static_cast<double>(m[k]) + (1.0 - b1) * gk;
      const double vk = b2 * static_cast<double>(v[k]) + (1.0 - b2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double update = state.lr * (mk / bc1) / (std::sqrt(vk / bc2) + state.eps);
      p[k] = static_cast<T>(static_cast<double>(p[k]) - update);
    }
  }
}

template <class T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state) {
  std::vector<std::vector<T>> grads(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].has_grad()) grads[i].assign(params[i].grad().begin(), params[i].grad().end());
  }
  adam_step(params, grads, state);
}

template void adam_step<float>(std::vector<Tensor<float>>&, const std::vector<std::vector<float>>&,
                               AdamState<float>&);
template void adam_step<double>(std::vector<Tensor<double>>&,
                                const std::vector<std::vector<double>>&, AdamState<double>&);
template void adam_step<float>(std::vector<Tensor<float>>&, AdamState<float>&);
template void adam_step<double>(std::vector<Tensor<double>>&, AdamState<double>&);

}  // namespace nq
