#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nearquery/tensor.hpp"

namespace nq {

template <class T>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step_count = 0;
  std::vector<std::vector<T>> first_moment;   // one per parameter, lazily sized
  std::vector<std::vector<T>> second_moment;
};

// Bias-corrected Adam update, in place on the leaf tensors. grads[i] must
// match params[i] in size; an empty grads[i] is treated as zeros.
template <class T>
void adam_step(std::vector<Tensor<T>>& params, const std::vector<std::vector<T>>& grads,
               AdamState<T>& state);

// Same, reading each parameter's accumulated gradient.
template <class T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state);

}  // namespace nq
