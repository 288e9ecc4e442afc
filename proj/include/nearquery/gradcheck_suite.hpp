#pragma once

// Central finite differences against reverse-mode gradients, in double.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nearquery/model.hpp"
#include "nearquery/tensor.hpp"

namespace nq {

struct GradcheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  Index max_coords = 0;  // per tensor; 0 checks every coordinate
  std::uint64_t seed = 1;
};

struct GradcheckEntry {
  std::string name;
  Index checked = 0;
  double max_abs_err = 0;
  double max_rel_err = 0;
  bool disconnected = false;  // no gradient reached this tensor
  std::string worst;          // "[index] analytic=<a> numeric=<n>"
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_rel_err = 0;
  double tol = 0;
  bool passed = false;
  double seconds = 0;
  const GradcheckEntry* worst() const;
};

struct NamedTensor {
  std::string name;
  Tensor<double> tensor;
};

// |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)
double gradcheck_rel_err(double analytic, double numeric);

// loss_fn must rebuild its scalar from the current values of the leaf
// tensors on every call. A coordinate whose error exceeds 1e-6 is measured
// again at 10*eps, eps/10 and eps/100 and keeps the smallest error: a step
// that straddles a ReLU or clamp kink needs a smaller step, and a gradient
// that is zero by symmetry needs a larger one to rise above roundoff.
GradcheckReport gradcheck(const std::function<Tensor<double>()>& loss_fn, std::vector<NamedTensor> params,
                          const GradcheckOptions& opt);

// Every differentiable op, small random inputs.
GradcheckReport run_kernel_suite(const GradcheckOptions& opt);

// 32x32 input, d_model 8, Q 3, full method; discrete choices are replayed.
ModelConfig micro_model_config();
GradcheckReport run_micro_model_check(const GradcheckOptions& opt);

// Kernel suite plus the micro model.
GradcheckReport run_gradcheck_suite(const GradcheckOptions& opt);

}  // namespace nq
