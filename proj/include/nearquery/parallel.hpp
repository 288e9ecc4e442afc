#pragma once

namespace nq {

// Kernel thread count. 0 selects the serial reference kernels; n > 0 runs the
// OpenMP kernels on n threads. Both paths produce bitwise-identical results:
// parallel loops only split independent outputs, never a reduction.
int kernel_threads();
void set_kernel_threads(int n);

// Reads NEARQUERY_THREADS (unset keeps the current setting).
void configure_threads_from_env();

class ScopedKernelThreads {
 public:
  explicit ScopedKernelThreads(int n);
  ~ScopedKernelThreads();
  ScopedKernelThreads(const ScopedKernelThreads&) = delete;
  ScopedKernelThreads& operator=(const ScopedKernelThreads&) = delete;

 private:
  int prev_;
};

}  // namespace nq
