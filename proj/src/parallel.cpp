#include "nearquery/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace nq {

namespace {

int default_threads() {
#if defined(_OPENMP)
  const int n = omp_get_max_threads();
  return n > 1 ? n : 0;
#else
  return 0;
#endif
}

std::atomic<int> g_threads{default_threads()};

}  // namespace

int kernel_threads() { return g_threads.load(std::memory_order_relaxed); }

void set_kernel_threads(int n) { g_threads.store(n < 0 ? 0 : n, std::memory_order_relaxed); }

void configure_threads_from_env() {
  const char* v = std::getenv("NEARQUERY_THREADS");
  if (v == nullptr || *v == '\0') return;
  try {
    set_kernel_threads(std::stoi(v));
  } catch (const std::exception&) {
    // Malformed values keep the current setting.
  }
}

ScopedKernelThreads::ScopedKernelThreads(int n) : prev_(kernel_threads()) { set_kernel_threads(n); }
ScopedKernelThreads::~ScopedKernelThreads() { set_kernel_threads(prev_); }

}  // namespace nq
