// Serial reference kernels against their OpenMP versions. Arg 0 = serial,
// 1 = parallel on every available thread.

#include <benchmark/benchmark.h>

#include <vector>

#include "nearquery/kernels.hpp"
#include "nearquery/parallel.hpp"
#include "nearquery/rng.hpp"

using namespace nq;
using kernels::Exec;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t stream) {
  CounterRng rng(42, stream);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  return v;
}

Exec exec_of(const benchmark::State& st) { return st.range(0) == 0 ? Exec::serial : Exec::parallel; }

void BM_gemm(benchmark::State& st) {
  const Index M = 1024, K = 64, N = 64;
  const auto a = random_vec(M * K, 1), b = random_vec(K * N, 2);
  std::vector<float> c(M * N);
  for (auto _ : st) {
    std::fill(c.begin(), c.end(), 0.0f);
    kernels::gemm_nn(exec_of(st), M, K, N, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
}

void BM_im2col(benchmark::State& st) {
  const kernels::ConvGeom g{16, 64, 64, 3, 1, 1};
  const auto img = random_vec(16 * 64 * 64, 3);
  std::vector<float> col(static_cast<std::size_t>(16 * 9 * g.out_h() * g.out_w()));
  for (auto _ : st) {
    kernels::im2col(exec_of(st), g, img.data(), col.data());
    benchmark::DoNotOptimize(col.data());
  }
}

void BM_resize(benchmark::State& st) {
  const auto in = random_vec(16 * 32 * 32, 4);
  std::vector<float> out(16 * 128 * 128);
  for (auto _ : st) {
    kernels::resize_fwd(exec_of(st), 16, 32, 32, 128, 128, in.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_grid_sample(benchmark::State& st) {
  const Index C = 16, H = 32, W = 32, N = 4096;
  const auto map = random_vec(C * H * W, 5);
  auto pts = random_vec(N * 2, 6);
  for (auto& p : pts) p = (p + 1.0f) * 16.0f;
  std::vector<float> out(N * C);
  for (auto _ : st) {
    kernels::grid_sample_fwd(exec_of(st), C, H, W, map.data(), N, pts.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_deform(benchmark::State& st) {
  const std::vector<kernels::LevelGeom> levels{{4, 4, 0}, {8, 8, 16}, {16, 16, 80}};
  const Index tokens = 16 + 64 + 256, heads = 4, hd = 16, K = 4, L = 3;
  const kernels::DeformGeom g{tokens, heads, hd, K, levels};
  const auto value = random_vec(tokens * heads * hd, 7);
  auto loc = random_vec(tokens * heads * L * K * 2, 8);
  for (auto& p : loc) p = (p + 1.0f) * 2.0f;
  const auto attn = random_vec(tokens * heads * L * K, 9);
  std::vector<float> out(tokens * heads * hd);
  for (auto _ : st) {
    kernels::deform_fwd(exec_of(st), g, value.data(), loc.data(), attn.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_gemm)->Arg(0)->Arg(1);
BENCHMARK(BM_im2col)->Arg(0)->Arg(1);
BENCHMARK(BM_resize)->Arg(0)->Arg(1);
BENCHMARK(BM_grid_sample)->Arg(0)->Arg(1);
BENCHMARK(BM_deform)->Arg(0)->Arg(1);

BENCHMARK_MAIN();
