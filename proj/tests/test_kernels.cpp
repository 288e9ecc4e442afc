// Serial and OpenMP kernels must agree bitwise; serial also checked against
// naive oracles.

#include <doctest.h>

#include <cstring>

#include "nearquery/kernels.hpp"
#include "nearquery/parallel.hpp"
#include "test_util.hpp"

using namespace nq;
using kernels::Exec;

namespace {

std::vector<float> rvec(std::size_t n, std::uint64_t stream, double lo = -1, double hi = 1) {
  CounterRng rng(11, stream);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return v;
}

bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

// Runs fn(Exec, out) serially and on 4 threads; outputs must match bitwise.
template <class F>
void both_paths(std::size_t n_out, F fn) {
  ScopedKernelThreads threads(4);
  std::vector<float> s(n_out, 0.0f), p(n_out, 0.0f);
  fn(Exec::serial, s);
  fn(Exec::parallel, p);
  CHECK(bitwise_equal(s, p));
}

}  // namespace

TEST_CASE("gemm variants: serial == parallel, and match triple loop") {
  const Index M = 37, K = 19, N = 23;
  const auto a = rvec(M * K, 1), b = rvec(K * N, 2), at = rvec(K * M, 3), bt = rvec(N * K, 4);
  both_paths(M * N, [&](Exec ex, std::vector<float>& c) { kernels::gemm_nn(ex, M, K, N, a.data(), b.data(), c.data()); });
  both_paths(M * N, [&](Exec ex, std::vector<float>& c) { kernels::gemm_tn(ex, M, K, N, at.data(), b.data(), c.data()); });
  both_paths(M * N, [&](Exec ex, std::vector<float>& c) { kernels::gemm_nt(ex, M, K, N, a.data(), bt.data(), c.data()); });

  std::vector<float> c(M * N, 0.0f);
  kernels::gemm_nn(Exec::serial, M, K, N, a.data(), b.data(), c.data());
  for (Index i = 0; i < M; ++i) {
    for (Index j = 0; j < N; ++j) {
      double ref = 0;
      for (Index k = 0; k < K; ++k) ref += double(a[i * K + k]) * double(b[k * N + j]);
      CHECK(c[i * N + j] == doctest::Approx(ref).epsilon(1e-5));
    }
  }
}

TEST_CASE("transpose: serial == parallel") {
  const auto in = rvec(13 * 7, 5);
  both_paths(13 * 7, [&](Exec ex, std::vector<float>& o) { kernels::transpose(ex, 13, 7, in.data(), o.data()); });
}

TEST_CASE("im2col / col2im: serial == parallel, conv matches sliding window") {
  for (Index stride : {1, 2}) {
    const kernels::ConvGeom g{3, 9, 8, 3, stride, 1};
    const Index cols = g.out_h() * g.out_w();
    const auto img = rvec(3 * 9 * 8, 6);
    both_paths(3 * 9 * cols, [&](Exec ex, std::vector<float>& col) { kernels::im2col(ex, g, img.data(), col.data()); });
    const auto col = rvec(3 * 9 * cols, 7);
    both_paths(3 * 9 * 8, [&](Exec ex, std::vector<float>& o) { kernels::col2im_add(ex, g, col.data(), o.data()); });

    // w [1 x 3 x 3 x 3] times im2col equals direct summation.
    const auto w = rvec(27, 8);
    std::vector<float> c(static_cast<std::size_t>(3 * 9 * cols)), out(static_cast<std::size_t>(cols), 0.0f);
    kernels::im2col(Exec::serial, g, img.data(), c.data());
    kernels::gemm_nn(Exec::serial, 1, 27, cols, w.data(), c.data(), out.data());
    for (Index oy = 0; oy < g.out_h(); ++oy) {
      for (Index ox = 0; ox < g.out_w(); ++ox) {
        double ref = 0;
        for (Index ch = 0; ch < 3; ++ch) {
          for (Index ky = 0; ky < 3; ++ky) {
            for (Index kx = 0; kx < 3; ++kx) {
              const Index y = oy * stride - 1 + ky, x = ox * stride - 1 + kx;
              if (y < 0 || y >= 9 || x < 0 || x >= 8) continue;
              ref += double(w[(ch * 3 + ky) * 3 + kx]) * double(img[(ch * 9 + y) * 8 + x]);
            }
          }
        }
        CHECK(out[oy * g.out_w() + ox] == doctest::Approx(ref).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("grid sample: serial == parallel for forward and both backward outputs") {
  const Index C = 3, H = 6, W = 7, N = 50;
  const auto map = rvec(C * H * W, 9);
  const auto pts = rvec(N * 2, 10, -2, 8);
  const auto gout = rvec(N * C, 11);
  both_paths(N * C, [&](Exec ex, std::vector<float>& o) {
    kernels::grid_sample_fwd(ex, C, H, W, map.data(), N, pts.data(), o.data());
  });
  both_paths(C * H * W, [&](Exec ex, std::vector<float>& dm) {
    kernels::grid_sample_bwd(ex, C, H, W, map.data(), N, pts.data(), gout.data(), dm.data(), static_cast<float*>(nullptr));
  });
  both_paths(N * 2, [&](Exec ex, std::vector<float>& dp) {
    kernels::grid_sample_bwd(ex, C, H, W, map.data(), N, pts.data(), gout.data(), static_cast<float*>(nullptr), dp.data());
  });
}

TEST_CASE("resize: serial == parallel, up and down") {
  const auto in = rvec(2 * 5 * 6, 12);
  both_paths(2 * 11 * 13, [&](Exec ex, std::vector<float>& o) { kernels::resize_fwd(ex, 2, 5, 6, 11, 13, in.data(), o.data()); });
  both_paths(2 * 2 * 3, [&](Exec ex, std::vector<float>& o) { kernels::resize_fwd(ex, 2, 5, 6, 2, 3, in.data(), o.data()); });
  const auto g = rvec(2 * 11 * 13, 13);
  both_paths(2 * 5 * 6, [&](Exec ex, std::vector<float>& o) { kernels::resize_bwd(ex, 2, 5, 6, 11, 13, g.data(), o.data()); });
}

TEST_CASE("deformable sampling: serial == parallel") {
  const std::vector<kernels::LevelGeom> levels{{2, 3, 0}, {4, 4, 6}};
  const Index n = 9, heads = 2, hd = 3, K = 3, L = 2, tokens = 22;
  const kernels::DeformGeom g{n, heads, hd, K, levels};
  const auto value = rvec(tokens * heads * hd, 14);
  const auto loc = rvec(n * heads * L * K * 2, 15, -1, 4.5);
  const auto attn = rvec(n * heads * L * K, 16, 0, 1);
  const auto gout = rvec(n * heads * hd, 17);
  both_paths(n * heads * hd, [&](Exec ex, std::vector<float>& o) {
    kernels::deform_fwd(ex, g, value.data(), loc.data(), attn.data(), o.data());
  });
  both_paths(tokens * heads * hd, [&](Exec ex, std::vector<float>& dv) {
    std::vector<float> dl(loc.size()), da(attn.size());
    kernels::deform_bwd(ex, g, value.data(), loc.data(), attn.data(), gout.data(), dv.data(), dl.data(), da.data());
  });
  both_paths(loc.size(), [&](Exec ex, std::vector<float>& dl) {
    std::vector<float> da(attn.size());
    kernels::deform_bwd(ex, g, value.data(), loc.data(), attn.data(), gout.data(), static_cast<float*>(nullptr), dl.data(), da.data());
  });
  both_paths(attn.size(), [&](Exec ex, std::vector<float>& da) {
    std::vector<float> dl(loc.size());
    kernels::deform_bwd(ex, g, value.data(), loc.data(), attn.data(), gout.data(), static_cast<float*>(nullptr), dl.data(), da.data());
  });
}

TEST_CASE("thread setting: 0 selects serial") {
  ScopedKernelThreads t(0);
  CHECK(kernels::current_exec() == Exec::serial);
  set_kernel_threads(3);
  CHECK(kernels::current_exec() == Exec::parallel);
}
