#include "nearquery/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "nearquery/parallel.hpp"

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace nq::kernels {

namespace {

// Runs body(i) for i in [0, n). The parallel path only distributes
// iterations; each iteration is the same code as the serial path.
template <class F>
void for_range(Exec ex, Index n, F&& body) {
#if defined(_OPENMP)
  if (ex == Exec::parallel && n > 1) {
    const int nt = std::max(1, kernel_threads());
#pragma omp parallel for schedule(static) num_threads(nt)
    for (Index i = 0; i < n; ++i) body(i);
    return;
  }
#else
  (void)ex;
#endif
  for (Index i = 0; i < n; ++i) body(i);
}

template <class T>
struct Corners {
  Index x0, y0;
  T fx, fy;
  // (y0,x0) (y0,x0+1) (y0+1,x0) (y0+1,x0+1)
  Index offset[4];
  T weight[4];
  bool valid[4];
};

// Floor-based corner lookup. At an integer coordinate fx == 0, so the
// derivative below uses the cell to the right: the documented tie-break.
template <class T>
inline Corners<T> corners(T x, T y, Index H, Index W) {
  Corners<T> c;
  const T xf = std::floor(x);
  const T yf = std::floor(y);
  c.x0 = static_cast<Index>(xf);
  c.y0 = static_cast<Index>(yf);
  c.fx = x - xf;
  c.fy = y - yf;
  const Index xs[4] = {c.x0, c.x0 + 1, c.x0, c.x0 + 1};
  const Index ys[4] = {c.y0, c.y0, c.y0 + 1, c.y0 + 1};
  c.weight[0] = (T(1) - c.fx) * (T(1) - c.fy);
  c.weight[1] = c.fx * (T(1) - c.fy);
  c.weight[2] = (T(1) - c.fx) * c.fy;
  c.weight[3] = c.fx * c.fy;
  for (int q = 0; q < 4; ++q) {
    c.valid[q] = xs[q] >= 0 && xs[q] < W && ys[q] >= 0 && ys[q] < H;
    c.offset[q] = c.valid[q] ? ys[q] * W + xs[q] : 0;
  }
  return c;
}

struct Lerp {
  Index i0, i1;
  double w0, w1;
};

std::vector<Lerp> lerp_table(Index in, Index out) {
  std::vector<Lerp> t(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    Index i0 = std::min(static_cast<Index>(src), in - 1);
    Index i1 = std::min(i0 + 1, in - 1);
    const double l1 = src - static_cast<double>(i0);
    t[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - l1, l1};
  }
  return t;
}

}  // namespace

Exec current_exec() { return kernel_threads() > 0 ? Exec::parallel : Exec::serial; }

template <class T>
void gemm_nn(Exec ex, Index M, Index K, Index N, const T* A, const T* B, T* C) {
  for_range(ex, M, [=](Index i) {
    T* c = C + i * N;
    const T* a = A + i * K;
    for (Index k = 0; k < K; ++k) {
      const T av = a[k];
      const T* b = B + k * N;
      for (Index j = 0; j < N; ++j) c[j] += av * b[j];
    }
  });
}

template <class T>
void gemm_tn(Exec ex, Index M, Index K, Index N, const T* A, const T* B, T* C) {
  for_range(ex, M, [=](Index i) {
    T* c = C + i * N;
    for (Index k = 0; k < K; ++k) {
      const T av = A[k * M + i];
      const T* b = B + k * N;
      for (Index j = 0; j < N; ++j) c[j] += av * b[j];
    }
  });
}

template <class T>
void transpose(Exec ex, Index rows, Index cols, const T* in, T* out) {
  for_range(ex, cols, [=](Index j) {
    T* o = out + j * rows;
    for (Index i = 0; i < rows; ++i) o[i] = in[i * cols + j];
  });
}

template <class T>
void gemm_nt(Exec ex, Index M, Index K, Index N, const T* A, const T* B, T* C) {
  std::vector<T> bt(static_cast<std::size_t>(K * N));
  transpose(ex, N, K, B, bt.data());
  gemm_nn(ex, M, K, N, A, bt.data(), C);
}

template <class T>
void im2col(Exec ex, const ConvGeom& g, const T* img, T* col) {
  const Index OH = g.out_h(), OW = g.out_w(), P = OH * OW, k = g.kernel;
  for_range(ex, g.channels, [=, &g](Index c) {
    const T* src = img + c * g.height * g.width;
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        T* dst = col + ((c * k + ky) * k + kx) * P;
        for (Index oy = 0; oy < OH; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky;
          for (Index ox = 0; ox < OW; ++ox) {
            const Index ix = ox * g.stride - g.pad + kx;
            const bool in = iy >= 0 && iy < g.height && ix >= 0 && ix < g.width;
            dst[oy * OW + ox] = in ? src[iy * g.width + ix] : T(0);
          }
        }
      }
    }
  });
}

template <class T>
void col2im_add(Exec ex, const ConvGeom& g, const T* col, T* img) {
  const Index OH = g.out_h(), OW = g.out_w(), P = OH * OW, k = g.kernel;
  for_range(ex, g.channels, [=, &g](Index c) {
    T* dst = img + c * g.height * g.width;
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        const T* src = col + ((c * k + ky) * k + kx) * P;
        for (Index oy = 0; oy < OH; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          for (Index ox = 0; ox < OW; ++ox) {
            const Index ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.width) dst[iy * g.width + ix] += src[oy * OW + ox];
          }
        }
      }
    }
  });
}

template <class T>
void grid_sample_fwd(Exec ex, Index C, Index H, Index W, const T* map, Index N, const T* pts,
                     T* out) {
  const Index plane = H * W;
  for_range(ex, N, [=](Index n) {
    const auto cr = corners(pts[2 * n], pts[2 * n + 1], H, W);
    T* o = out + n * C;
    for (Index c = 0; c < C; ++c) {
      const T* m = map + c * plane;
      T acc = T(0);
      for (int q = 0; q < 4; ++q) {
        if (cr.valid[q] && cr.weight[q] != T(0)) acc += cr.weight[q] * m[cr.offset[q]];
      }
      o[c] = acc;
    }
  });
}

template <class T>
void grid_sample_bwd(Exec ex, Index C, Index H, Index W, const T* map, Index N, const T* pts,
                     const T* gout, T* dmap, T* dpts) {
  const Index plane = H * W;
  if (dmap != nullptr) {
    for_range(ex, C, [=](Index c) {
      T* dm = dmap + c * plane;
      for (Index n = 0; n < N; ++n) {
        const auto cr = corners(pts[2 * n], pts[2 * n + 1], H, W);
        const T g = gout[n * C + c];
        for (int q = 0; q < 4; ++q) {
          if (cr.valid[q]) dm[cr.offset[q]] += cr.weight[q] * g;
        }
      }
    });
  }
  if (dpts != nullptr) {
    for_range(ex, N, [=](Index n) {
      const auto cr = corners(pts[2 * n], pts[2 * n + 1], H, W);
      T gx = T(0), gy = T(0);
      for (Index c = 0; c < C; ++c) {
        const T* m = map + c * plane;
        T v[4];
        for (int q = 0; q < 4; ++q) v[q] = cr.valid[q] ? m[cr.offset[q]] : T(0);
        const T g = gout[n * C + c];
        gx += g * ((T(1) - cr.fy) * (v[1] - v[0]) + cr.fy * (v[3] - v[2]));
        gy += g * ((T(1) - cr.fx) * (v[2] - v[0]) + cr.fx * (v[3] - v[1]));
      }
      dpts[2 * n] += gx;
      dpts[2 * n + 1] += gy;
    });
  }
}

template <class T>
void resize_fwd(Exec ex, Index C, Index H, Index W, Index OH, Index OW, const T* in, T* out) {
  if (OH == H && OW == W) {
    std::copy(in, in + C * H * W, out);
    return;
  }
  const auto ty = lerp_table(H, OH);
  const auto tx = lerp_table(W, OW);
  for_range(ex, C, [&, in, out](Index c) {
    const T* src = in + c * H * W;
    T* dst = out + c * OH * OW;
    for (Index oy = 0; oy < OH; ++oy) {
      const Lerp& ly = ty[static_cast<std::size_t>(oy)];
      const T* r0 = src + ly.i0 * W;
      const T* r1 = src + ly.i1 * W;
      const T wy0 = static_cast<T>(ly.w0), wy1 = static_cast<T>(ly.w1);
      for (Index ox = 0; ox < OW; ++ox) {
        const Lerp& lx = tx[static_cast<std::size_t>(ox)];
        const T wx0 = static_cast<T>(lx.w0), wx1 = static_cast<T>(lx.w1);
        dst[oy * OW + ox] =
            wy0 * (wx0 * r0[lx.i0] + wx1 * r0[lx.i1]) + wy1 * (wx0 * r1[lx.i0] + wx1 * r1[lx.i1]);
      }
    }
  });
}

template <class T>
void resize_bwd(Exec ex, Index C, Index H, Index W, Index OH, Index OW, const T* gout, T* gin) {
  if (OH == H && OW == W) {
    for (Index i = 0; i < C * H * W; ++i) gin[i] += gout[i];
    return;
  }
  const auto ty = lerp_table(H, OH);
  const auto tx = lerp_table(W, OW);
  for_range(ex, C, [&, gout, gin](Index c) {
    const T* g = gout + c * OH * OW;
    T* dst = gin + c * H * W;
    for (Index oy = 0; oy < OH; ++oy) {
      const Lerp& ly = ty[static_cast<std::size_t>(oy)];
      T* r0 = dst + ly.i0 * W;
      T* r1 = dst + ly.i1 * W;
      const T wy0 = static_cast<T>(ly.w0), wy1 = static_cast<T>(ly.w1);
      for (Index ox = 0; ox < OW; ++ox) {
        const Lerp& lx = tx[static_cast<std::size_t>(ox)];
        const T wx0 = static_cast<T>(lx.w0), wx1 = static_cast<T>(lx.w1);
        const T gv = g[oy * OW + ox];
        r0[lx.i0] += wy0 * wx0 * gv;
        r0[lx.i1] += wy0 * wx1 * gv;
        r1[lx.i0] += wy1 * wx0 * gv;
        r1[lx.i1] += wy1 * wx1 * gv;
      }
    }
  });
}

template <class T>
void deform_fwd(Exec ex, const DeformGeom& g, const T* value, const T* loc, const T* attn,
                T* out) {
  const Index D = g.n_heads * g.head_dim, L = g.n_levels(), K = g.n_points;
  for_range(ex, g.n_query, [&, value, loc, attn, out](Index n) {
    T* o = out + n * D;
    std::fill(o, o + D, T(0));
    for (Index h = 0; h < g.n_heads; ++h) {
      T* oh = o + h * g.head_dim;
      for (Index l = 0; l < L; ++l) {
        const LevelGeom& lv = g.levels[static_cast<std::size_t>(l)];
        for (Index k = 0; k < K; ++k) {
          const Index s = ((n * g.n_heads + h) * L + l) * K + k;
          const auto cr = corners(loc[2 * s], loc[2 * s + 1], lv.height, lv.width);
          const T a = attn[s];
          for (int q = 0; q < 4; ++q) {
            if (!cr.valid[q] || cr.weight[q] == T(0)) continue;
            const T coef = a * cr.weight[q];
            const T* v = value + (lv.start + cr.offset[q]) * D + h * g.head_dim;
            for (Index c = 0; c < g.head_dim; ++c) oh[c] += coef * v[c];
          }
        }
      }
    }
  });
}

template <class T>
void deform_bwd(Exec ex, const DeformGeom& g, const T* value, const T* loc, const T* attn,
                const T* gout, T* dvalue, T* dloc, T* dattn) {
  const Index D = g.n_heads * g.head_dim, L = g.n_levels(), K = g.n_points;
  if (dvalue != nullptr) {
    // Heads own disjoint channel slices of dvalue.
    for_range(ex, g.n_heads, [&, loc, attn, gout, dvalue](Index h) {
      for (Index n = 0; n < g.n_query; ++n) {
        const T* gh = gout + n * D + h * g.head_dim;
        for (Index l = 0; l < L; ++l) {
          const LevelGeom& lv = g.levels[static_cast<std::size_t>(l)];
          for (Index k = 0; k < K; ++k) {
            const Index s = ((n * g.n_heads + h) * L + l) * K + k;
            const auto cr = corners(loc[2 * s], loc[2 * s + 1], lv.height, lv.width);
            const T a = attn[s];
            for (int q = 0; q < 4; ++q) {
              if (!cr.valid[q]) continue;
              const T coef = a * cr.weight[q];
              T* dv = dvalue + (lv.start + cr.offset[q]) * D + h * g.head_dim;
              for (Index c = 0; c < g.head_dim; ++c) dv[c] += coef * gh[c];
            }
          }
        }
      }
    });
  }
  for_range(ex, g.n_query, [&, value, loc, attn, gout, dloc, dattn](Index n) {
    for (Index h = 0; h < g.n_heads; ++h) {
      const T* gh = gout + n * D + h * g.head_dim;
      for (Index l = 0; l < L; ++l) {
        const LevelGeom& lv = g.levels[static_cast<std::size_t>(l)];
        for (Index k = 0; k < K; ++k) {
          const Index s = ((n * g.n_heads + h) * L + l) * K + k;
          const auto cr = corners(loc[2 * s], loc[2 * s + 1], lv.height, lv.width);
          const T* v[4];
          for (int q = 0; q < 4; ++q) {
            v[q] = cr.valid[q] ? value + (lv.start + cr.offset[q]) * D + h * g.head_dim : nullptr;
          }
          T samp = T(0), gx = T(0), gy = T(0);
          for (Index c = 0; c < g.head_dim; ++c) {
            T vc[4];
            for (int q = 0; q < 4; ++q) vc[q] = v[q] != nullptr ? v[q][c] : T(0);
            const T s_c = cr.weight[0] * vc[0] + cr.weight[1] * vc[1] + cr.weight[2] * vc[2] +
                          cr.weight[3] * vc[3];
            samp += gh[c] * s_c;
            gx += gh[c] * ((T(1) - cr.fy) * (vc[1] - vc[0]) + cr.fy * (vc[3] - vc[2]));
            gy += gh[c] * ((T(1) - cr.fx) * (vc[2] - vc[0]) + cr.fx * (vc[3] - vc[1]));
          }
          dattn[s] += samp;
          dloc[2 * s] += attn[s] * gx;
          dloc[2 * s + 1] += attn[s] * gy;
        }
      }
    }
  });
}

#define NQ_INSTANTIATE_KERNELS(T)                                                              \
  template void gemm_nn<T>(Exec, Index, Index, Index, const T*, const T*, T*);                 \
  template void gemm_tn<T>(Exec, Index, Index, Index, const T*, const T*, T*);                 \
  template void gemm_nt<T>(Exec, Index, Index, Index, const T*, const T*, T*);                 \
  template void transpose<T>(Exec, Index, Index, const T*, T*);                                \
  template void im2col<T>(Exec, const ConvGeom&, const T*, T*);                                \
  template void col2im_add<T>(Exec, const ConvGeom&, const T*, T*);                            \
  template void grid_sample_fwd<T>(Exec, Index, Index, Index, const T*, Index, const T*, T*);  \
  template void grid_sample_bwd<T>(Exec, Index, Index, Index, const T*, Index, const T*,       \
                                   const T*, T*, T*);                                          \
  template void resize_fwd<T>(Exec, Index, Index, Index, Index, Index, const T*, T*);          \
  template void resize_bwd<T>(Exec, Index, Index, Index, Index, Index, const T*, T*);          \
  template void deform_fwd<T>(Exec, const DeformGeom&, const T*, const T*, const T*, T*);      \
  template void deform_bwd<T>(Exec, const DeformGeom&, const T*, const T*, const T*, const T*, \
                              T*, T*, T*);

NQ_INSTANTIATE_KERNELS(float)
NQ_INSTANTIATE_KERNELS(double)

}  // namespace nq::kernels
