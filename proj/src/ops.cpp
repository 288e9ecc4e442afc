#include "nearquery/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "nearquery/kernels.hpp"

namespace nq {

namespace {

using kernels::current_exec;

template <class T>
using NodeT = detail::Node<T>;

// Gradient buffer of input i, or null when that input does not need one.
template <class T>
T* grad_ptr(NodeT<T>& self, std::size_t i) {
  auto& in = *self.inputs[i];
  return in.requires_grad ? in.grad_buffer().data() : nullptr;
}

template <class T>
const T* value_ptr(const NodeT<T>& self, std::size_t i) {
  return self.inputs[i]->value.data();
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

template <class T>
void require_rank(const char* op, const Tensor<T>& t, int r) {
  if (t.rank() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(t.shape()));
  }
}

template <class T, class F, class G>
Tensor<T> unary(const Tensor<T>& a, const char* op, F&& fwd, G&& dfdx) {
  std::vector<T> out(a.data().size());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return Tensor<T>::make_result(a.shape(), std::move(out), op, {&a}, [dfdx](NodeT<T>& self) {
    T* ga = grad_ptr(self, 0);
    if (!ga) return;
    const T* x = value_ptr(self, 0);
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      ga[i] += self.grad[i] * dfdx(x[i], self.value[i]);
    }
  });
}

}  // namespace

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail("add", a.shape(), b.shape());
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), "add", {&a, &b}, [](NodeT<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (T* g = grad_ptr(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail("sub", a.shape(), b.shape());
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), "sub", {&a, &b}, [](NodeT<T>& self) {
    if (T* g = grad_ptr(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (T* g = grad_ptr(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail("mul", a.shape(), b.shape());
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), "mul", {&a, &b}, [](NodeT<T>& self) {
    const T* av = value_ptr(self, 0);
    const T* bv = value_ptr(self, 1);
    if (T* g = grad_ptr(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (T* g = grad_ptr(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return unary(
      a, "scale", [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary(
      a, "relu", [](T x) { return x < T(0) ? T(0) : x; },  // NaN passes through
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary(
      a, "sigmoid",
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (b.rank() != 1 || x.rank() < 1 || x.dim(-1) != b.dim(0)) {
    shape_fail("add_bias", x.shape(), b.shape());
  }
  const Index C = b.dim(0);
  std::vector<T> out(x.data().begin(), x.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % static_cast<std::size_t>(C)];
  return Tensor<T>::make_result(x.shape(), std::move(out), "add_bias", {&x, &b},
                                [C](NodeT<T>& self) {
                                  if (T* g = grad_ptr(self, 0)) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                                  }
                                  if (T* g = grad_ptr(self, 1)) {
                                    const std::size_t rows = self.grad.size() / static_cast<std::size_t>(C);
                                    for (std::size_t r = 0; r < rows; ++r) {
                                      const T* gr = self.grad.data() + r * static_cast<std::size_t>(C);
                                      for (Index c = 0; c < C; ++c) g[c] += gr[c];
                                    }
                                  }
                                });
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_fail("matmul", a.shape(), b.shape());
  }
  const Index M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(M * N), T(0));
  kernels::gemm_nn(current_exec(), M, K, N, a.data().data(), b.data().data(), out.data());
  return Tensor<T>::make_result({M, N}, std::move(out), "matmul", {&a, &b},
                                [M, K, N](NodeT<T>& self) {
                                  const auto ex = current_exec();
                                  if (T* ga = grad_ptr(self, 0)) {
                                    kernels::gemm_nt(ex, M, N, K, self.grad.data(), value_ptr(self, 1), ga);
                                  }
                                  if (T* gb = grad_ptr(self, 1)) {
                                    kernels::gemm_tn(ex, K, M, N, value_ptr(self, 0), self.grad.data(), gb);
                                  }
                                });
}

template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    shape_fail("matmul_nt", a.shape(), b.shape());
  }
  const Index M = a.dim(0), K = a.dim(1), N = b.dim(0);
  std::vector<T> out(static_cast<std::size_t>(M * N), T(0));
  kernels::gemm_nt(current_exec(), M, K, N, a.data().data(), b.data().data(), out.data());
  return Tensor<T>::make_result({M, N}, std::move(out), "matmul_nt", {&a, &b},
                                [M, K, N](NodeT<T>& self) {
                                  const auto ex = current_exec();
                                  // dA = G B, dB = G^T A
                                  if (T* ga = grad_ptr(self, 0)) {
                                    kernels::gemm_nn(ex, M, N, K, self.grad.data(), value_ptr(self, 1), ga);
                                  }
                                  if (T* gb = grad_ptr(self, 1)) {
                                    kernels::gemm_tn(ex, N, M, K, self.grad.data(), value_ptr(self, 0), gb);
                                  }
                                });
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0)) {
    shape_fail("linear", x.shape(), w.shape());
  }
  Tensor<T> y = matmul(x, w);
  return b.defined() ? add_bias(y, b) : y;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank("transpose", a, 2);
  const Index R = a.dim(0), C = a.dim(1);
  std::vector<T> out(a.data().size());
  kernels::transpose(current_exec(), R, C, a.data().data(), out.data());
  return Tensor<T>::make_result({C, R}, std::move(out), "transpose", {&a},
                                [R, C](NodeT<T>& self) {
                                  if (T* g = grad_ptr(self, 0)) {
                                    std::vector<T> tmp(self.grad.size());
                                    kernels::transpose(current_exec(), C, R, self.grad.data(), tmp.data());
                                    for (std::size_t i = 0; i < tmp.size(); ++i) g[i] += tmp[i];
                                  }
                                });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) shape_fail("reshape", a.shape(), shape);
  std::vector<T> out(a.data().begin(), a.data().end());
  return Tensor<T>::make_result(std::move(shape), std::move(out), "reshape", {&a},
                                [](NodeT<T>& self) {
                                  if (T* g = grad_ptr(self, 0)) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                                  }
                                });
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  for (const auto& p : parts) {
    if (p.rank() < 1) throw ShapeError("concat_rows: rank-0 input");
  }
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  Index rows = 0;
  std::vector<T> out;
  for (const auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (p.rank() < 1 || t != tail) shape_fail("concat_rows", parts[0].shape(), p.shape());
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return Tensor<T>::make_result(shape, std::move(out), "concat_rows", parts, [](NodeT<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      const std::size_t n = self.inputs[k]->value.size();
      if (T* g = grad_ptr(self, k)) {
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, Index start, Index count) {
  if (a.rank() < 1 || start < 0 || count < 0 || start + count > a.dim(0)) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of range for " + shape_str(a.shape()));
  }
  const Index width = a.dim(0) == 0 ? 0 : a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = count;
  std::vector<T> out(a.data().begin() + start * width, a.data().begin() + (start + count) * width);
  return Tensor<T>::make_result(shape, std::move(out), "slice_rows", {&a},
                                [start, width](NodeT<T>& self) {
                                  if (T* g = grad_ptr(self, 0)) {
                                    g += start * width;
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                                  }
                                });
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<Index>& rows) {
  if (a.rank() < 1) throw ShapeError("gather_rows: rank-0 input");
  const Index R = a.dim(0);
  const Index width = R == 0 ? 0 : a.numel() / R;
  for (Index r : rows) {
    if (r < 0 || r >= R) {
      throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range for " +
                       shape_str(a.shape()));
    }
  }
  Shape shape = a.shape();
  shape[0] = static_cast<Index>(rows.size());
  std::vector<T> out;
  out.reserve(rows.size() * static_cast<std::size_t>(width));
  for (Index r : rows) {
    out.insert(out.end(), a.data().begin() + r * width, a.data().begin() + (r + 1) * width);
  }
  return Tensor<T>::make_result(shape, std::move(out), "gather_rows", {&a},
                                [rows, width](NodeT<T>& self) {
                                  if (T* g = grad_ptr(self, 0)) {
                                    for (std::size_t k = 0; k < rows.size(); ++k) {
                                      const T* src = self.grad.data() + k * static_cast<std::size_t>(width);
                                      T* dst = g + rows[k] * width;
                                      for (Index i = 0; i < width; ++i) dst[i] += src[i];
                                    }
                                  }
                                });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, Index start, Index count) {
  require_rank("slice_cols", a, 2);
  const Index R = a.dim(0), C = a.dim(1);
  if (start < 0 || count < 0 || start + count > C) {
    throw ShapeError("slice_cols: columns out of range for " + shape_str(a.shape()));
  }
  std::vector<T> out(static_cast<std::size_t>(R * count));
  const auto in = a.data();
  for (Index r = 0; r < R; ++r) {
    std::copy(in.begin() + r * C + start, in.begin() + r * C + start + count,
              out.begin() + r * count);
  }
  return Tensor<T>::make_result({R, count}, std::move(out), "slice_cols", {&a},
                                [R, C, start, count](NodeT<T>& self) {
                                  if (T* g = grad_ptr(self, 0)) {
                                    for (Index r = 0; r < R; ++r) {
                                      for (Index c = 0; c < count; ++c) {
                                        g[r * C + start + c] += self.grad[static_cast<std::size_t>(r * count + c)];
                                      }
                                    }
                                  }
                                });
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Index R = parts[0].dim(0);
  Index C = 0;
  std::vector<Index> widths;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != R) shape_fail("concat_cols", parts[0].shape(), p.shape());
    widths.push_back(p.dim(1));
    C += p.dim(1);
  }
  std::vector<T> out(static_cast<std::size_t>(R * C));
  Index off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto in = parts[k].data();
    const Index w = widths[k];
    for (Index r = 0; r < R; ++r) {
      std::copy(in.begin() + r * w, in.begin() + (r + 1) * w, out.begin() + r * C + off);
    }
    off += w;
  }
  return Tensor<T>::make_result({R, C}, std::move(out), "concat_cols", parts,
                                [R, C, widths](NodeT<T>& self) {
                                  Index off = 0;
                                  for (std::size_t k = 0; k < widths.size(); ++k) {
                                    const Index w = widths[k];
                                    if (T* g = grad_ptr(self, k)) {
                                      for (Index r = 0; r < R; ++r) {
                                        for (Index c = 0; c < w; ++c) g[r * w + c] += self.grad[static_cast<std::size_t>(r * C + off + c)];
                                      }
                                    }
                                    off += w;
                                  }
                                });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  return Tensor<T>::make_result({}, {s}, "sum", {&a}, [](NodeT<T>& self) {
    if (T* g = grad_ptr(self, 0)) {
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
  }
  Index outer = 1, inner = 1;
  const Index n = x.shape()[static_cast<std::size_t>(axis)];
  for (int i = 0; i < axis; ++i) outer *= x.shape()[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= x.shape()[static_cast<std::size_t>(i)];
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * n * inner + i;
      T m = -std::numeric_limits<T>::infinity();
      for (Index k = 0; k < n; ++k) {
        const T v = in[static_cast<std::size_t>(base + k * inner)];
        if (std::isnan(v)) throw NumericError("softmax: NaN input");
        m = std::max(m, v);
      }
      if (!std::isfinite(m)) throw NumericError("softmax: no finite entry along axis");
      T s = T(0);
      for (Index k = 0; k < n; ++k) {
        const std::size_t idx = static_cast<std::size_t>(base + k * inner);
        out[idx] = std::exp(in[idx] - m);
        s += out[idx];
      }
      for (Index k = 0; k < n; ++k) out[static_cast<std::size_t>(base + k * inner)] /= s;
    }
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), "softmax", {&x},
                                [outer, inner, n](NodeT<T>& self) {
                                  T* g = grad_ptr(self, 0);
                                  if (!g) return;
                                  const T* y = self.value.data();
                                  const T* gy = self.grad.data();
                                  for (Index o = 0; o < outer; ++o) {
                                    for (Index i = 0; i < inner; ++i) {
                                      const Index base = o * n * inner + i;
                                      T dot = T(0);
                                      for (Index k = 0; k < n; ++k) dot += gy[base + k * inner] * y[base + k * inner];
                                      for (Index k = 0; k < n; ++k) {
                                        const Index idx = base + k * inner;
                                        g[idx] += y[idx] * (gy[idx] - dot);
                                      }
                                    }
                                  }
                                });
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require_rank("layer_norm", x, 2);
  const Index N = x.dim(0), C = x.dim(1);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    shape_fail("layer_norm", x.shape(), gamma.shape());
  }
  const auto in = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<T> xhat(in.size()), rstd(static_cast<std::size_t>(N)), out(in.size());
  for (Index r = 0; r < N; ++r) {
    const T* row = in.data() + r * C;
    T mu = T(0);
    for (Index c = 0; c < C; ++c) mu += row[c];
    mu /= static_cast<T>(C);
    T var = T(0);
    for (Index c = 0; c < C; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(C);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[static_cast<std::size_t>(r)] = rs;
    for (Index c = 0; c < C; ++c) {
      const std::size_t i = static_cast<std::size_t>(r * C + c);
      xhat[i] = (row[c] - mu) * rs;
      out[i] = xhat[i] * gv[static_cast<std::size_t>(c)] + bv[static_cast<std::size_t>(c)];
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), "layer_norm", {&x, &gamma, &beta},
      [N, C, xhat = std::move(xhat), rstd = std::move(rstd)](NodeT<T>& self) {
        const T* gy = self.grad.data();
        const T* gam = value_ptr(self, 1);
        T* gx = grad_ptr(self, 0);
        T* gg = grad_ptr(self, 1);
        T* gb = grad_ptr(self, 2);
        for (Index r = 0; r < N; ++r) {
          const T* gr = gy + r * C;
          const T* xh = xhat.data() + r * C;
          if (gg) for (Index c = 0; c < C; ++c) gg[c] += gr[c] * xh[c];
          if (gb) for (Index c = 0; c < C; ++c) gb[c] += gr[c];
          if (gx) {
            T m1 = T(0), m2 = T(0);
            for (Index c = 0; c < C; ++c) {
              const T d = gr[c] * gam[c];
              m1 += d;
              m2 += d * xh[c];
            }
            m1 /= static_cast<T>(C);
            m2 /= static_cast<T>(C);
            const T rs = rstd[static_cast<std::size_t>(r)];
            for (Index c = 0; c < C; ++c) {
              gx[r * C + c] += rs * (gr[c] * gam[c] - m1 - xh[c] * m2);
            }
          }
        }
      });
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Index stride,
                 Index pad) {
  require_rank("conv2d", x, 3);
  require_rank("conv2d", w, 4);
  const Index C = x.dim(0), O = w.dim(0), k = w.dim(2);
  if (w.dim(1) != C || w.dim(3) != k) shape_fail("conv2d", x.shape(), w.shape());
  if (b.defined() && b.shape() != Shape{O}) shape_fail("conv2d(bias)", w.shape(), b.shape());
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: stride must be >= 1 and pad >= 0");
  const kernels::ConvGeom geom{C, x.dim(1), x.dim(2), k, stride, pad};
  const Index OH = geom.out_h(), OW = geom.out_w();
  if (OH < 1 || OW < 1) shape_fail("conv2d", x.shape(), w.shape());
  const Index P = OH * OW, CKK = C * k * k;
  const auto ex = current_exec();
  std::vector<T> col(static_cast<std::size_t>(CKK * P));
  kernels::im2col(ex, geom, x.data().data(), col.data());
  std::vector<T> out(static_cast<std::size_t>(O * P), T(0));
  if (b.defined()) {
    for (Index o = 0; o < O; ++o) std::fill_n(out.begin() + o * P, P, b.data()[static_cast<std::size_t>(o)]);
  }
  kernels::gemm_nn(ex, O, CKK, P, w.data().data(), col.data(), out.data());
  const bool has_bias = b.defined();
  std::vector<Tensor<T>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return Tensor<T>::make_result(
      {O, OH, OW}, std::move(out), "conv2d", inputs,
      [geom, O, P, CKK, has_bias, col = std::move(col)](NodeT<T>& self) {
        const auto ex = current_exec();
        const T* gy = self.grad.data();
        if (T* gw = grad_ptr(self, 1)) kernels::gemm_nt(ex, O, P, CKK, gy, col.data(), gw);
        if (has_bias) {
          if (T* gb = grad_ptr(self, 2)) {
            for (Index o = 0; o < O; ++o) {
              T s = T(0);
              for (Index p = 0; p < P; ++p) s += gy[o * P + p];
              gb[o] += s;
            }
          }
        }
        if (T* gx = grad_ptr(self, 0)) {
          std::vector<T> dcol(static_cast<std::size_t>(CKK * P), T(0));
          kernels::gemm_tn(ex, CKK, O, P, value_ptr(self, 1), gy, dcol.data());
          kernels::col2im_add(ex, geom, dcol.data(), gx);
        }
      });
}

template <class T>
Tensor<T> grid_sample_bilinear(const Tensor<T>& map, const Tensor<T>& points) {
  require_rank("grid_sample_bilinear", map, 3);
  if (points.rank() != 2 || points.dim(1) != 2) {
    shape_fail("grid_sample_bilinear", map.shape(), points.shape());
  }
  for (T v : points.data()) {
    if (!std::isfinite(v)) throw NumericError("grid_sample_bilinear: non-finite coordinate");
  }
  const Index C = map.dim(0), H = map.dim(1), W = map.dim(2), N = points.dim(0);
  std::vector<T> out(static_cast<std::size_t>(N * C));
  kernels::grid_sample_fwd(current_exec(), C, H, W, map.data().data(), N, points.data().data(),
                           out.data());
  return Tensor<T>::make_result({N, C}, std::move(out), "grid_sample_bilinear", {&map, &points},
                                [C, H, W, N](NodeT<T>& self) {
                                  kernels::grid_sample_bwd(current_exec(), C, H, W, value_ptr(self, 0), N,
                                                           value_ptr(self, 1), self.grad.data(),
                                                           grad_ptr(self, 0), grad_ptr(self, 1));
                                });
}

template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& map, Index out_h, Index out_w) {
  require_rank("resize_bilinear", map, 3);
  if (out_h < 1 || out_w < 1) {
    throw ShapeError("resize_bilinear: target size " + std::to_string(out_h) + "x" +
                     std::to_string(out_w) + " must be positive");
  }
  const Index C = map.dim(0), H = map.dim(1), W = map.dim(2);
  std::vector<T> out(static_cast<std::size_t>(C * out_h * out_w));
  kernels::resize_fwd(current_exec(), C, H, W, out_h, out_w, map.data().data(), out.data());
  return Tensor<T>::make_result({C, out_h, out_w}, std::move(out), "resize_bilinear", {&map},
                                [C, H, W, out_h, out_w](NodeT<T>& self) {
                                  if (T* g = grad_ptr(self, 0)) {
                                    kernels::resize_bwd(current_exec(), C, H, W, out_h, out_w,
                                                        self.grad.data(), g);
                                  }
                                });
}

template <class T>
Tensor<T> map_to_tokens(const Tensor<T>& map) {
  require_rank("map_to_tokens", map, 3);
  return transpose(reshape(map, {map.dim(0), map.dim(1) * map.dim(2)}));
}

template <class T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, Index h, Index w) {
  require_rank("tokens_to_map", tokens, 2);
  if (tokens.dim(0) != h * w) shape_fail("tokens_to_map", tokens.shape(), {h, w});
  return reshape(transpose(tokens), {tokens.dim(1), h, w});
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                        const std::vector<T>& class_weights) {
  require_rank("cross_entropy", logits, 2);
  const Index N = logits.dim(0), C = logits.dim(1);
  if (static_cast<Index>(targets.size()) != N) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  if (!class_weights.empty() && static_cast<Index>(class_weights.size()) != C) {
    throw ShapeError("cross_entropy: class weight count does not match " +
                     shape_str(logits.shape()));
  }
  for (int t : targets) {
    if (t < 0 || t >= C) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                              std::to_string(C) + ")");
    }
  }
  const auto x = logits.data();
  std::vector<T> prob(x.size());
  T num = T(0), den = T(0);
  for (Index i = 0; i < N; ++i) {
    const T* row = x.data() + i * C;
    T m = row[0];
    for (Index c = 1; c < C; ++c) m = std::max(m, row[c]);
    T s = T(0);
    for (Index c = 0; c < C; ++c) s += std::exp(row[c] - m);
    const T lse = m + std::log(s);
    for (Index c = 0; c < C; ++c) prob[static_cast<std::size_t>(i * C + c)] = std::exp(row[c] - lse);
    const int t = targets[static_cast<std::size_t>(i)];
    const T wt = class_weights.empty() ? T(1) : class_weights[static_cast<std::size_t>(t)];
    num += wt * (lse - row[t]);
    den += wt;
  }
  const T loss = den > T(0) ? num / den : T(0);
  return Tensor<T>::make_result(
      {}, {loss}, "cross_entropy", {&logits},
      [N, C, den, targets, class_weights, prob = std::move(prob)](NodeT<T>& self) {
        T* g = grad_ptr(self, 0);
        if (!g || den <= T(0)) return;
        const T go = self.grad[0] / den;
        for (Index i = 0; i < N; ++i) {
          const int t = targets[static_cast<std::size_t>(i)];
          const T wt = class_weights.empty() ? T(1) : class_weights[static_cast<std::size_t>(t)];
          if (wt == T(0)) continue;
          for (Index c = 0; c < C; ++c) {
            const std::size_t idx = static_cast<std::size_t>(i * C + c);
            g[idx] += go * wt * (prob[idx] - (c == t ? T(1) : T(0)));
          }
        }
      });
}

template <class T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.shape() != targets.shape()) {
    shape_fail("bce_with_logits", logits.shape(), targets.shape());
  }
  if (logits.numel() == 0) throw ShapeError("bce_with_logits: empty input");
  const auto x = logits.data();
  const auto t = targets.data();
  T s = T(0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    s += std::max(x[i], T(0)) - x[i] * t[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  const T n = static_cast<T>(x.size());
  return Tensor<T>::make_result({}, {s / n}, "bce_with_logits", {&logits, &targets},
                                [n](NodeT<T>& self) {
                                  T* g = grad_ptr(self, 0);
                                  if (!g) return;
                                  const T* xv = value_ptr(self, 0);
                                  const T* tv = value_ptr(self, 1);
                                  const T go = self.grad[0] / n;
                                  const std::size_t count = self.inputs[0]->value.size();
                                  for (std::size_t i = 0; i < count; ++i) {
                                    const T x = xv[i];
                                    const T sig = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                                                            : std::exp(x) / (T(1) + std::exp(x));
                                    g[i] += go * (sig - tv[i]);
                                  }
                                });
}

template <class T>
Tensor<T> dice_loss_rows(const Tensor<T>& prob, const Tensor<T>& target, T eps) {
  require_rank("dice_loss_rows", prob, 2);
  if (prob.shape() != target.shape()) shape_fail("dice_loss_rows", prob.shape(), target.shape());
  const Index R = prob.dim(0), P = prob.dim(1);
  if (R == 0) throw ShapeError("dice_loss_rows: no rows");
  const auto p = prob.data();
  const auto t = target.data();
  std::vector<T> num(static_cast<std::size_t>(R)), den(static_cast<std::size_t>(R));
  T loss = T(0);
  for (Index r = 0; r < R; ++r) {
    T inter = T(0), sp = T(0), st = T(0);
    for (Index i = 0; i < P; ++i) {
      const std::size_t k = static_cast<std::size_t>(r * P + i);
      inter += p[k] * t[k];
      sp += p[k];
      st += t[k];
    }
    num[static_cast<std::size_t>(r)] = T(2) * inter + eps;
    den[static_cast<std::size_t>(r)] = sp + st + eps;
    loss += T(1) - num[static_cast<std::size_t>(r)] / den[static_cast<std::size_t>(r)];
  }
  loss /= static_cast<T>(R);
  return Tensor<T>::make_result(
      {}, {loss}, "dice_loss_rows", {&prob, &target},
      [R, P, num = std::move(num), den = std::move(den)](NodeT<T>& self) {
        T* g = grad_ptr(self, 0);
        if (!g) return;
        const T* tv = value_ptr(self, 1);
        const T go = self.grad[0] / static_cast<T>(R);
        for (Index r = 0; r < R; ++r) {
          const T nu = num[static_cast<std::size_t>(r)], de = den[static_cast<std::size_t>(r)];
          for (Index i = 0; i < P; ++i) {
            const std::size_t k = static_cast<std::size_t>(r * P + i);
            g[k] -= go * (T(2) * tv[k] * de - nu) / (de * de);
          }
        }
      });
}

template <class T>
Tensor<T> dice_loss(const Tensor<T>& prob, const Tensor<T>& target, T eps) {
  if (prob.shape() != target.shape()) shape_fail("dice_loss", prob.shape(), target.shape());
  return dice_loss_rows(reshape(prob, {1, prob.numel()}), reshape(target, {1, target.numel()}),
                        eps);
}

#define NQ_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> relu(const Tensor<T>&);                                                    \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                 \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> transpose(const Tensor<T>&);                                               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                                \
  template Tensor<T> slice_rows(const Tensor<T>&, Index, Index);                                \
  template Tensor<T> gather_rows(const Tensor<T>&, const std::vector<Index>&);                  \
  template Tensor<T> slice_cols(const Tensor<T>&, Index, Index);                                \
  template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                                \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                    \
  template Tensor<T> softmax(const Tensor<T>&, int);                                            \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Index, Index);\
  template Tensor<T> grid_sample_bilinear(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> resize_bilinear(const Tensor<T>&, Index, Index);                           \
  template Tensor<T> map_to_tokens(const Tensor<T>&);                                           \
  template Tensor<T> tokens_to_map(const Tensor<T>&, Index, Index);                             \
  template Tensor<T> cross_entropy(const Tensor<T>&, const std::vector<int>&,                   \
                                   const std::vector<T>&);                                      \
  template Tensor<T> bce_with_logits(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> dice_loss(const Tensor<T>&, const Tensor<T>&, T);                          \
  template Tensor<T> dice_loss_rows(const Tensor<T>&, const Tensor<T>&, T);

NQ_INSTANTIATE_OPS(float)
NQ_INSTANTIATE_OPS(double)

}  // namespace nq
