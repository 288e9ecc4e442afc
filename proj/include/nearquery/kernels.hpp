#pragma once

// Raw numeric kernels behind the differentiable ops.
//
// Every kernel exists in two executions that share one loop body:
//   Exec::serial    the reference implementation
//   Exec::parallel  OpenMP over an axis whose outputs are independent
// Reductions always run in the same order on both paths, so results are
// bitwise identical. tests/test_kernels.cpp checks this and bench/ times it.

#include <span>

#include "nearquery/tensor.hpp"

namespace nq::kernels {

enum class Exec { serial, parallel };

// Exec selected by the global kernel thread setting.
Exec current_exec();

// C[M x N] += A[M x K] * B[K x N]
template <class T>
void gemm_nn(Exec ex, Index M, Index K, Index N, const T* A, const T* B, T* C);

// C[M x N] += A^T * B with A stored [K x M], B [K x N]
template <class T>
void gemm_tn(Exec ex, Index M, Index K, Index N, const T* A, const T* B, T* C);

// C[M x N] += A * B^T with A [M x K], B stored [N x K]
template <class T>
void gemm_nt(Exec ex, Index M, Index K, Index N, const T* A, const T* B, T* C);

// out[cols x rows] = in[rows x cols]^T
template <class T>
void transpose(Exec ex, Index rows, Index cols, const T* in, T* out);

struct ConvGeom {
  Index channels, height, width;
  Index kernel, stride, pad;
  Index out_h() const { return (height + 2 * pad - kernel) / stride + 1; }
  Index out_w() const { return (width + 2 * pad - kernel) / stride + 1; }
};

// col[(C*k*k) x (OH*OW)] from image [C x H x W], zero padded.
template <class T>
void im2col(Exec ex, const ConvGeom& g, const T* img, T* col);

// img += scatter of col; inverse layout of im2col.
template <class T>
void col2im_add(Exec ex, const ConvGeom& g, const T* col, T* img);

// Bilinear read of a [C x H x W] map at N continuous texel coordinates
// (x, y); texel (i, j) sits at x = j, y = i. Outside texels read as zero.
template <class T>
void grid_sample_fwd(Exec ex, Index C, Index H, Index W, const T* map, Index N, const T* pts,
                     T* out);

// dmap / dpts may be null. Both accumulate.
template <class T>
void grid_sample_bwd(Exec ex, Index C, Index H, Index W, const T* map, Index N, const T* pts,
                     const T* gout, T* dmap, T* dpts);

// Align-corners-false bilinear resize of [C x H x W] to [C x OH x OW].
template <class T>
void resize_fwd(Exec ex, Index C, Index H, Index W, Index OH, Index OW, const T* in, T* out);

template <class T>
void resize_bwd(Exec ex, Index C, Index H, Index W, Index OH, Index OW, const T* gout, T* gin);

struct LevelGeom {
  Index height, width, start;  // start = first token row of the level
};

struct DeformGeom {
  Index n_query, n_heads, head_dim, n_points;
  std::span<const LevelGeom> levels;
  Index n_levels() const { return static_cast<Index>(levels.size()); }
};

// Multi-scale deformable sampling core.
//   value [T_total x (heads*head_dim)], token rows grouped by level
//   loc   [N x heads x L x K x 2] texel coordinates within each level
//   attn  [N x heads x L x K]
//   out   [N x (heads*head_dim)] (overwritten)
template <class T>
void deform_fwd(Exec ex, const DeformGeom& g, const T* value, const T* loc, const T* attn, T* out);

// dvalue may be null. dloc / dattn accumulate.
template <class T>
void deform_bwd(Exec ex, const DeformGeom& g, const T* value, const T* loc, const T* attn,
                const T* gout, T* dvalue, T* dloc, T* dattn);

}  // namespace nq::kernels
