#pragma once

// Differentiable tensor ops. Each records a backward closure when any input
// requires grad; shape violations raise ShapeError naming the op and shapes.

#include <vector>

#include "nearquery/tensor.hpp"

namespace nq {

// Elementwise, identical shapes.
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> scale(const Tensor<T>& a, T s);
template <class T> Tensor<T> relu(const Tensor<T>& a);
template <class T> Tensor<T> sigmoid(const Tensor<T>& a);

// x[..., C] + b[C] broadcast over leading axes.
template <class T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b);

// [M x K] * [K x N]
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// [M x K] * [N x K]^T
template <class T> Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
// x[N x in] * w[in x out] (+ b[out] when defined)
template <class T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <class T> Tensor<T> transpose(const Tensor<T>& a);
template <class T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);

// Row ops on the leading axis; columns are the flattened trailing axes.
template <class T> Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <class T> Tensor<T> slice_rows(const Tensor<T>& a, Index start, Index count);
template <class T> Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<Index>& rows);
// Column ops on 2-D tensors.
template <class T> Tensor<T> slice_cols(const Tensor<T>& a, Index start, Index count);
template <class T> Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);

template <class T> Tensor<T> sum(const Tensor<T>& a);
template <class T> Tensor<T> mean(const Tensor<T>& a);

// Max-subtracted softmax along axis. NaN input raises NumericError.
template <class T> Tensor<T> softmax(const Tensor<T>& x, int axis);

// Row-wise layer normalization of [N x C].
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

// x[C x H x W], w[O x C x k x k], b[O] (may be undefined) -> [O x OH x OW]
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Index stride,
                 Index pad);

// map[C x H x W], points[N x 2] as (x, y) texel coordinates -> [N x C].
// Zero outside the map; differentiable in map values and coordinates.
template <class T>
Tensor<T> grid_sample_bilinear(const Tensor<T>& map, const Tensor<T>& points);

// Align-corners-false bilinear resize; same size is a bitwise copy.
template <class T> Tensor<T> resize_bilinear(const Tensor<T>& map, Index out_h, Index out_w);

// [HW x C] tokens <-> [C x H x W] maps.
template <class T> Tensor<T> map_to_tokens(const Tensor<T>& map);
template <class T> Tensor<T> tokens_to_map(const Tensor<T>& tokens, Index h, Index w);

// Weighted mean of -log softmax(logits)[target]. Empty weights mean all ones.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                        const std::vector<T>& class_weights = {});

// Mean binary cross-entropy with logits; targets are treated as constants.
template <class T> Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets);

// 1 - (2 sum(p t) + eps) / (sum p + sum t + eps) over all elements.
template <class T> Tensor<T> dice_loss(const Tensor<T>& prob, const Tensor<T>& target, T eps = T(1));

// Mean over rows of the per-row dice loss; prob and target are [R x P].
template <class T>
Tensor<T> dice_loss_rows(const Tensor<T>& prob, const Tensor<T>& target, T eps = T(1));

}  // namespace nq
