#pragma once

// Multi-scale deformable attention with an offset-adjustment stage.
//
// Each query samples n_points locations per head per level. A location is the
// query's reference point in level texel coordinates plus a learned offset in
// level pixels; the raw offset from the offset head is first passed through
// adjust_offsets(), which is where the "query nearby" strategies act:
//
//   clip_divide     vectors longer than threshold_px are divided by divisor
//   squash          squash_scaled with scale_c = 1
//   squash_scaled   sigmoid_symmetric: c * (2 sigmoid(d) - 1) per component
//                   softmax_sign: sign(d) * c * softmax_K(|d|) per axis

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "nearquery/nn.hpp"
#include "nearquery/tensor.hpp"

namespace nq {

enum class OffsetStrategy { none, clip_divide, squash, squash_scaled };
enum class SquashKind { softmax_sign, sigmoid_symmetric };

std::string to_string(OffsetStrategy s);
std::string to_string(SquashKind k);
OffsetStrategy parse_offset_strategy(const std::string& s);
SquashKind parse_squash_kind(const std::string& s);

struct OffsetAdjustConfig {
  OffsetStrategy strategy = OffsetStrategy::none;
  SquashKind squash_kind = SquashKind::sigmoid_symmetric;
  double threshold_px = 4.0;  // clip_divide
  double divisor = 2.0;       // clip_divide, must exceed 1
  double scale_c = 2.0;       // squash_scaled

  void validate() const;
  // Scale actually applied by the squash strategies.
  double effective_scale() const { return strategy == OffsetStrategy::squash ? 1.0 : scale_c; }
  // Short label such as "squash_scaled/sigmoid_symmetric".
  std::string label() const;
};

struct LevelShape {
  Index height = 0, width = 0;
  bool operator==(const LevelShape&) const = default;
};

struct ReferencePoints {
  std::vector<std::array<double, 2>> points;  // normalized (x, y), level-major
  std::vector<LevelShape> levels;
  std::vector<Index> level_starts;
  Index size() const { return static_cast<Index>(points.size()); }
};

// Cell-centre references ((j + 0.5) / W, (i + 0.5) / H) for every level.
ReferencePoints make_reference_points(const std::vector<LevelShape>& levels);

template <class T>
struct DeformAttnParams {
  Index d_model = 0, n_heads = 0, n_levels = 0, n_points = 0;
  Linear<T> value_proj;
  Linear<T> output_proj;
  std::vector<Linear<T>> offset_head;  // 2 layers: linear-relu-linear; 1 layer: plain linear
  Linear<T> weight_head;

  Index head_dim() const { return d_model / n_heads; }
  void validate() const;

  // Registers all tensors under prefix. The last offset layer starts with zero
  // weights and a bias that fans points out radially per head, so sampling
  // begins spread around the reference instead of collapsed onto it.
  static DeformAttnParams create(ParamStore<T>& ps, const std::string& prefix, Index d_model,
                                 Index n_heads, Index n_levels, Index n_points, bool deep_offsets);
};

// Intermediate values captured for inspection; all optional.
template <class T>
struct DeformAttnProbe {
  Tensor<T> raw_offsets;       // [N x heads x L x K x 2]
  Tensor<T> adjusted_offsets;  // same
  Tensor<T> locations;         // same, level texel coordinates
  Tensor<T> attention;         // [N x heads x L x K]
};

// Raw offsets in level-pixel units, [N x heads x L x K x 2].
template <class T>
Tensor<T> compute_offsets(const Tensor<T>& queries, const DeformAttnParams<T>& params);

// Applies the configured strategy; shape [..., K, 2]. Strategy none returns
// the input tensor itself.
template <class T>
Tensor<T> adjust_offsets(const Tensor<T>& raw, const OffsetAdjustConfig& cfg);

// Differentiable sampling core: value [T x D] grouped by level, loc
// [N x heads x L x K x 2], attn [N x heads x L x K] -> [N x D].
template <class T>
Tensor<T> deform_sample(const Tensor<T>& value, const std::vector<LevelShape>& levels,
                        const Tensor<T>& loc, const Tensor<T>& attn, Index n_heads);

// queries [N x d], value_tokens [sum H_l W_l x d] laid out like refs.levels.
template <class T>
Tensor<T> deform_attn_forward(const Tensor<T>& queries, const Tensor<T>& value_tokens,
                              const ReferencePoints& refs, const OffsetAdjustConfig& cfg,
                              const DeformAttnParams<T>& params,
                              DeformAttnProbe<T>* probe = nullptr);

struct SpreadRow {
  Index level = 0;
  std::string strategy;
  double mean_norm = 0, median_norm = 0, max_norm = 0, frac_within_1px = 0;
};

struct SpreadReport {
  std::vector<SpreadRow> rows;
};

// Per-level statistics of offset norms in a [N x heads x L x K x 2] tensor.
SpreadReport spread_of_offsets(const Tensor<double>& offsets, const std::string& strategy);

// Model mode: n_draws query rows drawn with replacement (seeded) are pushed
// through the offset head and the adjustment.
template <class T>
SpreadReport sampling_spread_stats(const Tensor<T>& queries, const OffsetAdjustConfig& cfg,
                                   const DeformAttnParams<T>& params, Index n_draws,
                                   std::uint64_t seed);

// Synthetic mode: raw offsets ~ Normal(0, sigma^2) per component, n_draws
// groups of n_points vectors per level.
SpreadReport synthetic_spread_stats(const OffsetAdjustConfig& cfg, Index n_levels, Index n_points,
                                    double sigma, Index n_draws, std::uint64_t seed);

// Raw draws used by synthetic_spread_stats, [n_draws x 1 x n_levels x n_points x 2].
Tensor<double> synthetic_raw_offsets(Index n_levels, Index n_points, double sigma, Index n_draws,
                                     std::uint64_t seed);

void write_spread_csv(const SpreadReport& report, const std::string& path);

}  // namespace nq
