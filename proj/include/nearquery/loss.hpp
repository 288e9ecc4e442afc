#pragma once

// Set-prediction losses: query/target matching plus the weighted total over
// every prediction set and the auxiliary heads.

#include <cstdint>
#include <utility>
#include <vector>

#include "nearquery/model.hpp"
#include "nearquery/tensor.hpp"

namespace nq {

struct LossWeights {
  double cls = 2.0;
  double bce = 5.0;
  double dice = 5.0;
  double bls_a = 0.4;
  double bls_b = 0.4;
  double no_object = 0.1;

  void validate() const;
};

// Ground truth of one image. Each present foreground label value is one
// target; classifier index of label value c is c - 1.
struct SegTarget {
  Index height = 0, width = 0;
  Index n_classes = 0;
  std::vector<std::uint8_t> labels;  // H x W
  std::vector<int> classes;          // present label values, ascending

  Index size() const { return static_cast<Index>(classes.size()); }
};

SegTarget make_target(std::vector<std::uint8_t> labels, Index height, Index width, Index n_classes);

// Binary masks of the targets at h x w, area-averaged when h, w divide the
// label extents: n_targets x (h*w).
std::vector<double> target_masks(const SegTarget& t, Index h, Index w);

struct MatchResult {
  std::vector<std::pair<Index, Index>> assignment;  // (query, target), sorted by query
  double total_cost = 0;
};

// Q x n_targets matching cost at mask-logit resolution:
// cls * (-p_q(c)) + bce * BCE + dice * Dice.
template <class T>
std::vector<double> matching_cost(const Tensor<T>& class_logits, const Tensor<T>& mask_logits,
                                  const SegTarget& target, const LossWeights& w);

template <class T>
MatchResult hungarian_match(const Tensor<T>& class_logits, const Tensor<T>& mask_logits,
                            const SegTarget& target, const LossWeights& w);

template <class T>
struct LossBreakdown {
  Tensor<T> total;
  // Weighted contributions; they add up to total.
  double cls = 0, bce = 0, dice = 0, bls_a = 0, bls_b = 0;
};

template <class T>
LossBreakdown<T> total_loss(const DecoderOutputs<T>& out, const SegTarget& target,
                            const LossWeights& w, DiscreteTrace* trace = nullptr);

}  // namespace nq
