#pragma once

#include <utility>
#include <vector>

#include "nearquery/tensor.hpp"

namespace nq {

struct Assignment {
  std::vector<std::pair<Index, Index>> pairs;  // (row, col), sorted by row
  double total_cost = 0;
};

// Minimum-cost injective assignment for a rows x cols cost matrix (row-major).
// min(rows, cols) pairs are returned. Costs must be finite.
Assignment hungarian_solve(const std::vector<double>& cost, Index rows, Index cols);

}  // namespace nq
