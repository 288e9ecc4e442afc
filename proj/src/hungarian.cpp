#include "nearquery/hungarian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace nq {

namespace {

// Shortest augmenting path with potentials; requires n <= m. Returns the
// column assigned to each row.
std::vector<Index> solve_rows_le_cols(const std::vector<double>& a, Index n, Index m) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(m + 1), 0.0);
  std::vector<Index> p(static_cast<std::size_t>(m + 1), 0), way(static_cast<std::size_t>(m + 1), 0);
  for (Index i = 1; i <= n; ++i) {
    p[0] = i;
    Index j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(m + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const Index i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      Index j1 = 0;
      for (Index j = 1; j <= m; ++j) {
        const auto js = static_cast<std::size_t>(j);
        if (used[js]) continue;
        const double cur = a[static_cast<std::size_t>((i0 - 1) * m + (j - 1))] -
                           u[static_cast<std::size_t>(i0)] - v[js];
        if (cur < minv[js]) {
          minv[js] = cur;
          way[js] = j0;
        }
        if (minv[js] < delta) {
          delta = minv[js];
          j1 = j;
        }
      }
      for (Index j = 0; j <= m; ++j) {
        const auto js = static_cast<std::size_t>(j);
        if (used[js]) {
          u[static_cast<std::size_t>(p[js])] += delta;
          v[js] -= delta;
        } else {
          minv[js] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const Index j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<Index> row_to_col(static_cast<std::size_t>(n), -1);
  for (Index j = 1; j <= m; ++j) {
    if (p[static_cast<std::size_t>(j)] != 0) row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  }
  return row_to_col;
}

}  // namespace

Assignment hungarian_solve(const std::vector<double>& cost, Index rows, Index cols) {
  if (rows < 0 || cols < 0 || static_cast<Index>(cost.size()) != rows * cols) {
    throw ShapeError("hungarian_solve: cost has " + std::to_string(cost.size()) + " entries for " +
                     std::to_string(rows) + " x " + std::to_string(cols));
  }
  for (double c : cost) {
    if (!std::isfinite(c)) throw NumericError("hungarian_solve: non-finite cost");
  }
  Assignment out;
  if (rows == 0 || cols == 0) return out;
  if (rows <= cols) {
    const auto r2c = solve_rows_le_cols(cost, rows, cols);
    for (Index r = 0; r < rows; ++r) out.pairs.push_back({r, r2c[static_cast<std::size_t>(r)]});
  } else {
    std::vector<double> t(cost.size());
    for (Index r = 0; r < rows; ++r) {
      for (Index c = 0; c < cols; ++c) t[static_cast<std::size_t>(c * rows + r)] = cost[static_cast<std::size_t>(r * cols + c)];
    }
    const auto c2r = solve_rows_le_cols(t, cols, rows);
    for (Index c = 0; c < cols; ++c) out.pairs.push_back({c2r[static_cast<std::size_t>(c)], c});
    std::sort(out.pairs.begin(), out.pairs.end());
  }
  for (const auto& [r, c] : out.pairs) out.total_cost += cost[static_cast<std::size_t>(r * cols + c)];
  return out;
}

}  // namespace nq
