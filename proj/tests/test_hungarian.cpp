#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nearquery/hungarian.hpp"
#include "test_util.hpp"

using namespace nq;

namespace {

// Minimum over every injective map of the smaller side into the larger one.
double brute_force_min(const std::vector<double>& cost, Index rows, Index cols) {
  const bool by_rows = rows <= cols;
  const Index small = by_rows ? rows : cols, big = by_rows ? cols : rows;
  std::vector<Index> perm(static_cast<std::size_t>(big));
  std::iota(perm.begin(), perm.end(), Index{0});
  double best = INFINITY;
  do {
    double c = 0;
    for (Index i = 0; i < small; ++i) {
      const Index r = by_rows ? i : perm[static_cast<std::size_t>(i)];
      const Index k = by_rows ? perm[static_cast<std::size_t>(i)] : i;
      c += cost[static_cast<std::size_t>(r * cols + k)];
    }
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

TEST_CASE("worked examples") {
  auto a = hungarian_solve({0, 1, 1, 1, 0, 1, 1, 1, 0}, 3, 3);
  CHECK(a.total_cost == 0.0);
  CHECK(a.pairs == std::vector<std::pair<Index, Index>>{{0, 0}, {1, 1}, {2, 2}});
  auto b = hungarian_solve({1, 0, 0, 1}, 2, 2);
  CHECK(b.total_cost == 0.0);
  CHECK(b.pairs == std::vector<std::pair<Index, Index>>{{0, 1}, {1, 0}});
}

TEST_CASE("matches exhaustive search on 100 random instances") {
  CounterRng rng(42);
  for (int t = 0; t < 100; ++t) {
    const Index rows = 1 + static_cast<Index>(rng.below(6)), cols = 1 + static_cast<Index>(rng.below(6));
    std::vector<double> cost(static_cast<std::size_t>(rows * cols));
    for (auto& c : cost) c = rng.uniform(-3, 5);
    const Assignment a = hungarian_solve(cost, rows, cols);
    CHECK(static_cast<Index>(a.pairs.size()) == std::min(rows, cols));
    std::vector<bool> used_r(static_cast<std::size_t>(rows)), used_c(static_cast<std::size_t>(cols));
    double sum = 0;
    for (const auto& [r, c] : a.pairs) {
      CHECK_FALSE(used_r[static_cast<std::size_t>(r)]);
      CHECK_FALSE(used_c[static_cast<std::size_t>(c)]);
      used_r[static_cast<std::size_t>(r)] = used_c[static_cast<std::size_t>(c)] = true;
      sum += cost[static_cast<std::size_t>(r * cols + c)];
    }
    CHECK(std::is_sorted(a.pairs.begin(), a.pairs.end()));
    CHECK(std::abs(sum - a.total_cost) < 1e-9);
    CHECK(std::abs(a.total_cost - brute_force_min(cost, rows, cols)) < 1e-9);
  }
}

TEST_CASE("degenerate and invalid input") {
  CHECK(hungarian_solve({}, 0, 3).pairs.empty());
  CHECK_THROWS_AS(hungarian_solve({1, NAN}, 1, 2), NumericError);
  CHECK_THROWS_AS(hungarian_solve({1, 2}, 2, 2), ShapeError);
}
