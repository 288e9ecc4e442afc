#include <doctest.h>

#include "nearquery/metrics.hpp"
#include "nearquery/ops.hpp"
#include "test_util.hpp"

using namespace nq;
using Maps = std::vector<std::vector<std::uint8_t>>;

namespace {

struct OracleClass {
  bool present = false;
  double dice = 0, iou = 0, acc = 0;
};

// Per-image (C+1)x(C+1) confusion matrices, read off row/column sums.
std::vector<OracleClass> confusion_oracle(const Maps& preds, const Maps& targets, int C) {
  std::vector<OracleClass> out(static_cast<std::size_t>(C + 1));
  std::vector<int> n(static_cast<std::size_t>(C + 1), 0);
  for (std::size_t k = 0; k < preds.size(); ++k) {
    std::vector<std::vector<long>> cm(static_cast<std::size_t>(C + 1), std::vector<long>(static_cast<std::size_t>(C + 1), 0));
    for (std::size_t i = 0; i < preds[k].size(); ++i) ++cm[targets[k][i]][preds[k][i]];
    for (int c = 1; c <= C; ++c) {
      long g = 0, p = 0;
      for (int o = 0; o <= C; ++o) {
        g += cm[static_cast<std::size_t>(c)][static_cast<std::size_t>(o)];
        p += cm[static_cast<std::size_t>(o)][static_cast<std::size_t>(c)];
      }
      if (g == 0) continue;
      const long tp = cm[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)];
      auto& oc = out[static_cast<std::size_t>(c)];
      oc.present = true;
      oc.dice += 2.0 * static_cast<double>(tp) / static_cast<double>(p + g);
      oc.iou += static_cast<double>(tp) / static_cast<double>(p + g - tp);
      oc.acc += static_cast<double>(tp) / static_cast<double>(g);
      ++n[static_cast<std::size_t>(c)];
    }
  }
  for (int c = 1; c <= C; ++c) {
    auto& oc = out[static_cast<std::size_t>(c)];
    if (!oc.present) continue;
    oc.dice /= n[static_cast<std::size_t>(c)];
    oc.iou /= n[static_cast<std::size_t>(c)];
    oc.acc /= n[static_cast<std::size_t>(c)];
  }
  return out;
}

void check_against_oracle(const Maps& preds, const Maps& targets, int C) {
  const MetricsReport r = evaluate_metrics(preds, targets, C);
  const auto o = confusion_oracle(preds, targets, C);
  double md = 0;
  int np = 0;
  for (int c = 1; c <= C; ++c) {
    const auto& m = r.per_class[static_cast<std::size_t>(c - 1)];
    const auto& oc = o[static_cast<std::size_t>(c)];
    REQUIRE(m.present == oc.present);
    if (!oc.present) continue;
    CHECK(m.dice == oc.dice);
    CHECK(m.iou == oc.iou);
    CHECK(m.acc == oc.acc);
    md += oc.dice;
    ++np;
  }
  if (np > 0) CHECK(r.mDice == md / np);
}

}  // namespace

TEST_CASE("every binary 2x2 pair matches the confusion oracle") {
  for (int a = 0; a < 16; ++a) {
    for (int b = 0; b < 16; ++b) {
      Maps p{{}}, t{{}};
      for (int i = 0; i < 4; ++i) {
        p[0].push_back(static_cast<std::uint8_t>((a >> i) & 1));
        t[0].push_back(static_cast<std::uint8_t>((b >> i) & 1));
      }
      check_against_oracle(p, t, 1);
    }
  }
}

TEST_CASE("random 8x8 multi-class maps match the confusion oracle") {
  CounterRng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const int C = 1 + static_cast<int>(rng.below(5));
    const auto n_img = 1 + rng.below(4);
    Maps p(n_img), t(n_img);
    for (std::size_t k = 0; k < n_img; ++k) {
      for (int i = 0; i < 64; ++i) {
        p[k].push_back(static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(C + 1))));
        t[k].push_back(static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(C + 1))));
      }
    }
    check_against_oracle(p, t, C);
  }
}

TEST_CASE("perfect and all-background predictions") {
  Maps t{{0, 1, 2, 2, 0, 1}, {3, 3, 0, 0, 0, 1}};
  auto r = evaluate_metrics(t, t, 3);
  CHECK(r.mDice == 1.0);
  CHECK(r.mIoU == 1.0);
  CHECK(r.mAcc == 1.0);
  Maps bg{std::vector<std::uint8_t>(6, 0), std::vector<std::uint8_t>(6, 0)};
  r = evaluate_metrics(bg, t, 3);
  CHECK(r.mDice == 0.0);
  for (const auto& c : r.per_class) CHECK(c.dice == 0.0);
}

TEST_CASE("absent classes are flagged and excluded") {
  Maps t{{0, 1, 1, 0}};
  Maps p{{0, 1, 3, 0}};
  auto r = evaluate_metrics(p, t, 3);
  CHECK_FALSE(r.per_class[1].present);
  CHECK_FALSE(r.per_class[2].present);
  CHECK(r.flags.size() == 2);
  CHECK(r.mDice == doctest::Approx(2.0 / 3.0));
  CHECK(r.per_class[0].n_images == 1);
}

TEST_CASE("tier aggregates weight back to the overall mean") {
  CounterRng rng(23);
  const std::vector<ClassInfo> info{{"a", "large"}, {"b", "small"}, {"c", "small"}, {"d", "mid"}, {"e", "small"}};
  for (int trial = 0; trial < 20; ++trial) {
    Maps p(3), t(3);
    for (int k = 0; k < 3; ++k) {
      for (int i = 0; i < 64; ++i) {
        p[static_cast<std::size_t>(k)].push_back(static_cast<std::uint8_t>(rng.below(6)));
        t[static_cast<std::size_t>(k)].push_back(static_cast<std::uint8_t>(rng.below(6)));
      }
    }
    auto r = evaluate_metrics(p, t, 5, info);
    double s = 0, n = 0;
    for (const auto& tier : r.tiers) {
      s += tier.dice * static_cast<double>(tier.n_classes);
      n += static_cast<double>(tier.n_classes);
    }
    CHECK(std::abs(s / n - r.mDice) < 1e-9);
    CHECK(r.tiers.size() == 3);
    CHECK(r.tiers[2].tier == "small");
    CHECK(r.tiers[2].n_classes == 3);
  }
}

TEST_CASE("shape and label errors") {
  CHECK_THROWS_AS(evaluate_metrics({{0, 1}}, {{0, 1, 1}}, 1), ShapeError);
  CHECK_THROWS_AS(evaluate_metrics({{0}}, {}, 1), ShapeError);
  CHECK_THROWS_AS(evaluate_metrics({{0, 4}}, {{0, 1}}, 3), std::out_of_range);
}

TEST_CASE("semantic inference") {
  // Query 0: class 1 with a mask on the left half; query 1: class 2 weaker,
  // everywhere; query 2: no object.
  auto cls = Tensor<double>::from({3, 3}, {5, 0, 0, 0, 1, 0, 0, 0, 5});
  std::vector<double> m(3 * 2 * 2);
  const double left[4] = {9, -9, 9, -9};
  for (int i = 0; i < 4; ++i) {
    m[static_cast<std::size_t>(i)] = left[i];
    m[static_cast<std::size_t>(4 + i)] = 9;
    m[static_cast<std::size_t>(8 + i)] = 9;
  }
  PredictionSet<double> ps{cls, Tensor<double>::from({3, 2, 2}, m)};
  auto lab = semantic_inference(ps, 2, 2);
  CHECK(lab == std::vector<std::uint8_t>{1, 2, 1, 2});
  auto none = semantic_inference(PredictionSet<double>{cls, Tensor<double>::full({3, 2, 2}, -9.0)}, 4, 4);
  CHECK(none == std::vector<std::uint8_t>(16, 0));
}
