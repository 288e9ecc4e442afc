#include <doctest.h>

#include <cmath>

#include "nearquery/gradcheck_suite.hpp"
#include "nearquery/ops.hpp"
#include "test_util.hpp"

using namespace nq;
using TD = Tensor<double>;

TEST_CASE("matmul with identity returns the other operand") {
  CounterRng rng(1);
  auto x = nqt::random_tensor<double>(rng, {2, 3});
  auto id = TD::from({2, 2}, {1, 0, 0, 1});
  CHECK(nqt::values(matmul(id, x)) == nqt::values(x));
}

TEST_CASE("relu") {
  auto y = relu(TD::from({3}, {-1, 0, 2}));
  CHECK(nqt::values(y) == std::vector<double>{0, 0, 2});
}

TEST_CASE("conv2d of ones: interior 9, edges by window count") {
  auto img = TD::full({1, 5, 5}, 1.0);
  auto k = TD::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(img, k, TD(), 1, 1);
  REQUIRE(y.shape() == Shape{1, 5, 5});
  for (Index i = 0; i < 5; ++i) {
    for (Index j = 0; j < 5; ++j) {
      // Window count oracle: cells of the 3x3 window that fall inside the image.
      const double rows = 3 - (i == 0) - (i == 4), cols = 3 - (j == 0) - (j == 4);
      CHECK(y.at({0, i, j}) == rows * cols);
    }
  }
}

TEST_CASE("softmax values and stability") {
  CHECK(nqt::values(softmax(TD::from({2}, {0, 0}), 0)) == std::vector<double>{0.5, 0.5});
  CHECK(softmax(TD::from({1}, {3.7}), 0).item() == 1.0);
  auto s = softmax(TD::from({3}, {1, 2, 3}), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) CHECK(s.data()[i] == doctest::Approx(std::exp(i + 1.0) / z).epsilon(1e-12));
  CHECK(s.data()[0] == doctest::Approx(0.0900).epsilon(1e-3));

  CounterRng rng(2);
  auto big = nqt::random_tensor<float>(rng, {5, 7}, -1e4, 1e4);
  for (int axis : {0, 1}) {
    auto p = softmax(big, axis);
    const Index outer = axis == 0 ? 7 : 5, inner = axis == 0 ? 5 : 7;
    for (Index o = 0; o < outer; ++o) {
      double acc = 0;
      for (Index i = 0; i < inner; ++i) acc += axis == 0 ? p.at({i, o}) : p.at({o, i});
      CHECK(std::abs(acc - 1.0) < 1e-6);
    }
  }
  CHECK_THROWS_AS(softmax(TD::from({2}, {NAN, 1}), 0), NumericError);
}

TEST_CASE("grid sample bilinear") {
  auto map = TD::from({1, 2, 2}, {0, 1, 2, 3});
  CHECK(grid_sample_bilinear(map, TD::from({1, 2}, {0.5, 0.5})).item() == doctest::Approx(1.5));
  CHECK(grid_sample_bilinear(map, TD::from({1, 2}, {-10, -10})).item() == 0.0);

  CounterRng rng(3);
  auto m = nqt::random_tensor<double>(rng, {2, 4, 5});
  auto exact = grid_sample_bilinear(m, TD::from({1, 2}, {1, 1}));
  CHECK(exact.at({0, 0}) == m.at({0, 1, 1}));
  CHECK(exact.at({0, 1}) == m.at({1, 1, 1}));
  auto mid = grid_sample_bilinear(m, TD::from({1, 2}, {2.5, 3}));
  CHECK(std::abs(mid.at({0, 0}) - 0.5 * (m.at({0, 3, 2}) + m.at({0, 3, 3}))) < 1e-12);
}

TEST_CASE("resize") {
  CounterRng rng(4);
  auto x = nqt::random_tensor<float>(rng, {2, 5, 6});
  CHECK(nqt::values(resize_bilinear(x, 5, 6)) == nqt::values(x));
  auto c = resize_bilinear(Tensor<float>::full({1, 3, 4}, 0.25f), 7, 2);
  for (float v : c.data()) CHECK(v == 0.25f);
  auto one = resize_bilinear(Tensor<float>::from({1, 1, 1}, {1.5f}), 4, 3);
  for (float v : one.data()) CHECK(v == 1.5f);
}

TEST_CASE("cross entropy") {
  CHECK(cross_entropy(TD::from({1, 2}, {0, 0}), {1}).item() == doctest::Approx(std::log(2.0)));
  CHECK(cross_entropy(TD::from({1, 2}, {-50, 50}), {1}).item() < 1e-12);
  // Class weight 0 removes the sample from the weighted mean.
  auto two = TD::from({2, 2}, {0, 0, 3, -1});
  const double only_first = cross_entropy(TD::from({1, 2}, {0, 0}), {0}).item();
  CHECK(cross_entropy(two, {0, 1}, {1.0, 0.0}).item() == doctest::Approx(only_first));
}

TEST_CASE("bce with logits") {
  CHECK(bce_with_logits(TD::from({2}, {0, 0}), TD::from({2}, {1, 0})).item() == doctest::Approx(std::log(2.0)));
  const double sat = bce_with_logits(TD::from({2}, {40, -40}), TD::from({2}, {1, 0})).item();
  CHECK(std::isfinite(sat));
  CHECK(sat < 1e-12);
  CounterRng rng(5);
  auto z = nqt::random_tensor<double>(rng, {50}, -4, 4);
  auto t = nqt::random_tensor<double>(rng, {50}, 0, 1);
  double ref = 0;
  for (Index i = 0; i < 50; ++i) {
    const double s = 1 / (1 + std::exp(-z.data()[i]));
    ref -= t.data()[i] * std::log(s) + (1 - t.data()[i]) * std::log(1 - s);
  }
  CHECK(bce_with_logits(z, t).item() == doctest::Approx(ref / 50).epsilon(1e-9));
}

TEST_CASE("dice loss") {
  std::vector<double> a(400, 0.0), b(400, 0.0);
  for (int i = 0; i < 100; ++i) {
    a[i] = 1;
    b[200 + i] = 1;
  }
  CHECK(dice_loss(TD::from({400}, a), TD::from({400}, a)).item() == 0.0);
  CHECK(dice_loss(TD::from({400}, a), TD::from({400}, b)).item() == doctest::Approx(1.0 - 1.0 / 201));
  auto p = TD::from({3}, {1, 1, 0}), t = TD::from({3}, {0, 1, 1});
  CHECK(dice_loss(p, t, 1e-12).item() == doctest::Approx(0.5));
  auto rows = dice_loss_rows(TD::from({2, 3}, {1, 1, 0, 1, 1, 0}), TD::from({2, 3}, {0, 1, 1, 1, 1, 0}), 1e-12);
  CHECK(rows.item() == doctest::Approx(0.25));
}

TEST_CASE("every differentiable op passes gradcheck on 20 seeds") {
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    GradcheckOptions opt;
    opt.seed = seed;
    const GradcheckReport r = run_kernel_suite(opt);
    worst = std::max(worst, r.max_rel_err);
    if (!r.passed) FAIL_CHECK("seed " << seed << ": " << r.worst()->name << r.worst()->worst);
  }
  MESSAGE("max relative error over 20 seeds: " << worst);
  CHECK(worst < 1e-4);
}
