#include <doctest.h>

#include <cmath>

#include "nearquery/optim.hpp"
#include "test_util.hpp"

using namespace nq;

TEST_CASE("adam: zero gradient on fresh state leaves parameters, counts the step") {
  auto p = Tensor<double>::from({3}, {1, -2, 3}, true);
  std::vector<Tensor<double>> ps{p};
  AdamState<double> st;
  adam_step(ps, {std::vector<double>(3, 0.0)}, st);
  CHECK(nqt::values(p) == std::vector<double>{1, -2, 3});
  CHECK(st.step_count == 1);
  adam_step(ps, {std::vector<double>{}}, st);  // empty = zeros
  CHECK(nqt::values(p) == std::vector<double>{1, -2, 3});
  CHECK(st.step_count == 2);
}

TEST_CASE("adam: zero gradient after momentum keeps moving (standard Adam)") {
  auto p = Tensor<double>::from({1}, {0}, true);
  std::vector<Tensor<double>> ps{p};
  AdamState<double> st;
  adam_step(ps, {std::vector<double>{1.0}}, st);
  const double after_first = p.data()[0];
  adam_step(ps, {std::vector<double>{0.0}}, st);
  CHECK(p.data()[0] < after_first);
}

TEST_CASE("adam: first step is -lr * sign(g)") {
  auto p = Tensor<double>::from({4}, {0, 0, 0, 0}, true);
  std::vector<Tensor<double>> ps{p};
  AdamState<double> st;
  st.lr = 1e-3;
  adam_step(ps, {std::vector<double>{0.5, -3.0, 100.0, -0.01}}, st);
  const double sign[4] = {1, -1, 1, -1};
  for (int i = 0; i < 4; ++i) CHECK(std::abs(p.data()[i] / (-st.lr * sign[i]) - 1.0) < 1e-6);
  CHECK(st.first_moment.size() == 1);
  CHECK(st.first_moment[0].size() == 4);
}

TEST_CASE("adam: reads accumulated grads and is deterministic") {
  auto run = [] {
    CounterRng rng(3);
    auto p = nqt::random_tensor<float>(rng, {5}, -1, 1, true);
    std::vector<Tensor<float>> ps{p};
    AdamState<float> st;
    for (int k = 0; k < 10; ++k) {
      p.zero_grad();
      auto& g = p.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(rng.uniform(-1, 1));
      adam_step(ps, st);
    }
    return nqt::values(p);
  };
  CHECK(run() == run());
}

TEST_CASE("adam: gradient size mismatch is rejected") {
  auto p = Tensor<double>::from({2}, {0, 0}, true);
  std::vector<Tensor<double>> ps{p};
  AdamState<double> st;
  CHECK_THROWS_AS(adam_step(ps, {std::vector<double>{1.0}}, st), ShapeError);
  CHECK_THROWS_AS(adam_step(ps, {}, st), ShapeError);
}
