#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "nearquery/ops.hpp"
#include "nearquery/phantom.hpp"
#include "test_util.hpp"

using namespace nq;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

Tensor<double> flip_w(const Tensor<double>& x) {
  const Index c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  std::vector<double> v(x.data().size());
  for (Index k = 0; k < c; ++k)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) v[static_cast<std::size_t>((k * h + i) * w + j)] = x.at({k, i, w - 1 - j});
  return Tensor<double>::from({c, h, w}, v);
}

double channel_variance(const Tensor<double>& x, Index ch) {
  const Index hw = x.shape()[1] * x.shape()[2];
  double s = 0, s2 = 0;
  for (Index p = 0; p < hw; ++p) {
    const double v = x.data()[static_cast<std::size_t>(ch * hw + p)];
    s += v;
    s2 += v * v;
  }
  s /= static_cast<double>(hw);
  return s2 / static_cast<double>(hw) - s * s;
}

}  // namespace

TEST_CASE("same seed writes identical files") {
  PhantomSpec spec;
  spec.n = 3;
  spec.size = 64;
  const std::string a = nqt::scratch_dir("phantom_a"), b = nqt::scratch_dir("phantom_b");
  gen_phantom(spec, a);
  gen_phantom(spec, b);
  int files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    CHECK(slurp(e.path()) == slurp(fs::path(b) / e.path().filename()));
    ++files;
  }
  CHECK(files == 7);
  CHECK_FALSE(slurp(fs::path(a) / "sample_00000.u8").empty());
  spec.seed = 1;
  const std::string c = nqt::scratch_dir("phantom_c");
  gen_phantom(spec, c);
  CHECK(slurp(fs::path(a) / "sample_00000.u8") != slurp(fs::path(c) / "sample_00000.u8"));
}

TEST_CASE("generated images respect the contracts") {
  PhantomSpec spec;
  const Index C = static_cast<Index>(spec.classes.size());
  std::vector<int> seen(static_cast<std::size_t>(C + 1), 0);
  const int n = 100;
  for (Index id = 0; id < n; ++id) {
    const PhantomImage img = generate_phantom(spec, id);
    REQUIRE(img.labels.size() == static_cast<std::size_t>(spec.size * spec.size));
    std::vector<Index> area(static_cast<std::size_t>(C + 1), 0);
    for (auto l : img.labels) {
      REQUIRE(l <= C);
      ++area[l];
    }
    for (float v : img.image) REQUIRE((v >= 0.0f && v <= 1.0f));
    const double fg = 1.0 - static_cast<double>(area[0]) / static_cast<double>(img.labels.size());
    CHECK(fg < spec.max_foreground);
    for (Index c = 1; c <= C; ++c) {
      if (area[static_cast<std::size_t>(c)] == 0) continue;
      ++seen[static_cast<std::size_t>(c)];
      if (spec.classes[static_cast<std::size_t>(c - 1)].tier == SizeTier::small) {
        const double a = static_cast<double>(area[static_cast<std::size_t>(c)]);
        CHECK(a >= M_PI * 4.0 * 0.7);
        CHECK(a <= M_PI * 25.0 * 1.3);
      }
    }
  }
  for (Index c = 1; c <= C; ++c) CHECK(seen[static_cast<std::size_t>(c)] >= 0.6 * n);
}

TEST_CASE("stock classes include two small-tier organs") {
  int small = 0;
  for (const auto& c : default_phantom_classes()) small += c.tier == SizeTier::small;
  CHECK(default_phantom_classes().size() == 6);
  CHECK(small == 2);
}

TEST_CASE("bad spec") {
  PhantomSpec spec;
  spec.size = 0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = PhantomSpec{};
  spec.classes.clear();
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("trick preprocessing") {
  auto c = preprocess_trick(Tensor<double>::full({1, 9, 7}, 0.3));
  for (double v : c.data()) CHECK(v == doctest::Approx(0.3).epsilon(1e-12));

  CounterRng rng(5);
  auto x = nqt::random_tensor<double>(rng, {1, 10, 12}, 0, 1);
  auto t = preprocess_trick(x);
  CHECK(t.shape() == Shape{3, 10, 12});
  CHECK(std::equal(x.data().begin(), x.data().end(), t.data().begin()));

  auto a = preprocess_trick(flip_w(x));
  auto b = flip_w(t);
  for (std::size_t i = 0; i < a.data().size(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) <= 1e-6);

  auto odd = preprocess_trick(nqt::random_tensor<double>(rng, {1, 7, 5}, 0, 1));
  CHECK(odd.shape() == Shape{3, 7, 5});
  CHECK_THROWS_AS(preprocess_trick(Tensor<double>::zeros({3, 4, 4})), ShapeError);

  auto n = preprocess_naive(x);
  for (Index k = 0; k < 3; ++k) CHECK(n.at({k, 2, 3}) == x.at({0, 2, 3}));
}

TEST_CASE("down-up channel is smoother than the input on noise") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    CounterRng rng(seed, 11);
    auto x = nqt::random_tensor<double>(rng, {1, 32, 32}, 0, 1);
    auto t = preprocess_trick(x);
    CHECK(channel_variance(t, 2) <= channel_variance(t, 0));
  }
}
