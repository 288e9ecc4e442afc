#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "nearquery/ablate.hpp"
#include "nearquery/checkpoint.hpp"
#include "nearquery/train.hpp"
#include "test_util.hpp"

using namespace nq;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

const DatasetManifest& tiny_data() {
  static const DatasetManifest m = [] {
    const std::string dir = nqt::scratch_dir("train_data");
    gen_phantom(nqt::tiny_phantom_spec(), dir);
    return read_manifest(dir);
  }();
  return m;
}

}  // namespace

TEST_CASE("same seed gives identical logs and checkpoints") {
  const auto cfg = nqt::tiny_train_config(4);
  const std::string a = nqt::scratch_dir("train_a"), b = nqt::scratch_dir("train_b");
  const TrainResult ra = train(cfg, tiny_data(), a);
  const TrainResult rb = train(cfg, tiny_data(), b);
  CHECK(ra.log.size() == 4);
  CHECK(slurp(fs::path(a) / "train_log.csv") == slurp(fs::path(b) / "train_log.csv"));
  CHECK(slurp(fs::path(a) / "final.ckpt") == slurp(fs::path(b) / "final.ckpt"));
  CHECK(ra.log.back().val_mdice.has_value());
  CHECK_FALSE(ra.log.front().val_mdice.has_value());
  for (const auto& r : ra.log) {
    CHECK(std::abs(r.cls + r.bce + r.dice + r.bls_a + r.bls_b - r.total) < 1e-4 * std::abs(r.total));
  }
  const auto lines = [&] {
    std::ifstream f(fs::path(a) / "train_log.csv");
    std::string first;
    std::getline(f, first);
    return first;
  }();
  CHECK(lines == "step,loss_total,loss_cls,loss_bce,loss_dice,loss_bls_a,loss_bls_b,val_mDice");

  auto other = cfg;
  other.seed = 1;
  const std::string c = nqt::scratch_dir("train_c");
  train(other, tiny_data(), c);
  CHECK(slurp(fs::path(a) / "train_log.csv") != slurp(fs::path(c) / "train_log.csv"));
}

TEST_CASE("one step moves the parameters") {
  const auto cfg = nqt::tiny_train_config(1);
  const std::string dir = nqt::scratch_dir("train_one");
  SegModel<float> model(cfg.model, cfg.seed);
  const SegModel<float> init(cfg.model, cfg.seed);
  const TrainResult r = train_model(cfg, tiny_data(), dir, {}, {}, model);
  CHECK(r.log.size() == 1);
  SegModel<float> loaded(cfg.model, 99);
  AdamState<float> adam;
  load_checkpoint(r.checkpoint, loaded.params(), &adam);
  CHECK(adam.step_count == 1);
  bool any_diff = false;
  for (std::size_t i = 0; i < init.params().params().size(); ++i) {
    const auto x = init.params().params()[i].tensor.data(), y = loaded.params().params()[i].tensor.data();
    any_diff = any_diff || std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) != 0;
  }
  CHECK(any_diff);

  // Reloaded weights evaluate exactly like the trained model in memory.
  std::vector<Index> ids;
  for (const auto& s : tiny_data().samples) ids.push_back(s.id);
  const MetricsReport a = evaluate_model(model, tiny_data(), ids, cfg.trick);
  const MetricsReport b = evaluate_model(loaded, tiny_data(), ids, cfg.trick);
  CHECK(a.mDice == b.mDice);
  CHECK(a.mAcc == b.mAcc);
  CHECK(a.mDice == r.final_metrics.mDice);
}

TEST_CASE("non-finite loss aborts and keeps the last good checkpoint") {
  const std::string dir = nqt::scratch_dir("train_nan_data");
  gen_phantom(nqt::tiny_phantom_spec(2), dir);
  DatasetManifest m = read_manifest(dir);
  Sample s = read_sample(m, 0);
  s.image[5] = NAN;
  write_sample(m, s);
  write_sample(m, [&] {
    Sample t = read_sample(m, 1);
    t.image[9] = NAN;
    return t;
  }());
  const std::string out = nqt::scratch_dir("train_nan_out");
  CHECK_THROWS_AS(train(nqt::tiny_train_config(3), m, out), NumericError);
  CHECK(fs::exists(fs::path(out) / "last_good.ckpt"));
  CHECK_FALSE(fs::exists(fs::path(out) / "final.ckpt"));
}

TEST_CASE("bad training inputs") {
  auto cfg = nqt::tiny_train_config(1);
  DatasetManifest empty;
  empty.classes = tiny_data().classes;
  CHECK_THROWS_AS(train(cfg, empty, ""), std::invalid_argument);
  cfg.model.n_classes = 3;
  CHECK_THROWS_AS(train(cfg, tiny_data(), ""), std::invalid_argument);
  cfg = nqt::tiny_train_config(1);
  cfg.batch = 0;
  CHECK_THROWS_AS(train(cfg, tiny_data(), ""), std::invalid_argument);
}

TEST_CASE("default ablation grid") {
  const auto grid = default_ablation_grid(TrainConfig{});
  std::vector<std::string> names;
  for (const auto& g : grid) names.push_back(g.name);
  CHECK(names == std::vector<std::string>{"naive", "trick", "trick+OA1", "trick+FF_inside", "trick+FF_late",
                                          "trick+sigmoid2+BLS", "trick+sigmoid2+BLS2", "trick+sigmoid2+FF+BLS2"});
  CHECK_FALSE(grid[0].train.trick);
  CHECK(grid[1].train.trick);
  CHECK(grid[1].train.model.offset.strategy == OffsetStrategy::none);
  CHECK(grid[2].train.model.offset.strategy == OffsetStrategy::clip_divide);
  CHECK(grid[4].train.model.fusion.position == FusionPosition::late);
  CHECK(grid[5].train.model.bls == BlsMode::one);
  CHECK(grid[7].train.model.offset.scale_c == 2.0);
  CHECK(grid[7].train.model.bls == BlsMode::two);
  CHECK(resolve_ablation_grid("trick,naive", TrainConfig{}).size() == 2);
  CHECK_THROWS_AS(resolve_ablation_grid("trick,bogus", TrainConfig{}), std::invalid_argument);
}

TEST_CASE("ablation of one config writes one row, twice identically") {
  const auto grid = resolve_ablation_grid("trick+sigmoid2+BLS", nqt::tiny_train_config(2));
  const std::string a = nqt::scratch_dir("ablate_a"), b = nqt::scratch_dir("ablate_b");
  const auto ra = ablate(tiny_data(), grid, a);
  const auto rb = ablate(tiny_data(), grid, b);
  REQUIRE(ra.size() == 1);
  CHECK(ra[0].error.empty());
  write_ablation_csv(ra, a + "/cmp.csv", false);
  write_ablation_csv(rb, b + "/cmp.csv", false);
  CHECK(slurp(a + "/cmp.csv") == slurp(b + "/cmp.csv"));
  std::ifstream f(a + "/ablation.csv");
  std::string header, row, extra;
  std::getline(f, header);
  std::getline(f, row);
  CHECK(header == "config,mDice,mAcc,mDice_small,seconds");
  CHECK(row.rfind("trick+sigmoid2+BLS,", 0) == 0);
  CHECK_FALSE(std::getline(f, extra));
}

TEST_CASE("a failing config is recorded and the run continues") {
  auto grid = resolve_ablation_grid("naive,trick", nqt::tiny_train_config(1));
  grid[0].train.lr = -1;
  const auto rows = ablate(tiny_data(), grid, nqt::scratch_dir("ablate_fail"));
  REQUIRE(rows.size() == 2);
  CHECK_FALSE(rows[0].error.empty());
  CHECK(rows[1].error.empty());
}
