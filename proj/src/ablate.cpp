#include "nearquery/ablate.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace nq {

std::vector<AblationConfig> default_ablation_grid(const TrainConfig& base) {
  auto variant = [&](const std::string& name, auto&& edit) {
    AblationConfig a{name, base};
    ModelConfig& m = a.train.model;
    a.train.trick = true;
    m.deep_offsets = false;
    m.offset = OffsetAdjustConfig{};
    m.offset.strategy = OffsetStrategy::none;
    m.fusion.position = FusionPosition::none;
    m.bls = BlsMode::off;
    edit(a.train, m);
    return a;
  };
  auto squash2 = [](ModelConfig& m) {
    m.deep_offsets = true;
    m.offset.strategy = OffsetStrategy::squash_scaled;
    m.offset.squash_kind = SquashKind::sigmoid_symmetric;
    m.offset.scale_c = 2.0;
  };
  std::vector<AblationConfig> g;
  g.push_back(variant("naive", [](TrainConfig& t, ModelConfig&) { t.trick = false; }));
  g.push_back(variant("trick", [](TrainConfig&, ModelConfig&) {}));
  g.push_back(variant("trick+OA1", [](TrainConfig&, ModelConfig& m) {
    m.deep_offsets = true;
    m.offset.strategy = OffsetStrategy::clip_divide;
  }));
  g.push_back(variant("trick+FF_inside", [](TrainConfig&, ModelConfig& m) {
    m.fusion.position = FusionPosition::inside;
  }));
  g.push_back(variant("trick+FF_late", [](TrainConfig&, ModelConfig& m) {
    m.fusion.position = FusionPosition::late;
  }));
  g.push_back(variant("trick+sigmoid2+BLS", [&](TrainConfig&, ModelConfig& m) {
    squash2(m);
    m.bls = BlsMode::one;
  }));
  g.push_back(variant("trick+sigmoid2+BLS2", [&](TrainConfig&, ModelConfig& m) {
    squash2(m);
    m.bls = BlsMode::two;
  }));
  g.push_back(variant("trick+sigmoid2+FF+BLS2", [&](TrainConfig&, ModelConfig& m) {
    squash2(m);
    m.fusion.position = FusionPosition::late;
    m.bls = BlsMode::two;
  }));
  return g;
}

std::vector<AblationConfig> resolve_ablation_grid(const std::string& spec, const TrainConfig& base) {
  const std::vector<AblationConfig> all = default_ablation_grid(base);
  if (spec == "default") return all;
  std::vector<AblationConfig> out;
  std::size_t start = 0;
  while (start <= spec.size()) {
    const std::size_t comma = spec.find(',', start);
    const std::string name = spec.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    bool found = false;
    for (const auto& a : all) {
      if (a.name == name) {
        out.push_back(a);
        found = true;
      }
    }
    if (!found) throw std::invalid_argument("unknown ablation config '" + name + "'");
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::vector<AblationRow> ablate(const DatasetManifest& data, const std::vector<AblationConfig>& grid,
                                const std::string& out_dir) {
  if (grid.empty()) throw std::invalid_argument("ablate: grid is empty");
  if (data.samples.size() < 2) throw std::invalid_argument("ablate: need at least 2 samples");
  std::vector<Index> ids;
  for (const auto& s : data.samples) ids.push_back(s.id);
  std::sort(ids.begin(), ids.end());
  const std::size_t n_val = std::max<std::size_t>(1, ids.size() / 8);
  const std::vector<Index> train_ids(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(n_val));
  const std::vector<Index> val_ids(ids.end() - static_cast<std::ptrdiff_t>(n_val), ids.end());

  std::vector<AblationRow> rows;
  for (const auto& cfg : grid) {
    AblationRow row;
    row.config = cfg.name;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      TrainConfig tc = cfg.train;
      tc.eval_interval = 0;
      const std::string dir = out_dir.empty() ? "" : (std::filesystem::path(out_dir) / cfg.name).string();
      const TrainResult r = train(tc, data, dir, train_ids, val_ids);
      row.mDice = r.final_metrics.mDice;
      row.mAcc = r.final_metrics.mAcc;
      for (const auto& t : r.final_metrics.tiers) {
        if (t.tier == "small") row.mDice_small = t.dice;
      }
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(row);
  }
  if (!out_dir.empty()) write_ablation_csv(rows, (std::filesystem::path(out_dir) / "ablation.csv").string());
  return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path, bool include_seconds) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "config,mDice,mAcc,mDice_small" << (include_seconds ? ",seconds" : "") << '\n';
  char buf[256];
  for (const auto& r : rows) {
    if (r.error.empty()) {
      std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f", r.config.c_str(), r.mDice, r.mAcc, r.mDice_small);
    } else {
      std::snprintf(buf, sizeof buf, "%s,nan,nan,nan", r.config.c_str());
    }
    f << buf;
    if (include_seconds) {
      std::snprintf(buf, sizeof buf, ",%.3f", r.seconds);
      f << buf;
    }
    f << '\n';
  }
  if (!f) throw std::runtime_error("failed writing " + path);
}

}  // namespace nq
