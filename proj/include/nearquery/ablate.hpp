#pragma once

// Runs a list of named model/training variants with the same seed and data
// split and tabulates held-out metrics.

#include <string>
#include <vector>

#include "nearquery/dataset.hpp"
#include "nearquery/train.hpp"

namespace nq {

struct AblationConfig {
  std::string name;
  TrainConfig train;
};

struct AblationRow {
  std::string config;
  double mDice = 0, mAcc = 0, mDice_small = 0, seconds = 0;
  std::string error;  // non-empty: the config failed, metrics are meaningless
};

// The eight stock variants, naive first. base supplies everything the
// variants do not change (steps, lr, seed, model widths).
std::vector<AblationConfig> default_ablation_grid(const TrainConfig& base);

// "default" or a comma-separated list of names from the default grid.
std::vector<AblationConfig> resolve_ablation_grid(const std::string& spec, const TrainConfig& base);

// Trains on the first 7/8 of the samples (in id order) and evaluates on the
// rest. A config that throws is recorded with its message and the run moves on.
std::vector<AblationRow> ablate(const DatasetManifest& data, const std::vector<AblationConfig>& grid,
                                const std::string& out_dir);

// config,mDice,mAcc,mDice_small,seconds. Failed rows print "nan" metrics.
void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path,
                        bool include_seconds = true);

}  // namespace nq
