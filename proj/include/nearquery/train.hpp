#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nearquery/dataset.hpp"
#include "nearquery/loss.hpp"
#include "nearquery/metrics.hpp"
#include "nearquery/model.hpp"
#include "nearquery/optim.hpp"

namespace nq {

struct TrainConfig {
  Index batch = 2;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  Index steps = 500;
  std::uint64_t seed = 0;
  Index eval_interval = 50;  // 0: evaluate only after the last step
  bool trick = true;         // three-channel multi-scale input; false repeats the channel
  ModelConfig model;
  LossWeights weights;

  void validate() const;
};

struct LogRow {
  Index step = 0;
  double total = 0, cls = 0, bce = 0, dice = 0, bls_a = 0, bls_b = 0;
  std::optional<double> val_mdice;
};

struct TrainResult {
  std::vector<LogRow> log;
  MetricsReport final_metrics;  // on the validation ids (training ids when none given)
  std::string checkpoint;       // path of the final checkpoint
};

// Preprocessed network input for a stored sample.
Tensor<float> model_input(const Sample& s, bool trick);

// Trains a fresh model. Writes train_log.csv, last_good.ckpt and final.ckpt
// into out_dir. train_ids / val_ids default to every sample.
TrainResult train(const TrainConfig& cfg, const DatasetManifest& data, const std::string& out_dir,
                  std::vector<Index> train_ids = {}, std::vector<Index> val_ids = {});

// Same, but returns the trained model too (out_dir may be empty to skip files).
TrainResult train_model(const TrainConfig& cfg, const DatasetManifest& data, const std::string& out_dir,
                        std::vector<Index> train_ids, std::vector<Index> val_ids,
                        SegModel<float>& model);

// Label maps predicted from the last prediction set for each sample.
std::vector<std::vector<std::uint8_t>> predict_samples(const SegModel<float>& model,
                                                       const std::vector<Sample>& samples, bool trick);

MetricsReport evaluate_model(const SegModel<float>& model, const DatasetManifest& data,
                             const std::vector<Index>& ids, bool trick);

void write_log_csv(const std::vector<LogRow>& log, const std::string& path);

}  // namespace nq
