#include "nearquery/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <stdexcept>

#include "nearquery/checkpoint.hpp"
#include "nearquery/phantom.hpp"
#include "nearquery/rng.hpp"

namespace nq {

void TrainConfig::validate() const {
  if (batch < 1) throw std::invalid_argument("train.batch must be >= 1");
  if (steps < 1) throw std::invalid_argument("train.steps must be >= 1");
  if (!(lr > 0)) throw std::invalid_argument("train.lr must be > 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    throw std::invalid_argument("train.beta1/beta2 must be in [0, 1)");
  }
  if (eval_interval < 0) throw std::invalid_argument("train.eval_interval must be >= 0");
  model.validate();
  weights.validate();
}

Tensor<float> model_input(const Sample& s, bool trick) {
  std::vector<float> v = s.image;
  Tensor<float> img = Tensor<float>::from({s.channels, s.height, s.width}, std::move(v));
  if (s.channels == 3) return img;
  if (s.channels != 1) {
    throw ShapeError("sample " + std::to_string(s.id) + " has " + std::to_string(s.channels) +
                     " channels; expected 1 or 3");
  }
  return trick ? preprocess_trick(img) : preprocess_naive(img);
}

std::vector<std::vector<std::uint8_t>> predict_samples(const SegModel<float>& model,
                                                       const std::vector<Sample>& samples, bool trick) {
  NoGradGuard ng;
  std::vector<std::vector<std::uint8_t>> out;
  for (const auto& s : samples) {
    const DecoderOutputs<float> o = model.forward(model_input(s, trick));
    out.push_back(semantic_inference(o.sets.back(), s.height, s.width));
  }
  return out;
}

namespace {

std::vector<Sample> load_samples(const DatasetManifest& data, const std::vector<Index>& ids) {
  std::vector<Sample> out;
  for (Index id : ids) out.push_back(read_sample(data, id));
  return out;
}

MetricsReport evaluate_loaded(const SegModel<float>& model, const DatasetManifest& data,
                              const std::vector<Sample>& samples, bool trick) {
  std::vector<std::vector<std::uint8_t>> targets;
  for (const auto& s : samples) targets.push_back(s.labels);
  return evaluate_metrics(predict_samples(model, samples, trick), targets, data.n_classes(), data.classes);
}

}  // namespace

MetricsReport evaluate_model(const SegModel<float>& model, const DatasetManifest& data,
                             const std::vector<Index>& ids, bool trick) {
  return evaluate_loaded(model, data, load_samples(data, ids), trick);
}

void write_log_csv(const std::vector<LogRow>& log, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "step,loss_total,loss_cls,loss_bce,loss_dice,loss_bls_a,loss_bls_b,val_mDice\n";
  char buf[512];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,", static_cast<long long>(r.step),
                  r.total, r.cls, r.bce, r.dice, r.bls_a, r.bls_b);
    f << buf;
    if (r.val_mdice) {
      std::snprintf(buf, sizeof buf, "%.9g", *r.val_mdice);
      f << buf;
    }
    f << '\n';
  }
  if (!f) throw std::runtime_error("failed writing " + path);
}

TrainResult train_model(const TrainConfig& cfg, const DatasetManifest& data, const std::string& out_dir,
                        std::vector<Index> train_ids, std::vector<Index> val_ids,
                        SegModel<float>& model) {
  cfg.validate();
  if (data.samples.empty()) throw std::invalid_argument("train: dataset is empty");
  if (data.n_classes() != model.config().n_classes) {
    throw std::invalid_argument("train: dataset has " + std::to_string(data.n_classes()) +
                                " classes, model.n_classes is " + std::to_string(model.config().n_classes));
  }
  if (train_ids.empty()) {
    for (const auto& s : data.samples) train_ids.push_back(s.id);
  }
  if (val_ids.empty()) val_ids = train_ids;
  const std::vector<Sample> train_set = load_samples(data, train_ids);
  const std::vector<Sample> val_set = load_samples(data, val_ids);
  std::vector<Tensor<float>> inputs;
  std::vector<SegTarget> targets;
  for (const auto& s : train_set) {
    inputs.push_back(model_input(s, cfg.trick));
    targets.push_back(make_target(s.labels, s.height, s.width, data.n_classes()));
  }
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  const std::string last_good = out_dir.empty() ? "" : (std::filesystem::path(out_dir) / "last_good.ckpt").string();

  AdamState<float> adam;
  adam.lr = cfg.lr;
  adam.beta1 = cfg.beta1;
  adam.beta2 = cfg.beta2;
  std::vector<Tensor<float>> params = model.params().tensors();

  const std::size_t n = train_set.size();
  std::vector<std::size_t> order(n);
  std::size_t cursor = n;
  std::uint64_t epoch = 0;

  TrainResult res;
  const float inv_b = 1.0f / static_cast<float>(cfg.batch);
  for (Index step = 1; step <= cfg.steps; ++step) {
    model.params().zero_grad();
    LogRow row;
    row.step = step;
    for (Index b = 0; b < cfg.batch; ++b) {
      if (cursor == n) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        CounterRng rng(cfg.seed, 0x5348554646ULL + epoch++);
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
        cursor = 0;
      }
      const std::size_t k = order[cursor++];
      auto abort = [&](const std::string& why) {
        if (!last_good.empty()) save_checkpoint(last_good, model.params(), &adam);
        throw NumericError(why + " at step " + std::to_string(step) +
                           "; parameters before this step saved to " + last_good);
      };
      std::optional<LossBreakdown<float>> br_opt;
      try {
        br_opt = total_loss(model.forward(inputs[k]), targets[k], cfg.weights);
      } catch (const NumericError& e) {
        // non-finite matching costs
        abort(e.what());
      }
      const LossBreakdown<float>& br = *br_opt;
      const double t = static_cast<double>(br.total.item());
      if (!std::isfinite(t)) abort("non-finite loss");
      scale(br.total, inv_b).backward();
      row.total += t / static_cast<double>(cfg.batch);
      row.cls += br.cls / static_cast<double>(cfg.batch);
      row.bce += br.bce / static_cast<double>(cfg.batch);
      row.dice += br.dice / static_cast<double>(cfg.batch);
      row.bls_a += br.bls_a / static_cast<double>(cfg.batch);
      row.bls_b += br.bls_b / static_cast<double>(cfg.batch);
    }
    adam_step(params, adam);
    const bool eval_now = step == cfg.steps || (cfg.eval_interval > 0 && step % cfg.eval_interval == 0);
    if (eval_now) {
      MetricsReport m = evaluate_loaded(model, data, val_set, cfg.trick);
      row.val_mdice = m.mDice;
      if (step == cfg.steps) res.final_metrics = std::move(m);
      if (!last_good.empty()) save_checkpoint(last_good, model.params(), &adam);
    }
    res.log.push_back(row);
  }
  if (!out_dir.empty()) {
    res.checkpoint = (std::filesystem::path(out_dir) / "final.ckpt").string();
    save_checkpoint(res.checkpoint, model.params(), &adam);
    write_log_csv(res.log, (std::filesystem::path(out_dir) / "train_log.csv").string());
  }
  return res;
}

TrainResult train(const TrainConfig& cfg, const DatasetManifest& data, const std::string& out_dir,
                  std::vector<Index> train_ids, std::vector<Index> val_ids) {
  cfg.validate();
  SegModel<float> model(cfg.model, cfg.seed);
  return train_model(cfg, data, out_dir, std::move(train_ids), std::move(val_ids), model);
}

}  // namespace nq
