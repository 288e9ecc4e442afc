#pragma once

// Run configuration as one JSON document. Every leaf can be overridden by a
// dotted path (model.offset.strategy=squash); unknown keys are rejected.

#include <cstdint>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "nearquery/phantom.hpp"
#include "nearquery/train.hpp"

namespace nq {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct AblateSettings {
  std::string grid = "default";  // default | <name>[,<name>...] from the default grid
  Index steps = 300;             // optimizer steps per configuration
};

struct SampleStatsSettings {
  std::string mode = "synthetic";  // synthetic | model
  double sigma = 3.0;              // synthetic raw offset spread, level pixels
  Index draws = 100000;
  std::uint64_t seed = 7;
  std::string checkpoint;          // model mode: weights to load (empty: fresh init)
};

struct GradcheckSettings {
  double tol = 1e-4;
  double eps = 1e-5;
};

struct AppConfig {
  std::string data;  // dataset directory
  std::string out;   // output directory
  PhantomSpec phantom;
  TrainConfig train;  // train.model and train.weights live under "model" and "loss"
  AblateSettings ablate;
  SampleStatsSettings sample_stats;
  GradcheckSettings gradcheck;

  void validate() const;
};

nlohmann::json to_json(const AppConfig& cfg);

// Strict: keys missing from the defaults raise ConfigError; absent keys keep
// their defaults.
AppConfig config_from_json(const nlohmann::json& j);

// Sets one leaf; the value text is parsed according to the default's type.
void apply_override(nlohmann::json& doc, const std::string& dotted_key, const std::string& value);

AppConfig load_config_file(const std::string& path);
void write_resolved_config(const AppConfig& cfg, const std::string& out_dir);

}  // namespace nq
