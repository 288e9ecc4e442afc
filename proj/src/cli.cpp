#include "nearquery/cli.hpp"

#include <filesystem>
#include <iostream>
#include <fstream>
#include <optional>

#include <CLI11.hpp>

#include "nearquery/ablate.hpp"
#include "nearquery/checkpoint.hpp"
#include "nearquery/config.hpp"
#include "nearquery/gradcheck_suite.hpp"
#include "nearquery/parallel.hpp"
#include "nearquery/report.hpp"

namespace nq {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DottedOverride {
  std::string key, value;
};

// Pulls --a.b[=v] / --a.b v arguments out of args; CLI11 sees the rest.
std::vector<DottedOverride> extract_dotted(std::vector<std::string>& args) {
  std::vector<DottedOverride> out;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) == 0) {
      const std::size_t eq = a.find('=');
      const std::string name = a.substr(2, eq == std::string::npos ? std::string::npos : eq - 2);
      if (name.find('.') != std::string::npos) {
        if (eq != std::string::npos) {
          out.push_back({name, a.substr(eq + 1)});
        } else {
          if (i + 1 >= args.size()) throw UsageError("flag --" + name + " needs a value");
          out.push_back({name, args[++i]});
        }
        continue;
      }
    }
    rest.push_back(a);
  }
  args = std::move(rest);
  return out;
}

void one_line(std::ostream& err, const std::string& kind, const std::string& msg) {
  std::string m = msg;
  for (char& c : m) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  err << "error: " << kind << ": " << m << std::endl;
}

struct Common {
  std::string config_path;
  std::string data, out;
  std::optional<std::uint64_t> seed;
};

// Defaults, then --config, then subcommand flags, then dotted overrides.
AppConfig resolve(const Common& c, const std::vector<DottedOverride>& dotted,
                  const std::vector<std::pair<std::string, std::string>>& flag_overrides) {
  json doc = json::object();
  if (!c.config_path.empty()) {
    std::ifstream f(c.config_path);
    if (!f) throw ConfigError("cannot open config " + c.config_path);
    try {
      f >> doc;
    } catch (const json::exception& e) {
      throw ConfigError("malformed config " + c.config_path + ": " + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config " + c.config_path + " must be a JSON object");
  }
  if (!c.data.empty()) doc["data"] = c.data;
  if (!c.out.empty()) doc["out"] = c.out;
  for (const auto& [k, v] : flag_overrides) apply_override(doc, k, v);
  for (const auto& d : dotted) apply_override(doc, d.key, d.value);
  return config_from_json(doc);
}

void require(const std::string& v, const char* what) {
  if (v.empty()) throw ConfigError(std::string("missing required setting ") + what);
}

int cmd_gen_data(const AppConfig& cfg, std::ostream& out) {
  require(cfg.out, "--out");
  gen_phantom(cfg.phantom, cfg.out);
  write_resolved_config(cfg, cfg.out);
  const DatasetManifest m = read_manifest(cfg.out);
  out << "wrote " << m.samples.size() << " samples to " << cfg.out << '\n';
  return 0;
}

int cmd_train(const AppConfig& cfg, std::ostream& out) {
  require(cfg.data, "--data");
  require(cfg.out, "--out");
  const DatasetManifest data = read_manifest(cfg.data);
  write_resolved_config(cfg, cfg.out);
  const TrainResult r = train(cfg.train, data, cfg.out);
  emit_report(r.final_metrics, ReportFormat::json, (fs::path(cfg.out) / "metrics.json").string());
  emit_report(r.final_metrics, ReportFormat::csv, (fs::path(cfg.out) / "metrics.csv").string());
  out << "trained " << cfg.train.steps << " steps; final loss " << r.log.back().total << "; mDice "
      << r.final_metrics.mDice << "; checkpoint " << r.checkpoint << '\n';
  return 0;
}

int cmd_eval(const AppConfig& cfg, const std::string& checkpoint, const std::string& format,
             std::ostream& out) {
  require(cfg.data, "--data");
  require(checkpoint, "--checkpoint");
  const ReportFormat fmt = parse_report_format(format);
  const DatasetManifest data = read_manifest(cfg.data);
  SegModel<float> model(cfg.train.model, cfg.train.seed);
  load_checkpoint(checkpoint, model.params());
  std::vector<Index> ids;
  for (const auto& s : data.samples) ids.push_back(s.id);
  const MetricsReport m = evaluate_model(model, data, ids, cfg.train.trick);
  if (!cfg.out.empty()) {
    write_resolved_config(cfg, cfg.out);
    const std::string name = fmt == ReportFormat::json ? "metrics.json" : "metrics.csv";
    emit_report(m, fmt, (fs::path(cfg.out) / name).string());
  }
  out << "mDice " << m.mDice << " mIoU " << m.mIoU << " mAcc " << m.mAcc << '\n';
  return 0;
}

int cmd_ablate(const AppConfig& cfg, std::ostream& out) {
  require(cfg.data, "--data");
  require(cfg.out, "--out");
  const DatasetManifest data = read_manifest(cfg.data);
  TrainConfig base = cfg.train;
  base.steps = cfg.ablate.steps;
  const std::vector<AblationConfig> grid = resolve_ablation_grid(cfg.ablate.grid, base);
  write_resolved_config(cfg, cfg.out);
  const std::vector<AblationRow> rows = ablate(data, grid, cfg.out);
  int failed = 0;
  for (const auto& r : rows) {
    out << r.config << ": ";
    if (r.error.empty()) {
      out << "mDice " << r.mDice << " mAcc " << r.mAcc << " mDice_small " << r.mDice_small << '\n';
    } else {
      out << "FAILED " << r.error << '\n';
      ++failed;
    }
  }
  out << "wrote " << (fs::path(cfg.out) / "ablation.csv").string() << '\n';
  return failed == static_cast<int>(rows.size()) ? 1 : 0;
}

int cmd_gradcheck(const AppConfig& cfg, bool kernels_only, std::ostream& out) {
  GradcheckOptions opt;
  opt.eps = cfg.gradcheck.eps;
  opt.tol = cfg.gradcheck.tol;
  const GradcheckReport rep = kernels_only ? run_kernel_suite(opt) : run_gradcheck_suite(opt);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", rep.max_rel_err);
  if (rep.passed) {
    out << "PASS max_rel_err=" << buf << '\n';
    return 0;
  }
  const GradcheckEntry* w = rep.worst();
  out << "FAIL max_rel_err=" << buf << " worst=" << w->name << w->worst << '\n';
  return 1;
}

int cmd_sample_stats(const AppConfig& cfg, std::ostream& out) {
  const SampleStatsSettings& s = cfg.sample_stats;
  const ModelConfig& mc = cfg.train.model;
  SpreadReport rep;
  if (s.mode == "synthetic") {
    const Tensor<double> raw = synthetic_raw_offsets(ModelConfig::kLevels, mc.n_points, s.sigma, s.draws, s.seed);
    rep = spread_of_offsets(raw, "raw");
    const SpreadReport adj =
        synthetic_spread_stats(mc.offset, ModelConfig::kLevels, mc.n_points, s.sigma, s.draws, s.seed);
    rep.rows.insert(rep.rows.end(), adj.rows.begin(), adj.rows.end());
  } else {
    require(cfg.data, "--data");
    const DatasetManifest data = read_manifest(cfg.data);
    if (data.samples.empty()) throw ConfigError("sample-stats: dataset is empty");
    SegModel<float> model(mc, cfg.train.seed);
    if (!s.checkpoint.empty()) load_checkpoint(s.checkpoint, model.params());
    NoGradGuard ng;
    ModelProbe<float> probe;
    const Sample smp = read_sample(data, data.samples.front().id);
    model.pixel_decoder_forward(model.backbone_forward(model_input(smp, cfg.train.trick)), &probe);
    for (std::size_t i = 0; i < probe.encoder_attn.size(); ++i) {
      const std::string layer = "layer" + std::to_string(i) + ":";
      for (auto& r : spread_of_offsets(cast<double>(probe.encoder_attn[i].raw_offsets), layer + "raw").rows) {
        rep.rows.push_back(r);
      }
      for (auto& r : spread_of_offsets(cast<double>(probe.encoder_attn[i].adjusted_offsets),
                                       layer + mc.offset.label())
                         .rows) {
        rep.rows.push_back(r);
      }
    }
  }
  std::string path = "sample_stats.csv";
  if (!cfg.out.empty()) {
    write_resolved_config(cfg, cfg.out);
    path = (fs::path(cfg.out) / "sample_stats.csv").string();
  }
  write_spread_csv(rep, path);
  for (const auto& r : rep.rows) {
    out << "level " << r.level << ' ' << r.strategy << " mean_norm " << r.mean_norm << '\n';
  }
  out << "wrote " << path << '\n';
  return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args_in, std::ostream& out, std::ostream& err) {
  configure_threads_from_env();
  CLI::App app{"nearquery: deformable-query segmentation on synthetic phantoms"};
  app.require_subcommand(1);
  Common common;
  std::string checkpoint, format = "json";
  bool kernels_only = false;
  std::vector<std::pair<std::string, std::string>> flags;

  auto add_common = [&](CLI::App* sub, bool data, bool out_dir) {
    sub->add_option("--config", common.config_path, "JSON config (unknown keys rejected)");
    if (data) sub->add_option("--data", common.data, "dataset directory");
    if (out_dir) sub->add_option("--out", common.out, "output directory");
    sub->footer("Any config leaf can be set with --<dotted.key> <value>, e.g. --model.offset.strategy clip_divide");
  };

  std::string n_opt, size_opt, steps_opt, grid_opt, tol_opt, eps_opt, mode_opt, sigma_opt,
      draws_opt, seed_opt;
  CLI::App* gen = app.add_subcommand("gen-data", "generate a phantom dataset");
  add_common(gen, false, true);
  gen->add_option("--n", n_opt, "number of images");
  gen->add_option("--size", size_opt, "image side in pixels");
  gen->add_option("--seed", seed_opt, "generator seed");

  CLI::App* tr = app.add_subcommand("train", "train a model");
  add_common(tr, true, true);
  tr->add_option("--steps", steps_opt, "optimizer steps");
  tr->add_option("--seed", seed_opt, "training seed");

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_common(ev, true, true);
  ev->add_option("--checkpoint", checkpoint, "checkpoint to load")->required();
  ev->add_option("--format", format, "report format (csv|json)");

  CLI::App* ab = app.add_subcommand("ablate", "run the ablation grid");
  add_common(ab, true, true);
  ab->add_option("--grid", grid_opt, "default, or comma-separated config names");
  ab->add_option("--steps", steps_opt, "steps per config");
  ab->add_option("--seed", seed_opt, "training seed shared by all configs");

  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
  add_common(gc, false, false);
  gc->add_option("--tol", tol_opt, "max relative error (default 1e-4)");
  gc->add_option("--eps", eps_opt, "finite-difference step");
  gc->add_flag("--kernels-only", kernels_only, "skip the end-to-end micro model");

  CLI::App* ss = app.add_subcommand("sample-stats", "sampling offset spread statistics");
  add_common(ss, true, true);
  ss->add_option("--mode", mode_opt, "synthetic|model");
  ss->add_option("--sigma", sigma_opt, "raw offset std (synthetic)");
  ss->add_option("--draws", draws_opt, "number of draws (synthetic)");
  ss->add_option("--seed", seed_opt, "seed");
  ss->add_option("--checkpoint", checkpoint, "weights for model mode");

  std::vector<std::string> args = args_in;
  std::vector<DottedOverride> dotted;
  try {
    dotted = extract_dotted(args);
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << app.help();
    one_line(err, "usage", e.what());
    return 2;
  } catch (const UsageError& e) {
    err << app.help();
    one_line(err, "usage", e.what());
    return 2;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    auto put = [&](const std::string& key, const std::string& v) {
      if (!v.empty()) flags.emplace_back(key, v);
    };
    if (name == "gen-data") {
      put("phantom.n", n_opt);
      put("phantom.size", size_opt);
      put("phantom.seed", seed_opt);
    } else if (name == "train") {
      put("train.steps", steps_opt);
      put("train.seed", seed_opt);
    } else if (name == "ablate") {
      put("ablate.grid", grid_opt);
      put("ablate.steps", steps_opt);
      put("train.seed", seed_opt);
    } else if (name == "gradcheck") {
      put("gradcheck.tol", tol_opt);
      put("gradcheck.eps", eps_opt);
    } else if (name == "sample-stats") {
      put("sample_stats.mode", mode_opt);
      put("sample_stats.sigma", sigma_opt);
      put("sample_stats.draws", draws_opt);
      put("sample_stats.seed", seed_opt);
      if (!checkpoint.empty()) flags.emplace_back("sample_stats.checkpoint", checkpoint);
    }

    AppConfig cfg;
    try {
      cfg = resolve(common, dotted, flags);
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      if (msg.rfind("unknown config key", 0) == 0 && !dotted.empty()) {
        // A mistyped --dotted.flag is a usage error like any unknown flag.
        for (const auto& d : dotted) {
          if (msg.find("'" + d.key + "'") != std::string::npos) {
            err << sub->help();
            one_line(err, "usage", "unknown flag --" + d.key);
            return 2;
          }
        }
      }
      throw;
    }

    if (name == "gen-data") return cmd_gen_data(cfg, out);
    if (name == "train") return cmd_train(cfg, out);
    if (name == "eval") return cmd_eval(cfg, checkpoint, format, out);
    if (name == "ablate") return cmd_ablate(cfg, out);
    if (name == "gradcheck") return cmd_gradcheck(cfg, kernels_only, out);
    if (name == "sample-stats") return cmd_sample_stats(cfg, out);
    one_line(err, "usage", "unknown subcommand " + name);
    return 2;
  } catch (const ConfigError& e) {
    one_line(err, "config", e.what());
  } catch (const DatasetError& e) {
    one_line(err, "dataset", e.what());
  } catch (const CheckpointError& e) {
    one_line(err, "checkpoint", e.what());
  } catch (const NumericError& e) {
    one_line(err, "numeric", e.what());
  } catch (const std::invalid_argument& e) {
    one_line(err, "invalid", e.what());
  } catch (const std::exception& e) {
    one_line(err, "runtime", e.what());
  }
  return 1;
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return cli_main(args, std::cout, std::cerr);
}

}  // namespace nq
