#include "nearquery/config.hpp"

#include <filesystem>
#include <fstream>

namespace nq {

using json = nlohmann::json;

void AppConfig::validate() const {
  phantom.validate();
  train.validate();
  if (ablate.steps < 1) throw ConfigError("ablate.steps must be >= 1");
  if (sample_stats.mode != "synthetic" && sample_stats.mode != "model") {
    throw ConfigError("sample_stats.mode must be synthetic or model");
  }
  if (sample_stats.draws < 1) throw ConfigError("sample_stats.draws must be >= 1");
  if (!(sample_stats.sigma > 0)) throw ConfigError("sample_stats.sigma must be > 0");
  if (!(gradcheck.tol > 0) || !(gradcheck.eps > 0)) throw ConfigError("gradcheck.tol and gradcheck.eps must be > 0");
}

json to_json(const AppConfig& c) {
  json classes = json::array();
  for (const auto& k : c.phantom.classes) {
    classes.push_back({{"name", k.name}, {"tier", to_string(k.tier)},
                       {"intensity_mean", k.intensity_mean}, {"intensity_sigma", k.intensity_sigma}});
  }
  const ModelConfig& m = c.train.model;
  const LossWeights& w = c.train.weights;
  return {
      {"data", c.data},
      {"out", c.out},
      {"phantom",
       {{"size", c.phantom.size},
        {"n", c.phantom.n},
        {"seed", c.phantom.seed},
        {"bg_mean", c.phantom.bg_mean},
        {"bg_sigma", c.phantom.bg_sigma},
        {"max_foreground", c.phantom.max_foreground},
        {"max_attempts", c.phantom.max_attempts},
        {"classes", classes}}},
      {"train",
       {{"batch", c.train.batch},
        {"lr", c.train.lr},
        {"beta1", c.train.beta1},
        {"beta2", c.train.beta2},
        {"steps", c.train.steps},
        {"seed", c.train.seed},
        {"eval_interval", c.train.eval_interval},
        {"trick", c.train.trick}}},
      {"model",
       {{"in_channels", m.in_channels},
        {"backbone_channels", m.backbone_channels},
        {"d_model", m.d_model},
        {"n_heads", m.n_heads},
        {"n_points", m.n_points},
        {"enc_layers", m.enc_layers},
        {"dec_rounds", m.dec_rounds},
        {"n_queries", m.n_queries},
        {"n_classes", m.n_classes},
        {"deep_offsets", m.deep_offsets},
        {"offset",
         {{"strategy", to_string(m.offset.strategy)},
          {"squash_kind", to_string(m.offset.squash_kind)},
          {"threshold_px", m.offset.threshold_px},
          {"divisor", m.offset.divisor},
          {"scale_c", m.offset.scale_c}}},
        {"fusion", {{"position", to_string(m.fusion.position)}, {"source", to_string(m.fusion.source)}}},
        {"bls", to_string(m.bls)}}},
      {"loss",
       {{"cls", w.cls}, {"bce", w.bce}, {"dice", w.dice}, {"bls_a", w.bls_a}, {"bls_b", w.bls_b},
        {"no_object", w.no_object}}},
      {"ablate", {{"grid", c.ablate.grid}, {"steps", c.ablate.steps}}},
      {"sample_stats",
       {{"mode", c.sample_stats.mode},
        {"sigma", c.sample_stats.sigma},
        {"draws", c.sample_stats.draws},
        {"seed", c.sample_stats.seed},
        {"checkpoint", c.sample_stats.checkpoint}}},
      {"gradcheck", {{"tol", c.gradcheck.tol}, {"eps", c.gradcheck.eps}}},
  };
}

namespace {

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    // Integers may not silently take fractional values.
    return !(a.is_number_integer() && b.is_number_float());
  }
  return a.type() == b.type();
}

void merge_strict(json& base, const json& over, const std::string& path) {
  if (!over.is_object()) throw ConfigError("config" + (path.empty() ? "" : " key " + path) + " must be an object");
  for (auto it = over.begin(); it != over.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& dst = base[it.key()];
    if (dst.is_object()) {
      merge_strict(dst, it.value(), key);
    } else {
      if (!same_kind(dst, it.value())) {
        throw ConfigError("config key '" + key + "' expects " + std::string(dst.type_name()) + ", got " +
                          std::string(it.value().type_name()));
      }
      if (dst.is_number_unsigned() && it.value().is_number_integer() && it.value().get<std::int64_t>() < 0) {
        throw ConfigError("config key '" + key + "' must be non-negative");
      }
      dst = it.value();
    }
  }
}

template <class V>
V get(const json& j, const char* key) {
  try {
    return j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

template <class F>
auto parse_enum(F f, const json& j, const char* key) {
  try {
    return f(get<std::string>(j, key));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

AppConfig config_from_json(const json& j) {
  json full = to_json(AppConfig{});
  merge_strict(full, j, "");

  AppConfig c;
  c.data = get<std::string>(full, "data");
  c.out = get<std::string>(full, "out");

  const json& p = full.at("phantom");
  c.phantom.size = get<Index>(p, "size");
  c.phantom.n = get<Index>(p, "n");
  c.phantom.seed = get<std::uint64_t>(p, "seed");
  c.phantom.bg_mean = get<double>(p, "bg_mean");
  c.phantom.bg_sigma = get<double>(p, "bg_sigma");
  c.phantom.max_foreground = get<double>(p, "max_foreground");
  c.phantom.max_attempts = get<Index>(p, "max_attempts");
  c.phantom.classes.clear();
  for (const json& k : p.at("classes")) {
    if (!k.is_object()) throw ConfigError("phantom.classes entries must be objects");
    for (auto it = k.begin(); it != k.end(); ++it) {
      if (it.key() != "name" && it.key() != "tier" && it.key() != "intensity_mean" && it.key() != "intensity_sigma") {
        throw ConfigError("unknown config key 'phantom.classes[]." + it.key() + "'");
      }
    }
    PhantomClass pc;
    pc.name = get<std::string>(k, "name");
    pc.tier = parse_enum(parse_size_tier, k, "tier");
    pc.intensity_mean = k.value("intensity_mean", pc.intensity_mean);
    pc.intensity_sigma = k.value("intensity_sigma", pc.intensity_sigma);
    c.phantom.classes.push_back(pc);
  }

  const json& t = full.at("train");
  c.train.batch = get<Index>(t, "batch");
  c.train.lr = get<double>(t, "lr");
  c.train.beta1 = get<double>(t, "beta1");
  c.train.beta2 = get<double>(t, "beta2");
  c.train.steps = get<Index>(t, "steps");
  c.train.seed = get<std::uint64_t>(t, "seed");
  c.train.eval_interval = get<Index>(t, "eval_interval");
  c.train.trick = get<bool>(t, "trick");

  const json& m = full.at("model");
  ModelConfig& mc = c.train.model;
  mc.in_channels = get<Index>(m, "in_channels");
  const auto bc = get<std::vector<Index>>(m, "backbone_channels");
  if (bc.size() != 4) throw ConfigError("model.backbone_channels must hold 4 values");
  std::copy(bc.begin(), bc.end(), mc.backbone_channels.begin());
  mc.d_model = get<Index>(m, "d_model");
  mc.n_heads = get<Index>(m, "n_heads");
  mc.n_points = get<Index>(m, "n_points");
  mc.enc_layers = get<Index>(m, "enc_layers");
  mc.dec_rounds = get<Index>(m, "dec_rounds");
  mc.n_queries = get<Index>(m, "n_queries");
  mc.n_classes = get<Index>(m, "n_classes");
  mc.deep_offsets = get<bool>(m, "deep_offsets");
  const json& o = m.at("offset");
  mc.offset.strategy = parse_enum(parse_offset_strategy, o, "strategy");
  mc.offset.squash_kind = parse_enum(parse_squash_kind, o, "squash_kind");
  mc.offset.threshold_px = get<double>(o, "threshold_px");
  mc.offset.divisor = get<double>(o, "divisor");
  mc.offset.scale_c = get<double>(o, "scale_c");
  const json& f = m.at("fusion");
  mc.fusion.position = parse_enum(parse_fusion_position, f, "position");
  mc.fusion.source = parse_enum(parse_fusion_source, f, "source");
  mc.bls = parse_enum(parse_bls_mode, m, "bls");

  const json& w = full.at("loss");
  c.train.weights = {get<double>(w, "cls"),   get<double>(w, "bce"),   get<double>(w, "dice"),
                     get<double>(w, "bls_a"), get<double>(w, "bls_b"), get<double>(w, "no_object")};

  const json& a = full.at("ablate");
  c.ablate.grid = get<std::string>(a, "grid");
  c.ablate.steps = get<Index>(a, "steps");

  const json& s = full.at("sample_stats");
  c.sample_stats.mode = get<std::string>(s, "mode");
  c.sample_stats.sigma = get<double>(s, "sigma");
  c.sample_stats.draws = get<Index>(s, "draws");
  c.sample_stats.seed = get<std::uint64_t>(s, "seed");
  c.sample_stats.checkpoint = get<std::string>(s, "checkpoint");

  const json& g = full.at("gradcheck");
  c.gradcheck.tol = get<double>(g, "tol");
  c.gradcheck.eps = get<double>(g, "eps");

  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

void apply_override(json& doc, const std::string& dotted_key, const std::string& value) {
  const json defaults = to_json(AppConfig{});
  const json* ref = &defaults;
  json* dst = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted_key.find('.', start);
    const std::string part = dotted_key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty() || !ref->is_object() || !ref->contains(part)) {
      throw ConfigError("unknown config key '" + dotted_key + "'");
    }
    ref = &ref->at(part);
    if (!dst->contains(part)) (*dst)[part] = ref->is_object() ? json::object() : json();
    dst = &(*dst)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (ref->is_object()) throw ConfigError("config key '" + dotted_key + "' is a section, not a value");
  try {
    if (ref->is_string()) {
      *dst = value;
    } else if (ref->is_boolean()) {
      if (value == "true" || value == "1") {
        *dst = true;
      } else if (value == "false" || value == "0") {
        *dst = false;
      } else {
        throw ConfigError("config key '" + dotted_key + "' expects true/false, got '" + value + "'");
      }
    } else if (ref->is_number_unsigned()) {
      std::size_t used = 0;
      if (!value.empty() && value[0] == '-') throw std::invalid_argument("negative");
      const unsigned long long v = std::stoull(value, &used);
      if (used != value.size()) throw std::invalid_argument("trailing characters");
      *dst = static_cast<std::uint64_t>(v);
    } else if (ref->is_number_integer()) {
      std::size_t used = 0;
      const long long v = std::stoll(value, &used);
      if (used != value.size()) throw std::invalid_argument("trailing characters");
      *dst = static_cast<std::int64_t>(v);
    } else if (ref->is_number_float()) {
      std::size_t used = 0;
      const double v = std::stod(value, &used);
      if (used != value.size()) throw std::invalid_argument("trailing characters");
      *dst = v;
    } else {
      *dst = json::parse(value);
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + dotted_key + "' cannot take value '" + value + "'");
  }
}

AppConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

void write_resolved_config(const AppConfig& cfg, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const auto p = std::filesystem::path(out_dir) / "config.resolved.json";
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << to_json(cfg).dump(2) << '\n';
}

}  // namespace nq
