#include "nearquery/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <json.hpp>

namespace nq {

using json = nlohmann::json;

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

void put_f32(std::string& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xff));
}

float get_f32(const unsigned char* p) {
  std::uint32_t u = 0;
  for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  return std::bit_cast<float>(u);
}

struct Entry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore<float>& params,
                     const AdamState<float>* adam) {
  std::vector<Entry> entries;
  for (const auto& p : params.params()) {
    entries.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  }
  if (adam != nullptr) {
    const auto& ps = params.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const auto n = static_cast<std::size_t>(ps[i].tensor.numel());
      auto moment = [&](const std::vector<std::vector<float>>& m) {
        return i < m.size() && !m[i].empty() ? m[i] : std::vector<float>(n, 0.0f);
      };
      entries.push_back({"adam.m." + ps[i].name, ps[i].tensor.shape(), moment(adam->first_moment)});
      entries.push_back({"adam.v." + ps[i].name, ps[i].tensor.shape(), moment(adam->second_moment)});
    }
    entries.push_back({"adam.step", {1}, {static_cast<float>(adam->step_count)}});
  }

  json header = json::object();
  std::string blobs;
  for (const auto& e : entries) {
    header[e.name] = {{"dtype", "f32"}, {"shape", e.shape}, {"offset", blobs.size()}};
    for (float f : e.values) put_f32(blobs, f);
  }
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  put_u64(out, h.size());
  out += h;
  out += blobs;

  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write checkpoint " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("failed writing checkpoint " + path);
}

void load_checkpoint(const std::string& path, ParamStore<float>& params, AdamState<float>* adam) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path);
  const std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 8 || std::memcmp(buf.data(), kCheckpointMagic, 8) != 0) {
    throw CheckpointMagicError(path + ": not a checkpoint (bad magic)");
  }
  if (buf.size() < 16) throw CheckpointTruncatedError(path + ": truncated header length");
  std::uint64_t hlen = 0;
  for (int b = 0; b < 8; ++b) hlen |= static_cast<std::uint64_t>(buf[8 + static_cast<std::size_t>(b)]) << (8 * b);
  if (hlen > buf.size() - 16) throw CheckpointTruncatedError(path + ": truncated header");
  json header;
  try {
    header = json::parse(buf.begin() + 16, buf.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    throw CheckpointError(path + ": malformed header: " + e.what());
  }
  const std::size_t base = 16 + static_cast<std::size_t>(hlen);
  const std::size_t blob_bytes = buf.size() - base;

  std::map<std::string, std::vector<float>> loaded;
  auto fetch = [&](const std::string& name, const Shape& expect) {
    if (!header.contains(name)) throw CheckpointShapeError(path + ": missing tensor '" + name + "'");
    const json& e = header.at(name);
    if (e.value("dtype", "") != "f32") throw CheckpointError(path + ": tensor '" + name + "' is not f32");
    const Shape shape = e.at("shape").get<Shape>();
    if (shape != expect) {
      throw CheckpointShapeError(path + ": tensor '" + name + "' has shape " + shape_str(shape) +
                                 ", model expects " + shape_str(expect));
    }
    const auto off = e.at("offset").get<std::uint64_t>();
    const auto n = static_cast<std::uint64_t>(numel(shape));
    if (off > blob_bytes || n * 4 > blob_bytes - off) {
      throw CheckpointTruncatedError(path + ": data of tensor '" + name + "' is truncated");
    }
    std::vector<float> v(n);
    for (std::uint64_t i = 0; i < n; ++i) v[i] = get_f32(buf.data() + base + off + 4 * i);
    loaded[name] = std::move(v);
  };

  for (const auto& p : params.params()) fetch(p.name, p.tensor.shape());
  if (adam != nullptr) {
    for (const auto& p : params.params()) {
      fetch("adam.m." + p.name, p.tensor.shape());
      fetch("adam.v." + p.name, p.tensor.shape());
    }
    fetch("adam.step", {1});
  }

  // Everything validated; commit.
  for (const auto& p : params.params()) {
    const auto& v = loaded.at(p.name);
    Tensor<float> t = p.tensor;  // shares storage with the store
    auto dst = t.mutable_data();
    std::copy(v.begin(), v.end(), dst.begin());
  }
  if (adam != nullptr) {
    const auto& ps = params.params();
    adam->first_moment.assign(ps.size(), {});
    adam->second_moment.assign(ps.size(), {});
    for (std::size_t i = 0; i < ps.size(); ++i) {
      adam->first_moment[i] = std::move(loaded.at("adam.m." + ps[i].name));
      adam->second_moment[i] = std::move(loaded.at("adam.v." + ps[i].name));
    }
    adam->step_count = static_cast<std::int64_t>(loaded.at("adam.step")[0]);
  }
}

}  // namespace nq
