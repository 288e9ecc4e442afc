#include "nearquery/dataset.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace nq {

namespace fs = std::filesystem;
using json = nlohmann::json;

const ManifestSample& DatasetManifest::find(Index id) const {
  for (const auto& s : samples) {
    if (s.id == id) return s;
  }
  throw DatasetError("sample id " + std::to_string(id) + " not in manifest");
}

DatasetManifest read_manifest(const std::string& path) {
  fs::path p(path);
  if (fs::is_directory(p)) p /= "manifest.json";
  std::ifstream f(p);
  if (!f) throw DatasetError("cannot open manifest " + p.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw DatasetError("malformed manifest " + p.string() + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.version = j.at("version").get<int>();
    for (const auto& c : j.at("classes")) m.classes.push_back({c.at("name"), c.at("tier")});
    for (const auto& s : j.at("samples")) {
      ManifestSample ms;
      ms.id = s.at("id");
      ms.image = s.at("image");
      ms.label = s.at("label");
      ms.height = s.at("height");
      ms.width = s.at("width");
      ms.channels = s.at("channels");
      m.samples.push_back(ms);
    }
    if (j.contains("notes")) m.notes = j.at("notes").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw DatasetError("manifest " + p.string() + ": " + e.what());
  }
  if (m.version != 1) throw DatasetError("unsupported manifest version " + std::to_string(m.version));
  m.root = p.parent_path().string();
  return m;
}

void write_manifest(const DatasetManifest& m, const std::string& dir) {
  json j;
  j["version"] = m.version;
  j["classes"] = json::array();
  for (const auto& c : m.classes) j["classes"].push_back({{"name", c.name}, {"tier", c.tier}});
  j["samples"] = json::array();
  for (const auto& s : m.samples) {
    j["samples"].push_back({{"id", s.id}, {"image", s.image}, {"label", s.label},
                            {"height", s.height}, {"width", s.width}, {"channels", s.channels}});
  }
  j["notes"] = m.notes;
  fs::create_directories(dir);
  const fs::path p = fs::path(dir) / "manifest.json";
  std::ofstream f(p);
  if (!f) throw DatasetError("cannot write " + p.string());
  f << j.dump(2) << '\n';
}

namespace {

std::string joined(const DatasetManifest& m, const std::string& rel) {
  return m.root.empty() ? rel : (fs::path(m.root) / rel).string();
}

std::uintmax_t file_bytes(const std::string& path) {
  std::error_code ec;
  const auto n = fs::file_size(path, ec);
  if (ec) throw DatasetError("missing file " + path);
  return n;
}

}  // namespace

void write_f32_le(const std::string& path, const std::vector<float>& v) {
  std::vector<unsigned char> bytes(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(v[i]);
    for (int b = 0; b < 4; ++b) bytes[4 * i + static_cast<std::size_t>(b)] = static_cast<unsigned char>(u >> (8 * b));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DatasetError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DatasetError("failed writing " + path);
}

std::vector<float> read_f32_le(const std::string& path, std::size_t expected_count) {
  const auto n = file_bytes(path);
  if (n != expected_count * 4) {
    throw DatasetError(path + ": expected " + std::to_string(expected_count * 4) + " bytes, found " +
                       std::to_string(n));
  }
  std::vector<unsigned char> bytes(n);
  std::ifstream f(path, std::ios::binary);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
  if (!f) throw DatasetError("failed reading " + path);
  std::vector<float> v(expected_count);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[4 * i + static_cast<std::size_t>(b)]) << (8 * b);
    v[i] = std::bit_cast<float>(u);
  }
  return v;
}

void write_u8(const std::string& path, const std::vector<std::uint8_t>& v) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DatasetError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size()));
  if (!f) throw DatasetError("failed writing " + path);
}

std::vector<std::uint8_t> read_u8(const std::string& path, std::size_t expected_count) {
  const auto n = file_bytes(path);
  if (n != expected_count) {
    throw DatasetError(path + ": expected " + std::to_string(expected_count) + " bytes, found " +
                       std::to_string(n));
  }
  std::vector<std::uint8_t> v(n);
  std::ifstream f(path, std::ios::binary);
  f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n));
  if (!f) throw DatasetError("failed reading " + path);
  return v;
}

Sample read_sample(const DatasetManifest& m, Index id) {
  const ManifestSample& ms = m.find(id);
  Sample s;
  s.id = id;
  s.height = ms.height;
  s.width = ms.width;
  s.channels = ms.channels;
  const auto hw = static_cast<std::size_t>(ms.height * ms.width);
  s.image = read_f32_le(joined(m, ms.image), hw * static_cast<std::size_t>(ms.channels));
  s.labels = read_u8(joined(m, ms.label), hw);
  for (std::uint8_t v : s.labels) {
    if (v > m.n_classes()) {
      throw DatasetError(ms.label + ": label value " + std::to_string(v) + " exceeds class count " +
                         std::to_string(m.n_classes()));
    }
  }
  return s;
}

void write_sample(const DatasetManifest& m, const Sample& s) {
  const ManifestSample& ms = m.find(s.id);
  const auto hw = static_cast<std::size_t>(ms.height * ms.width);
  if (s.image.size() != hw * static_cast<std::size_t>(ms.channels) || s.labels.size() != hw) {
    throw DatasetError("sample " + std::to_string(s.id) + " does not match its manifest entry");
  }
  write_f32_le(joined(m, ms.image), s.image);
  write_u8(joined(m, ms.label), s.labels);
}

void verify_manifest(const DatasetManifest& m) {
  for (const auto& ms : m.samples) {
    const auto hw = static_cast<std::uintmax_t>(ms.height * ms.width);
    const auto ni = file_bytes(joined(m, ms.image));
    if (ni != hw * static_cast<std::uintmax_t>(ms.channels) * 4) {
      throw DatasetError(ms.image + ": expected " + std::to_string(hw * static_cast<std::uintmax_t>(ms.channels) * 4) +
                         " bytes, found " + std::to_string(ni));
    }
    const auto nl = file_bytes(joined(m, ms.label));
    if (nl != hw) {
      throw DatasetError(ms.label + ": expected " + std::to_string(hw) + " bytes, found " + std::to_string(nl));
    }
  }
}

}  // namespace nq
