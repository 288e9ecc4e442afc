#pragma once

// On-disk dataset: manifest.json plus raw little-endian rasters
// (<id>.f32 images, C x H x W; <id>.u8 label maps, H x W).

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "nearquery/tensor.hpp"

namespace nq {

struct ClassInfo {
  std::string name;
  std::string tier;  // large | mid | small
};

struct ManifestSample {
  Index id = 0;
  std::string image;  // relative to the manifest directory
  std::string label;
  Index height = 0, width = 0, channels = 1;
};

struct DatasetManifest {
  int version = 1;
  std::vector<ClassInfo> classes;
  std::vector<ManifestSample> samples;
  std::vector<std::string> notes;
  std::string root;  // directory holding manifest.json; not serialized

  Index n_classes() const { return static_cast<Index>(classes.size()); }
  const ManifestSample& find(Index id) const;
};

struct Sample {
  Index id = 0;
  Index height = 0, width = 0, channels = 1;
  std::vector<float> image;
  std::vector<std::uint8_t> labels;
};

using SampleBatch = std::vector<Sample>;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Accepts the manifest path or its directory.
DatasetManifest read_manifest(const std::string& path);
void write_manifest(const DatasetManifest& m, const std::string& dir);

Sample read_sample(const DatasetManifest& m, Index id);
// Writes the rasters named by the manifest entry for s.id.
void write_sample(const DatasetManifest& m, const Sample& s);

// Checks every referenced file exists with the expected byte length.
void verify_manifest(const DatasetManifest& m);

void write_f32_le(const std::string& path, const std::vector<float>& v);
std::vector<float> read_f32_le(const std::string& path, std::size_t expected_count);
void write_u8(const std::string& path, const std::vector<std::uint8_t>& v);
std::vector<std::uint8_t> read_u8(const std::string& path, std::size_t expected_count);

}  // namespace nq
