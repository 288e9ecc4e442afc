#pragma once

// Synthetic organ phantoms: dark noisy background with non-overlapping
// rotated ellipses of three size tiers, each class with its own intensity.

#include <cstdint>
#include <string>
#include <vector>

#include "nearquery/tensor.hpp"

namespace nq {

enum class SizeTier { large, mid, small };

std::string to_string(SizeTier t);
SizeTier parse_size_tier(const std::string& s);

// Semi-axis range in pixels for a tier.
struct TierRange {
  double lo, hi;
};
TierRange tier_range(SizeTier t);

struct PhantomClass {
  std::string name;
  SizeTier tier = SizeTier::mid;
  double intensity_mean = 0.5;
  double intensity_sigma = 0.03;
};

std::vector<PhantomClass> default_phantom_classes();

struct PhantomSpec {
  Index size = 128;
  std::vector<PhantomClass> classes = default_phantom_classes();
  double bg_mean = 0.05;
  double bg_sigma = 0.03;
  Index n = 16;
  std::uint64_t seed = 0;
  double max_foreground = 0.15;  // strict upper bound on the foreground fraction
  Index max_attempts = 100;      // placement attempts per organ

  void validate() const;
};

struct PhantomImage {
  Index size = 0;
  std::vector<float> image;          // size x size, values in [0, 1]
  std::vector<std::uint8_t> labels;  // 0 = background, c = classes[c - 1]
  std::vector<std::string> notes;    // skipped organs
};

// One image; depends only on (spec, id).
PhantomImage generate_phantom(const PhantomSpec& spec, Index id);

// Writes spec.n samples plus manifest.json into out_dir.
void gen_phantom(const PhantomSpec& spec, const std::string& out_dir);

// 1 x H x W -> 3 x H x W: original, up-then-down, down-then-up.
template <class T>
Tensor<T> preprocess_trick(const Tensor<T>& image);

// 1 x H x W -> 3 x H x W with the channel repeated.
template <class T>
Tensor<T> preprocess_naive(const Tensor<T>& image);

}  // namespace nq
