#include "nearquery/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <stdexcept>

#include "nearquery/dataset.hpp"
#include "nearquery/ops.hpp"
#include "nearquery/rng.hpp"

namespace nq {

std::string to_string(SizeTier t) {
  switch (t) {
    case SizeTier::large: return "large";
    case SizeTier::mid: return "mid";
    case SizeTier::small: return "small";
  }
  return "?";
}

SizeTier parse_size_tier(const std::string& s) {
  if (s == "large") return SizeTier::large;
  if (s == "mid") return SizeTier::mid;
  if (s == "small") return SizeTier::small;
  throw std::invalid_argument("unknown size tier '" + s + "'");
}

TierRange tier_range(SizeTier t) {
  switch (t) {
    case SizeTier::large: return {20.0, 30.0};
    case SizeTier::mid: return {8.0, 14.0};
    case SizeTier::small: return {2.0, 5.0};
  }
  return {0, 0};
}

std::vector<PhantomClass> default_phantom_classes() {
  return {
      {"mandible", SizeTier::large, 0.85, 0.03},
      {"brainstem", SizeTier::mid, 0.55, 0.03},
      {"parotid", SizeTier::mid, 0.40, 0.03},
      {"spinal_cord", SizeTier::mid, 0.70, 0.03},
      {"cochlea", SizeTier::small, 0.95, 0.03},
      {"optic_nerve", SizeTier::small, 0.25, 0.03},
  };
}

void PhantomSpec::validate() const {
  if (size < 32) throw std::invalid_argument("phantom.size must be >= 32");
  if (classes.empty() || classes.size() > 254) {
    throw std::invalid_argument("phantom.classes must hold 1..254 entries");
  }
  if (std::none_of(classes.begin(), classes.end(), [](const PhantomClass& c) { return c.tier == SizeTier::small; })) {
    throw std::invalid_argument("phantom.classes needs at least one small-tier class");
  }
  for (const auto& c : classes) {
    if (c.name.empty()) throw std::invalid_argument("phantom class names must be non-empty");
    if (!(c.intensity_sigma >= 0)) throw std::invalid_argument("phantom intensity sigma must be >= 0");
  }
  if (n < 0) throw std::invalid_argument("phantom.n must be >= 0");
  if (!(bg_sigma >= 0)) throw std::invalid_argument("phantom.bg_sigma must be >= 0");
  if (!(max_foreground > 0 && max_foreground <= 1)) {
    throw std::invalid_argument("phantom.max_foreground must be in (0, 1]");
  }
  if (max_attempts < 1) throw std::invalid_argument("phantom.max_attempts must be >= 1");
}

PhantomImage generate_phantom(const PhantomSpec& spec, Index id) {
  spec.validate();
  const Index S = spec.size;
  CounterRng rng(spec.seed, static_cast<std::uint64_t>(id));

  // Large organs go first so they still fit under the foreground cap; small
  // ones next since they are what the benchmark is about. Sizes are redrawn
  // until the organ leaves room for the rest, which skews them small.
  std::vector<std::size_t> order;
  for (SizeTier tier : {SizeTier::large, SizeTier::small, SizeTier::mid}) {
    std::vector<std::size_t> group;
    for (std::size_t c = 0; c < spec.classes.size(); ++c) {
      if (spec.classes[c].tier == tier) group.push_back(c);
    }
    for (std::size_t i = group.size(); i > 1; --i) {
      std::swap(group[i - 1], group[static_cast<std::size_t>(rng.below(i))]);
    }
    order.insert(order.end(), group.begin(), group.end());
  }

  PhantomImage img;
  img.size = S;
  img.labels.assign(static_cast<std::size_t>(S * S), 0);
  const double cap = spec.max_foreground * static_cast<double>(S * S);
  Index fg = 0;
  std::vector<Index> pix;
  // Area kept free for organs not placed yet, at their smallest size.
  double reserve = 0;
  for (const auto& cls : spec.classes) reserve += std::numbers::pi * tier_range(cls.tier).lo * tier_range(cls.tier).lo;
  for (std::size_t c : order) {
    const auto& cls = spec.classes[c];
    reserve -= std::numbers::pi * tier_range(cls.tier).lo * tier_range(cls.tier).lo;
    const TierRange r = tier_range(cls.tier);
    bool placed = false;
    for (Index attempt = 0; attempt < spec.max_attempts && !placed; ++attempt) {
      const double a = rng.uniform(r.lo, r.hi);
      const double b = rng.uniform(r.lo, r.hi);
      const double theta = rng.uniform(0.0, std::numbers::pi);
      const double margin = std::max(a, b) + 1.0;
      const double cx = rng.uniform(margin, static_cast<double>(S - 1) - margin);
      const double cy = rng.uniform(margin, static_cast<double>(S - 1) - margin);
      if (2.0 * margin >= static_cast<double>(S - 1)) continue;
      const double ct = std::cos(theta), st = std::sin(theta);
      pix.clear();
      const Index y0 = std::max<Index>(0, static_cast<Index>(std::floor(cy - margin)));
      const Index y1 = std::min<Index>(S - 1, static_cast<Index>(std::ceil(cy + margin)));
      const Index x0 = std::max<Index>(0, static_cast<Index>(std::floor(cx - margin)));
      const Index x1 = std::min<Index>(S - 1, static_cast<Index>(std::ceil(cx + margin)));
      for (Index y = y0; y <= y1; ++y) {
        for (Index x = x0; x <= x1; ++x) {
          const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
          const double u = (dx * ct + dy * st) / a, v = (-dx * st + dy * ct) / b;
          if (u * u + v * v <= 1.0) pix.push_back(y * S + x);
        }
      }
      if (pix.empty() || static_cast<double>(fg + static_cast<Index>(pix.size())) + reserve >= cap) continue;
      bool clear = true;
      for (Index p : pix) {
        const Index y = p / S, x = p % S;
        for (Index yy = std::max<Index>(0, y - 1); yy <= std::min<Index>(S - 1, y + 1) && clear; ++yy) {
          for (Index xx = std::max<Index>(0, x - 1); xx <= std::min<Index>(S - 1, x + 1); ++xx) {
            if (img.labels[static_cast<std::size_t>(yy * S + xx)] != 0) {
              clear = false;
              break;
            }
          }
        }
        if (!clear) break;
      }
      if (!clear) continue;
      for (Index p : pix) img.labels[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(c + 1);
      fg += static_cast<Index>(pix.size());
      placed = true;
    }
    if (!placed) {
      img.notes.push_back("sample " + std::to_string(id) + ": skipped " + cls.name + " after " +
                          std::to_string(spec.max_attempts) + " placement attempts");
    }
  }

  img.image.resize(static_cast<std::size_t>(S * S));
  for (std::size_t i = 0; i < img.image.size(); ++i) {
    const std::uint8_t l = img.labels[i];
    const double mean = l == 0 ? spec.bg_mean : spec.classes[l - 1u].intensity_mean;
    const double sigma = l == 0 ? spec.bg_sigma : spec.classes[l - 1u].intensity_sigma;
    img.image[i] = static_cast<float>(std::clamp(rng.normal(mean, sigma), 0.0, 1.0));
  }
  return img;
}

void gen_phantom(const PhantomSpec& spec, const std::string& out_dir) {
  spec.validate();
  std::filesystem::create_directories(out_dir);
  DatasetManifest m;
  m.root = out_dir;
  for (const auto& c : spec.classes) m.classes.push_back({c.name, to_string(c.tier)});
  for (Index id = 0; id < spec.n; ++id) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "sample_%05lld", static_cast<long long>(id));
    m.samples.push_back({id, std::string(stem) + ".f32", std::string(stem) + ".u8", spec.size, spec.size, 1});
  }
  for (Index id = 0; id < spec.n; ++id) {
    PhantomImage img = generate_phantom(spec, id);
    Sample s;
    s.id = id;
    s.height = s.width = spec.size;
    s.channels = 1;
    s.image = std::move(img.image);
    s.labels = std::move(img.labels);
    write_sample(m, s);
    m.notes.insert(m.notes.end(), img.notes.begin(), img.notes.end());
  }
  write_manifest(m, out_dir);
}

template <class T>
Tensor<T> preprocess_trick(const Tensor<T>& image) {
  if (image.rank() != 3 || image.dim(0) != 1) {
    throw ShapeError("preprocess_trick: expected 1 x H x W, got " + shape_str(image.shape()));
  }
  const Index H = image.dim(1), W = image.dim(2);
  if (H < 2 || W < 2) throw ShapeError("preprocess_trick: image must be at least 2 x 2");
  NoGradGuard ng;
  const Tensor<T> up = resize_bilinear(resize_bilinear(image, 2 * H, 2 * W), H, W);
  const Tensor<T> down = resize_bilinear(resize_bilinear(image, H / 2, W / 2), H, W);
  std::vector<T> v;
  v.reserve(static_cast<std::size_t>(3 * H * W));
  for (const Tensor<T>* t : {&image, &up, &down}) v.insert(v.end(), t->data().begin(), t->data().end());
  return Tensor<T>::from({3, H, W}, std::move(v));
}

template <class T>
Tensor<T> preprocess_naive(const Tensor<T>& image) {
  if (image.rank() != 3 || image.dim(0) != 1) {
    throw ShapeError("preprocess_naive: expected 1 x H x W, got " + shape_str(image.shape()));
  }
  std::vector<T> v;
  v.reserve(static_cast<std::size_t>(3 * image.numel()));
  for (int c = 0; c < 3; ++c) v.insert(v.end(), image.data().begin(), image.data().end());
  return Tensor<T>::from({3, image.dim(1), image.dim(2)}, std::move(v));
}

template Tensor<float> preprocess_trick(const Tensor<float>&);
template Tensor<double> preprocess_trick(const Tensor<double>&);
template Tensor<float> preprocess_naive(const Tensor<float>&);
template Tensor<double> preprocess_naive(const Tensor<double>&);

}  // namespace nq
