#include "nearquery/deform_attn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <stdexcept>

#include "nearquery/kernels.hpp"
#include "nearquery/ops.hpp"
#include "nearquery/rng.hpp"

namespace nq {

std::string to_string(OffsetStrategy s) {
  switch (s) {
    case OffsetStrategy::none: return "none";
    case OffsetStrategy::clip_divide: return "clip_divide";
    case OffsetStrategy::squash: return "squash";
    case OffsetStrategy::squash_scaled: return "squash_scaled";
  }
  return "?";
}

std::string to_string(SquashKind k) {
  return k == SquashKind::softmax_sign ? "softmax_sign" : "sigmoid_symmetric";
}

OffsetStrategy parse_offset_strategy(const std::string& s) {
  if (s == "none") return OffsetStrategy::none;
  if (s == "clip_divide") return OffsetStrategy::clip_divide;
  if (s == "squash") return OffsetStrategy::squash;
  if (s == "squash_scaled") return OffsetStrategy::squash_scaled;
  throw std::invalid_argument("unknown offset strategy '" + s + "'");
}

SquashKind parse_squash_kind(const std::string& s) {
  if (s == "softmax_sign") return SquashKind::softmax_sign;
  if (s == "sigmoid_symmetric") return SquashKind::sigmoid_symmetric;
  throw std::invalid_argument("unknown squash kind '" + s + "'");
}

void OffsetAdjustConfig::validate() const {
  if (!(threshold_px >= 0)) throw std::invalid_argument("offset.threshold_px must be >= 0");
  if (!(divisor > 1)) throw std::invalid_argument("offset.divisor must be > 1");
  if (!(scale_c > 0)) throw std::invalid_argument("offset.scale_c must be > 0");
}

std::string OffsetAdjustConfig::label() const {
  if (strategy == OffsetStrategy::squash || strategy == OffsetStrategy::squash_scaled) {
    return to_string(strategy) + "/" + to_string(squash_kind);
  }
  return to_string(strategy);
}

ReferencePoints make_reference_points(const std::vector<LevelShape>& levels) {
  if (levels.empty()) throw std::invalid_argument("make_reference_points: no levels");
  ReferencePoints r;
  r.levels = levels;
  for (const auto& lv : levels) {
    if (lv.height < 1 || lv.width < 1) {
      throw std::invalid_argument("make_reference_points: level extents must be >= 1");
    }
    r.level_starts.push_back(r.size());
    for (Index i = 0; i < lv.height; ++i) {
      for (Index j = 0; j < lv.width; ++j) {
        r.points.push_back({(static_cast<double>(j) + 0.5) / static_cast<double>(lv.width),
                            (static_cast<double>(i) + 0.5) / static_cast<double>(lv.height)});
      }
    }
  }
  return r;
}

template <class T>
void DeformAttnParams<T>::validate() const {
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
    throw std::invalid_argument("deformable attention: d_model must be divisible by n_heads");
  }
  if (n_levels < 1 || n_points < 1) {
    throw std::invalid_argument("deformable attention: need >= 1 level and point");
  }
  if (offset_head.empty()) throw std::invalid_argument("deformable attention: no offset head");
}

template <class T>
DeformAttnParams<T> DeformAttnParams<T>::create(ParamStore<T>& ps, const std::string& prefix,
                                                Index d_model, Index n_heads, Index n_levels,
                                                Index n_points, bool deep_offsets) {
  DeformAttnParams p;
  p.d_model = d_model;
  p.n_heads = n_heads;
  p.n_levels = n_levels;
  p.n_points = n_points;
  const Index n_off = 2 * n_heads * n_levels * n_points;
  if (deep_offsets) {
    p.offset_head.push_back(Linear<T>::create(ps, prefix + ".offset_hidden", d_model, d_model));
  }
  Linear<T> last;
  last.w = ps.add(prefix + ".offset_out.weight", {d_model, n_off}, Init::zeros);
  std::vector<double> grid(static_cast<std::size_t>(n_off));
  for (Index h = 0; h < n_heads; ++h) {
    const double theta = 2.0 * std::numbers::pi * static_cast<double>(h) / static_cast<double>(n_heads);
    double dx = std::cos(theta), dy = std::sin(theta);
    const double m = std::max(std::abs(dx), std::abs(dy));
    dx /= m;
    dy /= m;
    for (Index l = 0; l < n_levels; ++l) {
      for (Index k = 0; k < n_points; ++k) {
        const std::size_t s = static_cast<std::size_t>(((h * n_levels + l) * n_points + k) * 2);
        grid[s] = dx * static_cast<double>(k + 1);
        grid[s + 1] = dy * static_cast<double>(k + 1);
      }
    }
  }
  last.b = ps.add_values(prefix + ".offset_out.bias", {n_off}, grid);
  p.offset_head.push_back(last);
  p.weight_head.w = ps.add(prefix + ".attn_weight.weight", {d_model, n_heads * n_levels * n_points}, Init::zeros);
  p.weight_head.b = ps.add(prefix + ".attn_weight.bias", {n_heads * n_levels * n_points}, Init::zeros);
  p.value_proj = Linear<T>::create(ps, prefix + ".value_proj", d_model, d_model);
  p.output_proj = Linear<T>::create(ps, prefix + ".output_proj", d_model, d_model);
  p.validate();
  return p;
}

template <class T>
Tensor<T> compute_offsets(const Tensor<T>& queries, const DeformAttnParams<T>& params) {
  params.validate();
  if (queries.rank() != 2 || queries.dim(1) != params.d_model) {
    throw ShapeError("compute_offsets: query shape " + shape_str(queries.shape()) +
                     " does not match d_model " + std::to_string(params.d_model));
  }
  Tensor<T> h = queries;
  for (std::size_t i = 0; i < params.offset_head.size(); ++i) {
    h = params.offset_head[i](h);
    if (i + 1 < params.offset_head.size()) h = relu(h);
  }
  return reshape(h, {queries.dim(0), params.n_heads, params.n_levels, params.n_points, 2});
}

template <class T>
Tensor<T> adjust_offsets(const Tensor<T>& raw, const OffsetAdjustConfig& cfg) {
  cfg.validate();
  if (raw.rank() < 2 || raw.dim(-1) != 2) {
    throw ShapeError("adjust_offsets: expected [..., K, 2], got " + shape_str(raw.shape()));
  }
  if (cfg.strategy == OffsetStrategy::none) return raw;

  const auto x = raw.data();
  std::vector<T> out(x.size());
  const std::size_t n_vec = x.size() / 2;

  if (cfg.strategy == OffsetStrategy::clip_divide) {
    const double thr = cfg.threshold_px;
    const T inv = static_cast<T>(1.0 / cfg.divisor);
    std::vector<T> factor(n_vec);
    for (std::size_t v = 0; v < n_vec; ++v) {
      const double norm = std::hypot(static_cast<double>(x[2 * v]), static_cast<double>(x[2 * v + 1]));
      factor[v] = norm > thr ? inv : T(1);
      out[2 * v] = x[2 * v] * factor[v];
      out[2 * v + 1] = x[2 * v + 1] * factor[v];
    }
    // The branch is held fixed in backward (subgradient at the threshold).
    return Tensor<T>::make_result(raw.shape(), std::move(out), "adjust_offsets.clip_divide", {&raw},
                                  [factor = std::move(factor)](detail::Node<T>& self) {
                                    auto& in = *self.inputs[0];
                                    if (!in.requires_grad) return;
                                    auto& g = in.grad_buffer();
                                    for (std::size_t v = 0; v < factor.size(); ++v) {
                                      g[2 * v] += self.grad[2 * v] * factor[v];
                                      g[2 * v + 1] += self.grad[2 * v + 1] * factor[v];
                                    }
                                  });
  }

  const T c = static_cast<T>(cfg.effective_scale());
  if (cfg.squash_kind == SquashKind::sigmoid_symmetric) {
    std::vector<T> sig(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T s = x[i] >= T(0) ? T(1) / (T(1) + std::exp(-x[i])) : std::exp(x[i]) / (T(1) + std::exp(x[i]));
      sig[i] = s;
      // c * (2s - 1) written as c * tanh(x / 2) keeps the sign exact near 0.
      out[i] = c * std::tanh(x[i] / T(2));
    }
    return Tensor<T>::make_result(raw.shape(), std::move(out), "adjust_offsets.sigmoid_symmetric",
                                  {&raw}, [c, sig = std::move(sig)](detail::Node<T>& self) {
                                    auto& in = *self.inputs[0];
                                    if (!in.requires_grad) return;
                                    auto& g = in.grad_buffer();
                                    for (std::size_t i = 0; i < sig.size(); ++i) {
                                      g[i] += self.grad[i] * T(2) * c * sig[i] * (T(1) - sig[i]);
                                    }
                                  });
  }

  // softmax_sign: groups of K points share one softmax per axis.
  const Index K = raw.dim(-2);
  const std::size_t groups = x.size() / static_cast<std::size_t>(2 * K);
  std::vector<T> m(x.size()), sgn(x.size());
  for (std::size_t gi = 0; gi < groups; ++gi) {
    for (int axis = 0; axis < 2; ++axis) {
      const std::size_t base = gi * static_cast<std::size_t>(2 * K) + static_cast<std::size_t>(axis);
      T mx = -std::numeric_limits<T>::infinity();
      for (Index k = 0; k < K; ++k) {
        const T v = x[base + static_cast<std::size_t>(2 * k)];
        if (std::isnan(v)) throw NumericError("adjust_offsets: NaN offset");
        mx = std::max(mx, std::abs(v));
      }
      T s = T(0);
      for (Index k = 0; k < K; ++k) {
        const std::size_t i = base + static_cast<std::size_t>(2 * k);
        m[i] = std::exp(std::abs(x[i]) - mx);
        s += m[i];
      }
      for (Index k = 0; k < K; ++k) {
        const std::size_t i = base + static_cast<std::size_t>(2 * k);
        m[i] /= s;
        sgn[i] = x[i] < T(0) ? T(-1) : T(1);  // sign(0) = +1 keeps magnitudes summing to c
        out[i] = sgn[i] * m[i] * c;
      }
    }
  }
  return Tensor<T>::make_result(
      raw.shape(), std::move(out), "adjust_offsets.softmax_sign", {&raw},
      [c, K, groups, m = std::move(m), sgn = std::move(sgn)](detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        auto& g = in.grad_buffer();
        for (std::size_t gi = 0; gi < groups; ++gi) {
          for (int axis = 0; axis < 2; ++axis) {
            const std::size_t base = gi * static_cast<std::size_t>(2 * K) + static_cast<std::size_t>(axis);
            T dot = T(0);
            for (Index k = 0; k < K; ++k) {
              const std::size_t i = base + static_cast<std::size_t>(2 * k);
              dot += self.grad[i] * sgn[i] * m[i];
            }
            for (Index k = 0; k < K; ++k) {
              const std::size_t i = base + static_cast<std::size_t>(2 * k);
              g[i] += c * sgn[i] * m[i] * (self.grad[i] * sgn[i] - dot);
            }
          }
        }
      });
}

template <class T>
Tensor<T> deform_sample(const Tensor<T>& value, const std::vector<LevelShape>& levels,
                        const Tensor<T>& loc, const Tensor<T>& attn, Index n_heads) {
  if (value.rank() != 2 || loc.rank() != 5 || attn.rank() != 4) {
    throw ShapeError("deform_sample: expected value [T x D], loc rank 5, attn rank 4; got " +
                     shape_str(value.shape()) + ", " + shape_str(loc.shape()) + ", " +
                     shape_str(attn.shape()));
  }
  const Index N = loc.dim(0), L = loc.dim(2), K = loc.dim(3), D = value.dim(1);
  if (loc.dim(1) != n_heads || loc.dim(4) != 2 || attn.shape() != Shape{N, n_heads, L, K} ||
      D % n_heads != 0) {
    throw ShapeError("deform_sample: inconsistent loc " + shape_str(loc.shape()) + " / attn " +
                     shape_str(attn.shape()));
  }
  if (static_cast<Index>(levels.size()) != L) {
    throw ShapeError("deform_sample: " + std::to_string(levels.size()) +
                     " level shapes for offsets with " + std::to_string(L) + " levels");
  }
  std::vector<kernels::LevelGeom> geo;
  Index start = 0;
  for (const auto& lv : levels) {
    geo.push_back({lv.height, lv.width, start});
    start += lv.height * lv.width;
  }
  if (start != value.dim(0)) {
    throw ShapeError("deform_sample: value has " + std::to_string(value.dim(0)) +
                     " tokens, levels describe " + std::to_string(start));
  }
  for (T v : loc.data()) {
    if (!std::isfinite(v)) throw NumericError("deform_sample: non-finite sampling location");
  }
  std::vector<T> out(static_cast<std::size_t>(N * D));
  const kernels::DeformGeom g{N, n_heads, D / n_heads, K, geo};
  kernels::deform_fwd(kernels::current_exec(), g, value.data().data(), loc.data().data(),
                      attn.data().data(), out.data());
  return Tensor<T>::make_result(
      {N, D}, std::move(out), "deform_sample", {&value, &loc, &attn},
      [N, n_heads, D, K, geo](detail::Node<T>& self) {
        const kernels::DeformGeom g{N, n_heads, D / n_heads, K, geo};
        auto& v = *self.inputs[0];
        auto& l = *self.inputs[1];
        auto& a = *self.inputs[2];
        std::vector<T> dloc(l.value.size(), T(0)), dattn(a.value.size(), T(0));
        kernels::deform_bwd(kernels::current_exec(), g, v.value.data(), l.value.data(),
                            a.value.data(), self.grad.data(),
                            v.requires_grad ? v.grad_buffer().data() : nullptr, dloc.data(),
                            dattn.data());
        if (l.requires_grad) {
          auto& gl = l.grad_buffer();
          for (std::size_t i = 0; i < dloc.size(); ++i) gl[i] += dloc[i];
        }
        if (a.requires_grad) {
          auto& ga = a.grad_buffer();
          for (std::size_t i = 0; i < dattn.size(); ++i) ga[i] += dattn[i];
        }
      });
}

template <class T>
Tensor<T> deform_attn_forward(const Tensor<T>& queries, const Tensor<T>& value_tokens,
                              const ReferencePoints& refs, const OffsetAdjustConfig& cfg,
                              const DeformAttnParams<T>& params, DeformAttnProbe<T>* probe) {
  params.validate();
  if (static_cast<Index>(refs.levels.size()) != params.n_levels) {
    throw ShapeError("deform_attn_forward: " + std::to_string(refs.levels.size()) +
                     " levels given, parameters expect " + std::to_string(params.n_levels));
  }
  if (queries.rank() != 2 || queries.dim(0) != refs.size()) {
    throw ShapeError("deform_attn_forward: " + shape_str(queries.shape()) + " queries for " +
                     std::to_string(refs.size()) + " reference points");
  }
  const Index N = queries.dim(0), H = params.n_heads, L = params.n_levels, K = params.n_points;

  Tensor<T> value = params.value_proj(value_tokens);
  Tensor<T> raw = compute_offsets(queries, params);
  Tensor<T> adjusted = adjust_offsets(raw, cfg);

  // Reference in texel coordinates: ref * (W, H) - 0.5 puts a cell's own
  // reference exactly on its texel.
  std::vector<T> base(static_cast<std::size_t>(N * H * L * K * 2));
  for (Index n = 0; n < N; ++n) {
    const auto& r = refs.points[static_cast<std::size_t>(n)];
    for (Index h = 0; h < H; ++h) {
      for (Index l = 0; l < L; ++l) {
        const auto& lv = refs.levels[static_cast<std::size_t>(l)];
        const T bx = static_cast<T>(r[0] * static_cast<double>(lv.width) - 0.5);
        const T by = static_cast<T>(r[1] * static_cast<double>(lv.height) - 0.5);
        for (Index k = 0; k < K; ++k) {
          const std::size_t s = static_cast<std::size_t>((((n * H + h) * L + l) * K + k) * 2);
          base[s] = bx;
          base[s + 1] = by;
        }
      }
    }
  }
  Tensor<T> loc = add(adjusted, Tensor<T>::from(adjusted.shape(), std::move(base)));

  Tensor<T> logits = reshape(params.weight_head(queries), {N, H, L * K});
  Tensor<T> attn = reshape(softmax(logits, 2), {N, H, L, K});

  Tensor<T> sampled = deform_sample(value, refs.levels, loc, attn, H);
  if (probe != nullptr) {
    probe->raw_offsets = raw;
    probe->adjusted_offsets = adjusted;
    probe->locations = loc;
    probe->attention = attn;
  }
  return params.output_proj(sampled);
}

namespace {

SpreadRow row_from_norms(Index level, const std::string& strategy, std::vector<double> norms) {
  SpreadRow row;
  row.level = level;
  row.strategy = strategy;
  if (norms.empty()) return row;
  double sum = 0, mx = 0;
  std::size_t within = 0;
  for (double v : norms) {
    sum += v;
    mx = std::max(mx, v);
    if (v <= 1.0) ++within;
  }
  const std::size_t n = norms.size();
  row.mean_norm = sum / static_cast<double>(n);
  row.max_norm = mx;
  row.frac_within_1px = static_cast<double>(within) / static_cast<double>(n);
  std::sort(norms.begin(), norms.end());
  row.median_norm = n % 2 == 1 ? norms[n / 2] : 0.5 * (norms[n / 2 - 1] + norms[n / 2]);
  return row;
}

}  // namespace

SpreadReport spread_of_offsets(const Tensor<double>& offsets, const std::string& strategy) {
  if (offsets.rank() != 5 || offsets.dim(4) != 2) {
    throw ShapeError("spread_of_offsets: expected [N x heads x L x K x 2], got " +
                     shape_str(offsets.shape()));
  }
  const Index N = offsets.dim(0), H = offsets.dim(1), L = offsets.dim(2), K = offsets.dim(3);
  const auto x = offsets.data();
  SpreadReport rep;
  for (Index l = 0; l < L; ++l) {
    std::vector<double> norms;
    norms.reserve(static_cast<std::size_t>(N * H * K));
    for (Index n = 0; n < N; ++n) {
      for (Index h = 0; h < H; ++h) {
        for (Index k = 0; k < K; ++k) {
          const std::size_t s = static_cast<std::size_t>((((n * H + h) * L + l) * K + k) * 2);
          norms.push_back(std::hypot(x[s], x[s + 1]));
        }
      }
    }
    rep.rows.push_back(row_from_norms(l, strategy, std::move(norms)));
  }
  return rep;
}

template <class T>
SpreadReport sampling_spread_stats(const Tensor<T>& queries, const OffsetAdjustConfig& cfg,
                                   const DeformAttnParams<T>& params, Index n_draws,
                                   std::uint64_t seed) {
  if (n_draws < 1) throw std::invalid_argument("sampling_spread_stats: n_draws must be >= 1");
  if (queries.rank() != 2 || queries.dim(0) < 1) {
    throw ShapeError("sampling_spread_stats: need at least one query row");
  }
  NoGradGuard ng;
  CounterRng rng(seed, 0x737072656164ULL);
  std::vector<Index> rows(static_cast<std::size_t>(n_draws));
  for (auto& r : rows) r = static_cast<Index>(rng.below(static_cast<std::uint64_t>(queries.dim(0))));
  Tensor<T> adjusted = adjust_offsets(compute_offsets(gather_rows(queries, rows), params), cfg);
  return spread_of_offsets(cast<double>(adjusted), cfg.label());
}

Tensor<double> synthetic_raw_offsets(Index n_levels, Index n_points, double sigma, Index n_draws,
                                     std::uint64_t seed) {
  if (n_draws < 1) throw std::invalid_argument("synthetic offsets: n_draws must be >= 1");
  CounterRng rng(seed, 0x72617773ULL);
  std::vector<double> v(static_cast<std::size_t>(n_draws * n_levels * n_points * 2));
  for (auto& x : v) x = sigma * rng.normal();
  return Tensor<double>::from({n_draws, 1, n_levels, n_points, 2}, std::move(v));
}

SpreadReport synthetic_spread_stats(const OffsetAdjustConfig& cfg, Index n_levels, Index n_points,
                                    double sigma, Index n_draws, std::uint64_t seed) {
  NoGradGuard ng;
  Tensor<double> raw = synthetic_raw_offsets(n_levels, n_points, sigma, n_draws, seed);
  return spread_of_offsets(adjust_offsets(raw, cfg), cfg.label());
}

void write_spread_csv(const SpreadReport& report, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "level,strategy,mean_norm,median_norm,max_norm,frac_within_1px\n";
  f << std::setprecision(9);
  for (const auto& r : report.rows) {
    f << r.level << ',' << r.strategy << ',' << r.mean_norm << ',' << r.median_norm << ','
      << r.max_norm << ',' << r.frac_within_1px << '\n';
  }
  if (!f) throw std::runtime_error("failed writing " + path);
}

template struct DeformAttnParams<float>;
template struct DeformAttnParams<double>;

#define NQ_INSTANTIATE_DEFORM(T)                                                                 \
  template Tensor<T> compute_offsets(const Tensor<T>&, const DeformAttnParams<T>&);              \
  template Tensor<T> adjust_offsets(const Tensor<T>&, const OffsetAdjustConfig&);                \
  template Tensor<T> deform_sample(const Tensor<T>&, const std::vector<LevelShape>&,             \
                                   const Tensor<T>&, const Tensor<T>&, Index);                   \
  template Tensor<T> deform_attn_forward(const Tensor<T>&, const Tensor<T>&,                     \
                                         const ReferencePoints&, const OffsetAdjustConfig&,      \
                                         const DeformAttnParams<T>&, DeformAttnProbe<T>*);       \
  template SpreadReport sampling_spread_stats(const Tensor<T>&, const OffsetAdjustConfig&,       \
                                              const DeformAttnParams<T>&, Index, std::uint64_t);

NQ_INSTANTIATE_DEFORM(float)
NQ_INSTANTIATE_DEFORM(double)

}  // namespace nq
