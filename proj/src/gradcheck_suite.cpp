#include "nearquery/gradcheck_suite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "nearquery/deform_attn.hpp"
#include "nearquery/loss.hpp"
#include "nearquery/ops.hpp"
#include "nearquery/rng.hpp"

namespace nq {

double gradcheck_rel_err(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6});
}

const GradcheckEntry* GradcheckReport::worst() const {
  const GradcheckEntry* w = nullptr;
  for (const auto& e : entries) {
    if (w == nullptr || e.max_rel_err > w->max_rel_err) w = &e;
  }
  return w;
}

GradcheckReport gradcheck(const std::function<Tensor<double>()>& loss_fn, std::vector<NamedTensor> params,
                          const GradcheckOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  for (auto& p : params) p.tensor.zero_grad();
  {
    Tensor<double> loss = loss_fn();
    if (loss.numel() != 1) throw ShapeError("gradcheck: loss must be scalar, got " + shape_str(loss.shape()));
    loss.backward();
  }
  auto value_at = [&]() {
    NoGradGuard ng;
    return loss_fn().item();
  };

  GradcheckReport report;
  report.tol = opt.tol;
  CounterRng rng(opt.seed, 0x6772616463686bULL);
  for (auto& p : params) {
    GradcheckEntry e;
    e.name = p.name;
    e.disconnected = !p.tensor.has_grad();
    const std::vector<double> analytic =
        e.disconnected ? std::vector<double>(static_cast<std::size_t>(p.tensor.numel()), 0.0)
                       : std::vector<double>(p.tensor.grad().begin(), p.tensor.grad().end());

    std::vector<Index> coords(static_cast<std::size_t>(p.tensor.numel()));
    std::iota(coords.begin(), coords.end(), Index{0});
    if (opt.max_coords > 0 && static_cast<Index>(coords.size()) > opt.max_coords) {
      // Partial Fisher-Yates: the first max_coords entries are a uniform sample.
      for (Index i = 0; i < opt.max_coords; ++i) {
        const Index j = i + static_cast<Index>(rng.below(coords.size() - static_cast<std::size_t>(i)));
        std::swap(coords[static_cast<std::size_t>(i)], coords[static_cast<std::size_t>(j)]);
      }
      coords.resize(static_cast<std::size_t>(opt.max_coords));
      std::sort(coords.begin(), coords.end());
    }

    auto data = p.tensor.mutable_data();
    for (Index c : coords) {
      const std::size_t k = static_cast<std::size_t>(c);
      const double orig = data[k];
      double best = INFINITY, best_num = 0;
      for (double step : {opt.eps, opt.eps * 10, opt.eps / 10, opt.eps / 100}) {
        data[k] = orig + step;
        const double fp = value_at();
        data[k] = orig - step;
        const double fm = value_at();
        data[k] = orig;
        const double numeric = (fp - fm) / (2.0 * step);
        const double err = gradcheck_rel_err(analytic[k], numeric);
        if (err < best) {
          best = err;
          best_num = numeric;
        }
        if (best <= 1e-6) break;
      }
      e.max_abs_err = std::max(e.max_abs_err, std::abs(analytic[k] - best_num));
      if (best >= e.max_rel_err) {
        e.max_rel_err = best;
        char buf[160];
        std::snprintf(buf, sizeof buf, "[%lld] analytic=%.10g numeric=%.10g", static_cast<long long>(c),
                      analytic[k], best_num);
        e.worst = buf;
      }
      ++e.checked;
    }
    report.max_rel_err = std::max(report.max_rel_err, e.max_rel_err);
    report.entries.push_back(std::move(e));
  }
  report.passed = report.max_rel_err < opt.tol;
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

namespace {

using TD = Tensor<double>;

TD rand_tensor(CounterRng& rng, Shape shape, double lo = -1, double hi = 1) {
  Index n = 1;
  for (Index d : shape) n *= d;
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TD::from(std::move(shape), std::move(v), true);
}

// Values bounded away from zero, for ops with a kink there.
TD rand_away_from_zero(CounterRng& rng, Shape shape, double margin) {
  TD t = rand_tensor(rng, std::move(shape));
  for (auto& x : t.mutable_data()) x = x < 0 ? x - margin : x + margin;
  return t;
}

TD constant_like(CounterRng& rng, const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.uniform(-1, 1);
  return TD::from(shape, std::move(v), false);
}

// Scalar read-out with fixed random weights so every output element matters.
TD project(const TD& y, const TD& w) { return sum(mul(y, w)); }

struct Suite {
  explicit Suite(const GradcheckOptions& o) : opt(o), rng(o.seed, 0x6b65726e656cULL) {}
  GradcheckOptions opt;
  CounterRng rng;
  GradcheckReport rep;

  void check(const std::string& name, const std::vector<std::pair<std::string, TD>>& inputs,
             const std::function<TD()>& f) {
    std::vector<NamedTensor> named;
    for (const auto& [n, t] : inputs) named.push_back({name + "/" + n, t});
    GradcheckReport r = gradcheck(f, named, opt);
    for (auto& e : r.entries) rep.entries.push_back(std::move(e));
  }
  template <class F>
  void unary_case(const std::string& name, const TD& x, Shape out_shape, F op) {
    const TD w = constant_like(rng, out_shape);
    check(name, {{"x", x}}, [&] { return project(op(x), w); });
  }
  template <class F>
  void binary_case(const std::string& name, const TD& a, const TD& b, Shape out_shape, F op) {
    const TD w = constant_like(rng, out_shape);
    check(name, {{"a", a}, {"b", b}}, [&] { return project(op(a, b), w); });
  }
};

}  // namespace

GradcheckReport run_kernel_suite(const GradcheckOptions& opt) {
  Suite s(opt);
  auto& rng = s.rng;

  {
    TD a = rand_tensor(rng, {3, 4}), b = rand_tensor(rng, {3, 4});
    s.binary_case("add", a, b, {3, 4}, [](const TD& x, const TD& y) { return add(x, y); });
    s.binary_case("sub", a, b, {3, 4}, [](const TD& x, const TD& y) { return sub(x, y); });
    s.binary_case("mul", a, b, {3, 4}, [](const TD& x, const TD& y) { return mul(x, y); });
    s.unary_case("scale", a, {3, 4}, [](const TD& x) { return scale(x, 1.7); });
    s.unary_case("sigmoid", a, {3, 4}, [](const TD& x) { return sigmoid(x); });
    s.unary_case("transpose", a, {4, 3}, [](const TD& x) { return transpose(x); });
    s.unary_case("reshape", a, {2, 6}, [](const TD& x) { return reshape(x, {2, 6}); });
    s.unary_case("mean", a, {1}, [](const TD& x) { return reshape(mean(x), {1}); });
    s.unary_case("softmax_axis0", a, {3, 4}, [](const TD& x) { return softmax(x, 0); });
    s.unary_case("softmax_axis1", a, {3, 4}, [](const TD& x) { return softmax(x, 1); });
    TD bias = rand_tensor(rng, {4});
    s.binary_case("add_bias", a, bias, {3, 4}, [](const TD& x, const TD& y) { return add_bias(x, y); });
  }
  {
    TD x = rand_away_from_zero(rng, {3, 5}, 0.05);
    s.unary_case("relu", x, {3, 5}, [](const TD& t) { return relu(t); });
  }
  {
    TD a = rand_tensor(rng, {3, 4}), b = rand_tensor(rng, {4, 5}), c = rand_tensor(rng, {5, 4});
    s.binary_case("matmul", a, b, {3, 5}, [](const TD& x, const TD& y) { return matmul(x, y); });
    s.binary_case("matmul_nt", a, c, {3, 5}, [](const TD& x, const TD& y) { return matmul_nt(x, y); });
    TD bias = rand_tensor(rng, {5});
    const TD w = constant_like(rng, {3, 5});
    s.check("linear", {{"x", a}, {"w", b}, {"b", bias}}, [&] { return project(linear(a, b, bias), w); });
  }
  {
    TD a = rand_tensor(rng, {2, 3}), b = rand_tensor(rng, {4, 3});
    const TD w = constant_like(rng, {6, 3});
    s.check("concat_rows", {{"a", a}, {"b", b}}, [&] { return project(concat_rows<double>({a, b}), w); });
    TD c = rand_tensor(rng, {2, 5});
    const TD w2 = constant_like(rng, {2, 8});
    s.check("concat_cols", {{"a", a}, {"b", c}}, [&] { return project(concat_cols<double>({a, c}), w2); });
    TD m = rand_tensor(rng, {5, 4});
    s.unary_case("slice_rows", m, {2, 4}, [](const TD& t) { return slice_rows(t, 1, 2); });
    s.unary_case("slice_cols", m, {5, 3}, [](const TD& t) { return slice_cols(t, 1, 3); });
    s.unary_case("gather_rows", m, {4, 4}, [](const TD& t) { return gather_rows(t, {4, 0, 4, 2}); });
  }
  {
    TD x = rand_tensor(rng, {4, 6}), g = rand_tensor(rng, {6}, 0.5, 1.5), b = rand_tensor(rng, {6});
    const TD w = constant_like(rng, {4, 6});
    s.check("layer_norm", {{"x", x}, {"gamma", g}, {"beta", b}}, [&] { return project(layer_norm(x, g, b), w); });
  }
  for (Index stride : {1, 2}) {
    TD x = rand_tensor(rng, {2, 5, 6}), k = rand_tensor(rng, {3, 2, 3, 3}), b = rand_tensor(rng, {3});
    const Index oh = (5 + 2 - 3) / stride + 1, ow = (6 + 2 - 3) / stride + 1;
    const TD w = constant_like(rng, {3, oh, ow});
    s.check("conv2d_stride" + std::to_string(stride), {{"x", x}, {"w", k}, {"b", b}}, [&, stride] { return project(conv2d(x, k, b, stride, 1), w); });
  }
  {
    TD map = rand_tensor(rng, {2, 4, 5});
    // Keep points off integer texel lines, where the interpolant has kinks;
    // some fall outside the map to exercise the zero border.
    std::vector<double> pv;
    for (int i = 0; i < 7; ++i) {
      pv.push_back(std::floor(rng.uniform(-1.5, 5.5)) + rng.uniform(0.1, 0.9));
      pv.push_back(std::floor(rng.uniform(-1.5, 4.5)) + rng.uniform(0.1, 0.9));
    }
    TD pts = TD::from({7, 2}, pv, true);
    s.binary_case("grid_sample_bilinear", map, pts, {7, 2},
                  [](const TD& m, const TD& p) { return grid_sample_bilinear(m, p); });
  }
  {
    TD map = rand_tensor(rng, {2, 5, 6});
    s.unary_case("resize_up", map, {2, 9, 13}, [](const TD& m) { return resize_bilinear(m, 9, 13); });
    s.unary_case("resize_down", map, {2, 2, 3}, [](const TD& m) { return resize_bilinear(m, 2, 3); });
    s.unary_case("map_to_tokens", map, {30, 2}, [](const TD& m) { return map_to_tokens(m); });
    TD tok = rand_tensor(rng, {6, 3});
    s.unary_case("tokens_to_map", tok, {3, 2, 3}, [](const TD& t) { return tokens_to_map(t, 2, 3); });
  }
  {
    TD logits = rand_tensor(rng, {5, 4}, -2, 2);
    const std::vector<int> tgt{0, 3, 1, 3, 2};
    const std::vector<double> cw{1.0, 0.5, 2.0, 0.1};
    s.check("cross_entropy", {{"logits", logits}}, [&] { return cross_entropy(logits, tgt, cw); });
    TD z = rand_tensor(rng, {3, 6}, -3, 3);
    TD t = constant_like(rng, {3, 6});
    for (auto& v : t.mutable_data()) v = std::abs(v);
    s.check("bce_with_logits", {{"logits", z}}, [&] { return bce_with_logits(z, t); });
    TD p = rand_tensor(rng, {3, 6}, 0.05, 0.95);
    s.check("dice_loss", {{"prob", p}}, [&] { return dice_loss(p, t); });
    s.check("dice_loss_rows", {{"prob", p}}, [&] { return dice_loss_rows(p, t); });
  }
  {
    // Two levels, two heads, two points; locations kept off texel lines.
    const std::vector<LevelShape> levels{{3, 4}, {2, 2}};
    const Index n = 3, heads = 2, k = 2, d = 4;
    TD value = rand_tensor(rng, {16, d});
    std::vector<double> lv;
    for (Index i = 0; i < n * heads * 2 * k; ++i) {
      lv.push_back(std::floor(rng.uniform(-1.0, 4.0)) + rng.uniform(0.1, 0.9));
      lv.push_back(std::floor(rng.uniform(-1.0, 3.0)) + rng.uniform(0.1, 0.9));
    }
    TD loc = TD::from({n, heads, 2, k, 2}, lv, true);
    TD attn = rand_tensor(rng, {n, heads, 2, k}, 0.1, 1.0);
    const TD w = constant_like(rng, {n, d});
    s.check("deform_sample", {{"value", value}, {"loc", loc}, {"attn", attn}}, [&] { return project(deform_sample(value, levels, loc, attn, heads), w); });
  }
  {
    const Shape shape{4, 2, 1, 3, 2};
    const TD w = constant_like(rng, shape);
    // Norms either well below or well above the clip threshold.
    TD raw = rand_tensor(rng, shape, -1.5, 1.5);
    for (Index i = 0; i < 12; i += 3) {
      raw.mutable_data()[static_cast<std::size_t>(2 * i)] *= 6.0;
      raw.mutable_data()[static_cast<std::size_t>(2 * i + 1)] = 5.0;
    }
    OffsetAdjustConfig clip;
    clip.strategy = OffsetStrategy::clip_divide;
    s.check("offset_clip_divide", {{"raw", raw}}, [&] { return project(adjust_offsets(raw, clip), w); });
    TD raw2 = rand_away_from_zero(rng, shape, 0.05);
    for (auto kind : {SquashKind::sigmoid_symmetric, SquashKind::softmax_sign}) {
      for (auto strat : {OffsetStrategy::squash, OffsetStrategy::squash_scaled}) {
        OffsetAdjustConfig c;
        c.strategy = strat;
        c.squash_kind = kind;
        c.scale_c = 2.0;
        s.check("offset_" + to_string(strat) + "_" + to_string(kind), {{"raw", raw2}}, [&] { return project(adjust_offsets(raw2, c), w); });
      }
    }
  }
  for (const auto& e : s.rep.entries) s.rep.max_rel_err = std::max(s.rep.max_rel_err, e.max_rel_err);
  s.rep.tol = opt.tol;
  s.rep.passed = s.rep.max_rel_err < opt.tol;
  return s.rep;
}

ModelConfig micro_model_config() {
  ModelConfig m;
  m.in_channels = 3;
  m.backbone_channels = {4, 6, 8, 8};
  m.d_model = 8;
  m.n_heads = 2;
  m.n_points = 2;
  m.enc_layers = 1;
  m.dec_rounds = 1;
  m.n_queries = 3;
  m.n_classes = 2;
  return m;
}

GradcheckReport run_micro_model_check(const GradcheckOptions& opt) {
  const Index hw = 32;
  const ModelConfig cfg = micro_model_config();
  SegModel<double> model(cfg, opt.seed);
  CounterRng rng(opt.seed, 0x6d6963726fULL);
  // The initial offsets put sampling points exactly on texel centres, where
  // bilinear sampling has a kink. Check at a generic nearby point instead.
  for (auto& p : model.params().params()) {
    Tensor<double> t = p.tensor;
    for (auto& v : t.mutable_data()) v += rng.uniform(-0.05, 0.05);
  }
  std::vector<double> img(static_cast<std::size_t>(3 * hw * hw));
  for (auto& v : img) v = rng.uniform();
  const TD image = TD::from({3, hw, hw}, std::move(img));
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(hw * hw), 0);
  for (Index i = 0; i < hw; ++i) {
    for (Index j = 0; j < hw; ++j) {
      if ((i - 10) * (i - 10) + (j - 12) * (j - 12) < 36) labels[static_cast<std::size_t>(i * hw + j)] = 1;
      if (i >= 20 && i < 25 && j >= 18 && j < 28) labels[static_cast<std::size_t>(i * hw + j)] = 2;
    }
  }
  const SegTarget target = make_target(labels, hw, hw, cfg.n_classes);
  const LossWeights weights;

  DiscreteTrace trace;
  std::vector<NamedTensor> named;
  for (const auto& p : model.params().params()) named.push_back({"micro_model/" + p.name, p.tensor});
  bool recorded = false;
  auto f = [&]() {
    if (recorded) trace.start_replay();
    const DecoderOutputs<double> out = model.forward(image, &trace);
    TD loss = total_loss(out, target, weights, &trace).total;
    recorded = true;
    return loss;
  };
  return gradcheck(f, named, opt);
}

GradcheckReport run_gradcheck_suite(const GradcheckOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckReport rep = run_kernel_suite(opt);
  for (auto& e : run_micro_model_check(opt).entries) rep.entries.push_back(std::move(e));
  rep.max_rel_err = 0;
  for (const auto& e : rep.entries) rep.max_rel_err = std::max(rep.max_rel_err, e.max_rel_err);
  rep.passed = rep.max_rel_err < opt.tol;
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace nq
