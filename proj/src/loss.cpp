#include "nearquery/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "nearquery/hungarian.hpp"
#include "nearquery/ops.hpp"

namespace nq {

void LossWeights::validate() const {
  for (double v : {cls, bce, dice, bls_a, bls_b, no_object}) {
    if (!(v >= 0) || !std::isfinite(v)) throw std::invalid_argument("loss weights must be finite and >= 0");
  }
}

SegTarget make_target(std::vector<std::uint8_t> labels, Index height, Index width, Index n_classes) {
  if (static_cast<Index>(labels.size()) != height * width) {
    throw ShapeError("make_target: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  SegTarget t;
  t.height = height;
  t.width = width;
  t.n_classes = n_classes;
  std::vector<char> seen(static_cast<std::size_t>(n_classes + 1), 0);
  for (std::uint8_t v : labels) {
    if (v > n_classes) {
      throw std::out_of_range("make_target: label " + std::to_string(v) + " exceeds " +
                              std::to_string(n_classes) + " classes");
    }
    seen[v] = 1;
  }
  for (Index c = 1; c <= n_classes; ++c) {
    if (seen[static_cast<std::size_t>(c)]) t.classes.push_back(static_cast<int>(c));
  }
  t.labels = std::move(labels);
  return t;
}

std::vector<double> target_masks(const SegTarget& t, Index h, Index w) {
  if (h < 1 || w < 1 || t.height % h != 0 || t.width % w != 0) {
    throw ShapeError("target_masks: " + std::to_string(h) + "x" + std::to_string(w) +
                     " does not divide " + std::to_string(t.height) + "x" + std::to_string(t.width));
  }
  const Index fy = t.height / h, fx = t.width / w;
  const double inv = 1.0 / static_cast<double>(fy * fx);
  std::vector<double> out(static_cast<std::size_t>(t.size() * h * w), 0.0);
  for (Index k = 0; k < t.size(); ++k) {
    const auto c = static_cast<std::uint8_t>(t.classes[static_cast<std::size_t>(k)]);
    double* m = out.data() + k * h * w;
    for (Index y = 0; y < t.height; ++y) {
      for (Index x = 0; x < t.width; ++x) {
        if (t.labels[static_cast<std::size_t>(y * t.width + x)] == c) m[(y / fy) * w + x / fx] += inv;
      }
    }
  }
  return out;
}

template <class T>
std::vector<double> matching_cost(const Tensor<T>& class_logits, const Tensor<T>& mask_logits,
                                  const SegTarget& target, const LossWeights& w) {
  const Index Q = class_logits.dim(0), C1 = class_logits.dim(1);
  const Index h = mask_logits.dim(1), mw = mask_logits.dim(2), P = h * mw;
  if (mask_logits.dim(0) != Q || C1 != target.n_classes + 1) {
    throw ShapeError("matching_cost: class logits " + shape_str(class_logits.shape()) +
                     " vs masks " + shape_str(mask_logits.shape()));
  }
  const Index N = target.size();
  const std::vector<double> tm = target_masks(target, h, mw);
  const auto cl = class_logits.data();
  const auto ml = mask_logits.data();
  std::vector<double> cost(static_cast<std::size_t>(Q * N), 0.0);
  std::vector<double> prob(static_cast<std::size_t>(C1)), sig(static_cast<std::size_t>(P));
  for (Index q = 0; q < Q; ++q) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index c = 0; c < C1; ++c) mx = std::max(mx, static_cast<double>(cl[static_cast<std::size_t>(q * C1 + c)]));
    double s = 0;
    for (Index c = 0; c < C1; ++c) {
      prob[static_cast<std::size_t>(c)] = std::exp(static_cast<double>(cl[static_cast<std::size_t>(q * C1 + c)]) - mx);
      s += prob[static_cast<std::size_t>(c)];
    }
    double sum_p = 0;
    for (Index i = 0; i < P; ++i) {
      const double x = ml[static_cast<std::size_t>(q * P + i)];
      sig[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-x));
      sum_p += sig[static_cast<std::size_t>(i)];
    }
    for (Index k = 0; k < N; ++k) {
      const double* t = tm.data() + k * P;
      double bce = 0, inter = 0, sum_t = 0;
      for (Index i = 0; i < P; ++i) {
        const double x = ml[static_cast<std::size_t>(q * P + i)];
        bce += std::max(x, 0.0) - x * t[i] + std::log1p(std::exp(-std::abs(x)));
        inter += sig[static_cast<std::size_t>(i)] * t[i];
        sum_t += t[i];
      }
      const double dice = 1.0 - (2.0 * inter + 1.0) / (sum_p + sum_t + 1.0);
      const double p_cls = prob[static_cast<std::size_t>(target.classes[static_cast<std::size_t>(k)] - 1)] / s;
      cost[static_cast<std::size_t>(q * N + k)] =
          w.cls * -p_cls + w.bce * bce / static_cast<double>(P) + w.dice * dice;
    }
  }
  return cost;
}

template <class T>
MatchResult hungarian_match(const Tensor<T>& class_logits, const Tensor<T>& mask_logits,
                            const SegTarget& target, const LossWeights& w) {
  MatchResult r;
  if (target.size() == 0) return r;
  const Assignment a = hungarian_solve(matching_cost(class_logits, mask_logits, target, w),
                                       class_logits.dim(0), target.size());
  r.assignment = a.pairs;
  r.total_cost = a.total_cost;
  return r;
}

template <class T>
LossBreakdown<T> total_loss(const DecoderOutputs<T>& out, const SegTarget& target,
                            const LossWeights& w, DiscreteTrace* trace) {
  w.validate();
  const Index H = out.height, W = out.width, HW = H * W, C = target.n_classes;
  if (target.height != H || target.width != W) {
    throw ShapeError("total_loss: target " + std::to_string(target.height) + "x" +
                     std::to_string(target.width) + " vs outputs " + std::to_string(H) + "x" +
                     std::to_string(W));
  }
  if (out.sets.empty()) throw std::invalid_argument("total_loss: no prediction sets");

  const std::vector<double> full = target_masks(target, H, W);
  std::vector<T> class_w(static_cast<std::size_t>(C + 1), T(1));
  class_w.back() = static_cast<T>(w.no_object);

  LossBreakdown<T> br;
  std::vector<Tensor<T>> terms;
  for (const auto& set : out.sets) {
    const Index Q = set.class_logits.dim(0);
    std::vector<std::pair<Index, Index>> match;
    if (trace != nullptr && trace->mode == DiscreteTrace::Mode::replay) {
      if (trace->match_cursor >= trace->matchings.size()) {
        throw std::logic_error("discrete trace: ran out of recorded matchings");
      }
      match = trace->matchings[trace->match_cursor++];
    } else {
      match = hungarian_match(set.class_logits, set.mask_logits, target, w).assignment;
      if (trace != nullptr) trace->matchings.push_back(match);
    }

    std::vector<int> cls_t(static_cast<std::size_t>(Q), static_cast<int>(C));
    for (const auto& [q, k] : match) cls_t[static_cast<std::size_t>(q)] = target.classes[static_cast<std::size_t>(k)] - 1;
    Tensor<T> ce = scale(cross_entropy(set.class_logits, cls_t, class_w), static_cast<T>(w.cls));
    br.cls += static_cast<double>(ce.item());
    terms.push_back(ce);

    if (!match.empty()) {
      const Index M = static_cast<Index>(match.size());
      const Index h = set.mask_logits.dim(1), mw = set.mask_logits.dim(2);
      std::vector<Index> qs;
      std::vector<T> tm(static_cast<std::size_t>(M * HW));
      for (Index i = 0; i < M; ++i) {
        const auto& [q, k] = match[static_cast<std::size_t>(i)];
        qs.push_back(q);
        std::copy_n(full.begin() + k * HW, HW, tm.begin() + i * HW);
      }
      Tensor<T> picked = reshape(gather_rows(reshape(set.mask_logits, {Q, h * mw}), qs), {M, h, mw});
      Tensor<T> up = reshape(resize_bilinear(picked, H, W), {M, HW});
      Tensor<T> tt = Tensor<T>::from({M, HW}, std::move(tm));
      Tensor<T> bce = scale(bce_with_logits(up, tt), static_cast<T>(w.bce));
      Tensor<T> dice = scale(dice_loss_rows(sigmoid(up), tt), static_cast<T>(w.dice));
      br.bce += static_cast<double>(bce.item());
      br.dice += static_cast<double>(dice.item());
      terms.push_back(bce);
      terms.push_back(dice);
    }
  }

  if (out.bls_a.defined()) {
    const Tensor<T> pix = map_to_tokens(out.bls_a);  // HW x (C+1)
    std::vector<int> lab(target.labels.begin(), target.labels.end());
    Tensor<T> ce = cross_entropy(pix, lab);
    std::vector<T> onehot(static_cast<std::size_t>(C * HW), T(0));
    for (Index i = 0; i < HW; ++i) {
      const int v = target.labels[static_cast<std::size_t>(i)];
      if (v > 0) onehot[static_cast<std::size_t>((v - 1) * HW + i)] = T(1);
    }
    Tensor<T> probs = slice_rows(transpose(softmax(pix, 1)), 1, C);
    Tensor<T> dice = dice_loss_rows(probs, Tensor<T>::from({C, HW}, std::move(onehot)));
    Tensor<T> a = scale(add(ce, dice), static_cast<T>(w.bls_a));
    br.bls_a = static_cast<double>(a.item());
    terms.push_back(a);
  }
  if (out.bls_b.defined()) {
    std::vector<T> fg(static_cast<std::size_t>(HW));
    for (Index i = 0; i < HW; ++i) fg[static_cast<std::size_t>(i)] = target.labels[static_cast<std::size_t>(i)] > 0 ? T(1) : T(0);
    const Tensor<T> flat = reshape(out.bls_b, {1, HW});
    const Tensor<T> tt = Tensor<T>::from({1, HW}, std::move(fg));
    Tensor<T> b = scale(add(bce_with_logits(flat, tt), dice_loss(sigmoid(flat), tt)), static_cast<T>(w.bls_b));
    br.bls_b = static_cast<double>(b.item());
    terms.push_back(b);
  }

  Tensor<T> total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  br.total = total;
  return br;
}

#define NQ_INSTANTIATE_LOSS(T)                                                                    \
  template std::vector<double> matching_cost(const Tensor<T>&, const Tensor<T>&, const SegTarget&, \
                                             const LossWeights&);                                 \
  template MatchResult hungarian_match(const Tensor<T>&, const Tensor<T>&, const SegTarget&,      \
                                       const LossWeights&);                                       \
  template LossBreakdown<T> total_loss(const DecoderOutputs<T>&, const SegTarget&,                \
                                       const LossWeights&, DiscreteTrace*);

NQ_INSTANTIATE_LOSS(float)
NQ_INSTANTIATE_LOSS(double)

}  // namespace nq
