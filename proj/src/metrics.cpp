#include "nearquery/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "nearquery/kernels.hpp"

namespace nq {

MetricsReport evaluate_metrics(const std::vector<std::vector<std::uint8_t>>& preds,
                               const std::vector<std::vector<std::uint8_t>>& targets,
                               Index n_classes, const std::vector<ClassInfo>& classes) {
  if (preds.size() != targets.size()) {
    throw ShapeError("evaluate_metrics: " + std::to_string(preds.size()) + " predictions for " +
                     std::to_string(targets.size()) + " targets");
  }
  if (!classes.empty() && static_cast<Index>(classes.size()) != n_classes) {
    throw std::invalid_argument("evaluate_metrics: class info count does not match n_classes");
  }
  const auto C = static_cast<std::size_t>(n_classes);
  std::vector<double> sd(C + 1, 0), si(C + 1, 0), sa(C + 1, 0);
  std::vector<Index> cnt(C + 1, 0);
  std::vector<Index> tp(C + 1), np(C + 1), ng(C + 1);
  for (std::size_t k = 0; k < preds.size(); ++k) {
    const auto& p = preds[k];
    const auto& g = targets[k];
    if (p.size() != g.size()) {
      throw ShapeError("evaluate_metrics: image " + std::to_string(k) + " has " +
                       std::to_string(p.size()) + " predicted vs " + std::to_string(g.size()) +
                       " target pixels");
    }
    std::fill(tp.begin(), tp.end(), 0);
    std::fill(np.begin(), np.end(), 0);
    std::fill(ng.begin(), ng.end(), 0);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] > C || g[i] > C) throw std::out_of_range("evaluate_metrics: label exceeds n_classes");
      ++np[p[i]];
      ++ng[g[i]];
      if (p[i] == g[i]) ++tp[p[i]];
    }
    for (std::size_t c = 1; c <= C; ++c) {
      if (ng[c] == 0) continue;
      const auto t = static_cast<double>(tp[c]);
      sd[c] += 2.0 * t / static_cast<double>(np[c] + ng[c]);
      si[c] += t / static_cast<double>(np[c] + ng[c] - tp[c]);
      sa[c] += t / static_cast<double>(ng[c]);
      ++cnt[c];
    }
  }

  MetricsReport r;
  Index n_present = 0;
  for (std::size_t c = 1; c <= C; ++c) {
    ClassMetrics m;
    m.label = static_cast<int>(c);
    m.name = classes.empty() ? "class" + std::to_string(c) : classes[c - 1].name;
    m.tier = classes.empty() ? "" : classes[c - 1].tier;
    m.n_images = cnt[c];
    m.present = cnt[c] > 0;
    if (m.present) {
      const auto n = static_cast<double>(cnt[c]);
      m.dice = sd[c] / n;
      m.iou = si[c] / n;
      m.acc = sa[c] / n;
      r.mDice += m.dice;
      r.mIoU += m.iou;
      r.mAcc += m.acc;
      ++n_present;
    } else {
      r.flags.push_back("class " + m.name + " absent from every target; excluded from means");
    }
    r.per_class.push_back(m);
  }
  if (n_present > 0) {
    r.mDice /= static_cast<double>(n_present);
    r.mIoU /= static_cast<double>(n_present);
    r.mAcc /= static_cast<double>(n_present);
  }
  for (const char* tier : {"large", "mid", "small"}) {
    TierMetrics t;
    t.tier = tier;
    for (const auto& m : r.per_class) {
      if (m.present && m.tier == tier) {
        t.dice += m.dice;
        t.iou += m.iou;
        t.acc += m.acc;
        ++t.n_classes;
      }
    }
    if (t.n_classes == 0) continue;
    t.dice /= static_cast<double>(t.n_classes);
    t.iou /= static_cast<double>(t.n_classes);
    t.acc /= static_cast<double>(t.n_classes);
    r.tiers.push_back(t);
  }
  return r;
}

template <class T>
std::vector<std::uint8_t> semantic_inference(const PredictionSet<T>& p, Index height, Index width) {
  const Index Q = p.class_logits.dim(0), C1 = p.class_logits.dim(1);
  const Index h = p.mask_logits.dim(1), w = p.mask_logits.dim(2), HW = height * width;
  const auto cl = p.class_logits.data();
  std::vector<Index> keep;
  std::vector<double> conf;
  std::vector<int> label;
  for (Index q = 0; q < Q; ++q) {
    const T* row = cl.data() + q * C1;
    const T mx = *std::max_element(row, row + C1);
    double s = 0;
    for (Index c = 0; c < C1; ++c) s += std::exp(static_cast<double>(row[c] - mx));
    Index best = 0;
    for (Index c = 1; c < C1; ++c) {
      if (row[c] > row[best]) best = c;
    }
    if (best == C1 - 1) continue;  // "no object"
    keep.push_back(q);
    conf.push_back(std::exp(static_cast<double>(row[best] - mx)) / s);
    label.push_back(static_cast<int>(best) + 1);
  }
  std::vector<std::uint8_t> out(static_cast<std::size_t>(HW), 0);
  if (keep.empty()) return out;
  std::vector<T> up(static_cast<std::size_t>(Q * HW));
  kernels::resize_fwd(kernels::current_exec(), Q, h, w, height, width, p.mask_logits.data().data(), up.data());
  for (Index i = 0; i < HW; ++i) {
    double best = -1;
    for (std::size_t k = 0; k < keep.size(); ++k) {
      const double x = static_cast<double>(up[static_cast<std::size_t>(keep[k] * HW + i)]);
      const double prob = 1.0 / (1.0 + std::exp(-x));
      if (prob <= 0.5) continue;
      const double score = conf[k] * prob;
      if (score > best) {
        best = score;
        out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(label[k]);
      }
    }
  }
  return out;
}

template std::vector<std::uint8_t> semantic_inference(const PredictionSet<float>&, Index, Index);
template std::vector<std::uint8_t> semantic_inference(const PredictionSet<double>&, Index, Index);

}  // namespace nq
