#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nearquery/dataset.hpp"
#include "nearquery/model.hpp"

namespace nq {

struct ClassMetrics {
  int label = 0;  // label value, 1..C
  std::string name;
  std::string tier;
  double dice = 0, iou = 0, acc = 0;
  Index n_images = 0;    // images whose ground truth contains the class
  bool present = false;  // false: excluded from every mean
};

struct TierMetrics {
  std::string tier;
  double dice = 0, iou = 0, acc = 0;
  Index n_classes = 0;
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  double mDice = 0, mIoU = 0, mAcc = 0;
  std::vector<TierMetrics> tiers;  // large, mid, small; empty tiers omitted
  std::vector<std::string> flags;
};

// Per class, Dice/IoU/recall are computed per image over the images whose
// target contains the class, then averaged. Means run over present classes.
// classes (optional) supplies names and size tiers.
MetricsReport evaluate_metrics(const std::vector<std::vector<std::uint8_t>>& preds,
                               const std::vector<std::vector<std::uint8_t>>& targets,
                               Index n_classes, const std::vector<ClassInfo>& classes = {});

// Label map from one prediction set: mask logits are upsampled to H x W; a
// pixel takes the class of the query with mask probability > 0.5 and the
// largest class-confidence * mask-probability among queries whose argmax is
// not "no object". Otherwise it is background.
template <class T>
std::vector<std::uint8_t> semantic_inference(const PredictionSet<T>& p, Index height, Index width);

}  // namespace nq
