#pragma once

#include "stimseg/dataset.hpp"
#include "stimseg/tensor.hpp"

#include <map>
#include <span>

namespace stimseg {

// 1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps), p = sigmoid(logits).
Tensor dice_loss(const Tensor& logits, const Matrix& target, double eps = 1.0);
// Same formula on probabilities supplied directly.
double dice_from_probs(const Matrix& probs, const Matrix& target, double eps = 1.0);

struct FocalParams {
  double alpha_pos = 0.25;
  double alpha_neg = 0.75;
  double gamma = 2.0;

  // Standard convention: alpha for positives, 1 - alpha for negatives.
  static FocalParams standard(double alpha, double gamma) { return {alpha, 1.0 - alpha, gamma}; }
};

// Pixel mean of -alpha_t (1 - p_t)^gamma log p_t, computed via log-sigmoid.
Tensor focal_loss(const Tensor& logits, const Matrix& target, const FocalParams& params);

// Token-mean cross-entropy: row i of `logits` predicts gold[i + 1]. Targets
// equal to `pad_id` are excluded from sum and count; if none remain the loss
// is 0 and a warning is printed.
Tensor lang_loss(const Tensor& logits, std::span<const std::int64_t> gold,
                 std::int64_t pad_id = Vocabulary::kPad);

// Area-threshold downsampling of an H x W mask to R x R (> 0.5 coverage).
// H and W must be multiples of R.
Matrix downsample_mask(const BinaryMask& mask, int resolution);

struct EmotionLoss {
  double mask = 0.0;  // dice + focal
  double lang = 0.0;
};

struct LossReport {
  double dice = 0.0;
  double focal = 0.0;
  double lang = 0.0;
  double total = 0.0;
  std::map<int, EmotionLoss> per_emotion;  // Multi-Masks only, keyed by EmotionId
  Tensor total_tensor;                     // graph root for backward()
};

}  // namespace stimseg
