#pragma once

#include "stimseg/dataset.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace stimseg {

// |a and b| / |a or b|; 1 when both are empty, 0 when exactly one is.
double iou(const BinaryMask& a, const BinaryMask& b);

// Inclusive pixel bounds.
struct Box {
  int row_min = 0;
  int row_max = 0;
  int col_min = 0;
  int col_max = 0;

  bool operator==(const Box&) const = default;
  long area() const {
    return static_cast<long>(row_max - row_min + 1) * (col_max - col_min + 1);
  }
};

std::optional<Box> bbox_from_mask(const BinaryMask& mask);
// IoU of two optional boxes under the same empty conventions as `iou`.
double box_iou(const std::optional<Box>& a, const std::optional<Box>& b);

// 100 * |{iou > threshold}| / n. Throws on an empty list or a threshold
// outside (0, 1).
double p_at_k(std::span<const double> ious, double threshold);

// Clipped n-gram precisions combined by geometric mean over orders 1..n,
// times exp(1 - r/c) when the candidate is shorter than the reference.
double bleu_n(std::span<const std::string> candidate, std::span<const std::string> reference,
              int n);
// LCS F-measure with beta = 1.2.
double rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference);
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

// Returns the emotion a text expresses, or nullopt for the "none" class.
using EmotionClassifier = std::function<std::optional<EmotionId>(std::string_view)>;

// Scans tokens left to right; the first token that is an emotion name or a
// listed synonym decides the class.
std::optional<EmotionId> keyword_emotion(std::string_view text);
const std::vector<std::pair<std::string, EmotionId>>& emotion_keywords();

double emotion_alignment(std::span<const std::string> explanations,
                         std::span<const EmotionId> gold,
                         const EmotionClassifier& classifier = keyword_emotion);

struct EvalItem {
  EmotionId emotion;
  BinaryMask predicted;
  BinaryMask truth;
  std::string explanation;  // generated
  std::string reference;    // gold
};

struct EmotionBreakdown {
  int count = 0;
  double seg_p25 = 0.0;
  double seg_p50 = 0.0;
  double ea = 0.0;
};

struct EvalReport {
  int count = 0;
  double bbox_p25 = 0.0;
  double bbox_p50 = 0.0;
  double seg_p25 = 0.0;
  double seg_p50 = 0.0;
  double bleu[4] = {0.0, 0.0, 0.0, 0.0};
  double rouge = 0.0;
  double ea = 0.0;
  std::vector<double> seg_ious;
  std::vector<double> bbox_ious;
  std::vector<EmotionBreakdown> per_emotion = std::vector<EmotionBreakdown>(kNumEmotions);

  nlohmann::ordered_json to_json() const;
  std::string table() const;
};

EvalReport score(std::span<const EvalItem> items,
                 const EmotionClassifier& classifier = keyword_emotion);

// Percentages with two decimals.
double round2(double v);

}  // namespace stimseg
