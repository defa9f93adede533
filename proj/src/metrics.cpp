#include "stimseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

namespace stimseg {

namespace {

void check_same_shape(const BinaryMask& a, const BinaryMask& b) {
  if (a.height != b.height || a.width != b.width) {
    throw std::invalid_argument("mask shapes differ: " + std::to_string(a.height) + "x" +
                                std::to_string(a.width) + " vs " + std::to_string(b.height) +
                                "x" + std::to_string(b.width));
  }
}

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts ngrams(std::span<const std::string> tokens, int n) {
  NgramCounts out;
  if (static_cast<int>(tokens.size()) < n) return out;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++out[std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + n)];
  }
  return out;
}

}  // namespace

double iou(const BinaryMask& a, const BinaryMask& b) {
  check_same_shape(a, b);
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool x = a.data[i] != 0;
    const bool y = b.data[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::optional<Box> bbox_from_mask(const BinaryMask& mask) {
  std::optional<Box> box;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      if (!box) {
        box = Box{y, y, x, x};
      } else {
        box->row_min = std::min(box->row_min, y);
        box->row_max = std::max(box->row_max, y);
        box->col_min = std::min(box->col_min, x);
        box->col_max = std::max(box->col_max, x);
      }
    }
  }
  return box;
}

double box_iou(const std::optional<Box>& a, const std::optional<Box>& b) {
  if (!a && !b) return 1.0;
  if (!a || !b) return 0.0;
  const int r0 = std::max(a->row_min, b->row_min);
  const int r1 = std::min(a->row_max, b->row_max);
  const int c0 = std::max(a->col_min, b->col_min);
  const int c1 = std::min(a->col_max, b->col_max);
  const long inter =
      (r1 >= r0 && c1 >= c0) ? static_cast<long>(r1 - r0 + 1) * (c1 - c0 + 1) : 0;
  return static_cast<double>(inter) / static_cast<double>(a->area() + b->area() - inter);
}

double p_at_k(std::span<const double> ious, double threshold) {
  if (ious.empty()) throw std::invalid_argument("p_at_k: empty IoU list");
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("p_at_k: threshold must lie in (0, 1)");
  }
  const auto hits = std::count_if(ious.begin(), ious.end(), [&](double v) { return v > threshold; });
  return 100.0 * static_cast<double>(hits) / static_cast<double>(ious.size());
}

double bleu_n(std::span<const std::string> candidate, std::span<const std::string> reference,
              int n) {
  if (n < 1 || n > 4) throw std::invalid_argument("bleu_n: n must lie in 1..4");
  if (candidate.empty()) return 0.0;
  double log_sum = 0.0;
  for (int k = 1; k <= n; ++k) {
    const auto cand = ngrams(candidate, k);
    const auto ref = ngrams(reference, k);
    int clipped = 0;
    int total = 0;
    for (const auto& [gram, count] : cand) {
      total += count;
      const auto it = ref.find(gram);
      if (it != ref.end()) clipped += std::min(count, it->second);
    }
    if (clipped == 0 || total == 0) return 0.0;
    log_sum += std::log(static_cast<double>(clipped) / total);
  }
  const double c = static_cast<double>(candidate.size());
  const double r = static_cast<double>(reference.size());
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / n);
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0);
  std::vector<std::size_t> cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  constexpr double kBeta2 = 1.2 * 1.2;
  return (1.0 + kBeta2) * p * r / (r + kBeta2 * p);
}

const std::vector<std::pair<std::string, EmotionId>>& emotion_keywords() {
  static const std::vector<std::pair<std::string, EmotionId>> table = [] {
    const std::vector<std::vector<std::string>> synonyms = {
        {"amused", "amusing", "funny", "fun", "humor", "humorous"},
        {"awed", "awesome", "awestruck", "majestic", "wonder"},
        {"content", "contented", "calm", "peaceful", "serene"},
        {"excited", "exciting", "thrilling", "thrilled", "energetic"},
        {"angry", "rage", "furious", "annoyed", "mad"},
        {"disgusted", "disgusting", "gross", "repulsive"},
        {"afraid", "scared", "fearful", "frightening", "scary", "terrifying"},
        {"sad", "sorrow", "lonely", "gloomy", "depressing", "melancholy"},
    };
    std::vector<std::pair<std::string, EmotionId>> out;
    for (int e = 0; e < kNumEmotions; ++e) {
      out.emplace_back(std::string(kEmotionNames[static_cast<std::size_t>(e)]), EmotionId(e));
      for (const auto& s : synonyms[static_cast<std::size_t>(e)]) out.emplace_back(s, EmotionId(e));
    }
    return out;
  }();
  return table;
}

std::optional<EmotionId> keyword_emotion(std::string_view text) {
  static const std::map<std::string, EmotionId, std::less<>> index = [] {
    std::map<std::string, EmotionId, std::less<>> m;
    for (const auto& [word, e] : emotion_keywords()) m.emplace(word, e);
    return m;
  }();
  for (const auto& tok : tokenize(text)) {
    const auto it = index.find(tok);
    if (it != index.end()) return it->second;
  }
  return std::nullopt;
}

double emotion_alignment(std::span<const std::string> explanations,
                         std::span<const EmotionId> gold, const EmotionClassifier& classifier) {
  if (explanations.size() != gold.size()) {
    throw std::invalid_argument("emotion_alignment: " + std::to_string(explanations.size()) +
                                " explanations vs " + std::to_string(gold.size()) + " labels");
  }
  if (explanations.empty()) throw std::invalid_argument("emotion_alignment: empty corpus");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const auto predicted = classifier(explanations[i]);
    hits += predicted && *predicted == gold[i];
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(gold.size());
}

double round2(double v) { return std::round(v * 100.0) / 100.0; }

EvalReport score(std::span<const EvalItem> items, const EmotionClassifier& classifier) {
  if (items.empty()) throw std::invalid_argument("score: no evaluation items");
  EvalReport rep;
  rep.count = static_cast<int>(items.size());
  std::vector<std::string> texts;
  std::vector<EmotionId> gold;
  std::vector<std::vector<double>> per_ious(kNumEmotions);
  std::vector<std::vector<std::string>> per_texts(kNumEmotions);
  std::vector<std::vector<EmotionId>> per_gold(kNumEmotions);
  double bleu_sum[4] = {0, 0, 0, 0};
  double rouge_sum = 0.0;
  for (const auto& item : items) {
    const double seg = iou(item.predicted, item.truth);
    const double box = box_iou(bbox_from_mask(item.predicted), bbox_from_mask(item.truth));
    rep.seg_ious.push_back(seg);
    rep.bbox_ious.push_back(box);
    const auto cand = tokenize(item.explanation);
    const auto ref = tokenize(item.reference);
    for (int n = 1; n <= 4; ++n) bleu_sum[n - 1] += bleu_n(cand, ref, n);
    rouge_sum += rouge_l(cand, ref);
    texts.push_back(item.explanation);
    gold.push_back(item.emotion);
    const auto e = static_cast<std::size_t>(item.emotion.value);
    per_ious[e].push_back(seg);
    per_texts[e].push_back(item.explanation);
    per_gold[e].push_back(item.emotion);
  }
  const double n = static_cast<double>(items.size());
  rep.seg_p25 = p_at_k(rep.seg_ious, 0.25);
  rep.seg_p50 = p_at_k(rep.seg_ious, 0.50);
  rep.bbox_p25 = p_at_k(rep.bbox_ious, 0.25);
  rep.bbox_p50 = p_at_k(rep.bbox_ious, 0.50);
  for (int k = 0; k < 4; ++k) rep.bleu[k] = 100.0 * bleu_sum[k] / n;
  rep.rouge = 100.0 * rouge_sum / n;
  rep.ea = emotion_alignment(texts, gold, classifier);
  for (std::size_t e = 0; e < kNumEmotions; ++e) {
    auto& b = rep.per_emotion[e];
    b.count = static_cast<int>(per_ious[e].size());
    if (b.count == 0) continue;
    b.seg_p25 = p_at_k(per_ious[e], 0.25);
    b.seg_p50 = p_at_k(per_ious[e], 0.50);
    b.ea = emotion_alignment(per_texts[e], per_gold[e], classifier);
  }
  return rep;
}

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["count"] = count;
  j["bbox_p25"] = round2(bbox_p25);
  j["bbox_p50"] = round2(bbox_p50);
  j["seg_p25"] = round2(seg_p25);
  j["seg_p50"] = round2(seg_p50);
  for (int k = 0; k < 4; ++k) j["bleu" + std::to_string(k + 1)] = round2(bleu[k]);
  j["rouge_l"] = round2(rouge);
  j["ea"] = round2(ea);
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  for (std::size_t e = 0; e < per_emotion.size(); ++e) {
    const auto& b = per_emotion[e];
    per[std::string(kEmotionNames[e])] = {{"count", b.count},
                                          {"seg_p25", round2(b.seg_p25)},
                                          {"seg_p50", round2(b.seg_p50)},
                                          {"ea", round2(b.ea)}};
  }
  j["per_emotion"] = per;
  j["seg_ious"] = seg_ious;
  j["bbox_ious"] = bbox_ious;
  return j;
}

std::string EvalReport::table() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "samples " << count << "\n";
  os << "bbox   P@25 " << std::setw(6) << bbox_p25 << "  P@50 " << std::setw(6) << bbox_p50 << "\n";
  os << "seg    P@25 " << std::setw(6) << seg_p25 << "  P@50 " << std::setw(6) << seg_p50 << "\n";
  os << "BLEU   1 " << bleu[0] << "  2 " << bleu[1] << "  3 " << bleu[2] << "  4 " << bleu[3]
     << "\n";
  os << "ROUGE-L " << rouge << "\n";
  os << "EA      " << ea << "\n";
  os << std::left << std::setw(12) << "emotion" << std::right << std::setw(7) << "count"
     << std::setw(9) << "segP@25" << std::setw(9) << "segP@50" << std::setw(9) << "EA" << "\n";
  for (std::size_t e = 0; e < per_emotion.size(); ++e) {
    const auto& b = per_emotion[e];
    os << std::left << std::setw(12) << kEmotionNames[e] << std::right << std::setw(7) << b.count
       << std::setw(9) << b.seg_p25 << std::setw(9) << b.seg_p50 << std::setw(9) << b.ea << "\n";
  }
  return os.str();
}

}  // namespace stimseg
