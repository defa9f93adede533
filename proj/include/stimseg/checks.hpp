#pragma once

#include "stimseg/model.hpp"

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

// Reference implementations and consistency checks shared by the unit tests,
// the acceptance binary and `stimseg_cli selftest`. The oracles are written as
// plain loops over std::vector and never call into the autodiff ops.
namespace stimseg::checks {

struct CheckResult {
  std::string name;
  bool passed = false;
  double worst = 0.0;  // largest error seen (absolute or relative, see detail)
  int trials = 0;
  double seconds = 0.0;
  std::string detail;
};

// Row-major dense matrix for the oracles.
struct Dense {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Dense() = default;
  Dense(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}
  double& operator()(int i, int j) { return a[static_cast<std::size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return a[static_cast<std::size_t>(i) * cols + j]; }
};

Dense to_dense(const Matrix& m);
double max_abs_diff(const Dense& a, const Matrix& b);

Dense oracle_linear(const Dense& x, const Linear& layer);
Dense oracle_layer_norm(const Dense& x, const LayerNorm& norm);
Dense oracle_gelu(const Dense& x);
// Per-head softmax(q k^T / sqrt(d) + mask) v, then the output projection.
// `visible(i, j)` false removes key j from query i.
Dense oracle_attention(const Dense& queries, const Dense& keys_values,
                       const MultiHeadAttention& attn,
                       const std::function<bool(int, int)>& visible = {});
std::pair<Dense, Dense> oracle_mixer_block(const Dense& queries, const Dense& vision,
                                           const MixerBlock& block);
Dense oracle_decode_train(const LanguageDecoder& decoder, const TokenEmbedding& embedding,
                          const Dense& vision, const Dense& prefix,
                          const std::vector<std::int64_t>& gold);
Dense oracle_project(const EmotionProjector& projector, const TokenEmbedding& embedding,
                     const std::vector<std::int64_t>& ids);
Dense oracle_adapt(const PrefixAdapter& adapter, const Dense& rows);

// Loss and metric references.
double oracle_dice(const Matrix& logits, const Matrix& target, double eps);
double oracle_bce(const Matrix& logits, const Matrix& target);
double oracle_iou(const BinaryMask& a, const BinaryMask& b);
double oracle_box_iou(const BinaryMask& a, const BinaryMask& b);

// Randomises every parameter in the set (normal, stddev `scale`).
void randomize(ParameterSet& params, Rng& rng, double scale);

// Relative error ||a - b|| / max(||a||, ||b||, tiny).
double relative_error(const std::vector<double>& a, const std::vector<double>& b);

// Oracle equivalence (100 randomised trials each by default).
CheckResult check_mixer_block(int trials, std::uint64_t seed);
CheckResult check_decode_train(int trials, std::uint64_t seed);
CheckResult check_project(int trials, std::uint64_t seed);
CheckResult check_adapt(int trials, std::uint64_t seed);

// Central finite differences, h = 1e-5, relative error < 1e-3.
CheckResult check_dice_gradient(int trials, std::uint64_t seed);
CheckResult check_focal_gradient(int trials, std::uint64_t seed);
CheckResult check_lang_gradient(int trials, std::uint64_t seed);
CheckResult check_total_gradient(Paradigm paradigm, std::uint64_t seed);

// Loss identities.
CheckResult check_dice_identity(int trials, std::uint64_t seed);
CheckResult check_focal_bce(int trials, std::uint64_t seed);
CheckResult check_uniform_lang(int trials, std::uint64_t seed);
CheckResult check_unannotated_gradient(std::uint64_t seed);

// Metric oracles.
CheckResult check_geometry_metrics(int trials, std::uint64_t seed);
CheckResult check_text_metrics();

// Small model on 16 x 16 images whose saliency grid is 4 x 4.
ModelConfig tiny_config(Paradigm paradigm);
// A synthetic sample that fits `config` (random image, random mask and
// tokens of length `tokens`).
Sample random_sample(const ModelConfig& config, const Vocabulary& vocab, EmotionId emotion,
                     int tokens, Rng& rng);

std::vector<CheckResult> oracle_suite(std::uint64_t seed = 1);
std::vector<CheckResult> gradient_suite(std::uint64_t seed = 2);
std::vector<CheckResult> identity_suite(std::uint64_t seed = 3);
std::vector<CheckResult> metric_suite(std::uint64_t seed = 4);

void print(std::ostream& os, const CheckResult& r);

}  // namespace stimseg::checks
