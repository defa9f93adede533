#include "stimseg/lang_decoder.hpp"

#include "stimseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace stimseg {

DecoderBlock::DecoderBlock(ParameterSet& params, const std::string& name, int dim, int heads,
                           int mlp_ratio, Rng& rng) {
  const auto g = ParamGroup::Language;
  self_norm = LayerNorm(params, name + ".self_norm", dim, g);
  self_attn = MultiHeadAttention(params, name + ".self_attn", dim, heads, g, rng);
  cross_norm = LayerNorm(params, name + ".cross_norm", dim, g);
  vision_norm = LayerNorm(params, name + ".vision_norm", dim, g);
  cross_attn = MultiHeadAttention(params, name + ".cross_attn", dim, heads, g, rng);
  ffn_norm = LayerNorm(params, name + ".ffn_norm", dim, g);
  ffn = FeedForward(params, name + ".ffn", dim, static_cast<Index>(dim) * mlp_ratio, g, rng);
}

Tensor DecoderBlock::forward(const Tensor& x, const Tensor& vision,
                             const Matrix& causal_mask) const {
  const Tensor h = self_norm.forward(x);
  Tensor y = ops::add(x, self_attn.forward(h, h, &causal_mask));
  y = ops::add(y, cross_attn.forward(cross_norm.forward(y), vision_norm.forward(vision)));
  return ops::add(y, ffn.forward(ffn_norm.forward(y)));
}

Matrix prefix_causal_mask(Index prefix_len, Index text_len) {
  const Index n = prefix_len + text_len;
  Matrix m = Matrix::Zero(n, n);
  const double blocked = -std::numeric_limits<double>::infinity();
  for (Index i = 0; i < n; ++i)
    for (Index j = prefix_len; j < n; ++j)
      if (j > i) m(i, j) = blocked;
  return m;
}

std::int64_t sample_nucleus(std::span<const double> probs, double p, Rng& rng) {
  if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("nucleus p must lie in (0, 1]");
  std::vector<std::int64_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::int64_t a, std::int64_t b) { return probs[a] > probs[b]; });
  double total = 0.0;
  for (const double v : probs) total += v;
  std::size_t keep = 0;
  double mass = 0.0;
  while (keep < order.size()) {
    mass += probs[order[keep]];
    ++keep;
    if (mass >= p * total) break;
  }
  const double u = rng.uniform() * mass;
  double acc = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    acc += probs[order[i]];
    if (u < acc) return order[i];
  }
  return order[keep - 1];
}

LanguageDecoder::LanguageDecoder(ParameterSet& params, const std::string& name, int dim, int heads,
                                 int n_blocks, int mlp_ratio, int max_positions, Rng& rng) {
  positions = params.add(name + ".positions", random_normal(max_positions, dim, 0.05, rng),
                         ParamGroup::Language);
  for (int i = 0; i < n_blocks; ++i) {
    blocks.emplace_back(params, name + ".blocks." + std::to_string(i), dim, heads, mlp_ratio, rng);
  }
  final_norm = LayerNorm(params, name + ".final_norm", dim, ParamGroup::Language);
}

Tensor LanguageDecoder::decode_train(const TokenEmbedding& embedding, const Tensor& vision,
                                     const Tensor& prefix,
                                     std::span<const std::int64_t> gold) const {
  if (gold.empty()) throw std::invalid_argument("decode_train: empty gold sequence");
  const Index lf = prefix.rows();
  const Index lt = static_cast<Index>(gold.size());
  if (lf + lt > positions.rows()) {
    throw std::invalid_argument("decode_train: sequence of " + std::to_string(lf + lt) +
                                " exceeds " + std::to_string(positions.rows()) + " positions");
  }
  const Tensor parts[] = {prefix, embedding.embed(gold)};
  Tensor x = ops::add(ops::concat_rows(parts), ops::slice_rows(positions, 0, lf + lt));
  const Matrix mask = prefix_causal_mask(lf, lt);
  for (const auto& b : blocks) x = b.forward(x, vision, mask);
  x = final_norm.forward(ops::slice_rows(x, lf, lt));
  Tensor logits = ops::matmul_nt(x, embedding.table);
  assert_finite(logits, "decoder logits");
  return logits;
}

GenerationResult LanguageDecoder::generate(const TokenEmbedding& embedding, const Tensor& vision,
                                           const Tensor& prefix, double nucleus_p,
                                           std::uint64_t seed, int max_new) const {
  NoGradGuard no_grad;
  Rng rng(seed);
  GenerationResult out;
  TokenIds seq{Vocabulary::kBos};
  const int room = static_cast<int>(positions.rows() - prefix.rows());
  const int limit = std::min(max_new, room);
  for (int step = 0; step < limit; ++step) {
    const Tensor logits = decode_train(embedding, vision, prefix, seq);
    Eigen::RowVectorXd row = logits.value().row(logits.rows() - 1);
    row(Vocabulary::kPad) = -std::numeric_limits<double>::infinity();
    row(Vocabulary::kBos) = -std::numeric_limits<double>::infinity();
    const double mx = row.maxCoeff();
    Eigen::RowVectorXd probs = (row.array() - mx).exp();
    const double z = probs.sum();
    probs /= z;
    const std::int64_t next =
        sample_nucleus(std::span<const double>(probs.data(), static_cast<std::size_t>(probs.size())),
                       nucleus_p, rng);
    out.tokens.push_back(next);
    out.logprobs.push_back(row(next) - mx - std::log(z));
    if (next == Vocabulary::kEos) break;
    seq.push_back(next);
  }
  return out;
}

}  // namespace stimseg
