#pragma once

#include "stimseg/dataset.hpp"
#include "stimseg/encoders.hpp"
#include "stimseg/random.hpp"

#include <span>
#include <vector>

namespace stimseg {

class DecoderBlock {
 public:
  DecoderBlock() = default;
  DecoderBlock(ParameterSet& params, const std::string& name, int dim, int heads, int mlp_ratio,
               Rng& rng);

  // Causal self-attention over [f, X], cross-attention to the vision tokens,
  // feed-forward; pre-norm residuals throughout.
  Tensor forward(const Tensor& x, const Tensor& vision, const Matrix& causal_mask) const;

  LayerNorm self_norm;
  MultiHeadAttention self_attn;
  LayerNorm cross_norm;
  LayerNorm vision_norm;
  MultiHeadAttention cross_attn;
  LayerNorm ffn_norm;
  FeedForward ffn;
};

struct GenerationResult {
  TokenIds tokens;               // generated ids, BOS excluded, EOS included if reached
  std::vector<double> logprobs;  // log p(token) under the full softmax, one per token
};

// Additive mask for a [prefix, text] sequence: every position sees the whole
// prefix, text positions see text at or before themselves.
Matrix prefix_causal_mask(Index prefix_len, Index text_len);

// Smallest descending-probability set whose mass reaches `p`, renormalised,
// then one draw. Ties in probability keep the lower id first.
std::int64_t sample_nucleus(std::span<const double> probs, double p, Rng& rng);

class LanguageDecoder {
 public:
  LanguageDecoder() = default;
  LanguageDecoder(ParameterSet& params, const std::string& name, int dim, int heads, int blocks,
                  int mlp_ratio, int max_positions, Rng& rng);

  // Teacher forcing. Row i of the result is the next-token distribution after
  // gold[0..i]; rows cover every gold position.
  Tensor decode_train(const TokenEmbedding& embedding, const Tensor& vision, const Tensor& prefix,
                      std::span<const std::int64_t> gold) const;

  // Samples up to `max_new` tokens after BOS; stops at EOS. PAD and BOS are
  // never emitted.
  GenerationResult generate(const TokenEmbedding& embedding, const Tensor& vision,
                            const Tensor& prefix, double nucleus_p, std::uint64_t seed,
                            int max_new) const;

  Tensor positions;  // max_positions x dim
  std::vector<DecoderBlock> blocks;
  LayerNorm final_norm;
};

}  // namespace stimseg
