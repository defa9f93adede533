#pragma once

#include "stimseg/config.hpp"
#include "stimseg/image.hpp"
#include "stimseg/layers.hpp"

#include <optional>
#include <utility>
#include <vector>

namespace stimseg {

// One block of the emotion-driven feature mixer. Pre-norm residual
// sub-layers, in order:
//   queries += SelfAttn(LN(queries))
//   queries += CrossAttn(LN(queries) -> LN(vision))
//   queries += FFN(LN(queries))
//   vision  += CrossAttn(LN(vision) -> LN(queries))
class MixerBlock {
 public:
  MixerBlock() = default;
  MixerBlock(ParameterSet& params, const std::string& name, int dim, int heads, int mlp_ratio,
             Rng& rng);

  std::pair<Tensor, Tensor> forward(const Tensor& queries, const Tensor& vision) const;

  LayerNorm self_norm;
  MultiHeadAttention self_attn;
  LayerNorm q2v_query_norm;
  LayerNorm q2v_vision_norm;
  MultiHeadAttention q2v_attn;
  LayerNorm ffn_norm;
  FeedForward ffn;
  LayerNorm v2q_vision_norm;
  LayerNorm v2q_query_norm;
  MultiHeadAttention v2q_attn;
};

struct MixerOutput {
  std::optional<Tensor> prompt;  // p', absent in Multi-Masks mode
  Tensor mask_tokens;            // m', one row per mask token
  Tensor vision;                 // v'
};

class FeatureMixer {
 public:
  FeatureMixer() = default;
  FeatureMixer(ParameterSet& params, const std::string& name, int dim, int heads, int blocks,
               int mlp_ratio, Rng& rng);

  std::pair<Tensor, Tensor> forward(const Tensor& queries, const Tensor& vision) const;

  // Single-Mask: queries = [prompt; mask token]. Multi-Masks: queries = the
  // eight mask tokens and `prompt` must be empty.
  MixerOutput run(Paradigm paradigm, const std::optional<Tensor>& prompt,
                  const Tensor& mask_tokens, const Tensor& vision) const;

  std::vector<MixerBlock> blocks;
};

// Upsamples v' twice (G -> 4G, channels d_k -> d_k/4 -> d_k/8) and turns each
// updated mask token into a d_k/8 dynamic classifier through a 3-layer MLP.
class MaskHead {
 public:
  MaskHead() = default;
  MaskHead(ParameterSet& params, const std::string& name, int dim, int grid, Rng& rng);

  // (4G)^2 x d_k/8 per-pixel features.
  Tensor upsample(const Tensor& vision) const;
  // n x d_k/8
  Tensor classifiers(const Tensor& mask_tokens) const;
  // n x (4G)^2 saliency logits, one row per mask token, raster order.
  Tensor saliency(const Tensor& mask_tokens, const Tensor& vision) const;

  int grid() const { return grid_; }
  int resolution() const { return 4 * grid_; }

  Linear up1;
  LayerNorm up1_norm;
  Linear up2;
  Linear hyper1;
  Linear hyper2;
  Linear hyper3;

 private:
  int dim_ = 0;
  int grid_ = 0;
};

// Resizes an R x R saliency map (row-major) to H x W.
std::vector<double> resize_saliency(const Eigen::Ref<const Eigen::RowVectorXd>& saliency,
                                    int resolution, int height, int width);
// Strict threshold: logits equal to tau are background.
BinaryMask threshold_mask(const std::vector<double>& logits, int height, int width, double tau);

}  // namespace stimseg
