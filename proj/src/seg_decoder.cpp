#include "stimseg/seg_decoder.hpp"

#include <stdexcept>

namespace stimseg {

MixerBlock::MixerBlock(ParameterSet& params, const std::string& name, int dim, int heads,
                       int mlp_ratio, Rng& rng) {
  const auto g = ParamGroup::Mixer;
  self_norm = LayerNorm(params, name + ".self_norm", dim, g);
  self_attn = MultiHeadAttention(params, name + ".self_attn", dim, heads, g, rng);
  q2v_query_norm = LayerNorm(params, name + ".q2v_query_norm", dim, g);
  q2v_vision_norm = LayerNorm(params, name + ".q2v_vision_norm", dim, g);
  q2v_attn = MultiHeadAttention(params, name + ".q2v_attn", dim, heads, g, rng);
  ffn_norm = LayerNorm(params, name + ".ffn_norm", dim, g);
  ffn = FeedForward(params, name + ".ffn", dim, static_cast<Index>(dim) * mlp_ratio, g, rng);
  v2q_vision_norm = LayerNorm(params, name + ".v2q_vision_norm", dim, g);
  v2q_query_norm = LayerNorm(params, name + ".v2q_query_norm", dim, g);
  v2q_attn = MultiHeadAttention(params, name + ".v2q_attn", dim, heads, g, rng);
}

std::pair<Tensor, Tensor> MixerBlock::forward(const Tensor& queries, const Tensor& vision) const {
  if (queries.cols() != vision.cols()) {
    throw ConfigError("mixer: query width " + std::to_string(queries.cols()) +
                      " != vision width " + std::to_string(vision.cols()));
  }
  const Tensor h = self_norm.forward(queries);
  Tensor q = ops::add(queries, self_attn.forward(h, h));
  q = ops::add(q, q2v_attn.forward(q2v_query_norm.forward(q), q2v_vision_norm.forward(vision)));
  q = ops::add(q, ffn.forward(ffn_norm.forward(q)));
  const Tensor v = ops::add(
      vision, v2q_attn.forward(v2q_vision_norm.forward(vision), v2q_query_norm.forward(q)));
  return {q, v};
}

FeatureMixer::FeatureMixer(ParameterSet& params, const std::string& name, int dim, int heads,
                           int n_blocks, int mlp_ratio, Rng& rng) {
  for (int i = 0; i < n_blocks; ++i) {
    blocks.emplace_back(params, name + ".blocks." + std::to_string(i), dim, heads, mlp_ratio, rng);
  }
}

std::pair<Tensor, Tensor> FeatureMixer::forward(const Tensor& queries, const Tensor& vision) const {
  std::pair<Tensor, Tensor> state{queries, vision};
  for (const auto& b : blocks) state = b.forward(state.first, state.second);
  return state;
}

MixerOutput FeatureMixer::run(Paradigm paradigm, const std::optional<Tensor>& prompt,
                              const Tensor& mask_tokens, const Tensor& vision) const {
  MixerOutput out;
  if (paradigm == Paradigm::MultiMasks) {
    if (prompt) throw std::invalid_argument("Multi-Masks mode takes no emotion prompt");
    auto [q, v] = forward(mask_tokens, vision);
    out.mask_tokens = q;
    out.vision = v;
    return out;
  }
  if (!prompt) throw std::invalid_argument("Single-Mask mode needs an emotion prompt");
  const Tensor parts[] = {*prompt, mask_tokens};
  auto [q, v] = forward(ops::concat_rows(parts), vision);
  const Index lp = prompt->rows();
  out.prompt = ops::slice_rows(q, 0, lp);
  out.mask_tokens = ops::slice_rows(q, lp, q.rows() - lp);
  out.vision = v;
  return out;
}

MaskHead::MaskHead(ParameterSet& params, const std::string& name, int dim, int grid, Rng& rng)
    : dim_(dim), grid_(grid) {
  const auto g = ParamGroup::MaskHead;
  const int c1 = dim / 4;
  const int c2 = dim / 8;
  up1 = Linear(params, name + ".up1", dim, 4 * c1, g, rng);
  up1_norm = LayerNorm(params, name + ".up1_norm", c1, g);
  up2 = Linear(params, name + ".up2", c1, 4 * c2, g, rng);
  hyper1 = Linear(params, name + ".hyper1", dim, dim, g, rng);
  hyper2 = Linear(params, name + ".hyper2", dim, dim, g, rng);
  hyper3 = Linear(params, name + ".hyper3", dim, c2, g, rng);
}

Tensor MaskHead::upsample(const Tensor& vision) const {
  if (vision.rows() != static_cast<Index>(grid_) * grid_ || vision.cols() != dim_) {
    throw std::invalid_argument("mask head: vision tokens are not a " + std::to_string(grid_) +
                                "x" + std::to_string(grid_) + "x" + std::to_string(dim_) +
                                " grid");
  }
  Tensor x = ops::pixel_shuffle2(up1.forward(vision), grid_, dim_ / 4);
  x = ops::gelu(up1_norm.forward(x));
  x = ops::pixel_shuffle2(up2.forward(x), 2 * grid_, dim_ / 8);
  return ops::gelu(x);
}

Tensor MaskHead::classifiers(const Tensor& mask_tokens) const {
  Tensor h = ops::relu(hyper1.forward(mask_tokens));
  h = ops::relu(hyper2.forward(h));
  return hyper3.forward(h);
}

Tensor MaskHead::saliency(const Tensor& mask_tokens, const Tensor& vision) const {
  Tensor s = ops::matmul_nt(classifiers(mask_tokens), upsample(vision));
  assert_finite(s, "saliency matrix");
  return s;
}

std::vector<double> resize_saliency(const Eigen::Ref<const Eigen::RowVectorXd>& saliency,
                                    int resolution, int height, int width) {
  std::vector<double> src(saliency.data(), saliency.data() + saliency.size());
  if (static_cast<int>(src.size()) != resolution * resolution) {
    throw std::invalid_argument("saliency row does not hold an R x R map");
  }
  return resize_bilinear(src, resolution, resolution, 1, height, width);
}

BinaryMask threshold_mask(const std::vector<double>& logits, int height, int width, double tau) {
  BinaryMask m(height, width);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = logits[i] > tau ? 1 : 0;
  return m;
}

}  // namespace stimseg
