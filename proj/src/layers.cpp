#include "stimseg/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace stimseg {

const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::Encoder: return "encoder";
    case ParamGroup::Mixer: return "mixer";
    case ParamGroup::MaskHead: return "mask_head";
    case ParamGroup::Projector: return "projector";
    case ParamGroup::Adapter: return "adapter";
    case ParamGroup::Language: return "language";
  }
  return "?";
}

Tensor ParameterSet::add(const std::string& name, Matrix init, ParamGroup group) {
  if (contains(name)) throw std::logic_error("duplicate parameter " + name);
  Tensor t(std::move(init), true);
  items_.push_back({name, t, group});
  return t;
}

Tensor& ParameterSet::get(const std::string& name) {
  for (auto& p : items_)
    if (p.name == name) return p.tensor;
  throw std::out_of_range("no parameter named " + name);
}

const Tensor& ParameterSet::get(const std::string& name) const {
  for (const auto& p : items_)
    if (p.name == name) return p.tensor;
  throw std::out_of_range("no parameter named " + name);
}

bool ParameterSet::contains(const std::string& name) const {
  for (const auto& p : items_)
    if (p.name == name) return true;
  return false;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += static_cast<std::size_t>(p.tensor.value().size());
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : items_) p.tensor.zero_grad();
}

Matrix random_normal(Index rows, Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

Linear::Linear(ParameterSet& params, const std::string& name, Index in, Index out,
               ParamGroup group, Rng& rng, double init_scale) {
  const double stddev = init_scale / std::sqrt(static_cast<double>(in));
  weight = params.add(name + ".weight", random_normal(in, out, stddev, rng), group);
  bias = params.add(name + ".bias", Matrix::Zero(1, out), group);
}

Tensor Linear::forward(const Tensor& x) const {
  return ops::add_row(ops::matmul(x, weight), bias);
}

LayerNorm::LayerNorm(ParameterSet& params, const std::string& name, Index dim, ParamGroup group) {
  gamma = params.add(name + ".gamma", Matrix::Ones(1, dim), group);
  beta = params.add(name + ".beta", Matrix::Zero(1, dim), group);
}

Tensor LayerNorm::forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }

MultiHeadAttention::MultiHeadAttention(ParameterSet& params, const std::string& name, Index dim,
                                       int heads_, ParamGroup group, Rng& rng)
    : heads(heads_) {
  if (heads <= 0 || dim % heads != 0) {
    throw std::invalid_argument(name + ": width " + std::to_string(dim) +
                                " not divisible by " + std::to_string(heads) + " heads");
  }
  q_proj = Linear(params, name + ".q", dim, dim, group, rng);
  k_proj = Linear(params, name + ".k", dim, dim, group, rng);
  v_proj = Linear(params, name + ".v", dim, dim, group, rng);
  out_proj = Linear(params, name + ".out", dim, dim, group, rng, 0.5);
}

Tensor MultiHeadAttention::forward(const Tensor& queries, const Tensor& keys_values,
                                   const Matrix* additive_mask) const {
  const Index dim = q_proj.weight.rows();
  if (queries.cols() != dim || keys_values.cols() != dim) {
    throw std::invalid_argument("attention: input width does not match projection width " +
                                std::to_string(dim));
  }
  const Tensor q = q_proj.forward(queries);
  const Tensor k = k_proj.forward(keys_values);
  const Tensor v = v_proj.forward(keys_values);
  const Index head_dim = dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  std::vector<Tensor> head_out;
  head_out.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const Tensor qh = heads == 1 ? q : ops::slice_cols(q, h * head_dim, head_dim);
    const Tensor kh = heads == 1 ? k : ops::slice_cols(k, h * head_dim, head_dim);
    const Tensor vh = heads == 1 ? v : ops::slice_cols(v, h * head_dim, head_dim);
    Tensor logits = ops::scale(ops::matmul_nt(qh, kh), inv_sqrt);
    if (additive_mask != nullptr) logits = ops::add_const(logits, *additive_mask);
    head_out.push_back(ops::matmul(ops::softmax_rows(logits), vh));
  }
  const Tensor merged = heads == 1 ? head_out[0] : ops::concat_cols(head_out);
  return out_proj.forward(merged);
}

FeedForward::FeedForward(ParameterSet& params, const std::string& name, Index dim, Index hidden,
                         ParamGroup group, Rng& rng) {
  fc1 = Linear(params, name + ".fc1", dim, hidden, group, rng);
  fc2 = Linear(params, name + ".fc2", hidden, dim, group, rng, 0.5);
}

Tensor FeedForward::forward(const Tensor& x) const {
  return fc2.forward(ops::gelu(fc1.forward(x)));
}

EncoderBlock::EncoderBlock(ParameterSet& params, const std::string& name, Index dim, int heads,
                           int mlp_ratio, ParamGroup group, Rng& rng) {
  norm1 = LayerNorm(params, name + ".norm1", dim, group);
  attn = MultiHeadAttention(params, name + ".attn", dim, heads, group, rng);
  norm2 = LayerNorm(params, name + ".norm2", dim, group);
  ffn = FeedForward(params, name + ".ffn", dim, dim * mlp_ratio, group, rng);
}

Tensor EncoderBlock::forward(const Tensor& x) const {
  const Tensor h = norm1.forward(x);
  const Tensor x1 = ops::add(x, attn.forward(h, h));
  return ops::add(x1, ffn.forward(norm2.forward(x1)));
}

void assert_finite(const Tensor& t, const char* where) {
  if (!t.value().allFinite()) {
    throw NumericalError(std::string("non-finite values in ") + where);
  }
}

}  // namespace stimseg
