#pragma once

#include "stimseg/random.hpp"
#include "stimseg/tensor.hpp"

#include <stdexcept>
#include <string>
#include <vector>

namespace stimseg {

// Freeze and learning-rate bookkeeping is keyed on these groups.
enum class ParamGroup {
  Encoder,    // both vision encoders
  Mixer,      // feature mixer blocks
  MaskHead,   // upsampling, hypernetwork MLP and the learnable mask tokens
  Projector,  // emotion projector linear map
  Adapter,    // prefix adapter MLP
  Language,   // word embeddings and the language decoder
};

const char* to_string(ParamGroup g);

struct NamedParameter {
  std::string name;
  Tensor tensor;
  ParamGroup group;
};

// Ordered registry of every trainable array in a model.
class ParameterSet {
 public:
  Tensor add(const std::string& name, Matrix init, ParamGroup group);

  std::vector<NamedParameter>& items() { return items_; }
  const std::vector<NamedParameter>& items() const { return items_; }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<NamedParameter> items_;
};

Matrix random_normal(Index rows, Index cols, double stddev, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet& params, const std::string& name, Index in, Index out, ParamGroup group,
         Rng& rng, double init_scale = 1.0);

  Tensor forward(const Tensor& x) const;

  Tensor weight;  // in x out
  Tensor bias;    // 1 x out
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterSet& params, const std::string& name, Index dim, ParamGroup group);

  Tensor forward(const Tensor& x) const;

  Tensor gamma;
  Tensor beta;
};

// Multi-head scaled dot-product attention with separate query and key/value
// sources. `additive_mask` (queries x keys) is added to the logits.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterSet& params, const std::string& name, Index dim, int heads,
                     ParamGroup group, Rng& rng);

  Tensor forward(const Tensor& queries, const Tensor& keys_values,
                 const Matrix* additive_mask = nullptr) const;

  int heads = 1;
  Linear q_proj;
  Linear k_proj;
  Linear v_proj;
  Linear out_proj;
};

// dim -> hidden -> dim with GELU.
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterSet& params, const std::string& name, Index dim, Index hidden,
              ParamGroup group, Rng& rng);

  Tensor forward(const Tensor& x) const;

  Linear fc1;
  Linear fc2;
};

// Pre-norm self-attention + feed-forward block.
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(ParameterSet& params, const std::string& name, Index dim, int heads,
               int mlp_ratio, ParamGroup group, Rng& rng);

  Tensor forward(const Tensor& x) const;

  LayerNorm norm1;
  MultiHeadAttention attn;
  LayerNorm norm2;
  FeedForward ffn;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Throws NumericalError naming `where` if any entry is NaN or infinite.
void assert_finite(const Tensor& t, const char* where);

}  // namespace stimseg
