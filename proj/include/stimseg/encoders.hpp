#pragma once

#include "stimseg/config.hpp"
#include "stimseg/image.hpp"
#include "stimseg/layers.hpp"

#include <span>
#include <string>
#include <vector>

namespace stimseg {

// ViT-style encoder: non-overlapping patches, linear patch embedding, learned
// 2-D positional table, then a stack of pre-norm self-attention blocks. There
// is no trailing norm, so with every residual branch zeroed the output is the
// patch embedding plus positions.
class VisionEncoder {
 public:
  VisionEncoder() = default;
  VisionEncoder(ParameterSet& params, const std::string& name, int image_size, int grid, int dim,
                int depth, int heads, int mlp_ratio, Rng& rng);

  // (grid^2) x (patch^2 * 3); rows in raster order, columns (py, px, channel).
  Matrix patchify(const Image& image) const;
  Tensor patch_embed(const Image& image) const;
  Tensor encode(const Image& image) const;

  int grid() const { return grid_; }
  int patch() const { return patch_; }
  int dim() const { return dim_; }

  Linear patch_proj;
  Tensor positions;  // grid^2 x dim
  std::vector<EncoderBlock> blocks;

 private:
  int image_size_ = 0;
  int grid_ = 0;
  int patch_ = 0;
  int dim_ = 0;
};

// The single word-embedding table shared by the prompt projector and the
// language decoder (input and tied output).
class TokenEmbedding {
 public:
  TokenEmbedding() = default;
  TokenEmbedding(ParameterSet& params, const std::string& name, std::size_t vocab_size, int dim,
                 Rng& rng);

  // Throws std::out_of_range for ids outside the table.
  Tensor embed(std::span<const std::int64_t> ids) const;

  Tensor table;  // |V| x dim
};

}  // namespace stimseg
