#include "stimseg/encoders.hpp"

namespace stimseg {

VisionEncoder::VisionEncoder(ParameterSet& params, const std::string& name, int image_size,
                             int grid, int dim, int depth, int heads, int mlp_ratio, Rng& rng)
    : image_size_(image_size), grid_(grid), dim_(dim) {
  if (grid <= 0 || image_size % grid != 0) {
    throw ConfigError(name + ": image size " + std::to_string(image_size) +
                      " is not divisible into a " + std::to_string(grid) + "x" +
                      std::to_string(grid) + " patch grid");
  }
  patch_ = image_size / grid;
  patch_proj = Linear(params, name + ".patch_proj", static_cast<Index>(patch_) * patch_ * 3, dim,
                      ParamGroup::Encoder, rng);
  positions = params.add(name + ".positions",
                         random_normal(static_cast<Index>(grid) * grid, dim, 0.1, rng),
                         ParamGroup::Encoder);
  for (int i = 0; i < depth; ++i) {
    blocks.emplace_back(params, name + ".blocks." + std::to_string(i), dim, heads, mlp_ratio,
                        ParamGroup::Encoder, rng);
  }
}

Matrix VisionEncoder::patchify(const Image& image) const {
  if (image.height % patch_ != 0 || image.width % patch_ != 0) {
    throw ConfigError("image " + std::to_string(image.height) + "x" +
                      std::to_string(image.width) + " is not divisible by patch size " +
                      std::to_string(patch_));
  }
  if (image.height != image_size_ || image.width != image_size_) {
    throw ConfigError("image " + std::to_string(image.height) + "x" +
                      std::to_string(image.width) + " does not match the configured size " +
                      std::to_string(image_size_));
  }
  Matrix out(static_cast<Index>(grid_) * grid_, static_cast<Index>(patch_) * patch_ * 3);
  for (int gy = 0; gy < grid_; ++gy) {
    for (int gx = 0; gx < grid_; ++gx) {
      const Index row = static_cast<Index>(gy) * grid_ + gx;
      Index col = 0;
      for (int py = 0; py < patch_; ++py)
        for (int px = 0; px < patch_; ++px)
          for (int c = 0; c < 3; ++c) out(row, col++) = image.at(gy * patch_ + py, gx * patch_ + px, c);
    }
  }
  return out;
}

Tensor VisionEncoder::patch_embed(const Image& image) const {
  return ops::add(patch_proj.forward(Tensor(patchify(image))), positions);
}

Tensor VisionEncoder::encode(const Image& image) const {
  Tensor x = patch_embed(image);
  for (const auto& b : blocks) x = b.forward(x);
  assert_finite(x, "vision encoder output");
  return x;
}

TokenEmbedding::TokenEmbedding(ParameterSet& params, const std::string& name,
                               std::size_t vocab_size, int dim, Rng& rng) {
  table = params.add(name + ".table",
                     random_normal(static_cast<Index>(vocab_size), dim, 0.05, rng),
                     ParamGroup::Language);
}

Tensor TokenEmbedding::embed(std::span<const std::int64_t> ids) const {
  return ops::gather_rows(table, ids);
}

}  // namespace stimseg
