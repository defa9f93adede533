#pragma once

#include "stimseg/layers.hpp"

#include <optional>

namespace stimseg {

// Position-wise two-layer MLP (d_k -> d_h -> d_h, GELU) applied to the
// concatenation [p'; m'], producing the prefix f = [p''; m''].
class PrefixAdapter {
 public:
  PrefixAdapter() = default;
  PrefixAdapter(ParameterSet& params, const std::string& name, int d_k, int d_h, Rng& rng);

  Tensor adapt(const std::optional<Tensor>& prompt, const Tensor& mask_tokens) const;
  Tensor forward(const Tensor& rows) const;

  Linear fc1;
  Linear fc2;
};

}  // namespace stimseg
