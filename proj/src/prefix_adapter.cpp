#include "stimseg/prefix_adapter.hpp"

namespace stimseg {

PrefixAdapter::PrefixAdapter(ParameterSet& params, const std::string& name, int d_k, int d_h,
                             Rng& rng) {
  fc1 = Linear(params, name + ".fc1", d_k, d_h, ParamGroup::Adapter, rng);
  fc2 = Linear(params, name + ".fc2", d_h, d_h, ParamGroup::Adapter, rng);
}

Tensor PrefixAdapter::forward(const Tensor& rows) const {
  return fc2.forward(ops::gelu(fc1.forward(rows)));
}

Tensor PrefixAdapter::adapt(const std::optional<Tensor>& prompt, const Tensor& mask_tokens) const {
  if (!prompt) return forward(mask_tokens);
  const Tensor parts[] = {*prompt, mask_tokens};
  return forward(ops::concat_rows(parts));
}

}  // namespace stimseg
