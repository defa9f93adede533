#include "stimseg/optimizer.hpp"

#include <cmath>

namespace stimseg {

double AdamW::lr_for(ParamGroup group) const {
  return group == ParamGroup::Language ? config_.lr_lang : config_.lr_seg;
}

void AdamW::step(ParameterSet& params) {
  ++steps_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (auto& p : params.items()) {
    if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
    const Matrix& g = p.tensor.grad();
    auto& st = moments_[p.name];
    if (st.m.size() == 0) {
      st.m = Matrix::Zero(g.rows(), g.cols());
      st.v = Matrix::Zero(g.rows(), g.cols());
    }
    st.m = b1 * st.m + (1.0 - b1) * g;
    st.v = b2 * st.v + (1.0 - b2) * g.cwiseProduct(g);
    const double lr = lr_for(p.group);
    Matrix& w = p.tensor.mutable_value();
    w *= 1.0 - lr * config_.weight_decay;
    w.array() -= lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + config_.adam_eps);
  }
}

}  // namespace stimseg
