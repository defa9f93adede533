#pragma once

#include "stimseg/config.hpp"
#include "stimseg/layers.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace stimseg {

struct AdamMoments {
  Matrix m;
  Matrix v;
};

// Decoupled weight decay Adam with one learning rate for the Language group
// and another for every other group. Parameters with requires_grad = false or
// no accumulated gradient are left untouched.
class AdamW {
 public:
  explicit AdamW(const TrainConfig& config) : config_(config) {}

  void step(ParameterSet& params);
  double lr_for(ParamGroup group) const;

  std::int64_t steps() const { return steps_; }
  void set_steps(std::int64_t s) { steps_ = s; }
  std::map<std::string, AdamMoments>& moments() { return moments_; }
  const std::map<std::string, AdamMoments>& moments() const { return moments_; }

 private:
  TrainConfig config_;
  std::int64_t steps_ = 0;
  std::map<std::string, AdamMoments> moments_;
};

}  // namespace stimseg
