#pragma once

#include <cstdint>

#include "mil/param_set.hpp"

namespace mil {

struct AdamState {
  ParamSet first_moment;
  ParamSet second_moment;
  std::uint64_t step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Fresh state with zero accumulators shaped like `params`.
AdamState make_adam_state(const ParamSet& params, double learning_rate);

// One bias-corrected Adam update. Throws ShapeError on layout mismatch.
std::pair<AdamState, ParamSet> adam_step(AdamState state, ParamSet params, const ParamSet& grads);

}  // namespace mil
