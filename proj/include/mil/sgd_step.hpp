#pragma once

#include <limits>
#include <optional>

#include "mil/param_set.hpp"

namespace mil {

struct ClipInterval {
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
};

struct SgdStepOptions {
  double alpha = 0.0;
  std::optional<ClipInterval> clip;
  // Truncate to first order: the step direction is treated as a constant.
  bool first_order = false;
};

// theta' = theta - alpha * clip(grad), returned as graph nodes so that a
// loss evaluated at theta' differentiates back to theta.
VarSet differentiable_sgd_step(const VarSet& params, const ad::Var& loss, const SgdStepOptions& opts);

// Same update from precomputed gradient nodes.
VarSet apply_sgd_step(const VarSet& params, const VarSet& grads, const SgdStepOptions& opts);

}  // namespace mil
