#pragma once

#include <functional>

#include "mil/param_set.hpp"
#include "mil/tensor.hpp"

namespace mil {

// Central-difference Jacobian of f at x, shaped [numel(f(x)), numel(x)].
// Throws std::invalid_argument for eps <= 0 and std::domain_error when f
// returns a non-finite value.
Tensor finite_difference_jacobian(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps);

// Central-difference gradient of a scalar function of a whole ParamSet.
ParamSet finite_difference_gradient(const std::function<double(const ParamSet&)>& f, const ParamSet& at, double eps);

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst_param;
};

// Elementwise |a-b| / max(|a|, |b|, floor * g_max, 1e-12) where g_max is the
// largest gradient magnitude in the set. The floor keeps entries many orders
// below the gradient scale, where central differences carry only round-off,
// from dominating the result.
GradCheckResult compare_gradients(const ParamSet& analytic, const ParamSet& numeric, double floor = 1e-3);

}  // namespace mil
