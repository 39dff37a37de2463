#include "mil/finite_diff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mil {

namespace {
void require_finite(const Tensor& t) {
  if (!t.all_finite()) throw std::domain_error("finite difference: function returned a non-finite value");
}
}  // namespace

Tensor finite_difference_jacobian(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite difference: eps must be positive");
  Tensor probe = x;
  const Tensor f0 = f(x);
  require_finite(f0);
  Tensor jac({f0.size(), x.size()});
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double orig = probe[j];
    probe[j] = orig + eps;
    Tensor fp = f(probe);
    probe[j] = orig - eps;
    Tensor fm = f(probe);
    probe[j] = orig;
    require_finite(fp);
    require_finite(fm);
    for (std::size_t i = 0; i < f0.size(); ++i) jac.at(i, j) = (fp[i] - fm[i]) / (2.0 * eps);
  }
  return jac;
}

ParamSet finite_difference_gradient(const std::function<double(const ParamSet&)>& f, const ParamSet& at, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite difference: eps must be positive");
  ParamSet probe = at;
  ParamSet grad;
  for (auto& [name, t] : probe) {
    Tensor g(t.shape());
    for (std::size_t j = 0; j < t.size(); ++j) {
      const double orig = t[j];
      t[j] = orig + eps;
      const double fp = f(probe);
      t[j] = orig - eps;
      const double fm = f(probe);
      t[j] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw std::domain_error("finite difference: function returned a non-finite value");
      }
      g[j] = (fp - fm) / (2.0 * eps);
    }
    grad.emplace(name, std::move(g));
  }
  return grad;
}

GradCheckResult compare_gradients(const ParamSet& analytic, const ParamSet& numeric, double floor) {
  require_same_layout(analytic, numeric, "compare_gradients");
  GradCheckResult r;
  double g_max = 0.0;
  for (const auto& [name, a] : analytic) {
    for (std::size_t i = 0; i < a.size(); ++i) g_max = std::max({g_max, std::abs(a[i]), std::abs(numeric.at(name)[i])});
  }
  const double denom_floor = std::max(floor * g_max, 1e-12);
  for (const auto& [name, a] : analytic) {
    const Tensor& n = numeric.at(name);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double abs_err = std::abs(a[i] - n[i]);
      const double rel = abs_err / std::max({std::abs(a[i]), std::abs(n[i]), denom_floor});
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      if (rel > r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst_param = name;
      }
    }
  }
  return r;
}

}  // namespace mil
