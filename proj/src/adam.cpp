#include "mil/adam.hpp"

#include <cmath>

namespace mil {

AdamState make_adam_state(const ParamSet& params, double learning_rate) {
  AdamState s;
  s.learning_rate = learning_rate;
  for (const auto& [name, t] : params) {
    s.first_moment.emplace(name, Tensor(t.shape()));
    s.second_moment.emplace(name, Tensor(t.shape()));
  }
  return s;
}

std::pair<AdamState, ParamSet> adam_step(AdamState state, ParamSet params, const ParamSet& grads) {
  require_same_layout(params, grads, "adam_step");
  require_same_layout(params, state.first_moment, "adam_step");
  require_same_layout(params, state.second_moment, "adam_step");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (auto& [name, p] : params) {
    const Tensor& g = grads.at(name);
    Tensor& m = state.first_moment.at(name);
    Tensor& v = state.second_moment.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
  return {std::move(state), std::move(params)};
}

}  // namespace mil
