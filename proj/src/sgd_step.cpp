#include "mil/sgd_step.hpp"

#include <stdexcept>

#include "mil/ops.hpp"

namespace mil {

namespace {
void validate(const SgdStepOptions& opts) {
  if (!(opts.alpha >= 0.0)) throw std::invalid_argument("sgd step: alpha must be non-negative");
  if (opts.clip && opts.clip->lo > opts.clip->hi) throw std::invalid_argument("sgd step: clip interval has lo > hi");
}
}  // namespace

VarSet differentiable_sgd_step(const VarSet& params, const ad::Var& loss, const SgdStepOptions& opts) {
  validate(opts);
  auto grads = gradient(loss, params, {.create_graph = !opts.first_order});
  return apply_sgd_step(params, grads, opts);
}

VarSet apply_sgd_step(const VarSet& params, const VarSet& grads, const SgdStepOptions& opts) {
  validate(opts);
  VarSet out;
  for (const auto& [name, p] : params) {
    ad::Var g = grads.at(name);
    if (opts.first_order && g.requires_grad()) g = ad::detach(g);
    if (opts.clip) g = ad::clip(g, opts.clip->lo, opts.clip->hi);
    out.emplace(name, ad::sub(p, ad::scale(g, opts.alpha)));
  }
  return out;
}

}  // namespace mil
