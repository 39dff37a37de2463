#include "mil/param_set.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mil {

VarSet make_params(const ParamSet& params) {
  VarSet out;
  for (const auto& [name, t] : params) out.emplace(name, ad::param(name, t));
  return out;
}

VarSet make_constants(const ParamSet& params) {
  VarSet out;
  for (const auto& [name, t] : params) out.emplace(name, ad::constant(t));
  return out;
}

ParamSet values_of(const VarSet& vars) {
  ParamSet out;
  for (const auto& [name, v] : vars) out.emplace(name, v.value());
  return out;
}

std::size_t total_size(const ParamSet& params) {
  std::size_t n = 0;
  for (const auto& [_, t] : params) n += t.size();
  return n;
}

bool same_layout(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.shape() != ib->second.shape()) return false;
  }
  return true;
}

void require_same_layout(const ParamSet& a, const ParamSet& b, const std::string& context) {
  if (!same_layout(a, b)) throw ShapeError(context + ": parameter sets differ in names or shapes");
}

std::vector<double> flatten(const ParamSet& params) {
  std::vector<double> flat;
  flat.reserve(total_size(params));
  for (const auto& [_, t] : params) flat.insert(flat.end(), t.values().begin(), t.values().end());
  return flat;
}

ParamSet unflatten(const ParamSet& layout, const std::vector<double>& flat) {
  if (flat.size() != total_size(layout)) throw ShapeError("unflatten: length mismatch");
  ParamSet out;
  std::size_t off = 0;
  for (const auto& [name, t] : layout) {
    std::vector<double> d(flat.begin() + static_cast<std::ptrdiff_t>(off),
                          flat.begin() + static_cast<std::ptrdiff_t>(off + t.size()));
    out.emplace(name, Tensor(t.shape(), std::move(d)));
    off += t.size();
  }
  return out;
}

double max_abs_diff(const ParamSet& a, const ParamSet& b) {
  require_same_layout(a, b, "max_abs_diff");
  double m = 0.0;
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
    m = std::max(m, max_abs_diff(ia->second, ib->second));
  }
  return m;
}

bool all_finite(const ParamSet& params) {
  return std::all_of(params.begin(), params.end(), [](const auto& kv) { return kv.second.all_finite(); });
}

VarSet gradient(const ad::Var& loss, const VarSet& vars, ad::GradOptions opts) {
  std::vector<ad::Var> wrt;
  wrt.reserve(vars.size());
  for (const auto& [_, v] : vars) wrt.push_back(v);
  auto grads = ad::gradient(loss, wrt, opts);
  VarSet out;
  std::size_t i = 0;
  for (const auto& [name, _] : vars) out.emplace(name, grads[i++]);
  return out;
}

}  // namespace mil
