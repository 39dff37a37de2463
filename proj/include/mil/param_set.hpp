#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mil/autodiff.hpp"
#include "mil/tensor.hpp"

namespace mil {

// Named policy parameters. Ordered by name so that every traversal, and
// therefore every floating-point reduction over parameters, is deterministic.
using ParamSet = std::map<std::string, Tensor>;

// Graph-side view of a ParamSet: one Var per name.
using VarSet = std::map<std::string, ad::Var>;

VarSet make_params(const ParamSet& params);
VarSet make_constants(const ParamSet& params);
ParamSet values_of(const VarSet& vars);

std::size_t total_size(const ParamSet& params);
bool same_layout(const ParamSet& a, const ParamSet& b);
void require_same_layout(const ParamSet& a, const ParamSet& b, const std::string& context);

// Concatenation in name order, and its inverse on a template layout.
std::vector<double> flatten(const ParamSet& params);
ParamSet unflatten(const ParamSet& layout, const std::vector<double>& flat);

double max_abs_diff(const ParamSet& a, const ParamSet& b);
bool all_finite(const ParamSet& params);

// Gradients of `loss` with respect to every entry of `vars`, keyed by name.
VarSet gradient(const ad::Var& loss, const VarSet& vars, ad::GradOptions opts = {});

}  // namespace mil
