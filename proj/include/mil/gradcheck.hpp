#pragma once

// Gradient-vs-finite-difference suites shared by the CLI and the acceptance
// runner.

#include <cstdint>
#include <string>
#include <vector>

#include "mil/meta.hpp"
#include "mil/policy.hpp"

namespace mil::gradcheck {

struct CheckResult {
  std::string name;  // e.g. "layer:dense", "meta:two-head"
  double max_rel_error = 0.0;
  double threshold = 0.0;
  std::string worst_param;
  bool passed() const { return max_rel_error < threshold; }
};

struct Options {
  std::uint64_t seed = 0;
  double threshold = 1e-4;
  bool vision = true;  // include the miniature vision suites
};

// Layer labels that can be fault-injected (they tag their outputs).
const std::vector<std::string>& layer_labels();

CheckResult check_layer(const std::string& label, std::uint64_t seed, double threshold);
CheckResult check_policy(const std::string& name, const ArchitectureConfig& arch, std::uint64_t seed,
                         double threshold);
// Gradient of the summed meta-loss over two tasks against central
// differences of the composed map.
CheckResult check_meta_gradient(const std::string& name, const ArchitectureConfig& arch, meta::InnerLoss kind,
                                std::uint64_t seed, double threshold);
// L(theta) = 1/2 theta^2: the meta-gradient must equal (1 - alpha)^2 theta.
CheckResult check_quadratic_meta(double threshold = 1e-10);

// At most 500 parameters with two heads.
ArchitectureConfig small_state_arch();
// Full vision layout (3 conv layers, 4 FC layers, bias transformation,
// layer norm) on an 8x8 image with 2 filters; stride 1 keeps three 3x3
// layers valid at that size.
ArchitectureConfig miniature_vision_arch();

std::vector<CheckResult> run_all(const Options& opts);

}  // namespace mil::gradcheck
