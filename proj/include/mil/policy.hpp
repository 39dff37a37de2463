#pragma once

#include <cstdint>
#include <optional>

#include <nlohmann/json.hpp>

#include "mil/autodiff.hpp"
#include "mil/param_set.hpp"

namespace mil {

// Network shape. Defaults follow the reaching setup: 3 conv layers of 40
// 3x3 filters, 4 fully-connected layers (3 hidden of width 200 plus the
// output layer) and a 10-dimensional bias transformation.
struct ArchitectureConfig {
  bool vision = false;
  std::size_t image_height = 32;
  std::size_t image_width = 40;
  std::size_t image_channels = 3;
  std::size_t conv_layers = 3;
  std::size_t conv_filters = 40;
  std::size_t conv_kernel = 3;
  std::size_t conv_stride = 2;
  bool spatial_soft_argmax = false;  // reaching flattens the last conv map
  std::size_t fc_layers = 4;         // including the output layer
  std::size_t fc_hidden = 200;
  std::size_t bias_transform_dim = 10;
  bool two_head = false;
  bool layer_norm = true;
  std::size_t state_dim = 19;  // non-vision: full state; vision: proprioception
  std::size_t action_dim = 2;

  void validate() const;  // throws std::invalid_argument
  // Spatial extents after each conv layer, {H, W}.
  std::vector<std::pair<std::size_t, std::size_t>> conv_extents() const;
  std::size_t feature_dim() const;  // width entering the first FC layer
};

void to_json(nlohmann::json& j, const ArchitectureConfig& c);
void from_json(const nlohmann::json& j, ArchitectureConfig& c);

// A batch of observations: `state` is [N, state_dim]; `image`, when the
// architecture uses vision, is [N, H, W, C] with values in [0, 1].
struct ObservationBatch {
  Tensor state;
  std::optional<Tensor> image;
  std::size_t size() const { return state.rank() == 2 ? state.dim(0) : 0; }
};

struct PolicyOutput {
  ad::Var action;  // [N, action_dim], outer head
  ad::Var hidden;  // [N, fc_hidden], post-activation of the last hidden layer
};

ParamSet init_policy_params(const ArchitectureConfig& config, std::uint64_t seed);

// Conv stack (vision) and hidden FC layers; returns the last hidden layer.
ad::Var policy_trunk(const ArchitectureConfig& config, const VarSet& params, const ObservationBatch& obs);

PolicyOutput policy_forward(const ArchitectureConfig& config, const VarSet& params, const ObservationBatch& obs);

// W y + b through the inner (pre-update) head. Two-head configs only.
ad::Var inner_head(const ArchitectureConfig& config, const VarSet& params, const ad::Var& hidden);

// Forward pass on plain values.
Tensor policy_action(const ArchitectureConfig& config, const ParamSet& params, const ObservationBatch& obs);

// Thrown when an observation does not fit the architecture.
class ConfigMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

void check_observation(const ArchitectureConfig& config, const ObservationBatch& obs);

}  // namespace mil
