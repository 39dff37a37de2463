#include "mil/policy.hpp"

#include <cmath>
#include <stdexcept>

#include "mil/layers.hpp"
#include "mil/ops.hpp"
#include "mil/random.hpp"

namespace mil {

namespace {

std::string idx(const char* prefix, std::size_t i, const char* suffix) {
  return std::string(prefix) + std::to_string(i) + suffix;
}

Tensor truncated_normal(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) {
    double s;
    do {
      s = rng.normal();
    } while (std::abs(s) > 2.0);
    v = s * stddev;
  }
  return t;
}

}  // namespace

void ArchitectureConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("architecture: " + m); };
  if (action_dim == 0) fail("action_dim must be positive");
  if (fc_layers == 0) fail("fc_layers must be at least 1");
  if (fc_layers > 1 && fc_hidden == 0) fail("fc_hidden must be positive");
  if (two_head && fc_layers < 2) fail("two-head mode needs at least one hidden layer");
  if (bias_transform_dim > 0 && fc_layers < 2) fail("bias transformation needs at least one hidden layer");
  if (vision) {
    if (image_height == 0 || image_width == 0 || image_channels == 0) fail("image extents must be positive");
    if (conv_layers == 0 || conv_filters == 0 || conv_kernel == 0 || conv_stride == 0) {
      fail("conv spec must be positive");
    }
    std::size_t h = image_height, w = image_width;
    for (std::size_t i = 0; i < conv_layers; ++i) {
      if (conv_kernel > h || conv_kernel > w) fail("conv layer " + std::to_string(i) + " kernel exceeds its input");
      h = (h - conv_kernel) / conv_stride + 1;
      w = (w - conv_kernel) / conv_stride + 1;
    }
  } else if (state_dim == 0) {
    fail("state_dim must be positive");
  }
}

std::vector<std::pair<std::size_t, std::size_t>> ArchitectureConfig::conv_extents() const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t h = image_height, w = image_width;
  for (std::size_t i = 0; i < conv_layers; ++i) {
    h = (h - conv_kernel) / conv_stride + 1;
    w = (w - conv_kernel) / conv_stride + 1;
    out.emplace_back(h, w);
  }
  return out;
}

std::size_t ArchitectureConfig::feature_dim() const {
  if (!vision) return state_dim;
  auto [h, w] = conv_extents().back();
  const std::size_t conv_out = spatial_soft_argmax ? 2 * conv_filters : h * w * conv_filters;
  return conv_out + state_dim;
}

void to_json(nlohmann::json& j, const ArchitectureConfig& c) {
  j = nlohmann::json{{"vision", c.vision},
                     {"image_height", c.image_height},
                     {"image_width", c.image_width},
                     {"image_channels", c.image_channels},
                     {"conv_layers", c.conv_layers},
                     {"conv_filters", c.conv_filters},
                     {"conv_kernel", c.conv_kernel},
                     {"conv_stride", c.conv_stride},
                     {"spatial_soft_argmax", c.spatial_soft_argmax},
                     {"fc_layers", c.fc_layers},
                     {"fc_hidden", c.fc_hidden},
                     {"bias_transform_dim", c.bias_transform_dim},
                     {"two_head", c.two_head},
                     {"layer_norm", c.layer_norm},
                     {"state_dim", c.state_dim},
                     {"action_dim", c.action_dim}};
}

void from_json(const nlohmann::json& j, ArchitectureConfig& c) {
  ArchitectureConfig d;
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  c = d;
  get("vision", c.vision);
  get("image_height", c.image_height);
  get("image_width", c.image_width);
  get("image_channels", c.image_channels);
  get("conv_layers", c.conv_layers);
  get("conv_filters", c.conv_filters);
  get("conv_kernel", c.conv_kernel);
  get("conv_stride", c.conv_stride);
  get("spatial_soft_argmax", c.spatial_soft_argmax);
  get("fc_layers", c.fc_layers);
  get("fc_hidden", c.fc_hidden);
  get("bias_transform_dim", c.bias_transform_dim);
  get("two_head", c.two_head);
  get("layer_norm", c.layer_norm);
  get("state_dim", c.state_dim);
  get("action_dim", c.action_dim);
}

ParamSet init_policy_params(const ArchitectureConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ParamSet p;
  if (config.vision) {
    std::size_t in_c = config.image_channels;
    for (std::size_t i = 0; i < config.conv_layers; ++i) {
      const std::size_t fan_in = config.conv_kernel * config.conv_kernel * in_c;
      p[idx("conv", i, ".kernel")] = truncated_normal(
          {config.conv_filters, config.conv_kernel, config.conv_kernel, in_c}, 1.0 / std::sqrt(double(fan_in)), rng);
      p[idx("conv", i, ".bias")] = Tensor({config.conv_filters});
      if (config.layer_norm) {
        p[idx("conv", i, ".ln_gain")] = Tensor({config.conv_filters}, 1.0);
        p[idx("conv", i, ".ln_shift")] = Tensor({config.conv_filters});
      }
      in_c = config.conv_filters;
    }
  }
  std::size_t in = config.feature_dim();
  for (std::size_t i = 0; i + 1 < config.fc_layers; ++i) {
    p[idx("fc", i, ".weight")] = truncated_normal({config.fc_hidden, in}, 1.0 / std::sqrt(double(in)), rng);
    p[idx("fc", i, ".bias")] = Tensor({config.fc_hidden});
    if (config.layer_norm) {
      p[idx("fc", i, ".ln_gain")] = Tensor({config.fc_hidden}, 1.0);
      p[idx("fc", i, ".ln_shift")] = Tensor({config.fc_hidden});
    }
    if (i == 0 && config.bias_transform_dim > 0) {
      const auto dz = config.bias_transform_dim;
      p["bt.z"] = Tensor({dz});
      p["bt.weight"] = truncated_normal({config.fc_hidden, dz}, 1.0 / std::sqrt(double(dz)), rng);
    }
    in = config.fc_hidden;
  }
  p["head.weight"] = truncated_normal({config.action_dim, in}, 1.0 / std::sqrt(double(in)), rng);
  p["head.bias"] = Tensor({config.action_dim});
  if (config.two_head) {
    p["inner_head.weight"] = truncated_normal({config.action_dim, in}, 1.0 / std::sqrt(double(in)), rng);
    p["inner_head.bias"] = Tensor({config.action_dim});
  }
  return p;
}

void check_observation(const ArchitectureConfig& config, const ObservationBatch& obs) {
  if (obs.state.rank() != 2 || obs.state.dim(1) != config.state_dim) {
    throw ConfigMismatch("observation state must be [N, " + std::to_string(config.state_dim) + "], got " +
                         shape_str(obs.state.shape()));
  }
  if (config.vision) {
    const Shape want{obs.state.dim(0), config.image_height, config.image_width, config.image_channels};
    if (!obs.image || obs.image->shape() != want) {
      throw ConfigMismatch("vision policy expects image " + shape_str(want));
    }
  } else if (obs.image) {
    throw ConfigMismatch("non-vision policy received an image");
  }
}

ad::Var policy_trunk(const ArchitectureConfig& config, const VarSet& params, const ObservationBatch& obs) {
  check_observation(config, obs);
  ad::Var features = ad::constant(obs.state);
  if (config.vision) {
    ad::Var x = ad::constant(*obs.image);
    for (std::size_t i = 0; i < config.conv_layers; ++i) {
      x = nn::conv2d(x, params.at(idx("conv", i, ".kernel")), config.conv_stride);
      x = nn::add_channel_bias(x, params.at(idx("conv", i, ".bias")));
      if (config.layer_norm) {
        x = nn::layer_norm_channels(x, params.at(idx("conv", i, ".ln_gain")), params.at(idx("conv", i, ".ln_shift")));
      }
      x = ad::relu(x);
    }
    ad::Var conv_features = config.spatial_soft_argmax ? nn::spatial_soft_argmax(x) : nn::flatten_batch(x);
    features = ad::concat_cols(conv_features, features);
  }
  ad::Var h = features;
  for (std::size_t i = 0; i + 1 < config.fc_layers; ++i) {
    const auto& w = params.at(idx("fc", i, ".weight"));
    const auto& b = params.at(idx("fc", i, ".bias"));
    if (i == 0 && config.bias_transform_dim > 0) {
      h = nn::bias_transform(h, params.at("bt.z"), w, params.at("bt.weight"), b);
    } else {
      h = nn::dense(h, w, b);
    }
    if (config.layer_norm) h = nn::layer_norm(h, params.at(idx("fc", i, ".ln_gain")), params.at(idx("fc", i, ".ln_shift")));
    h = ad::relu(h);
  }
  return h;
}

PolicyOutput policy_forward(const ArchitectureConfig& config, const VarSet& params, const ObservationBatch& obs) {
  ad::Var hidden = policy_trunk(config, params, obs);
  ad::Var action = nn::dense(hidden, params.at("head.weight"), params.at("head.bias"));
  return {action, hidden};
}

ad::Var inner_head(const ArchitectureConfig& config, const VarSet& params, const ad::Var& hidden) {
  if (!config.two_head) throw ConfigMismatch("inner head requested from a single-head architecture");
  return nn::dense(hidden, params.at("inner_head.weight"), params.at("inner_head.bias"));
}

Tensor policy_action(const ArchitectureConfig& config, const ParamSet& params, const ObservationBatch& obs) {
  return policy_forward(config, make_constants(params), obs).action.value();
}

}  // namespace mil
