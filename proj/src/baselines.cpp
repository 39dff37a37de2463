#include "mil/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "mil/layers.hpp"
#include "mil/ops.hpp"

namespace mil::baselines {

reach::Vec2 random_action(Rng& rng) {
  const double a = rng.normal();
  const double b = rng.normal();
  return {a, b};
}

// ---------------------------------------------------------------------------
// Contextual

ArchitectureConfig contextual_arch(const ArchitectureConfig& base) {
  ArchitectureConfig a = base;
  a.state_dim *= 2;
  if (a.vision) a.image_channels *= 2;
  a.two_head = false;
  return a;
}

ObservationBatch final_observation(const DemoBatch& demo) {
  const std::size_t t = demo.obs.size();
  if (t == 0) throw std::invalid_argument("empty demonstration");
  const std::size_t sd = demo.obs.state.dim(1);
  ObservationBatch out{Tensor({1, sd}), std::nullopt};
  std::copy_n(demo.obs.state.values().begin() + (t - 1) * sd, sd, out.state.values().begin());
  if (demo.obs.image) {
    const Tensor& img = *demo.obs.image;
    const std::size_t per = img.size() / t;
    Tensor last({1, img.dim(1), img.dim(2), img.dim(3)});
    std::copy_n(img.values().begin() + (t - 1) * per, per, last.values().begin());
    out.image = std::move(last);
  }
  return out;
}

namespace {

void check_same_modality(const ObservationBatch& a, const ObservationBatch& b) {
  if (a.image.has_value() != b.image.has_value()) {
    throw ModalityError("contextual input: demonstration and current observation differ in modality");
  }
  const bool image_mismatch = a.image && !std::equal(a.image->shape().begin() + 1, a.image->shape().end(),
                                                     b.image->shape().begin() + 1, b.image->shape().end());
  if (a.state.dim(1) != b.state.dim(1) || image_mismatch) {
    throw ModalityError("contextual input: demonstration and current observation differ in shape");
  }
}

}  // namespace

ObservationBatch contextual_input(const ObservationBatch& demo_final, const ObservationBatch& current) {
  check_same_modality(demo_final, current);
  if (demo_final.size() != 1) throw std::invalid_argument("contextual input: expected one demo observation");
  const std::size_t n = current.size(), sd = current.state.dim(1);
  ObservationBatch out{Tensor({n, 2 * sd}), std::nullopt};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < sd; ++j) {
      out.state.at(i, j) = demo_final.state[j];
      out.state.at(i, sd + j) = current.state.at(i, j);
    }
  }
  if (current.image) {
    const Tensor& cur = *current.image;
    const std::size_t h = cur.dim(1), w = cur.dim(2), c = cur.dim(3);
    Tensor img({n, h, w, 2 * c});
    const Tensor& d = *demo_final.image;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < h * w; ++p) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          img[(i * h * w + p) * 2 * c + ch] = d[p * c + ch];
          img[(i * h * w + p) * 2 * c + c + ch] = cur[(i * h * w + p) * c + ch];
        }
      }
    }
    out.image = std::move(img);
  }
  return out;
}

ad::Var contextual_forward(const ArchitectureConfig& ctx_arch, const VarSet& params, const ObservationBatch& demo_final,
                           const ObservationBatch& current) {
  return policy_forward(ctx_arch, params, contextual_input(demo_final, current)).action;
}

namespace {

ad::Var mean_of(const std::vector<ad::Var>& preds) {
  ad::Var total = preds.front();
  for (std::size_t i = 1; i < preds.size(); ++i) total = ad::add(total, preds[i]);
  return preds.size() == 1 ? total : ad::scale(total, 1.0 / static_cast<double>(preds.size()));
}

ad::Var bc_on(const ad::Var& pred, const DemoBatch& target) {
  if (!target.actions) throw ModalityError("behavioral cloning target needs actions");
  return ad::sum(ad::square(ad::sub(pred, ad::constant(*target.actions))));
}

}  // namespace

meta::TaskLoss contextual_loss(const ArchitectureConfig& ctx_arch) {
  return [ctx_arch](const VarSet& params, const meta::TaskSample& s, bool) {
    std::vector<ad::Var> preds;
    for (const DemoBatch* d : s.train) {
      preds.push_back(contextual_forward(ctx_arch, params, final_observation(*d), s.validation->obs));
    }
    return bc_on(mean_of(preds), *s.validation);
  };
}

Tensor contextual_action(const ArchitectureConfig& ctx_arch, const ParamSet& params,
                         const std::vector<const DemoBatch*>& demos, const ObservationBatch& current) {
  if (demos.empty()) throw std::invalid_argument("contextual policy needs a demonstration");
  const VarSet v = make_constants(params);
  std::vector<ad::Var> preds;
  for (const DemoBatch* d : demos) preds.push_back(contextual_forward(ctx_arch, v, final_observation(*d), current));
  return mean_of(preds).value();
}

// ---------------------------------------------------------------------------
// LSTM

void LstmConfig::validate() const {
  trunk.validate();
  if (trunk.fc_layers < 2) throw std::invalid_argument("lstm: trunk needs at least one hidden layer");
  if (width == 0) throw std::invalid_argument("lstm: width must be positive");
}

void to_json(nlohmann::json& j, const LstmConfig& c) { j = nlohmann::json{{"trunk", c.trunk}, {"width", c.width}}; }

void from_json(const nlohmann::json& j, LstmConfig& c) {
  c = LstmConfig{};
  if (j.contains("trunk")) j.at("trunk").get_to(c.trunk);
  if (j.contains("width")) j.at("width").get_to(c.width);
}

namespace {

Tensor truncated_normal(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) {
    double s = rng.normal();
    while (std::abs(s) > 2.0) s = rng.normal();
    v = stddev * s;
  }
  return t;
}

std::size_t feature_width(const LstmConfig& c) { return c.trunk.fc_hidden; }

}  // namespace

ParamSet init_lstm_params(const LstmConfig& config, std::uint64_t seed) {
  config.validate();
  ArchitectureConfig trunk = config.trunk;
  trunk.two_head = false;
  ParamSet p = init_policy_params(trunk, seed);
  p.erase("head.weight");
  p.erase("head.bias");
  Rng rng(mix_seed(seed, 0x6c73746dULL));  // "lstm"
  const std::size_t w = config.width, a = config.trunk.action_dim;
  const std::size_t in = feature_width(config) + a + w;
  p["lstm.weight"] = truncated_normal({4 * w, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  Tensor bias({4 * w});
  for (std::size_t i = w; i < 2 * w; ++i) bias[i] = 1.0;
  p["lstm.bias"] = std::move(bias);
  p["lstm_head.weight"] = truncated_normal({a, w}, 1.0 / std::sqrt(static_cast<double>(w)), rng);
  p["lstm_head.bias"] = Tensor({a});
  return p;
}

namespace {

LstmState step_from_preactivation(std::size_t w, const LstmState& s, const ad::Var& z) {
  const ad::Var i = ad::sigmoid(ad::slice_cols(z, 0, w));
  const ad::Var f = ad::sigmoid(ad::slice_cols(z, w, 2 * w));
  const ad::Var g = ad::tanh(ad::slice_cols(z, 2 * w, 3 * w));
  const ad::Var o = ad::sigmoid(ad::slice_cols(z, 3 * w, 4 * w));
  const ad::Var c = ad::add(ad::mul(f, s.cell), ad::mul(i, g));
  return {ad::mul(o, ad::tanh(c)), c};
}

ad::Var row(const ad::Var& m, std::size_t r) {
  const std::size_t d = m.shape()[1];
  auto idx = std::make_shared<std::vector<std::size_t>>(d);
  for (std::size_t j = 0; j < d; ++j) (*idx)[j] = r * d + j;
  return ad::gather(m, idx, {1, d});
}

}  // namespace

LstmState lstm_cell(const LstmConfig& config, const VarSet& params, const LstmState& state, const ad::Var& input) {
  const ad::Var z = ad::add_row_vector(ad::matmul_nt(ad::concat_cols(input, state.hidden), params.at("lstm.weight")),
                                       params.at("lstm.bias"));
  return step_from_preactivation(config.width, state, z);
}

LstmState lstm_encode(const LstmConfig& config, const VarSet& params, const DemoBatch& demo) {
  const std::size_t steps = demo.obs.size();
  if (steps == 0) throw std::invalid_argument("lstm: empty demonstration");
  const std::size_t w = config.width, a = config.trunk.action_dim, f = feature_width(config);
  const ad::Var weight = params.at("lstm.weight");
  const ad::Var wx = ad::slice_cols(weight, 0, f + a);
  const ad::Var wh = ad::slice_cols(weight, f + a, f + a + w);
  const ad::Var bias = params.at("lstm.bias");

  // Input projections for all demo steps at once.
  const ad::Var feats = policy_trunk(config.trunk, params, demo.obs);
  const ad::Var acts = ad::constant(demo.actions ? *demo.actions : Tensor({steps, a}));
  const ad::Var xproj = ad::matmul_nt(ad::concat_cols(feats, acts), wx);

  LstmState s{ad::constant(Tensor({1, w})), ad::constant(Tensor({1, w}))};
  for (std::size_t t = 0; t < steps; ++t) {
    const ad::Var z = ad::add_row_vector(ad::add(row(xproj, t), ad::matmul_nt(s.hidden, wh)), bias);
    s = step_from_preactivation(w, s, z);
  }
  return s;
}

ad::Var lstm_decode(const LstmConfig& config, const VarSet& params, const LstmState& state,
                    const ObservationBatch& current) {
  const std::size_t w = config.width, a = config.trunk.action_dim, f = feature_width(config);
  const ad::Var weight = params.at("lstm.weight");
  const ad::Var wx = ad::slice_cols(weight, 0, f + a);
  const ad::Var wh = ad::slice_cols(weight, f + a, f + a + w);
  // Every current observation continues from the demo's final state.
  const std::size_t n = current.size();
  const ad::Var cur = ad::pad_cols(policy_trunk(config.trunk, params, current), f + a, 0);
  LstmState b{ad::broadcast_rows(ad::reshape(state.hidden, {w}), n),
              ad::broadcast_rows(ad::reshape(state.cell, {w}), n)};
  const ad::Var z =
      ad::add_row_vector(ad::add(ad::matmul_nt(cur, wx), ad::matmul_nt(b.hidden, wh)), params.at("lstm.bias"));
  const LstmState out = step_from_preactivation(w, b, z);
  return nn::dense(out.hidden, params.at("lstm_head.weight"), params.at("lstm_head.bias"));
}

ad::Var lstm_forward(const LstmConfig& config, const VarSet& params, const DemoBatch& demo,
                     const ObservationBatch& current) {
  return lstm_decode(config, params, lstm_encode(config, params, demo), current);
}

meta::TaskLoss lstm_loss(const LstmConfig& config) {
  return [config](const VarSet& params, const meta::TaskSample& s, bool) {
    std::vector<ad::Var> preds;
    for (const DemoBatch* d : s.train) preds.push_back(lstm_forward(config, params, *d, s.validation->obs));
    return bc_on(mean_of(preds), *s.validation);
  };
}

Tensor lstm_action(const LstmConfig& config, const ParamSet& params, const std::vector<const DemoBatch*>& demos,
                   const ObservationBatch& current) {
  if (demos.empty()) throw std::invalid_argument("lstm policy needs a demonstration");
  const VarSet v = make_constants(params);
  std::vector<ad::Var> preds;
  for (const DemoBatch* d : demos) preds.push_back(lstm_forward(config, v, *d, current));
  return mean_of(preds).value();
}

Tensor lstm_action(const LstmConfig& config, const VarSet& params, const std::vector<LstmState>& encoded,
                   const ObservationBatch& current) {
  if (encoded.empty()) throw std::invalid_argument("lstm policy needs a demonstration");
  std::vector<ad::Var> preds;
  for (const LstmState& s : encoded) preds.push_back(lstm_decode(config, params, s, current));
  return mean_of(preds).value();
}

}  // namespace mil::baselines
