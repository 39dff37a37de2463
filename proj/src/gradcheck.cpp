#include "mil/gradcheck.hpp"

#include <cmath>

#include "mil/finite_diff.hpp"
#include "mil/layers.hpp"
#include "mil/ops.hpp"
#include "mil/random.hpp"

namespace mil::gradcheck {

namespace {

constexpr double kEps = 1e-6;

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

// A random linear readout keeps every output coordinate in play.
ad::Var readout(const ad::Var& y, Rng& rng) {
  return ad::sum(ad::mul(y, ad::constant(random_tensor(y.shape(), rng))));
}

CheckResult compare(const std::string& name, const std::function<ad::Var(const VarSet&)>& f, const ParamSet& at,
                    double threshold) {
  const VarSet vars = make_params(at);
  const ParamSet analytic = values_of(gradient(f(vars), vars));
  const ParamSet numeric =
      finite_difference_gradient([&](const ParamSet& p) { return f(make_constants(p)).value().item(); }, at, kEps);
  const GradCheckResult r = compare_gradients(analytic, numeric);
  return {name, r.max_rel_error, threshold, r.worst_param};
}

ObservationBatch random_obs(const ArchitectureConfig& c, std::size_t n, Rng& rng) {
  ObservationBatch o{random_tensor({n, c.state_dim}, rng), std::nullopt};
  if (c.vision) {
    Tensor img({n, c.image_height, c.image_width, c.image_channels});
    for (auto& v : img.values()) v = rng.uniform();
    o.image = std::move(img);
  }
  return o;
}

DemoBatch random_demo(const ArchitectureConfig& c, std::size_t steps, Rng& rng) {
  return {random_obs(c, steps, rng), random_tensor({steps, c.action_dim}, rng)};
}

ParamSet perturbed_params(const ArchitectureConfig& arch, std::uint64_t seed) {
  ParamSet p = init_policy_params(arch, seed);
  Rng rng(mix_seed(seed, 1));
  // Move off the exact initialization (zero z, unit gains) so that every
  // parameter carries gradient.
  for (auto& [_, t] : p) {
    for (auto& v : t.values()) v += 0.1 * rng.normal();
  }
  return p;
}

}  // namespace

const std::vector<std::string>& layer_labels() {
  static const std::vector<std::string> labels{"dense", "conv2d", "layer_norm", "spatial_soft_argmax",
                                               "bias_transform"};
  return labels;
}

CheckResult check_layer(const std::string& label, std::uint64_t seed, double threshold) {
  Rng rng(mix_seed(seed, std::hash<std::string>{}(label)));
  const std::string name = "layer:" + label;
  if (label == "dense") {
    const ParamSet p{{"x", random_tensor({4, 5}, rng)}, {"w", random_tensor({3, 5}, rng)}, {"b", random_tensor({3}, rng)}};
    const std::uint64_t s = mix_seed(seed, 11);
    return compare(name, [&](const VarSet& v) {
      Rng r(s);
      return readout(nn::dense(v.at("x"), v.at("w"), v.at("b")), r);
    }, p, threshold);
  }
  if (label == "conv2d") {
    const ParamSet p{{"img", random_tensor({2, 7, 6, 2}, rng)}, {"k", random_tensor({3, 3, 3, 2}, rng, 0.3)}};
    const std::uint64_t s = mix_seed(seed, 12);
    return compare(name, [&](const VarSet& v) {
      Rng r(s);
      return readout(nn::conv2d(v.at("img"), v.at("k"), 2), r);
    }, p, threshold);
  }
  if (label == "layer_norm") {
    const ParamSet p{{"x", random_tensor({3, 6}, rng)},
                     {"g", random_tensor({6}, rng)},
                     {"b", random_tensor({6}, rng)},
                     {"m", random_tensor({2, 3, 3, 2}, rng)},
                     {"mg", random_tensor({2}, rng)},
                     {"mb", random_tensor({2}, rng)}};
    const std::uint64_t s = mix_seed(seed, 13);
    return compare(name, [&](const VarSet& v) {
      Rng r(s);
      return ad::add(readout(nn::layer_norm(v.at("x"), v.at("g"), v.at("b")), r),
                     readout(nn::layer_norm_channels(v.at("m"), v.at("mg"), v.at("mb")), r));
    }, p, threshold);
  }
  if (label == "spatial_soft_argmax") {
    const ParamSet p{{"f", random_tensor({2, 4, 5, 3}, rng)}};
    const std::uint64_t s = mix_seed(seed, 14);
    return compare(name, [&](const VarSet& v) {
      Rng r(s);
      return readout(nn::spatial_soft_argmax(v.at("f")), r);
    }, p, threshold);
  }
  if (label == "bias_transform") {
    const ParamSet p{{"x", random_tensor({4, 5}, rng)},
                     {"z", random_tensor({3}, rng)},
                     {"w1", random_tensor({4, 5}, rng)},
                     {"w2", random_tensor({4, 3}, rng)},
                     {"b", random_tensor({4}, rng)}};
    const std::uint64_t s = mix_seed(seed, 15);
    return compare(name, [&](const VarSet& v) {
      Rng r(s);
      return readout(nn::bias_transform(v.at("x"), v.at("z"), v.at("w1"), v.at("w2"), v.at("b")), r);
    }, p, threshold);
  }
  throw std::invalid_argument("unknown layer '" + label + "'");
}

CheckResult check_policy(const std::string& name, const ArchitectureConfig& arch, std::uint64_t seed,
                         double threshold) {
  Rng rng(mix_seed(seed, 21));
  const ObservationBatch obs = random_obs(arch, 3, rng);
  const Tensor target = random_tensor({3, arch.action_dim}, rng);
  return compare(name, [&](const VarSet& v) {
    return ad::sum(ad::square(ad::sub(policy_forward(arch, v, obs).action, ad::constant(target))));
  }, perturbed_params(arch, seed), threshold);
}

CheckResult check_meta_gradient(const std::string& name, const ArchitectureConfig& arch, meta::InnerLoss kind,
                                std::uint64_t seed, double threshold) {
  Rng rng(mix_seed(seed, 31));
  std::vector<DemoBatch> demos;
  for (int i = 0; i < 4; ++i) demos.push_back(random_demo(arch, 5, rng));
  const std::vector<meta::TaskSample> batch{{{&demos[0]}, &demos[1]}, {{&demos[2]}, &demos[3]}};
  meta::TrainConfig cfg;
  cfg.alpha = 0.05;
  cfg.inner_loss = kind;
  const ParamSet p = perturbed_params(arch, seed);
  const meta::MetaGradient mg = meta::meta_gradient(arch, p, batch, cfg);
  const ParamSet numeric = finite_difference_gradient(
      [&](const ParamSet& q) { return meta::meta_loss(arch, make_constants(q), batch, cfg).value().item(); }, p, kEps);
  const GradCheckResult r = compare_gradients(mg.grad, numeric);
  return {name, r.max_rel_error, threshold, r.worst_param};
}

CheckResult check_quadratic_meta(double threshold) {
  double worst = 0.0;
  for (double alpha : {0.0, 0.1, 0.3, 0.9}) {
    for (double theta : {-2.5, 0.7, 1.7}) {
      const VarSet p{{"t", ad::param("t", Tensor::scalar(theta))}};
      SgdStepOptions step;
      step.alpha = alpha;
      const VarSet stepped = differentiable_sgd_step(p, ad::scale(ad::square(p.at("t")), 0.5), step);
      const double g = gradient(ad::scale(ad::square(stepped.at("t")), 0.5), p).at("t").value().item();
      const double want = (1 - alpha) * (1 - alpha) * theta;
      worst = std::max(worst, std::abs(g - want) / std::max(std::abs(want), 1e-12));
    }
  }
  return {"meta:quadratic-closed-form", worst, threshold, "t"};
}

ArchitectureConfig small_state_arch() {
  ArchitectureConfig a;
  a.state_dim = 4;
  a.fc_layers = 3;
  a.fc_hidden = 8;
  a.bias_transform_dim = 2;
  a.two_head = true;
  return a;
}

ArchitectureConfig miniature_vision_arch() {
  ArchitectureConfig a;
  a.vision = true;
  a.image_height = 8;
  a.image_width = 8;
  a.conv_layers = 3;
  a.conv_filters = 2;
  a.conv_stride = 1;
  a.fc_layers = 4;
  a.fc_hidden = 4;
  a.bias_transform_dim = 2;
  a.state_dim = 4;
  a.two_head = true;
  return a;
}

std::vector<CheckResult> run_all(const Options& opts) {
  std::vector<CheckResult> out;
  for (const auto& label : layer_labels()) out.push_back(check_layer(label, opts.seed, opts.threshold));
  ArchitectureConfig state = small_state_arch();
  out.push_back(check_policy("policy:state", state, opts.seed, opts.threshold));
  if (opts.vision) {
    out.push_back(check_policy("policy:vision", miniature_vision_arch(), opts.seed, opts.threshold));
    ArchitectureConfig soft = miniature_vision_arch();
    soft.spatial_soft_argmax = true;
    out.push_back(check_policy("policy:vision-soft-argmax", soft, opts.seed, opts.threshold));
  }
  for (meta::InnerLoss k : {meta::InnerLoss::kBc, meta::InnerLoss::kTwoHead, meta::InnerLoss::kActionFree}) {
    out.push_back(check_meta_gradient("meta:" + meta::to_string(k), state, k, opts.seed, opts.threshold));
  }
  if (opts.vision) {
    out.push_back(check_meta_gradient("meta:vision-bc", miniature_vision_arch(), meta::InnerLoss::kBc, opts.seed,
                                      opts.threshold));
  }
  out.push_back(check_quadratic_meta());
  return out;
}

}  // namespace mil::gradcheck
