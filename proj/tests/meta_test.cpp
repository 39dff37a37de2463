#include <cmath>

#include <gtest/gtest.h>

#include "mil/demo.hpp"
#include "mil/finite_diff.hpp"
#include "mil/ilqg.hpp"
#include "mil/meta.hpp"
#include "mil/random.hpp"

namespace mil::meta {
namespace {

// 198 parameters with two heads.
ArchitectureConfig tiny_arch(bool two_head = true) {
  ArchitectureConfig a;
  a.state_dim = 4;
  a.fc_layers = 3;
  a.fc_hidden = 8;
  a.bias_transform_dim = 2;
  a.two_head = two_head;
  return a;
}

DemoBatch random_demo(std::uint64_t seed, std::size_t steps = 6, std::size_t state_dim = 4) {
  Rng rng(seed);
  DemoBatch d{{Tensor({steps, state_dim})}, Tensor({steps, 2})};
  for (auto& v : d.obs.state.values()) v = rng.normal();
  for (auto& v : d.actions->values()) v = rng.normal();
  return d;
}

ParamSet zeroed(ParamSet p) {
  for (auto& [_, t] : p) t = Tensor(t.shape());
  return p;
}

double value(const ad::Var& v) { return v.value().item(); }

TEST(BcLoss, ZeroWhenReproducingDemo) {
  const auto arch = tiny_arch(false);
  DemoBatch d = random_demo(1);
  d.actions = Tensor({6, 2});
  EXPECT_EQ(value(bc_loss(arch, make_constants(zeroed(init_policy_params(arch, 0))), d)), 0.0);
}

TEST(BcLoss, UnitResidualOverFiftySteps) {
  const auto arch = tiny_arch(false);
  ParamSet p = zeroed(init_policy_params(arch, 0));
  p["head.bias"] = Tensor::vector({1.0, -1.0});
  DemoBatch d = random_demo(2, 50);
  d.actions = Tensor({50, 2});
  EXPECT_EQ(value(bc_loss(arch, make_constants(p), d)), 100.0);
}

TEST(BcLoss, ThreeStepHandSum) {
  const auto arch = tiny_arch(false);
  ParamSet p = zeroed(init_policy_params(arch, 0));
  p["head.bias"] = Tensor::vector({0.5, -1.0});
  DemoBatch d = random_demo(3, 3);
  d.actions = Tensor::matrix(3, 2, {0.5, 0.0, 1.5, -1.0, -0.5, 2.0});
  // (0 + 1) + (1 + 0) + (1 + 9)
  EXPECT_EQ(value(bc_loss(arch, make_constants(p), d)), 12.0);
  d.actions.reset();
  EXPECT_THROW(bc_loss(arch, make_constants(p), d), ModalityError);
}

ParamSet tied_values(const ArchitectureConfig& arch, std::uint64_t seed) {
  ParamSet p = init_policy_params(arch, seed);
  p["inner_head.weight"] = p.at("head.weight");
  p["inner_head.bias"] = p.at("head.bias");
  return p;
}

TEST(TwoHead, TiedHeadEqualsBc) {
  const auto arch = tiny_arch();
  const DemoBatch d = random_demo(4);
  const VarSet v = make_constants(tied_values(arch, 1));
  EXPECT_EQ(value(twohead_inner_loss(arch, v, d)), value(bc_loss(arch, v, d)));
  EXPECT_THROW(twohead_inner_loss(tiny_arch(false), v, d), ConfigMismatch);
}

TEST(TwoHead, ZeroWhenInnerHeadMatches) {
  const auto arch = tiny_arch();
  ParamSet p = init_policy_params(arch, 2);
  p["inner_head.weight"] = Tensor(p.at("inner_head.weight").shape());
  p["inner_head.bias"] = Tensor::vector({0.25, -0.75});
  DemoBatch d = random_demo(5);
  for (std::size_t t = 0; t < 6; ++t) {
    d.actions->at(t, 0) = 0.25;
    d.actions->at(t, 1) = -0.75;
  }
  EXPECT_EQ(value(twohead_inner_loss(arch, make_constants(p), d)), 0.0);
}

TEST(TwoHead, HeadGradientMatchesFiniteDifferences) {
  const auto arch = tiny_arch();
  const ParamSet p = init_policy_params(arch, 3);
  const DemoBatch d = random_demo(6);
  const VarSet v = make_params(p);
  const VarSet g = gradient(twohead_inner_loss(arch, v, d), v);
  ParamSet heads{{"inner_head.weight", p.at("inner_head.weight")}, {"inner_head.bias", p.at("inner_head.bias")}};
  const auto numeric = finite_difference_gradient(
      [&](const ParamSet& h) {
        ParamSet q = p;
        for (const auto& [k, t] : h) q[k] = t;
        return value(twohead_inner_loss(arch, make_constants(q), d));
      },
      heads, 1e-6);
  ParamSet analytic{{"inner_head.weight", g.at("inner_head.weight").value()},
                    {"inner_head.bias", g.at("inner_head.bias").value()}};
  EXPECT_LT(compare_gradients(analytic, numeric).max_rel_error, 1e-6);
}

TEST(ActionFree, IgnoresActions) {
  const auto arch = tiny_arch();
  const ParamSet p = init_policy_params(arch, 4);
  DemoBatch d = random_demo(7);
  const double before = value(actionfree_inner_loss(arch, make_constants(p), d));
  TrainConfig cfg;
  cfg.inner_loss = InnerLoss::kActionFree;
  cfg.alpha = 0.1;
  const ParamSet adapted = values_of(adapt(arch, make_params(p), {&d}, cfg));
  for (auto& v : d.actions->values()) v = 1e3 * v + 17.0;
  EXPECT_EQ(value(actionfree_inner_loss(arch, make_constants(p), d)), before);
  EXPECT_EQ(values_of(adapt(arch, make_params(p), {&d}, cfg)), adapted);
  d.actions.reset();
  EXPECT_EQ(values_of(adapt(arch, make_params(p), {&d}, cfg)), adapted);
}

TEST(ActionFree, ZeroHeadMeansNoAdaptation) {
  const auto arch = tiny_arch();
  ParamSet p = init_policy_params(arch, 5);
  p["inner_head.weight"] = Tensor(p.at("inner_head.weight").shape());
  p["inner_head.bias"] = Tensor({2});
  const DemoBatch d = random_demo(8);
  EXPECT_EQ(value(actionfree_inner_loss(arch, make_constants(p), d)), 0.0);
  TrainConfig cfg;
  cfg.inner_loss = InnerLoss::kActionFree;
  cfg.alpha = 0.5;
  EXPECT_EQ(values_of(adapt(arch, make_params(p), {&d}, cfg)), p);
}

TEST(ActionFree, EqualsTwoHeadWithZeroActions) {
  const auto arch = tiny_arch();
  const VarSet v = make_constants(init_policy_params(arch, 6));
  DemoBatch d = random_demo(9);
  const double af = value(actionfree_inner_loss(arch, v, d));
  d.actions = Tensor({6, 2});
  EXPECT_EQ(af, value(twohead_inner_loss(arch, v, d)));
}

TEST(Adapt, ZeroAlphaIsIdentity) {
  const auto arch = tiny_arch();
  const ParamSet p = init_policy_params(arch, 7);
  const DemoBatch d = random_demo(10);
  TrainConfig cfg;
  cfg.alpha = 0.0;
  for (InnerLoss k : {InnerLoss::kBc, InnerLoss::kTwoHead, InnerLoss::kActionFree}) {
    cfg.inner_loss = k;
    EXPECT_EQ(values_of(adapt(arch, make_params(p), {&d}, cfg)), p);
  }
  EXPECT_THROW(adapt(arch, make_params(p), {}, cfg), std::invalid_argument);
}

TEST(Adapt, IdenticalDemosMatchOneShot) {
  const auto arch = tiny_arch();
  const ParamSet p = init_policy_params(arch, 8);
  const DemoBatch d = random_demo(11);
  TrainConfig cfg;
  cfg.alpha = 0.05;
  for (InnerLoss k : {InnerLoss::kBc, InnerLoss::kTwoHead, InnerLoss::kActionFree}) {
    cfg.inner_loss = k;
    const ParamSet one = values_of(adapt(arch, make_params(p), {&d}, cfg));
    for (std::size_t n : {2, 3, 5}) {
      const std::vector<const DemoBatch*> many(n, &d);
      EXPECT_EQ(values_of(adapt(arch, make_params(p), many, cfg)), one);
    }
  }
}

TEST(Adapt, AveragesDemoGradients) {
  const auto arch = tiny_arch(false);
  const ParamSet p = init_policy_params(arch, 9);
  const DemoBatch a = random_demo(12), b = random_demo(13);
  TrainConfig cfg;
  cfg.alpha = 0.05;
  const VarSet v = make_params(p);
  const VarSet ga = gradient(bc_loss(arch, v, a), v), gb = gradient(bc_loss(arch, v, b), v);
  const ParamSet two = values_of(adapt(arch, v, {&a, &b}, cfg));
  for (const auto& [name, t] : p) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double want = t[i] - 0.05 * 0.5 * (ga.at(name).value()[i] + gb.at(name).value()[i]);
      ASSERT_NEAR(two.at(name)[i], want, 1e-12);
    }
  }
}

TEST(Adapt, DescentOnAdaptationDemo) {
  const auto arch = tiny_arch(false);
  const ParamSet p = init_policy_params(arch, 10);
  const DemoBatch d = random_demo(14);
  const double before = value(bc_loss(arch, make_constants(p), d));
  TrainConfig cfg;
  cfg.alpha = 1.0;
  double after = before;
  for (int halvings = 0; halvings < 30 && after >= before; ++halvings, cfg.alpha /= 2) {
    after = value(bc_loss(arch, make_constants(adapt_values(arch, p, {&d}, cfg)), d));
  }
  EXPECT_LT(after, before);
}

TEST(Adapt, ClippedStepStaysInInterval) {
  const auto arch = tiny_arch(false);
  const ParamSet p = init_policy_params(arch, 11);
  const DemoBatch d = random_demo(15);
  TrainConfig cfg;
  cfg.alpha = 1.0;
  cfg.inner_clip = ClipInterval{-0.01, 0.02};
  const ParamSet q = adapt_values(arch, p, {&d}, cfg);
  for (const auto& [name, t] : p) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double g = t[i] - q.at(name)[i];  // alpha = 1
      ASSERT_GE(g, -0.01 - 1e-15);
      ASSERT_LE(g, 0.02 + 1e-15);
    }
  }
}

TEST(Adapt, FrozenZStaysPut) {
  const auto arch = tiny_arch(false);
  ParamSet p = init_policy_params(arch, 12);
  const DemoBatch d = random_demo(16);
  TrainConfig cfg;
  cfg.alpha = 0.1;
  EXPECT_NE(adapt_values(arch, p, {&d}, cfg).at("bt.z"), p.at("bt.z"));
  cfg.freeze_z = true;
  EXPECT_EQ(adapt_values(arch, p, {&d}, cfg).at("bt.z"), p.at("bt.z"));
}

std::vector<TaskSample> samples(const std::vector<DemoBatch>& demos, std::size_t tasks) {
  std::vector<TaskSample> b;
  for (std::size_t i = 0; i < tasks; ++i) b.push_back({{&demos[2 * i]}, &demos[2 * i + 1]});
  return b;
}

TEST(MetaLoss, ZeroAlphaReducesToValidationBc) {
  const auto arch = tiny_arch();
  const ParamSet p = init_policy_params(arch, 13);
  std::vector<DemoBatch> demos;
  for (std::uint64_t s = 0; s < 6; ++s) demos.push_back(random_demo(100 + s));
  TrainConfig cfg;
  cfg.alpha = 0.0;
  for (InnerLoss k : {InnerLoss::kBc, InnerLoss::kTwoHead, InnerLoss::kActionFree}) {
    cfg.inner_loss = k;
    const VarSet v = make_constants(p);
    const double plain =
        value(bc_loss(arch, v, demos[1])) + value(bc_loss(arch, v, demos[3])) + value(bc_loss(arch, v, demos[5]));
    EXPECT_EQ(value(meta_loss(arch, v, samples(demos, 3), cfg)), plain);
  }
}

TEST(MetaLoss, TiedTwoHeadEqualsSingleHead) {
  const auto two = tiny_arch(true);
  const auto one = tiny_arch(false);
  const ParamSet p2 = init_policy_params(two, 14);
  ParamSet p1 = p2;
  p1.erase("inner_head.weight");
  p1.erase("inner_head.bias");
  std::vector<DemoBatch> demos;
  for (std::uint64_t s = 0; s < 4; ++s) demos.push_back(random_demo(200 + s));
  TrainConfig cfg;
  cfg.alpha = 0.05;
  const double single = value(meta_loss(one, make_params(p1), samples(demos, 2), cfg));
  cfg.inner_loss = InnerLoss::kTwoHead;
  EXPECT_EQ(value(meta_loss(two, tie_heads(make_params(p2)), samples(demos, 2), cfg)), single);
}

TEST(MetaLoss, GradientMatchesFiniteDifferencesForAllInnerLosses) {
  const auto arch = tiny_arch();
  ASSERT_LE(total_size(init_policy_params(arch, 0)), 500u);
  std::vector<DemoBatch> demos;
  for (std::uint64_t s = 0; s < 4; ++s) demos.push_back(random_demo(300 + s));
  const auto batch = samples(demos, 2);
  for (InnerLoss k : {InnerLoss::kBc, InnerLoss::kTwoHead, InnerLoss::kActionFree}) {
    TrainConfig cfg;
    cfg.alpha = 0.05;
    cfg.inner_loss = k;
    const ParamSet p = init_policy_params(arch, 15);
    const MetaGradient mg = meta_gradient(arch, p, batch, cfg);
    const auto numeric = finite_difference_gradient(
        [&](const ParamSet& q) { return value(meta_loss(arch, make_constants(q), batch, cfg)); }, p, 1e-6);
    const auto r = compare_gradients(mg.grad, numeric);
    EXPECT_LT(r.max_rel_error, 1e-4) << to_string(k) << " worst " << r.worst_param;
  }
}

TEST(MetaLoss, FirstOrderDropsSecondOrderTerms) {
  const auto arch = tiny_arch(false);
  const ParamSet p = init_policy_params(arch, 16);
  std::vector<DemoBatch> demos{random_demo(400), random_demo(401)};
  TrainConfig cfg;
  cfg.alpha = 0.05;
  const auto full = meta_gradient(arch, p, samples(demos, 1), cfg);
  cfg.first_order = true;
  const auto fo = meta_gradient(arch, p, samples(demos, 1), cfg);
  EXPECT_EQ(full.loss, fo.loss);
  EXPECT_GT(max_abs_diff(full.grad, fo.grad), 1e-8);
}

std::vector<TaskData> random_tasks(std::size_t n, std::size_t demos, std::uint64_t seed) {
  std::vector<TaskData> out(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < demos; ++j) out[i].demos.push_back(random_demo(mix_seed(seed, i * 10 + j)));
  return out;
}

TEST(MetaTrain, ZeroBetaLeavesParams) {
  const auto arch = tiny_arch(false);
  const ParamSet p = init_policy_params(arch, 17);
  TrainConfig cfg;
  cfg.beta = 0.0;
  cfg.epochs = 3;
  const auto s = meta_train(arch, initial_state(p, cfg), random_tasks(7, 2, 1), {}, cfg);
  EXPECT_EQ(s.params, p);
  EXPECT_EQ(s.history.size(), 3u);
}

TEST(MetaTrain, DeterministicAndResumable) {
  const auto arch = tiny_arch(false);
  const ParamSet p = init_policy_params(arch, 18);
  const auto tasks = random_tasks(12, 3, 2);
  const auto val = random_tasks(3, 2, 3);
  TrainConfig cfg;
  cfg.beta = 0.01;
  cfg.alpha = 0.01;
  cfg.epochs = 4;
  cfg.seed = 5;
  const auto a = meta_train(arch, initial_state(p, cfg), tasks, val, cfg);
  const auto b = meta_train(arch, initial_state(p, cfg), tasks, val, cfg);
  ASSERT_EQ(a.history.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
    EXPECT_EQ(a.history[i].validation_loss, b.history[i].validation_loss);
  }
  EXPECT_EQ(a.params, b.params);
  EXPECT_NE(a.params, p);

  TrainConfig half = cfg;
  half.epochs = 2;
  const auto mid = meta_train(arch, initial_state(p, half), tasks, val, half);
  const auto resumed = meta_train(arch, mid, tasks, val, cfg);
  EXPECT_EQ(resumed.params, a.params);
  EXPECT_EQ(resumed.history.back().train_loss, a.history.back().train_loss);
}

TEST(MetaTrain, RejectsSingleDemoTasksAndDivergence) {
  const auto arch = tiny_arch(false);
  const ParamSet p = init_policy_params(arch, 19);
  TrainConfig cfg;
  EXPECT_THROW(meta_train(arch, initial_state(p, cfg), random_tasks(3, 1, 4), {}, cfg), std::invalid_argument);
  auto bad = random_tasks(3, 2, 5);
  bad[1].demos[0].actions->values()[0] = NAN;
  bad[1].demos[1].actions->values()[0] = NAN;
  try {
    meta_train(arch, initial_state(p, cfg), bad, {}, cfg);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.epoch, 0u);
  }
}

TEST(OneShot, ModalityAndDeterminism) {
  const auto arch = tiny_arch();
  const ParamSet p = init_policy_params(arch, 20);
  DemoBatch d = random_demo(500);
  TrainConfig cfg;
  cfg.alpha = 0.0;
  const auto probe = random_demo(501).obs;
  EXPECT_EQ(one_shot_policy(arch, p, {&d}, cfg).act(probe), one_shot_policy(arch, p, {&d}, cfg).act(probe));
  d.actions.reset();
  EXPECT_THROW(one_shot_policy(arch, p, {&d}, cfg), ModalityError);
  cfg.inner_loss = InnerLoss::kTwoHead;
  EXPECT_THROW(one_shot_policy(arch, p, {&d}, cfg), ModalityError);
  cfg.inner_loss = InnerLoss::kActionFree;
  EXPECT_NO_THROW(one_shot_policy(arch, p, {&d}, cfg));
  EXPECT_THROW(one_shot_policy(tiny_arch(false), p, {&d}, cfg), ConfigMismatch);
}

TEST(Config, JsonRoundTripAndValidation) {
  TrainConfig c;
  c.inner_clip = ClipInterval{-1, 2};
  c.inner_loss = InnerLoss::kActionFree;
  c.shots = 3;
  const TrainConfig d = nlohmann::json(c).get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(d), nlohmann::json(c));
  c.meta_batch = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(inner_loss_from_string("mse"), std::invalid_argument);
}

// Short run on real expert demonstrations with the default network.
TEST(MetaTrain, HeldOutLossDropsOnReachingData) {
  const reach::EnvConfig env;
  const auto arch = reach::default_architecture(env);
  auto make = [&](std::size_t n, reach::Split split, std::uint64_t base) {
    std::vector<TaskData> tasks(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto task = reach::sample_task(base + i, split);
      for (std::uint64_t e = 0; e < 2; ++e) {
        const auto c = ilqg::solve_reach(env, task, e, env.horizon);
        tasks[i].demos.push_back(demo_batch(env, generate_demo(env, c, task, e, 0.05)));
      }
    }
    return tasks;
  };
  const auto train = make(50, reach::Split::kMetaTrain, 0);
  const auto val = make(10, reach::Split::kMetaTest, 0);
  TrainConfig cfg;
  cfg.epochs = 3;
  const ParamSet p = init_policy_params(arch, 1);
  const double before = held_out_loss(arch, p, val, cfg);
  const auto s = meta_train(arch, initial_state(p, cfg), train, val, cfg);
  EXPECT_LT(s.history.back().validation_loss, before);
}

}  // namespace
}  // namespace mil::meta
