#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "mil/adam.hpp"
#include "mil/finite_diff.hpp"
#include "mil/layers.hpp"
#include "mil/ops.hpp"
#include "mil/policy.hpp"
#include "mil/sgd_step.hpp"

namespace mil {
namespace {

using ad::Var;

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = n(rng);
  return t;
}

// Direct quadruple loop; NHWC image, [F,k,k,C] kernels.
Tensor naive_conv(const Tensor& img, const Tensor& k, std::size_t stride) {
  const auto n = img.dim(0), h = img.dim(1), w = img.dim(2), c = img.dim(3);
  const auto f = k.dim(0), kh = k.dim(1), kw = k.dim(2);
  const auto ho = (h - kh) / stride + 1, wo = (w - kw) / stride + 1;
  Tensor out({n, ho, wo, f});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j)
        for (std::size_t o = 0; o < f; ++o) {
          double s = 0.0;
          for (std::size_t di = 0; di < kh; ++di)
            for (std::size_t dj = 0; dj < kw; ++dj)
              for (std::size_t ch = 0; ch < c; ++ch)
                s += img[((b * h + i * stride + di) * w + j * stride + dj) * c + ch] *
                     k[((o * kh + di) * kw + dj) * c + ch];
          out[((b * ho + i) * wo + j) * f + o] = s;
        }
  return out;
}

TEST(Dense, IdentityAndZeroWeights) {
  const Tensor x = Tensor::matrix(2, 3, {1, 2, 3, -4, 5, -6});
  Tensor eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  Var y = nn::dense(ad::constant(x), ad::constant(eye), ad::constant(Tensor({3})));
  EXPECT_TRUE(y.value() == x);
  const Tensor b = Tensor::vector({0.5, -1.5});
  Var z = nn::dense(ad::constant(x), ad::constant(Tensor({2, 3})), ad::constant(b));
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_EQ(z.value().at(r, 0), 0.5);
    EXPECT_EQ(z.value().at(r, 1), -1.5);
  }
}

TEST(Dense, HandArithmetic) {
  // W = [[1,0,2],[-1,3,1]], b = [1,-2], x = [2,1,-1]
  // W x + b = [2+0-2+1, -2+3-1-2] = [1, -2]
  Var y = nn::dense(ad::constant(Tensor::matrix(1, 3, {2, 1, -1})), ad::constant(Tensor::matrix(2, 3, {1, 0, 2, -1, 3, 1})),
                    ad::constant(Tensor::vector({1, -2})));
  EXPECT_EQ(y.value(), Tensor::matrix(1, 2, {1, -2}));
  EXPECT_THROW(nn::dense(ad::constant(Tensor({1, 4})), ad::constant(Tensor({2, 3})), ad::constant(Tensor({2}))),
               ShapeError);
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 rng(1);
  const Tensor img = random_tensor({1, 5, 6, 1}, rng);
  Var y = nn::conv2d(ad::constant(img), ad::constant(Tensor({1, 1, 1, 1}, 1.0)), 1);
  EXPECT_TRUE(y.value() == img);
}

TEST(Conv2d, StridedGeometry) {
  Var y = nn::conv2d(ad::constant(Tensor({1, 8, 8, 1})), ad::constant(Tensor({1, 3, 3, 1})), 2);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 3, 1}));
  EXPECT_THROW(nn::conv2d(ad::constant(Tensor({1, 2, 8, 1})), ad::constant(Tensor({1, 3, 3, 1})), 1), ShapeError);
}

TEST(Conv2d, MatchesNaiveReference) {
  std::mt19937_64 rng(2);
  for (std::size_t size : {5, 9, 16}) {
    for (std::size_t stride : {1, 2, 3}) {
      const Tensor img = random_tensor({2, size, size + 1, 3}, rng);
      const Tensor k = random_tensor({4, 3, 3, 3}, rng);
      Var y = nn::conv2d(ad::constant(img), ad::constant(k), stride);
      EXPECT_LT(max_abs_diff(y.value(), naive_conv(img, k, stride)), 1e-12);
    }
  }
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const Tensor img = random_tensor({1, 6, 5, 2}, rng);
  const Tensor target = random_tensor({1, 2, 2, 3}, rng);
  ParamSet theta{{"k", random_tensor({3, 3, 3, 2}, rng, 0.3)}, {"img", img}};
  auto f = [&](const VarSet& p) {
    return ad::sum(ad::square(ad::sub(nn::conv2d(p.at("img"), p.at("k"), 2), ad::constant(target))));
  };
  auto vars = make_params(theta);
  auto analytic = values_of(gradient(f(vars), vars));
  auto numeric = finite_difference_gradient([&](const ParamSet& p) { return f(make_constants(p)).value().item(); },
                                            theta, 1e-5);
  EXPECT_LT(compare_gradients(analytic, numeric).max_rel_error, 1e-6);
}

TEST(LayerNorm, ConstantInputGivesZeros) {
  Var y = nn::layer_norm(ad::constant(Tensor({2, 4}, 3.5)), ad::constant(Tensor({4}, 1.0)), ad::constant(Tensor({4})));
  for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, DirectFormulaOnOneTwoThree) {
  Var y = nn::layer_norm(ad::constant(Tensor::matrix(1, 3, {1, 2, 3})), ad::constant(Tensor({3}, 1.0)),
                         ad::constant(Tensor({3})));
  // mean 2, variance 2/3
  const double s = 1.0 / std::sqrt(2.0 / 3.0 + nn::kLayerNormEps);
  EXPECT_NEAR(y.value()[0], -s, 1e-15);
  EXPECT_NEAR(y.value()[1], 0.0, 1e-15);
  EXPECT_NEAR(y.value()[2], s, 1e-15);
}

TEST(LayerNorm, ShiftInvarianceAndMoments) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor({3, 7}, rng, 5.0);
    Tensor shifted = x;
    for (auto& v : shifted.values()) v += 11.25;
    const Var one = ad::constant(Tensor({7}, 1.0)), zero = ad::constant(Tensor({7}));
    const Tensor a = nn::layer_norm(ad::constant(x), one, zero).value();
    const Tensor b = nn::layer_norm(ad::constant(shifted), one, zero).value();
    EXPECT_LT(max_abs_diff(a, b), 1e-9);
    for (std::size_t r = 0; r < 3; ++r) {
      double mean = 0, var = 0;
      for (std::size_t c = 0; c < 7; ++c) mean += a.at(r, c) / 7.0;
      for (std::size_t c = 0; c < 7; ++c) var += (a.at(r, c) - mean) * (a.at(r, c) - mean) / 7.0;
      EXPECT_LT(std::abs(mean), 1e-9);
      EXPECT_NEAR(var, 1.0, 1e-6);
    }
  }
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const Tensor t = random_tensor({3, 5}, rng);
  ParamSet theta{{"x", random_tensor({3, 5}, rng)}, {"g", random_tensor({5}, rng)}, {"b", random_tensor({5}, rng)}};
  auto f = [&](const VarSet& p) {
    return ad::sum(ad::mul(nn::layer_norm(p.at("x"), p.at("g"), p.at("b")), ad::constant(t)));
  };
  auto vars = make_params(theta);
  auto analytic = values_of(gradient(f(vars), vars));
  auto numeric = finite_difference_gradient([&](const ParamSet& p) { return f(make_constants(p)).value().item(); },
                                            theta, 1e-5);
  EXPECT_LT(compare_gradients(analytic, numeric).max_rel_error, 1e-6);
}

TEST(SpatialSoftArgmax, SpikeUniformAndTwoSpikes) {
  const std::size_t h = 5, w = 7;
  Tensor spike({1, h, w, 1});
  spike[(2 * w + 6)] = 80.0;  // row 2, col 6
  Tensor out = nn::spatial_soft_argmax(ad::constant(spike)).value();
  EXPECT_NEAR(out[0], 1.0, 1e-12);
  EXPECT_NEAR(out[1], 0.0, 1e-12);

  out = nn::spatial_soft_argmax(ad::constant(Tensor({1, h, w, 1}, 0.3))).value();
  EXPECT_NEAR(out[0], 0.0, 1e-15);
  EXPECT_NEAR(out[1], 0.0, 1e-15);

  Tensor two({1, h, w, 1});
  two[0] = 90.0;                  // (-1, -1)
  two[(1 * w + 3)] = 90.0;        // (0, -0.5)
  out = nn::spatial_soft_argmax(ad::constant(two)).value();
  EXPECT_NEAR(out[0], -0.5, 1e-12);
  EXPECT_NEAR(out[1], -0.75, 1e-12);

  EXPECT_THROW(nn::spatial_soft_argmax(ad::constant(Tensor({1, 0, 3, 1}))), ShapeError);
}

TEST(SpatialSoftArgmax, OutputsStayInUnitSquare) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor({2, 4, 6, 3}, rng, 30.0);
    const Tensor out = nn::spatial_soft_argmax(ad::constant(x)).value();
    EXPECT_EQ(out.shape(), (Shape{2, 6}));
    for (double v : out.values()) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(SpatialSoftArgmax, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const Tensor t = random_tensor({2, 4}, rng);
  ParamSet theta{{"x", random_tensor({2, 3, 4, 2}, rng)}};
  auto f = [&](const VarSet& p) { return ad::sum(ad::mul(nn::spatial_soft_argmax(p.at("x")), ad::constant(t))); };
  auto vars = make_params(theta);
  auto analytic = values_of(gradient(f(vars), vars));
  auto numeric = finite_difference_gradient([&](const ParamSet& p) { return f(make_constants(p)).value().item(); },
                                            theta, 1e-5);
  EXPECT_LT(compare_gradients(analytic, numeric).max_rel_error, 1e-6);
}

TEST(BiasTransform, ZeroZReducesToAffine) {
  std::mt19937_64 rng(8);
  const Tensor x = random_tensor({3, 4}, rng), w1 = random_tensor({5, 4}, rng), w2 = random_tensor({5, 2}, rng);
  const Tensor b = random_tensor({5}, rng);
  Var y = nn::bias_transform(ad::constant(x), ad::constant(Tensor({2})), ad::constant(w1), ad::constant(w2),
                             ad::constant(b));
  Var ref = nn::dense(ad::constant(x), ad::constant(w1), ad::constant(b));
  EXPECT_LT(max_abs_diff(y.value(), ref.value()), 1e-15);
}

TEST(BiasTransform, ReparameterizationInvariance) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = random_tensor({3, 4}, rng), w1 = random_tensor({5, 4}, rng), w2 = random_tensor({5, 2}, rng);
    const Tensor z = random_tensor({2}, rng), b = random_tensor({5}, rng), delta = random_tensor({2}, rng);
    Tensor z2 = z, b2 = b;
    for (std::size_t i = 0; i < 2; ++i) z2[i] += delta[i];
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t i = 0; i < 2; ++i) b2[r] -= w2.at(r, i) * delta[i];
    auto run = [&](const Tensor& zz, const Tensor& bb) {
      return nn::bias_transform(ad::constant(x), ad::constant(zz), ad::constant(w1), ad::constant(w2),
                                ad::constant(bb))
          .value();
    };
    EXPECT_LT(max_abs_diff(run(z, b), run(z2, b2)), 1e-12);
  }
}

TEST(BiasTransform, UpdatedBiasClosedForm) {
  // With z = 0 and b = 0, one step of size alpha gives an effective bias
  // W2' z' + b' = -alpha (W2 W2^T + I) dL/dy.
  std::mt19937_64 rng(10);
  const double alpha = 0.05;
  const Tensor x = random_tensor({6, 4}, rng), target = random_tensor({6, 3}, rng);
  ParamSet theta{{"w1", random_tensor({3, 4}, rng)}, {"w2", random_tensor({3, 2}, rng)}, {"z", Tensor({2})},
                 {"b", Tensor({3})}};
  auto vars = make_params(theta);
  Var y = nn::bias_transform(ad::constant(x), vars.at("z"), vars.at("w1"), vars.at("w2"), vars.at("b"));
  Var loss = ad::sum(ad::square(ad::sub(y, ad::constant(target))));
  auto adapted = values_of(differentiable_sgd_step(vars, loss, {.alpha = alpha}));

  // dL/dy summed over the batch, from the loss definition.
  Tensor dldy({3});
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 3; ++c) dldy[c] += 2.0 * (y.value().at(r, c) - target.at(r, c));
  const Tensor& w2 = theta.at("w2");
  for (std::size_t i = 0; i < 3; ++i) {
    double expected = -alpha * dldy[i];
    for (std::size_t j = 0; j < 3; ++j) {
      double ww = 0.0;
      for (std::size_t k = 0; k < 2; ++k) ww += w2.at(i, k) * w2.at(j, k);
      expected -= alpha * ww * dldy[j];
    }
    double effective = adapted.at("b")[i];
    for (std::size_t k = 0; k < 2; ++k) effective += adapted.at("w2").at(i, k) * adapted.at("z")[k];
    EXPECT_NEAR(effective, expected, 1e-8);
  }
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  ParamSet p{{"a", Tensor::vector({1, -2, 3})}};
  auto [state, next] = adam_step(make_adam_state(p, 0.1), p, {{"a", Tensor({3})}});
  EXPECT_TRUE(next == p);
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, FirstStepIsLearningRateTimesSign) {
  ParamSet p{{"a", Tensor::vector({1, -2, 3})}};
  ParamSet g{{"a", Tensor::vector({0.5, -3, 1e-3})}};
  auto [state, next] = adam_step(make_adam_state(p, 0.01), p, g);
  for (std::size_t i = 0; i < 3; ++i) {
    const double sign = g.at("a")[i] > 0 ? 1.0 : -1.0;
    EXPECT_NEAR(next.at("a")[i], p.at("a")[i] - 0.01 * sign, 1e-7);
  }
}

TEST(Adam, ThreeStepsOnQuadraticMatchHandRecurrence) {
  // loss 1/2 theta^2, gradient theta.
  double theta = 1.0, m = 0.0, v = 0.0;
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ParamSet p{{"t", Tensor::scalar(1.0)}};
  AdamState s = make_adam_state(p, lr);
  for (int t = 1; t <= 3; ++t) {
    const double g = theta;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    theta -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    ParamSet grad{{"t", Tensor::scalar(p.at("t").item())}};
    std::tie(s, p) = adam_step(std::move(s), std::move(p), grad);
  }
  EXPECT_DOUBLE_EQ(p.at("t").item(), theta);
  EXPECT_THROW(adam_step(s, p, {{"u", Tensor::scalar(0)}}), ShapeError);
}

ArchitectureConfig small_vision_config() {
  ArchitectureConfig c;
  c.vision = true;
  c.image_height = 8;
  c.image_width = 8;
  c.conv_layers = 2;
  c.conv_filters = 2;
  c.conv_stride = 2;
  c.fc_layers = 3;
  c.fc_hidden = 5;
  c.bias_transform_dim = 2;
  c.state_dim = 4;
  return c;
}

ObservationBatch random_obs(const ArchitectureConfig& c, std::size_t n, std::mt19937_64& rng) {
  ObservationBatch o{random_tensor({n, c.state_dim}, rng), std::nullopt};
  if (c.vision) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Tensor img({n, c.image_height, c.image_width, c.image_channels});
    for (auto& v : img.values()) v = u(rng);
    o.image = img;
  }
  return o;
}

TEST(Policy, ZeroParametersGiveZeroAction) {
  ArchitectureConfig c;
  std::mt19937_64 rng(11);
  ParamSet p = init_policy_params(c, 1);
  for (auto& [_, t] : p) std::fill(t.values().begin(), t.values().end(), 0.0);
  const Tensor a = policy_action(c, p, random_obs(c, 4, rng));
  EXPECT_EQ(a.shape(), (Shape{4, 2}));
  for (double v : a.values()) EXPECT_EQ(v, 0.0);
}

TEST(Policy, DefaultShapes) {
  ArchitectureConfig c;
  ParamSet p = init_policy_params(c, 1);
  EXPECT_EQ(c.action_dim, 2u);
  EXPECT_EQ(p.at("fc0.weight").shape(), (Shape{200, 19}));
  EXPECT_EQ(p.at("bt.weight").shape(), (Shape{200, 10}));
  EXPECT_EQ(p.count("fc2.weight"), 1u);
  EXPECT_EQ(p.count("fc3.weight"), 0u);
  ArchitectureConfig v;
  v.vision = true;
  v.state_dim = 4;
  EXPECT_EQ(v.conv_extents().back(), (std::pair<std::size_t, std::size_t>{3, 4}));
  EXPECT_EQ(v.feature_dim(), 3u * 4u * 40u + 4u);
}

TEST(Policy, ObservationMismatch) {
  ArchitectureConfig c;
  ParamSet p = init_policy_params(c, 1);
  ObservationBatch bad{Tensor({2, 7}), std::nullopt};
  EXPECT_THROW(policy_action(c, p, bad), ConfigMismatch);
}

TEST(Policy, FullGradientMatchesFiniteDifferences) {
  for (bool vision : {false, true}) {
    ArchitectureConfig c = vision ? small_vision_config() : ArchitectureConfig{};
    if (!vision) {
      c.state_dim = 5;
      c.fc_hidden = 6;
      c.bias_transform_dim = 3;
    }
    std::mt19937_64 rng(12);
    ParamSet theta = init_policy_params(c, 3);
    for (auto& [_, t] : theta)
      for (auto& v : t.values()) v += 0.1 * std::normal_distribution<double>(0.0, 1.0)(rng);
    const ObservationBatch obs = random_obs(c, 3, rng);
    const Tensor target = random_tensor({3, 2}, rng);
    auto f = [&](const VarSet& p) {
      return ad::sum(ad::square(ad::sub(policy_forward(c, p, obs).action, ad::constant(target))));
    };
    auto vars = make_params(theta);
    auto analytic = values_of(gradient(f(vars), vars));
    auto numeric = finite_difference_gradient([&](const ParamSet& p) { return f(make_constants(p)).value().item(); },
                                              theta, 1e-5);
    const auto r = compare_gradients(analytic, numeric);
    EXPECT_LT(r.max_rel_error, 1e-5) << (vision ? "vision " : "state ") << r.worst_param;
  }
}

TEST(Policy, TwoHeadGradientSeparation) {
  ArchitectureConfig c;
  c.state_dim = 5;
  c.fc_hidden = 6;
  c.bias_transform_dim = 2;
  c.two_head = true;
  std::mt19937_64 rng(13);
  auto vars = make_params(init_policy_params(c, 4));
  const ObservationBatch obs = random_obs(c, 4, rng);
  auto out = policy_forward(c, vars, obs);
  auto g_action = gradient(ad::sum(out.action), vars);
  for (const char* name : {"inner_head.weight", "inner_head.bias"}) {
    for (double v : g_action.at(name).value().values()) EXPECT_EQ(v, 0.0);
  }
  auto g_inner = gradient(ad::sum(ad::square(inner_head(c, vars, out.hidden))), vars);
  for (const char* name : {"head.weight", "head.bias"}) {
    for (double v : g_inner.at(name).value().values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Architecture, ValidationAndJson) {
  ArchitectureConfig c = small_vision_config();
  c.image_height = 4;
  c.conv_layers = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  ArchitectureConfig d = small_vision_config();
  nlohmann::json j = d;
  const ArchitectureConfig back = j.get<ArchitectureConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
}

}  // namespace
}  // namespace mil
