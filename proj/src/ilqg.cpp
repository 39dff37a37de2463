#include "mil/ilqg.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mil::ilqg {

namespace {

VectorXd clamp_controls(const Problem& p, VectorXd u) {
  if (p.control_limit) u = u.cwiseMax(-*p.control_limit).cwiseMin(*p.control_limit);
  return u;
}

// Box handling: coordinates whose step would leave [-limit, limit] are pinned to
// the bound with no feedback; the free ones are re-solved given the pinned step.
bool box_project(double limit, const VectorXd& u, const MatrixXd& quu, const VectorXd& qu, const MatrixXd& qux,
                 VectorXd& k, MatrixXd& K) {
  const Eigen::Index m = u.size();
  std::vector<Eigen::Index> free, pinned;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double target = u[i] + k[i];
    if (target > limit || target < -limit) {
      k[i] = std::clamp(target, -limit, limit) - u[i];
      pinned.push_back(i);
    } else {
      free.push_back(i);
    }
  }
  if (pinned.empty()) return true;
  for (const Eigen::Index i : pinned) K.row(i).setZero();
  if (free.empty()) return true;
  const auto nf = static_cast<Eigen::Index>(free.size());
  MatrixXd qff(nf, nf), qfp(nf, static_cast<Eigen::Index>(pinned.size()));
  VectorXd rhs(nf), kp(static_cast<Eigen::Index>(pinned.size()));
  MatrixXd qxf(nf, qux.cols());
  for (std::size_t j = 0; j < pinned.size(); ++j) kp[static_cast<Eigen::Index>(j)] = k[pinned[j]];
  for (Eigen::Index a = 0; a < nf; ++a) {
    for (Eigen::Index b = 0; b < nf; ++b) qff(a, b) = quu(free[a], free[b]);
    for (std::size_t j = 0; j < pinned.size(); ++j) qfp(a, static_cast<Eigen::Index>(j)) = quu(free[a], pinned[j]);
    rhs[a] = qu[free[a]];
    qxf.row(a) = qux.row(free[a]);
  }
  Eigen::LLT<MatrixXd> llt(qff);
  if (llt.info() != Eigen::Success) return false;
  const VectorXd kf = -llt.solve(rhs + qfp * kp);
  const MatrixXd Kf = -llt.solve(qxf);
  for (Eigen::Index a = 0; a < nf; ++a) {
    k[free[a]] = kf[a];
    K.row(free[a]) = Kf.row(a);
  }
  return true;
}

struct BackwardResult {
  std::vector<VectorXd> k;
  std::vector<MatrixXd> K;
  double expected_linear = 0.0;     // sum k'Qu
  double expected_quadratic = 0.0;  // sum k'Quu k / 2
};

// Returns nullopt if Quu is not positive definite at some step.
std::optional<BackwardResult> backward(const Problem& p, const std::vector<VectorXd>& xs,
                                       const std::vector<VectorXd>& us, double mu) {
  const std::size_t n = p.state_dim, m = p.control_dim, horizon = p.horizon;
  BackwardResult r;
  r.k.resize(horizon);
  r.K.resize(horizon);
  const CostExpansion term = p.terminal_cost(xs[horizon], true);
  VectorXd vx = term.lx;
  MatrixXd vxx = term.lxx;
  MatrixXd a(n, n), b(n, m);
  for (std::size_t t = horizon; t-- > 0;) {
    const CostExpansion l = p.running_cost(xs[t], us[t], t, true);
    p.linearize(xs[t], us[t], a, b);
    const VectorXd qx = l.lx + a.transpose() * vx;
    const VectorXd qu = l.lu + b.transpose() * vx;
    const MatrixXd qxx = l.lxx + a.transpose() * vxx * a;
    MatrixXd quu = l.luu + b.transpose() * vxx * b;
    const MatrixXd qux = l.lux + b.transpose() * vxx * a;
    quu = 0.5 * (quu + quu.transpose());
    quu.diagonal().array() += mu;
    Eigen::LLT<MatrixXd> llt(quu);
    if (llt.info() != Eigen::Success) return std::nullopt;
    r.k[t] = -llt.solve(qu);
    r.K[t] = -llt.solve(qux);
    if (p.control_limit && !box_project(*p.control_limit, us[t], quu, qu, qux, r.k[t], r.K[t])) return std::nullopt;
    const VectorXd& kt = r.k[t];
    const MatrixXd& gt = r.K[t];
    r.expected_linear += kt.dot(qu);
    r.expected_quadratic += 0.5 * kt.dot(quu * kt);
    vx = qx + gt.transpose() * quu * kt + gt.transpose() * qu + qux.transpose() * kt;
    vxx = qxx + gt.transpose() * quu * gt + gt.transpose() * qux + qux.transpose() * gt;
    vxx = 0.5 * (vxx + vxx.transpose());
  }
  return r;
}

void forward(const Problem& p, const std::vector<VectorXd>& xs, const std::vector<VectorXd>& us,
             const BackwardResult& br, double step, std::vector<VectorXd>& xn, std::vector<VectorXd>& un) {
  xn.resize(p.horizon + 1);
  un.resize(p.horizon);
  xn[0] = p.x0;
  for (std::size_t t = 0; t < p.horizon; ++t) {
    un[t] = clamp_controls(p, us[t] + step * br.k[t] + br.K[t] * (xn[t] - xs[t]));
    xn[t + 1] = p.dynamics(xn[t], un[t]);
  }
}

bool finite(const std::vector<VectorXd>& v) {
  return std::all_of(v.begin(), v.end(), [](const VectorXd& x) { return x.allFinite(); });
}

}  // namespace

VectorXd Controller::control(std::size_t t, const VectorXd& x) const { return u_bar[t] + k[t] + K[t] * (x - x_bar[t]); }

double trajectory_cost(const Problem& p, const std::vector<VectorXd>& xs, const std::vector<VectorXd>& us) {
  double c = 0.0;
  for (std::size_t t = 0; t < p.horizon; ++t) c += p.running_cost(xs[t], us[t], t, false).value;
  return c + p.terminal_cost(xs[p.horizon], false).value;
}

Controller solve(const Problem& p, std::vector<VectorXd> u_init, const Options& opts) {
  if (p.horizon == 0 || u_init.size() != p.horizon) throw std::invalid_argument("ilqg: initial controls must match horizon");
  if (opts.max_iterations == 0) throw std::invalid_argument("ilqg: need at least one iteration");
  if (static_cast<std::size_t>(p.x0.size()) != p.state_dim) throw std::invalid_argument("ilqg: x0 has wrong size");

  Controller c;
  std::vector<VectorXd> xs(p.horizon + 1), us(p.horizon);
  xs[0] = p.x0;
  for (std::size_t t = 0; t < p.horizon; ++t) {
    us[t] = clamp_controls(p, u_init[t]);
    xs[t + 1] = p.dynamics(xs[t], us[t]);
  }
  double cost = trajectory_cost(p, xs, us);
  if (!std::isfinite(cost)) throw std::domain_error("ilqg: initial trajectory has non-finite cost");
  c.cost_history.push_back(cost);

  double mu = 0.0;
  std::vector<VectorXd> xn, un;
  for (std::size_t it = 0; it < opts.max_iterations; ++it) {
    c.iterations = it + 1;
    // Backward pass, raising the Levenberg shift until Quu is positive definite.
    std::optional<BackwardResult> br;
    for (;;) {
      br = backward(p, xs, us, mu);
      if (mu > 0.0) ++c.regularization_events;
      if (br) break;
      mu = std::max(opts.mu_min, mu * opts.mu_factor);
      if (mu > opts.mu_max) break;
    }
    if (!br) {
      c.line_search_failed = true;
      break;
    }

    bool accepted = false;
    double step = 1.0;
    double new_cost = cost;
    for (std::size_t bt = 0; bt <= opts.max_backtracks; ++bt, step *= 0.5) {
      forward(p, xs, us, *br, step, xn, un);
      if (!finite(xn)) continue;
      new_cost = trajectory_cost(p, xn, un);
      const double expected = -(step * br->expected_linear + step * step * br->expected_quadratic);
      // Accept any strict decrease that is a reasonable fraction of the model's prediction.
      if (std::isfinite(new_cost) && new_cost < cost && (expected <= 0.0 || cost - new_cost >= 1e-4 * expected)) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // Either converged already (no predicted gain) or the model is poor; regularize and retry.
      const double predicted = -(br->expected_linear + br->expected_quadratic);
      if (predicted < opts.tolerance * std::max(1.0, std::abs(cost))) {
        c.converged = true;
        break;
      }
      mu = std::max(opts.mu_min, mu * opts.mu_factor);
      if (mu > opts.mu_max) {
        c.line_search_failed = true;
        break;
      }
      continue;
    }
    const double improvement = cost - new_cost;
    xs.swap(xn);
    us.swap(un);
    cost = new_cost;
    c.cost_history.push_back(cost);
    mu = mu <= opts.mu_min ? 0.0 : mu / opts.mu_factor;
    if (improvement < opts.tolerance * std::max(1.0, std::abs(cost))) {
      c.converged = true;
      break;
    }
  }

  // Final gains at the returned nominal.
  std::optional<BackwardResult> br;
  for (double m = mu;; m = std::max(opts.mu_min, m * opts.mu_factor)) {
    br = backward(p, xs, us, m);
    if (br || m > opts.mu_max) break;
  }
  if (!br) throw std::domain_error("ilqg: could not compute feedback gains");
  c.x_bar = std::move(xs);
  c.u_bar = std::move(us);
  c.k = std::move(br->k);
  c.K = std::move(br->K);
  return c;
}

// ---------------------------------------------------------------------------
// Reaching instantiation

reach::Vec2 goal_of(const reach::EnvConfig& cfg, const reach::Task& task, std::uint64_t episode_seed) {
  return reach::sample_scene(cfg, task, episode_seed).goal();
}

Problem reach_problem(const reach::EnvConfig& cfg, const reach::ArmState& start, const reach::Vec2& goal,
                      std::size_t horizon, const ReachCost& cost, Jacobians jac) {
  Problem p;
  p.state_dim = 4;
  p.control_dim = 2;
  p.horizon = horizon;
  p.x0 = VectorXd(4);
  p.x0 << start.q[0], start.q[1], start.qdot[0], start.qdot[1];
  p.control_limit = cfg.torque_limit;
  p.dynamics = [cfg](const VectorXd& x, const VectorXd& u) {
    const auto y = reach::dynamics<double>(cfg, {x[0], x[1], x[2], x[3]}, {u[0], u[1]});
    VectorXd out(4);
    out << y[0], y[1], y[2], y[3];
    return out;
  };
  if (jac == Jacobians::kExact) {
    p.linearize = [cfg](const VectorXd& x, const VectorXd& u, MatrixXd& a, MatrixXd& b) {
      using D = Dual<6>;
      std::array<D, 4> xd;
      std::array<D, 2> ud;
      for (std::size_t i = 0; i < 4; ++i) xd[i] = D::variable(x[i], i);
      for (std::size_t i = 0; i < 2; ++i) ud[i] = D::variable(u[i], 4 + i);
      const auto y = reach::dynamics<D>(cfg, xd, ud);
      for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 4; ++j) a(i, j) = y[i].d[j];
        for (std::size_t j = 0; j < 2; ++j) b(i, j) = y[i].d[4 + j];
      }
    };
  } else {
    p.linearize = [f = p.dynamics](const VectorXd& x, const VectorXd& u, MatrixXd& a, MatrixXd& b) {
      const double h = 1e-6;
      for (int j = 0; j < 4; ++j) {
        VectorXd xp = x, xm = x;
        xp[j] += h;
        xm[j] -= h;
        a.col(j) = (f(xp, u) - f(xm, u)) / (2 * h);
      }
      for (int j = 0; j < 2; ++j) {
        VectorXd up = u, um = u;
        up[j] += h;
        um[j] -= h;
        b.col(j) = (f(x, up) - f(x, um)) / (2 * h);
      }
    };
  }
  // ||ee - goal||^2, or with smoothing eps > 0 the pseudo-Huber sqrt(d^2 + eps^2) - eps.
  // Gauss-Newton Hessians in both cases.
  const double eps = cost.distance_smoothing;
  auto reach_term = [cfg, goal, eps](const VectorXd& x, double w, bool derivs, CostExpansion& e) {
    const double s0 = std::sin(x[0]), c0 = std::cos(x[0]);
    const double s01 = std::sin(x[0] + x[1]), c01 = std::cos(x[0] + x[1]);
    const double ex = cfg.base[0] + cfg.link1 * c0 + cfg.link2 * c01 - goal[0];
    const double ey = cfg.base[1] + cfg.link1 * s0 + cfg.link2 * s01 - goal[1];
    const double d2 = ex * ex + ey * ey;
    const double f = std::sqrt(d2 + eps * eps);
    e.value += eps > 0 ? w * (f - eps) : w * d2;
    if (!derivs) return;
    Eigen::Matrix<double, 2, 4> j = Eigen::Matrix<double, 2, 4>::Zero();
    j << -cfg.link1 * s0 - cfg.link2 * s01, -cfg.link2 * s01, 0, 0,  //
        cfg.link1 * c0 + cfg.link2 * c01, cfg.link2 * c01, 0, 0;
    const Eigen::Vector2d r(ex, ey);
    if (eps > 0) {
      const Eigen::Matrix2d h = (Eigen::Matrix2d::Identity() - r * r.transpose() / (f * f)) / f;
      e.lx = w * j.transpose() * r / f;
      e.lxx = w * j.transpose() * h * j;
    } else {
      e.lx = 2 * w * j.transpose() * r;
      e.lxx = 2 * w * j.transpose() * j;
    }
  };
  p.running_cost = [reach_term, cost](const VectorXd& x, const VectorXd& u, std::size_t, bool derivs) {
    CostExpansion e;
    reach_term(x, 1.0, derivs, e);
    e.value += cost.control_weight * u.squaredNorm();
    e.value += cost.velocity_weight * x.tail(2).squaredNorm();
    if (derivs) {
      e.lx.tail(2) += 2 * cost.velocity_weight * x.tail(2);
      e.lxx.diagonal().tail(2).array() += 2 * cost.velocity_weight;
      e.lu = 2 * cost.control_weight * u;
      e.luu = 2 * cost.control_weight * MatrixXd::Identity(2, 2);
      e.lux = MatrixXd::Zero(2, 4);
    }
    return e;
  };
  p.terminal_cost = [reach_term, cost](const VectorXd& x, bool derivs) {
    CostExpansion e;
    reach_term(x, cost.terminal_weight, derivs, e);
    return e;
  };
  return p;
}

std::vector<VectorXd> reach_warm_start(const reach::EnvConfig& cfg, const reach::ArmState& start,
                                       const reach::Vec2& goal, std::size_t horizon, double gain) {
  std::vector<VectorXd> us(horizon, VectorXd::Zero(2));
  std::array<double, 4> x{start.q[0], start.q[1], start.qdot[0], start.qdot[1]};
  for (std::size_t t = 0; t < horizon; ++t) {
    const double s0 = std::sin(x[0]), c0 = std::cos(x[0]);
    const double s01 = std::sin(x[0] + x[1]), c01 = std::cos(x[0] + x[1]);
    const double ex = goal[0] - (cfg.base[0] + cfg.link1 * c0 + cfg.link2 * c01);
    const double ey = goal[1] - (cfg.base[1] + cfg.link1 * s0 + cfg.link2 * s01);
    const double g0 = (-cfg.link1 * s0 - cfg.link2 * s01) * ex + (cfg.link1 * c0 + cfg.link2 * c01) * ey;
    const double g1 = -cfg.link2 * s01 * ex + cfg.link2 * c01 * ey;
    us[t] << reach::clamp_torque(gain * g0, cfg.torque_limit), reach::clamp_torque(gain * g1, cfg.torque_limit);
    x = reach::dynamics<double>(cfg, x, {us[t][0], us[t][1]});
  }
  return us;
}

Controller solve_reach(const reach::EnvConfig& cfg, const reach::Task& task, std::uint64_t episode_seed,
                       std::size_t horizon, const Options& opts, const ReachCost& cost, Jacobians jac) {
  const reach::Episode ep = reach::reset(cfg, task, episode_seed);
  const Problem p = reach_problem(cfg, ep.arm, ep.scene.goal(), horizon, cost, jac);
  return solve(p, reach_warm_start(cfg, ep.arm, ep.scene.goal(), horizon), opts);
}

reach::Controller as_reach_controller(const Controller& c) {
  return [&c](const reach::Observation&, const reach::ArmState& s, std::size_t t) {
    VectorXd x(4);
    x << s.q[0], s.q[1], s.qdot[0], s.qdot[1];
    const VectorXd u = c.control(t, x);
    return reach::Vec2{u[0], u[1]};
  };
}

}  // namespace mil::ilqg
