#pragma once

// Iterative LQG trajectory optimization on a generic discrete-time problem,
// plus the reaching-task instantiation used to produce expert controllers.

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "mil/reach_env.hpp"

namespace mil::ilqg {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Second-order expansion of a cost term around (x, u). Terminal terms leave
// the u-parts empty.
struct CostExpansion {
  double value = 0.0;
  VectorXd lx, lu;
  MatrixXd lxx, luu, lux;
};

struct Problem {
  std::size_t state_dim = 0;
  std::size_t control_dim = 0;
  std::size_t horizon = 0;
  VectorXd x0;
  std::function<VectorXd(const VectorXd& x, const VectorXd& u)> dynamics;
  // Fills A = df/dx, B = df/du.
  std::function<void(const VectorXd& x, const VectorXd& u, MatrixXd& a, MatrixXd& b)> linearize;
  // Running cost at step t; `derivatives` false means only value is needed.
  std::function<CostExpansion(const VectorXd& x, const VectorXd& u, std::size_t t, bool derivatives)> running_cost;
  std::function<CostExpansion(const VectorXd& x, bool derivatives)> terminal_cost;
  // Symmetric box on each control coordinate, applied in the forward pass.
  std::optional<double> control_limit;
};

struct Options {
  std::size_t max_iterations = 100;
  double tolerance = 1e-7;  // relative cost improvement that counts as converged
  std::size_t max_backtracks = 12;
  double mu_min = 1e-6;
  double mu_max = 1e10;
  double mu_factor = 10.0;
};

struct Controller {
  std::vector<VectorXd> x_bar;  // T + 1 nominal states
  std::vector<VectorXd> u_bar;  // T nominal controls
  std::vector<VectorXd> k;      // T feedforward terms
  std::vector<MatrixXd> K;      // T feedback gains
  std::vector<double> cost_history;  // initial cost, then one entry per accepted iteration
  std::size_t iterations = 0;
  std::size_t regularization_events = 0;  // backward passes run with mu > 0
  bool converged = false;
  bool line_search_failed = false;  // best-so-far returned

  std::size_t horizon() const { return u_bar.size(); }
  double cost() const { return cost_history.back(); }
  // u_t = u_bar_t + k_t + K_t (x - x_bar_t), clamped to the problem's limit by the caller.
  VectorXd control(std::size_t t, const VectorXd& x) const;
};

double trajectory_cost(const Problem& p, const std::vector<VectorXd>& xs, const std::vector<VectorXd>& us);

Controller solve(const Problem& p, std::vector<VectorXd> u_init, const Options& opts = {});

// Reaching-task problem: running ||ee - goal||^2 + control_weight ||u||^2
// + velocity_weight ||qdot||^2, terminal terminal_weight ||ee - goal||^2.
// Gauss-Newton cost Hessians.
struct ReachCost {
  double control_weight = 0.01;
  double velocity_weight = 0.0;
  double terminal_weight = 10.0;
  // > 0 replaces ||ee - goal||^2 by sqrt(||ee - goal||^2 + s^2) - s.
  double distance_smoothing = 0.0;
};

enum class Jacobians { kExact, kFiniteDifference };

reach::Vec2 goal_of(const reach::EnvConfig& cfg, const reach::Task& task, std::uint64_t episode_seed);

Problem reach_problem(const reach::EnvConfig& cfg, const reach::ArmState& start, const reach::Vec2& goal,
                      std::size_t horizon, const ReachCost& cost = {}, Jacobians jac = Jacobians::kExact);

// Initial control sequence from a saturated Jacobian-transpose controller,
// u = clamp(gain J'(goal - ee)), rolled out through the dynamics.
std::vector<VectorXd> reach_warm_start(const reach::EnvConfig& cfg, const reach::ArmState& start,
                                       const reach::Vec2& goal, std::size_t horizon, double gain = 30.0);

// Solves for the scene of (task, episode_seed) from the reset pose, starting
// from reach_warm_start.
Controller solve_reach(const reach::EnvConfig& cfg, const reach::Task& task, std::uint64_t episode_seed,
                       std::size_t horizon, const Options& opts = {}, const ReachCost& cost = {},
                       Jacobians jac = Jacobians::kExact);

// Closed-loop reach controller (no noise), usable with reach::rollout.
reach::Controller as_reach_controller(const Controller& c);

}  // namespace mil::ilqg
