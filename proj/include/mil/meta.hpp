#pragma once

// Meta-imitation learning: inner losses, gradient-based adaptation from one
// or more demonstrations, the meta-objective and its training loop.

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mil/adam.hpp"
#include "mil/demo.hpp"
#include "mil/policy.hpp"
#include "mil/sgd_step.hpp"

namespace mil::meta {

enum class InnerLoss { kBc, kTwoHead, kActionFree };
std::string to_string(InnerLoss k);
InnerLoss inner_loss_from_string(const std::string& s);

struct TrainConfig {
  double alpha = 0.001;  // inner step
  double beta = 0.001;   // outer (Adam) step
  std::size_t inner_steps = 1;
  std::size_t meta_batch = 5;
  std::optional<ClipInterval> inner_clip;
  ClipInterval meta_clip{-20.0, 20.0};
  InnerLoss inner_loss = InnerLoss::kBc;
  std::size_t shots = 1;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  bool first_order = false;
  bool freeze_z = false;  // keep bt.z fixed in the inner loop

  void validate() const;  // throws std::invalid_argument
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Sum over timesteps of ||f(o_t) - a_t||^2. Throws ModalityError without actions.
ad::Var bc_loss(const ArchitectureConfig& arch, const VarSet& params, const DemoBatch& demo);
// Sum of ||W y_t + b - a_t||^2 through the inner head.
ad::Var twohead_inner_loss(const ArchitectureConfig& arch, const VarSet& params, const DemoBatch& demo);
// Sum of ||W y_t + b||^2; demo actions are never read.
ad::Var actionfree_inner_loss(const ArchitectureConfig& arch, const VarSet& params, const DemoBatch& demo);
ad::Var inner_loss(InnerLoss kind, const ArchitectureConfig& arch, const VarSet& params, const DemoBatch& demo);

// Checks that the demo carries what the inner loss needs (ModalityError) and
// that the architecture has the required head (ConfigMismatch).
void check_inner_loss(InnerLoss kind, const ArchitectureConfig& arch, const DemoBatch& demo);

// Inner-loop adaptation. Per step: per-demo inner-loss gradients, averaged
// over the demos, clipped elementwise, then one step of size alpha. The
// result stays connected to `params` unless config.first_order is set.
VarSet adapt(const ArchitectureConfig& arch, const VarSet& params, const std::vector<const DemoBatch*>& demos,
             const TrainConfig& config);

// The same, detached, on plain values.
ParamSet adapt_values(const ArchitectureConfig& arch, const ParamSet& params,
                      const std::vector<const DemoBatch*>& demos, const TrainConfig& config);

// Makes inner_head.* the very same nodes as head.* (parameter sharing).
VarSet tie_heads(const VarSet& params);

struct TaskSample {
  std::vector<const DemoBatch*> train;  // adaptation demos
  const DemoBatch* validation = nullptr;
};

// Sum over tasks of bc_loss(adapt(theta, train), validation).
ad::Var meta_loss(const ArchitectureConfig& arch, const VarSet& params, const std::vector<TaskSample>& batch,
                  const TrainConfig& config);

struct MetaGradient {
  double loss = 0.0;  // sum over tasks
  ParamSet grad;
};

// Loss and gradient of meta_loss with respect to params, built one task at a
// time and accumulated in task order.
MetaGradient meta_gradient(const ArchitectureConfig& arch, const ParamSet& params, const std::vector<TaskSample>& batch,
                           const TrainConfig& config);

// Prepared demonstrations of one task.
struct TaskData {
  std::vector<DemoBatch> demos;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;       // mean per-task meta-loss over the epoch
  double validation_loss = 0.0;  // mean per-task meta-loss on held-out tasks (NaN if none)
};

struct TrainState {
  ParamSet params;
  AdamState adam;
  std::size_t epoch = 0;  // completed epochs
  std::vector<EpochStats> history;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t epoch, const std::string& what) : std::runtime_error(what), epoch(epoch) {}
  std::size_t epoch;
};

TrainState initial_state(const ParamSet& params, const TrainConfig& config);

// Held-out loss with fixed pairs: demo 0 adapts, demo 1 validates (k-shot
// uses the first k demos and validates on the next one).
double held_out_loss(const ArchitectureConfig& arch, const ParamSet& params, const std::vector<TaskData>& tasks,
                     const TrainConfig& config);

using EpochCallback = std::function<void(const TrainState&)>;

// Loss of one sampled task (conditioning demos plus a target demo). When
// `training` is false only the value is needed.
using TaskLoss = std::function<ad::Var(const VarSet& params, const TaskSample& sample, bool training)>;

// Shared outer loop: per epoch, tasks are shuffled with an RNG derived from
// (seed, epoch) and split into meta-batches; per task, `shots` conditioning
// demos and one distinct target demo are drawn. The summed batch loss is
// differentiated, clipped elementwise to meta_clip and applied with Adam.
TrainState train_loop(const TaskLoss& loss, TrainState state, const std::vector<TaskData>& train_tasks,
                      const std::vector<TaskData>& validation_tasks, const TrainConfig& config,
                      const EpochCallback& on_epoch = {});

// Mean per-task loss with fixed pairs: the first `shots` demos condition,
// the next one is the target. NaN for an empty task list.
double held_out(const TaskLoss& loss, const ParamSet& params, const std::vector<TaskData>& tasks,
                const TrainConfig& config);

// Runs epochs state.epoch .. config.epochs - 1. Each epoch shuffles tasks
// with an RNG derived from (seed, epoch), so resuming from a saved state
// reproduces an uninterrupted run exactly. Throws DivergenceError on a
// non-finite loss and std::invalid_argument on tasks with fewer than
// shots + 1 demos.
TrainState meta_train(const ArchitectureConfig& arch, TrainState state, const std::vector<TaskData>& train_tasks,
                      const std::vector<TaskData>& validation_tasks, const TrainConfig& config,
                      const EpochCallback& on_epoch = {});

// Adapted policy as a plain observation -> action map.
struct AdaptedPolicy {
  ArchitectureConfig arch;
  ParamSet params;
  Tensor act(const ObservationBatch& obs) const { return policy_action(arch, params, obs); }
};

AdaptedPolicy one_shot_policy(const ArchitectureConfig& arch, const ParamSet& params,
                              const std::vector<const DemoBatch*>& demos, const TrainConfig& config);

}  // namespace mil::meta
