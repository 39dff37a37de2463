#include "mil/meta.hpp"

#include <cmath>
#include <numeric>

#include "mil/ops.hpp"
#include "mil/parallel.hpp"
#include "mil/random.hpp"

namespace mil::meta {

std::string to_string(InnerLoss k) {
  switch (k) {
    case InnerLoss::kBc:
      return "bc";
    case InnerLoss::kTwoHead:
      return "two-head";
    case InnerLoss::kActionFree:
      return "action-free";
  }
  return "?";
}

InnerLoss inner_loss_from_string(const std::string& s) {
  if (s == "bc") return InnerLoss::kBc;
  if (s == "two-head") return InnerLoss::kTwoHead;
  if (s == "action-free") return InnerLoss::kActionFree;
  throw std::invalid_argument("unknown inner loss '" + s + "' (expected bc, two-head or action-free)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (!(alpha >= 0.0)) fail("alpha must be non-negative");
  if (!(beta >= 0.0)) fail("beta must be non-negative");
  if (meta_batch == 0) fail("meta_batch must be at least 1");
  if (shots == 0) fail("shots must be at least 1");
  if (inner_clip && inner_clip->lo > inner_clip->hi) fail("inner_clip has lo > hi");
  if (meta_clip.lo > meta_clip.hi) fail("meta_clip has lo > hi");
}

namespace {
nlohmann::json clip_json(const ClipInterval& c) { return nlohmann::json::array({c.lo, c.hi}); }
ClipInterval clip_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 2) throw std::invalid_argument("clip interval must be [lo, hi]");
  return {j[0].get<double>(), j[1].get<double>()};
}
}  // namespace

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"alpha", c.alpha},
                     {"beta", c.beta},
                     {"inner_steps", c.inner_steps},
                     {"meta_batch", c.meta_batch},
                     {"inner_clip", c.inner_clip ? clip_json(*c.inner_clip) : nlohmann::json(nullptr)},
                     {"meta_clip", clip_json(c.meta_clip)},
                     {"inner_loss", to_string(c.inner_loss)},
                     {"shots", c.shots},
                     {"epochs", c.epochs},
                     {"seed", c.seed},
                     {"first_order", c.first_order},
                     {"freeze_z", c.freeze_z}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("alpha", c.alpha);
  get("beta", c.beta);
  get("inner_steps", c.inner_steps);
  get("meta_batch", c.meta_batch);
  if (j.contains("inner_clip") && !j.at("inner_clip").is_null()) c.inner_clip = clip_from(j.at("inner_clip"));
  if (j.contains("meta_clip")) c.meta_clip = clip_from(j.at("meta_clip"));
  if (j.contains("inner_loss")) c.inner_loss = inner_loss_from_string(j.at("inner_loss").get<std::string>());
  get("shots", c.shots);
  get("epochs", c.epochs);
  get("seed", c.seed);
  get("first_order", c.first_order);
  get("freeze_z", c.freeze_z);
}

// ---------------------------------------------------------------------------
// Losses

namespace {

ad::Var squared_error(const ad::Var& pred, const Tensor& target) {
  return ad::sum(ad::square(ad::sub(pred, ad::constant(target))));
}

const Tensor& require_actions(const DemoBatch& demo, const char* who) {
  if (!demo.actions) throw ModalityError(std::string(who) + " needs demonstration actions");
  return *demo.actions;
}

}  // namespace

ad::Var bc_loss(const ArchitectureConfig& arch, const VarSet& params, const DemoBatch& demo) {
  const Tensor& a = require_actions(demo, "behavioral cloning loss");
  return squared_error(policy_forward(arch, params, demo.obs).action, a);
}

ad::Var twohead_inner_loss(const ArchitectureConfig& arch, const VarSet& params, const DemoBatch& demo) {
  if (!arch.two_head) throw ConfigMismatch("two-head inner loss on a single-head architecture");
  const Tensor& a = require_actions(demo, "two-head inner loss");
  return squared_error(inner_head(arch, params, policy_trunk(arch, params, demo.obs)), a);
}

ad::Var actionfree_inner_loss(const ArchitectureConfig& arch, const VarSet& params, const DemoBatch& demo) {
  if (!arch.two_head) throw ConfigMismatch("action-free inner loss on a single-head architecture");
  return ad::sum(ad::square(inner_head(arch, params, policy_trunk(arch, params, demo.obs))));
}

ad::Var inner_loss(InnerLoss kind, const ArchitectureConfig& arch, const VarSet& params, const DemoBatch& demo) {
  switch (kind) {
    case InnerLoss::kBc:
      return bc_loss(arch, params, demo);
    case InnerLoss::kTwoHead:
      return twohead_inner_loss(arch, params, demo);
    case InnerLoss::kActionFree:
      return actionfree_inner_loss(arch, params, demo);
  }
  throw std::logic_error("unreachable");
}

void check_inner_loss(InnerLoss kind, const ArchitectureConfig& arch, const DemoBatch& demo) {
  if (kind != InnerLoss::kBc && !arch.two_head)
    throw ConfigMismatch(to_string(kind) + " inner loss needs a two-head architecture");
  if (kind != InnerLoss::kActionFree && !demo.actions)
    throw ModalityError(to_string(kind) + " inner loss needs demonstrations with actions");
}

// ---------------------------------------------------------------------------
// Adaptation

VarSet adapt(const ArchitectureConfig& arch, const VarSet& params, const std::vector<const DemoBatch*>& demos,
             const TrainConfig& config) {
  if (demos.empty()) throw std::invalid_argument("adapt: no demonstrations");
  for (const DemoBatch* d : demos) check_inner_loss(config.inner_loss, arch, *d);
  const SgdStepOptions step{config.alpha, config.inner_clip, config.first_order};
  // Constant inputs still have to adapt: give them fresh leaves.
  VarSet current = params;
  for (auto& [name, v] : current) {
    if (!v.requires_grad()) v = ad::param(name, v.value());
  }
  for (std::size_t s = 0; s < config.inner_steps; ++s) {
    VarSet updatable = current;
    if (config.freeze_z) updatable.erase("bt.z");
    // Running mean over demos: exact when all demos agree.
    VarSet mean;
    for (std::size_t i = 0; i < demos.size(); ++i) {
      const ad::Var loss = inner_loss(config.inner_loss, arch, current, *demos[i]);
      VarSet g = gradient(loss, updatable, {.create_graph = !config.first_order});
      if (i == 0) {
        mean = std::move(g);
        continue;
      }
      const double w = 1.0 / static_cast<double>(i + 1);
      for (auto& [name, m] : mean) m = ad::add(m, ad::scale(ad::sub(g.at(name), m), w));
    }
    VarSet next = apply_sgd_step(updatable, mean, step);
    if (config.freeze_z && current.count("bt.z")) next.emplace("bt.z", current.at("bt.z"));
    current = std::move(next);
  }
  return current;
}

ParamSet adapt_values(const ArchitectureConfig& arch, const ParamSet& params,
                      const std::vector<const DemoBatch*>& demos, const TrainConfig& config) {
  TrainConfig c = config;
  c.first_order = true;
  return values_of(adapt(arch, make_params(params), demos, c));
}

VarSet tie_heads(const VarSet& params) {
  VarSet out = params;
  out["inner_head.weight"] = params.at("head.weight");
  out["inner_head.bias"] = params.at("head.bias");
  return out;
}

// ---------------------------------------------------------------------------
// Meta-objective

ad::Var meta_loss(const ArchitectureConfig& arch, const VarSet& params, const std::vector<TaskSample>& batch,
                  const TrainConfig& config) {
  if (batch.empty()) throw std::invalid_argument("meta_loss: empty batch");
  std::optional<ad::Var> total;
  for (const TaskSample& task : batch) {
    if (!task.validation) throw std::invalid_argument("meta_loss: task without validation demo");
    const VarSet adapted = adapt(arch, params, task.train, config);
    const ad::Var l = bc_loss(arch, adapted, *task.validation);
    total = total ? ad::add(*total, l) : l;
  }
  return *total;
}

MetaGradient meta_gradient(const ArchitectureConfig& arch, const ParamSet& params, const std::vector<TaskSample>& batch,
                           const TrainConfig& config) {
  if (batch.empty()) throw std::invalid_argument("meta_gradient: empty batch");
  MetaGradient out;
  for (const auto& [name, t] : params) out.grad.emplace(name, Tensor(t.shape()));
  for (const TaskSample& task : batch) {
    const VarSet vars = make_params(params);
    const ad::Var loss = meta_loss(arch, vars, {task}, config);
    const VarSet g = gradient(loss, vars, {.create_graph = false});
    out.loss += loss.value().item();
    for (auto& [name, acc] : out.grad) {
      const Tensor& gv = g.at(name).value();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gv[i];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

TrainState initial_state(const ParamSet& params, const TrainConfig& config) {
  TrainState s;
  s.params = params;
  s.adam = make_adam_state(params, config.beta);
  return s;
}

namespace {

void require_demos(const std::vector<TaskData>& tasks, std::size_t need, const char* which) {
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (tasks[i].demos.size() < need) {
      throw std::invalid_argument(std::string(which) + " task " + std::to_string(i) + " has " +
                                  std::to_string(tasks[i].demos.size()) + " demonstrations; need at least " +
                                  std::to_string(need));
    }
  }
}

}  // namespace

double held_out(const TaskLoss& loss, const ParamSet& params, const std::vector<TaskData>& tasks,
                const TrainConfig& config) {
  if (tasks.empty()) return std::nan("");
  require_demos(tasks, config.shots + 1, "held-out");
  double total = 0.0;
  for (const TaskData& t : tasks) {
    TaskSample s;
    for (std::size_t i = 0; i < config.shots; ++i) s.train.push_back(&t.demos[i]);
    s.validation = &t.demos[config.shots];
    total += loss(make_constants(params), s, false).value().item();
  }
  return total / static_cast<double>(tasks.size());
}

TrainState train_loop(const TaskLoss& loss, TrainState state, const std::vector<TaskData>& train_tasks,
                      const std::vector<TaskData>& validation_tasks, const TrainConfig& config,
                      const EpochCallback& on_epoch) {
  config.validate();
  if (train_tasks.empty()) throw std::invalid_argument("training: no tasks");
  require_demos(train_tasks, config.shots + 1, "meta-train");
  state.adam.learning_rate = config.beta;

  for (std::size_t epoch = state.epoch; epoch < config.epochs; ++epoch) {
    Rng rng(mix_seed(config.seed, epoch));
    std::vector<std::size_t> order(train_tasks.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.meta_batch) {
      const std::size_t end = std::min(order.size(), start + config.meta_batch);
      ParamSet grad;
      for (const auto& [name, t] : state.params) grad.emplace(name, Tensor(t.shape()));
      double batch_loss = 0.0;
      // Task samples are drawn in batch order; graphs are built per task (in
      // parallel) and accumulated in batch order.
      std::vector<TaskSample> samples;
      for (std::size_t i = start; i < end; ++i) {
        const TaskData& task = train_tasks[order[i]];
        std::vector<std::size_t> pick(task.demos.size());
        std::iota(pick.begin(), pick.end(), 0);
        rng.shuffle(pick.begin(), pick.end());
        TaskSample s;
        for (std::size_t k = 0; k < config.shots; ++k) s.train.push_back(&task.demos[pick[k]]);
        s.validation = &task.demos[pick[config.shots]];
        samples.push_back(std::move(s));
      }
      std::vector<double> task_loss(samples.size());
      std::vector<ParamSet> task_grad(samples.size());
      parallel_for(samples.size(), [&](std::size_t i) {
        const VarSet vars = make_params(state.params);
        const ad::Var l = loss(vars, samples[i], true);
        task_grad[i] = values_of(gradient(l, vars, {.create_graph = false}));
        task_loss[i] = l.value().item();
      });
      for (std::size_t i = 0; i < samples.size(); ++i) {
        batch_loss += task_loss[i];
        for (auto& [name, acc] : grad) {
          const Tensor& gv = task_grad[i].at(name);
          for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += gv[j];
        }
      }
      if (!std::isfinite(batch_loss) || !all_finite(grad)) {
        throw DivergenceError(epoch, "loss became non-finite in epoch " + std::to_string(epoch));
      }
      for (auto& [_, g] : grad) g = clip_elementwise(g, config.meta_clip.lo, config.meta_clip.hi);
      auto [adam, params] = adam_step(std::move(state.adam), std::move(state.params), grad);
      state.adam = std::move(adam);
      state.params = std::move(params);
      epoch_loss += batch_loss;
    }
    if (!all_finite(state.params)) {
      throw DivergenceError(epoch, "parameters became non-finite in epoch " + std::to_string(epoch));
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = epoch_loss / static_cast<double>(order.size());
    stats.validation_loss = held_out(loss, state.params, validation_tasks, config);
    state.history.push_back(stats);
    state.epoch = epoch + 1;
    if (on_epoch) on_epoch(state);
  }
  return state;
}

namespace {
TaskLoss mil_loss(const ArchitectureConfig& arch, const TrainConfig& config) {
  return [arch, config](const VarSet& params, const TaskSample& s, bool training) {
    TrainConfig c = config;
    if (!training) c.first_order = true;
    return meta_loss(arch, params, {s}, c);
  };
}
}  // namespace

double held_out_loss(const ArchitectureConfig& arch, const ParamSet& params, const std::vector<TaskData>& tasks,
                     const TrainConfig& config) {
  return held_out(mil_loss(arch, config), params, tasks, config);
}

TrainState meta_train(const ArchitectureConfig& arch, TrainState state, const std::vector<TaskData>& train_tasks,
                      const std::vector<TaskData>& validation_tasks, const TrainConfig& config,
                      const EpochCallback& on_epoch) {
  return train_loop(mil_loss(arch, config), std::move(state), train_tasks, validation_tasks, config, on_epoch);
}

AdaptedPolicy one_shot_policy(const ArchitectureConfig& arch, const ParamSet& params,
                              const std::vector<const DemoBatch*>& demos, const TrainConfig& config) {
  return {arch, adapt_values(arch, params, demos, config)};
}

}  // namespace mil::meta
