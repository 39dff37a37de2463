#include "mil/demo.hpp"

#include <algorithm>
#include <bit>

#include "mil/random.hpp"

namespace mil {

std::string to_string(Modality m) {
  switch (m) {
    case Modality::kFull:
      return "full";
    case Modality::kVideoState:
      return "video+state";
    case Modality::kVideoOnly:
      return "video-only";
  }
  return "?";
}

Modality modality_from_string(const std::string& s) {
  if (s == "full") return Modality::kFull;
  if (s == "video+state") return Modality::kVideoState;
  if (s == "video-only") return Modality::kVideoOnly;
  throw std::invalid_argument("unknown modality '" + s + "'");
}

reach::Vec2 Demonstration::goal(const reach::EnvConfig& cfg) const {
  return reach::sample_scene(cfg, task, episode_seed).goal();
}

void Demonstration::validate() const {
  if (arm_states.empty()) throw std::invalid_argument("demonstration is empty");
  if (ee.size() != arm_states.size()) throw std::invalid_argument("demonstration lengths disagree");
  if (has_actions() && actions.size() != arm_states.size()) throw std::invalid_argument("demonstration lengths disagree");
  if (!has_actions() && !actions.empty())
    throw std::invalid_argument("actions present in a " + to_string(modality) + " demonstration");
}

Demonstration generate_demo(const reach::EnvConfig& cfg, const ilqg::Controller& controller, const reach::Task& task,
                            std::uint64_t episode_seed, double noise_sigma, Modality modality) {
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("noise_sigma must be non-negative");
  Rng rng(mix_seed(mix_seed(task.seed, episode_seed), std::bit_cast<std::uint64_t>(noise_sigma)));
  const reach::Controller policy = [&](const reach::Observation&, const reach::ArmState& s, std::size_t t) {
    Eigen::VectorXd x(4);
    x << s.q[0], s.q[1], s.qdot[0], s.qdot[1];
    const Eigen::VectorXd u = controller.control(t, x);
    const double e0 = rng.normal(), e1 = rng.normal();
    return reach::Vec2{u[0] + noise_sigma * e0, u[1] + noise_sigma * e1};
  };
  // Observations are not kept; rendering them here would be wasted work.
  reach::EnvConfig blind = cfg;
  blind.vision = false;
  reach::Trajectory tr = reach::rollout(blind, policy, task, episode_seed, controller.horizon());
  Demonstration d;
  d.task = task;
  d.episode_seed = episode_seed;
  d.modality = modality;
  d.arm_states = std::move(tr.arm_states);
  d.ee = std::move(tr.ee);
  if (modality == Modality::kFull) d.actions = std::move(tr.actions);
  return d;
}

std::vector<reach::Observation> demo_observations(const reach::EnvConfig& cfg, const Demonstration& demo) {
  reach::Episode ep = reach::reset(cfg, demo.task, demo.episode_seed);
  std::vector<reach::Observation> out;
  out.reserve(demo.length());
  for (const auto& s : demo.arm_states) {
    ep.arm = s;
    out.push_back(reach::observe(cfg, ep));
    if (demo.modality == Modality::kVideoOnly) std::fill(out.back().state.begin(), out.back().state.end(), 0.0);
  }
  return out;
}

DemoBatch demo_batch(const reach::EnvConfig& cfg, const Demonstration& demo) {
  demo.validate();
  DemoBatch b{reach::to_batch(cfg, demo_observations(cfg, demo)), std::nullopt};
  if (demo.has_actions()) {
    Tensor a({demo.length(), reach::kActionDim});
    for (std::size_t t = 0; t < demo.length(); ++t) {
      a[2 * t] = demo.actions[t][0];
      a[2 * t + 1] = demo.actions[t][1];
    }
    b.actions = std::move(a);
  }
  return b;
}

Demonstration with_modality(Demonstration demo, Modality m) {
  if (m == Modality::kFull && !demo.has_actions()) throw ModalityError("cannot restore actions to an action-free demo");
  demo.modality = m;
  if (m != Modality::kFull) demo.actions.clear();
  return demo;
}

}  // namespace mil
