#pragma once

// Noisy expert demonstrations. A demonstration stores the arm trajectory and
// (when the modality carries them) the executed actions; observations are
// rebuilt on demand from (task, episode seed, arm states), which keeps
// datasets small even in vision mode.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mil/ilqg.hpp"
#include "mil/policy.hpp"
#include "mil/reach_env.hpp"

namespace mil {

enum class Modality { kFull, kVideoState, kVideoOnly };
std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

class ModalityError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Demonstration {
  reach::Task task;
  std::uint64_t episode_seed = 0;
  Modality modality = Modality::kFull;
  std::vector<reach::ArmState> arm_states;  // before each action
  std::vector<reach::Vec2> actions;         // executed torques; empty unless modality is full
  std::vector<reach::Vec2> ee;              // after each action

  std::size_t length() const { return arm_states.size(); }
  bool has_actions() const { return modality == Modality::kFull; }
  reach::Vec2 goal(const reach::EnvConfig& cfg) const;
  // Throws std::invalid_argument if lengths disagree or actions are present
  // for an action-free modality (or missing for a full one).
  void validate() const;
};

// Closed-loop rollout of the iLQG controller with N(0, sigma^2 I) noise added
// to every control. Reproducible from (task seed, episode seed, sigma).
Demonstration generate_demo(const reach::EnvConfig& cfg, const ilqg::Controller& controller, const reach::Task& task,
                            std::uint64_t episode_seed, double noise_sigma, Modality modality = Modality::kFull);

// Re-renders the observation sequence. Video-only demos drop proprioception
// (zeros in its place).
std::vector<reach::Observation> demo_observations(const reach::EnvConfig& cfg, const Demonstration& demo);

// Policy batch for the whole demo, plus the [T, action_dim] action tensor.
struct DemoBatch {
  ObservationBatch obs;
  std::optional<Tensor> actions;
};
DemoBatch demo_batch(const reach::EnvConfig& cfg, const Demonstration& demo);

// Drops actions (and for video-only, marks proprio as unavailable).
Demonstration with_modality(Demonstration demo, Modality m);

}  // namespace mil
