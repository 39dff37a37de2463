#pragma once

// Planar two-link reaching environment: a torque-controlled arm, one target
// object and two distractors with distinct colors. Everything here is a pure
// function of (task seed, episode seed, action sequence).

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mil/dual.hpp"
#include "mil/policy.hpp"
#include "mil/tensor.hpp"

namespace mil::reach {

using Vec2 = std::array<double, 2>;
using Color = std::array<double, 3>;

inline constexpr std::size_t kNumObjects = 3;
inline constexpr std::size_t kProprioDim = 4;  // joint angles, end-effector position
inline constexpr std::size_t kStateDim = kProprioDim + kNumObjects * 5;
inline constexpr std::size_t kActionDim = 2;
inline constexpr double kSuccessRadius = 0.05;
inline constexpr std::size_t kSuccessWindow = 10;

enum class Split { kMetaTrain, kMetaTest };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct EnvConfig {
  double dt = 0.05;
  double link1 = 0.1;
  double link2 = 0.1;
  double mass1 = 1.0;
  double mass2 = 1.0;
  double damping = 0.1;
  double torque_limit = 1.0;
  double arena = 0.6;
  Vec2 base{0.3, 0.3};
  Vec2 rest_pose{0.0, 1.5707963267948966};
  // Objects are placed in the reachable annulus around the base.
  double min_object_radius = 0.06;
  double max_object_radius = 0.19;
  double min_object_separation = 0.1;
  double object_radius = 0.025;
  std::size_t horizon = 50;
  bool vision = false;
  std::size_t image_height = 32;
  std::size_t image_width = 40;

  void validate() const;
};

void to_json(nlohmann::json& j, const EnvConfig& c);
void from_json(const nlohmann::json& j, EnvConfig& c);
// FNV-1a over the canonical JSON form, as 16 hex digits.
std::string config_hash(const EnvConfig& c);

struct Task {
  std::uint64_t seed = 0;
  Split split = Split::kMetaTrain;
  Color target_color{};
  std::array<Color, 2> distractor_colors{};
  friend bool operator==(const Task&, const Task&) = default;
};

void to_json(nlohmann::json& j, const Task& t);
void from_json(const nlohmann::json& j, Task& t);

struct ArmState {
  Vec2 q{};
  Vec2 qdot{};
  friend bool operator==(const ArmState&, const ArmState&) = default;
};

// Per-episode scene: object positions (index 0 is the target) and the order
// in which objects appear in the state vector.
struct Scene {
  std::array<Vec2, kNumObjects> positions{};
  std::array<std::size_t, kNumObjects> order{};
  Vec2 goal() const { return positions[0]; }
};

struct Observation {
  std::vector<double> state;    // kStateDim (non-vision) or kProprioDim (vision)
  std::optional<Tensor> image;  // [H, W, 3]
};

class SimulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Color cells: the RGB cube is cut into 4x4x4 cells in a checkerboard;
// meta-train colors come from even cells, meta-test from odd ones, each
// sampled at least 0.05 inside its cell, so colors from different cells are
// at least 0.1 apart.
bool is_meta_test_color(const Color& c);
double color_distance(const Color& a, const Color& b);

Task sample_task(std::uint64_t seed, Split split);
Scene sample_scene(const EnvConfig& cfg, const Task& task, std::uint64_t episode_seed);

struct Episode {
  Task task;
  Scene scene;
  ArmState arm;
};

Episode reset(const EnvConfig& cfg, const Task& task, std::uint64_t episode_seed);

Vec2 end_effector(const EnvConfig& cfg, const Vec2& q);
double clamp_torque(double u, double limit);

// One integration step. Damping is implicit, Coriolis terms explicit.
// Throws SimulationError on a non-finite result.
ArmState step(const EnvConfig& cfg, const ArmState& s, const Vec2& torque);

// The same map on generic scalars (double or Dual) over x = (q, qdot).
template <typename T>
std::array<T, 4> dynamics(const EnvConfig& cfg, const std::array<T, 4>& x, const std::array<T, 2>& u_raw) {
  auto clamp = [&](const T& u) -> T {
    const double v = value_of(u);
    if (v > cfg.torque_limit) return T(cfg.torque_limit);
    if (v < -cfg.torque_limit) return T(-cfg.torque_limit);
    return u;
  };
  using std::cos;
  using std::sin;
  const double lc1 = cfg.link1 / 2, lc2 = cfg.link2 / 2;
  const double i1 = cfg.mass1 * cfg.link1 * cfg.link1 / 12, i2 = cfg.mass2 * cfg.link2 * cfg.link2 / 12;
  const double a1 = i1 + cfg.mass1 * lc1 * lc1 + i2 + cfg.mass2 * (cfg.link1 * cfg.link1 + lc2 * lc2);
  const double a2 = cfg.mass2 * cfg.link1 * lc2;
  const double a3 = i2 + cfg.mass2 * lc2 * lc2;
  const T u0 = clamp(u_raw[0]), u1 = clamp(u_raw[1]);
  const T c2 = cos(x[1]), s2 = sin(x[1]);
  const T m11 = T(a1) + T(2 * a2) * c2, m12 = T(a3) + T(a2) * c2, m22 = T(a3);
  const T h = T(a2) * s2;
  const T cor0 = -h * (T(2.0) * x[2] * x[3] + x[3] * x[3]);
  const T cor1 = h * x[2] * x[2];
  const double dt = cfg.dt, dd = cfg.dt * cfg.damping;
  // (M + dt D) v' = M v + dt (u - c)
  const T r0 = m11 * x[2] + m12 * x[3] + T(dt) * (u0 - cor0);
  const T r1 = m12 * x[2] + m22 * x[3] + T(dt) * (u1 - cor1);
  const T b11 = m11 + T(dd), b12 = m12, b22 = m22 + T(dd);
  const T det = b11 * b22 - b12 * b12;
  const T v0 = (b22 * r0 - b12 * r1) / det;
  const T v1 = (b11 * r1 - b12 * r0) / det;
  return {x[0] + T(dt) * v0, x[1] + T(dt) * v1, v0, v1};
}

template <typename T>
std::array<T, 2> end_effector_generic(const EnvConfig& cfg, const T& q0, const T& q1) {
  using std::cos;
  using std::sin;
  const T q01 = q0 + q1;
  return {T(cfg.base[0]) + T(cfg.link1) * cos(q0) + T(cfg.link2) * cos(q01),
          T(cfg.base[1]) + T(cfg.link1) * sin(q0) + T(cfg.link2) * sin(q01)};
}

double kinetic_energy(const EnvConfig& cfg, const ArmState& s);

Observation observe(const EnvConfig& cfg, const Episode& ep);
Tensor render(const EnvConfig& cfg, const Episode& ep);

// True iff some end-effector position among the last kSuccessWindow lies
// within kSuccessRadius of the goal. Throws std::invalid_argument for
// trajectories shorter than the window.
bool is_success(const std::vector<Vec2>& ee_trajectory, const Vec2& goal);

struct Trajectory {
  std::vector<Observation> observations;  // before each action
  std::vector<ArmState> arm_states;       // before each action
  std::vector<Vec2> actions;              // applied (clamped) torques
  std::vector<Vec2> ee;                   // after each action
  Vec2 goal{};
};

using Controller = std::function<Vec2(const Observation& obs, const ArmState& arm, std::size_t t)>;

Trajectory rollout(const EnvConfig& cfg, const Controller& controller, const Task& task, std::uint64_t episode_seed,
                   std::size_t horizon);

// Stacks observations into a policy batch.
ObservationBatch to_batch(const EnvConfig& cfg, const std::vector<Observation>& obs);

// Policy-facing architecture defaults for this environment.
ArchitectureConfig default_architecture(const EnvConfig& cfg);

}  // namespace mil::reach
