#include "mil/reach_env.hpp"

#include <algorithm>
#include <cstdio>

#include "mil/random.hpp"

namespace mil::reach {

namespace {

constexpr double kCell = 0.25;
constexpr double kCellMargin = 0.05;
constexpr std::uint64_t kTaskSalt = 0x7461736bULL;   // "task"
constexpr std::uint64_t kSceneSalt = 0x7363656eULL;  // "scen"

std::array<std::size_t, 3> cell_of(const Color& c) {
  std::array<std::size_t, 3> cell{};
  for (std::size_t i = 0; i < 3; ++i) cell[i] = std::min<std::size_t>(3, static_cast<std::size_t>(c[i] / kCell));
  return cell;
}

std::vector<std::array<std::size_t, 3>> cells_with_parity(std::size_t parity) {
  std::vector<std::array<std::size_t, 3>> out;
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t g = 0; g < 4; ++g)
      for (std::size_t b = 0; b < 4; ++b)
        if ((r + g + b) % 2 == parity) out.push_back({r, g, b});
  return out;
}

double dist(const Vec2& a, const Vec2& b) { return std::hypot(a[0] - b[0], a[1] - b[1]); }

double seg_dist(const Vec2& p, const Vec2& a, const Vec2& b) {
  const double vx = b[0] - a[0], vy = b[1] - a[1];
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((p[0] - a[0]) * vx + (p[1] - a[1]) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p[0] - (a[0] + t * vx), p[1] - (a[1] + t * vy));
}

}  // namespace

std::string to_string(Split s) { return s == Split::kMetaTrain ? "meta-train" : "meta-test"; }

Split split_from_string(const std::string& s) {
  if (s == "meta-train") return Split::kMetaTrain;
  if (s == "meta-test") return Split::kMetaTest;
  throw std::invalid_argument("unknown split '" + s + "'");
}

void EnvConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("env: " + m); };
  if (!(dt > 0)) fail("dt must be positive");
  if (!(link1 > 0 && link2 > 0 && mass1 > 0 && mass2 > 0)) fail("link lengths and masses must be positive");
  if (!(damping >= 0)) fail("damping must be non-negative");
  if (!(torque_limit > 0)) fail("torque_limit must be positive");
  if (!(min_object_radius >= 0 && max_object_radius > min_object_radius)) fail("object radius range is empty");
  if (max_object_radius > link1 + link2) fail("objects placed beyond the arm's reach");
  if (base[0] - max_object_radius < 0 || base[0] + max_object_radius > arena || base[1] - max_object_radius < 0 ||
      base[1] + max_object_radius > arena) {
    fail("object annulus leaves the arena");
  }
  if (horizon < kSuccessWindow) fail("horizon must be at least " + std::to_string(kSuccessWindow));
  if (vision && (image_height == 0 || image_width == 0)) fail("image extents must be positive");
}

void to_json(nlohmann::json& j, const EnvConfig& c) {
  j = nlohmann::json{{"dt", c.dt},
                     {"link1", c.link1},
                     {"link2", c.link2},
                     {"mass1", c.mass1},
                     {"mass2", c.mass2},
                     {"damping", c.damping},
                     {"torque_limit", c.torque_limit},
                     {"arena", c.arena},
                     {"base", c.base},
                     {"rest_pose", c.rest_pose},
                     {"min_object_radius", c.min_object_radius},
                     {"max_object_radius", c.max_object_radius},
                     {"min_object_separation", c.min_object_separation},
                     {"object_radius", c.object_radius},
                     {"horizon", c.horizon},
                     {"vision", c.vision},
                     {"image_height", c.image_height},
                     {"image_width", c.image_width}};
}

void from_json(const nlohmann::json& j, EnvConfig& c) {
  c = EnvConfig{};
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("dt", c.dt);
  get("link1", c.link1);
  get("link2", c.link2);
  get("mass1", c.mass1);
  get("mass2", c.mass2);
  get("damping", c.damping);
  get("torque_limit", c.torque_limit);
  get("arena", c.arena);
  get("base", c.base);
  get("rest_pose", c.rest_pose);
  get("min_object_radius", c.min_object_radius);
  get("max_object_radius", c.max_object_radius);
  get("min_object_separation", c.min_object_separation);
  get("object_radius", c.object_radius);
  get("horizon", c.horizon);
  get("vision", c.vision);
  get("image_height", c.image_height);
  get("image_width", c.image_width);
}

std::string config_hash(const EnvConfig& c) {
  const std::string s = nlohmann::json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void to_json(nlohmann::json& j, const Task& t) {
  j = nlohmann::json{{"seed", t.seed},
                     {"split", to_string(t.split)},
                     {"target_color", t.target_color},
                     {"distractor_colors", t.distractor_colors}};
}

void from_json(const nlohmann::json& j, Task& t) {
  j.at("seed").get_to(t.seed);
  t.split = split_from_string(j.at("split").get<std::string>());
  j.at("target_color").get_to(t.target_color);
  j.at("distractor_colors").get_to(t.distractor_colors);
}

bool is_meta_test_color(const Color& c) {
  auto cell = cell_of(c);
  return (cell[0] + cell[1] + cell[2]) % 2 == 1;
}

double color_distance(const Color& a, const Color& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

Task sample_task(std::uint64_t seed, Split split) {
  Rng rng(mix_seed(seed, kTaskSalt + (split == Split::kMetaTest ? 1 : 0)));
  auto cells = cells_with_parity(split == Split::kMetaTest ? 1 : 0);
  rng.shuffle(cells.begin(), cells.end());
  auto sample_in = [&rng](const std::array<std::size_t, 3>& cell) {
    Color c{};
    for (std::size_t i = 0; i < 3; ++i) {
      c[i] = rng.uniform(cell[i] * kCell + kCellMargin, (cell[i] + 1) * kCell - kCellMargin);
    }
    return c;
  };
  Task t;
  t.seed = seed;
  t.split = split;
  t.target_color = sample_in(cells[0]);
  t.distractor_colors = {sample_in(cells[1]), sample_in(cells[2])};
  return t;
}

Scene sample_scene(const EnvConfig& cfg, const Task& task, std::uint64_t episode_seed) {
  Rng rng(mix_seed(mix_seed(task.seed, kSceneSalt), episode_seed));
  Scene s;
  for (std::size_t k = 0; k < kNumObjects; ++k) {
    for (int attempt = 0;; ++attempt) {
      // Uniform over the annulus area.
      const double r2lo = cfg.min_object_radius * cfg.min_object_radius;
      const double r2hi = cfg.max_object_radius * cfg.max_object_radius;
      const double r = std::sqrt(rng.uniform(r2lo, r2hi));
      const double a = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      const Vec2 p{cfg.base[0] + r * std::cos(a), cfg.base[1] + r * std::sin(a)};
      bool ok = true;
      for (std::size_t m = 0; m < k; ++m) ok = ok && dist(p, s.positions[m]) >= cfg.min_object_separation;
      if (ok || attempt > 10000) {
        s.positions[k] = p;
        break;
      }
    }
  }
  s.order = {0, 1, 2};
  rng.shuffle(s.order.begin(), s.order.end());
  return s;
}

Episode reset(const EnvConfig& cfg, const Task& task, std::uint64_t episode_seed) {
  Episode ep;
  ep.task = task;
  ep.scene = sample_scene(cfg, task, episode_seed);
  ep.arm.q = cfg.rest_pose;
  ep.arm.qdot = {0.0, 0.0};
  return ep;
}

Vec2 end_effector(const EnvConfig& cfg, const Vec2& q) {
  auto e = end_effector_generic<double>(cfg, q[0], q[1]);
  return {e[0], e[1]};
}

double clamp_torque(double u, double limit) { return std::clamp(u, -limit, limit); }

ArmState step(const EnvConfig& cfg, const ArmState& s, const Vec2& torque) {
  if (!std::isfinite(torque[0]) || !std::isfinite(torque[1])) throw SimulationError("non-finite torque");
  auto x = dynamics<double>(cfg, {s.q[0], s.q[1], s.qdot[0], s.qdot[1]}, {torque[0], torque[1]});
  for (double v : x) {
    if (!std::isfinite(v)) throw SimulationError("simulator diverged");
  }
  return {{x[0], x[1]}, {x[2], x[3]}};
}

double kinetic_energy(const EnvConfig& cfg, const ArmState& s) {
  const double lc1 = cfg.link1 / 2, lc2 = cfg.link2 / 2;
  const double i1 = cfg.mass1 * cfg.link1 * cfg.link1 / 12, i2 = cfg.mass2 * cfg.link2 * cfg.link2 / 12;
  const double a1 = i1 + cfg.mass1 * lc1 * lc1 + i2 + cfg.mass2 * (cfg.link1 * cfg.link1 + lc2 * lc2);
  const double a2 = cfg.mass2 * cfg.link1 * lc2;
  const double a3 = i2 + cfg.mass2 * lc2 * lc2;
  const double c2 = std::cos(s.q[1]);
  const double m11 = a1 + 2 * a2 * c2, m12 = a3 + a2 * c2, m22 = a3;
  const double v0 = s.qdot[0], v1 = s.qdot[1];
  return 0.5 * (m11 * v0 * v0 + 2 * m12 * v0 * v1 + m22 * v1 * v1);
}

Observation observe(const EnvConfig& cfg, const Episode& ep) {
  Observation o;
  const Vec2 ee = end_effector(cfg, ep.arm.q);
  o.state = {ep.arm.q[0], ep.arm.q[1], ee[0], ee[1]};
  if (cfg.vision) {
    o.image = render(cfg, ep);
    return o;
  }
  for (std::size_t k : ep.scene.order) {
    const Color& c = k == 0 ? ep.task.target_color : ep.task.distractor_colors[k - 1];
    o.state.insert(o.state.end(), {ep.scene.positions[k][0], ep.scene.positions[k][1], c[0], c[1], c[2]});
  }
  return o;
}

Tensor render(const EnvConfig& cfg, const Episode& ep) {
  const std::size_t h = cfg.image_height, w = cfg.image_width;
  Tensor img({h, w, 3});
  const double px = cfg.arena / static_cast<double>(w), py = cfg.arena / static_cast<double>(h);
  const double half_width = 0.5 * std::max(px, py);
  const Vec2 elbow{cfg.base[0] + cfg.link1 * std::cos(ep.arm.q[0]), cfg.base[1] + cfg.link1 * std::sin(ep.arm.q[0])};
  const Vec2 ee = end_effector(cfg, ep.arm.q);
  auto center = [&](std::size_t r, std::size_t c) -> Vec2 {
    return {(static_cast<double>(c) + 0.5) * px, cfg.arena - (static_cast<double>(r) + 0.5) * py};
  };
  auto put = [&](std::size_t r, std::size_t c, const Color& col) {
    for (std::size_t ch = 0; ch < 3; ++ch) img[(r * w + c) * 3 + ch] = col[ch];
  };
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const Vec2 p = center(r, c);
      if (seg_dist(p, cfg.base, elbow) <= half_width || seg_dist(p, elbow, ee) <= half_width) put(r, c, {0.5, 0.5, 0.5});
    }
  }
  for (std::size_t k = 0; k < kNumObjects; ++k) {
    const Color& col = k == 0 ? ep.task.target_color : ep.task.distractor_colors[k - 1];
    const Vec2& o = ep.scene.positions[k];
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        if (dist(center(r, c), o) <= cfg.object_radius) put(r, c, col);
      }
    }
    const auto oc = std::min(w - 1, static_cast<std::size_t>(o[0] / px));
    const auto orow = std::min(h - 1, static_cast<std::size_t>((cfg.arena - o[1]) / py));
    put(orow, oc, col);
  }
  return img;
}

bool is_success(const std::vector<Vec2>& ee_trajectory, const Vec2& goal) {
  if (ee_trajectory.size() < kSuccessWindow) {
    throw std::invalid_argument("success check needs at least " + std::to_string(kSuccessWindow) + " timesteps");
  }
  for (std::size_t t = ee_trajectory.size() - kSuccessWindow; t < ee_trajectory.size(); ++t) {
    if (dist(ee_trajectory[t], goal) <= kSuccessRadius) return true;
  }
  return false;
}

Trajectory rollout(const EnvConfig& cfg, const Controller& controller, const Task& task, std::uint64_t episode_seed,
                   std::size_t horizon) {
  if (horizon < kSuccessWindow) throw std::invalid_argument("rollout horizon shorter than the success window");
  Episode ep = reset(cfg, task, episode_seed);
  Trajectory traj;
  traj.goal = ep.scene.goal();
  traj.observations.reserve(horizon);
  for (std::size_t t = 0; t < horizon; ++t) {
    Observation obs = observe(cfg, ep);
    const Vec2 u = controller(obs, ep.arm, t);
    const Vec2 applied{clamp_torque(u[0], cfg.torque_limit), clamp_torque(u[1], cfg.torque_limit)};
    traj.arm_states.push_back(ep.arm);
    traj.observations.push_back(std::move(obs));
    traj.actions.push_back(applied);
    ep.arm = step(cfg, ep.arm, applied);
    traj.ee.push_back(end_effector(cfg, ep.arm.q));
  }
  return traj;
}

ObservationBatch to_batch(const EnvConfig& cfg, const std::vector<Observation>& obs) {
  const std::size_t n = obs.size();
  const std::size_t d = cfg.vision ? kProprioDim : kStateDim;
  ObservationBatch b{Tensor({n, d}), std::nullopt};
  for (std::size_t i = 0; i < n; ++i) {
    if (obs[i].state.size() != d) throw ConfigMismatch("observation width does not match the environment");
    std::copy(obs[i].state.begin(), obs[i].state.end(), b.state.values().begin() + i * d);
  }
  if (cfg.vision) {
    const std::size_t per = cfg.image_height * cfg.image_width * 3;
    Tensor img({n, cfg.image_height, cfg.image_width, 3});
    for (std::size_t i = 0; i < n; ++i) {
      if (!obs[i].image || obs[i].image->size() != per) throw ConfigMismatch("observation image missing or misshapen");
      std::copy(obs[i].image->values().begin(), obs[i].image->values().end(), img.values().begin() + i * per);
    }
    b.image = std::move(img);
  }
  return b;
}

ArchitectureConfig default_architecture(const EnvConfig& cfg) {
  ArchitectureConfig a;
  a.vision = cfg.vision;
  a.image_height = cfg.image_height;
  a.image_width = cfg.image_width;
  a.image_channels = 3;
  a.state_dim = cfg.vision ? kProprioDim : kStateDim;
  a.action_dim = kActionDim;
  return a;
}

}  // namespace mil::reach
