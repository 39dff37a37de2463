#include "mil/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "mil/random.hpp"

namespace mil {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'M', 'I', 'L', 'D', 'A', 'T', 'A', '\0'};
constexpr std::size_t kHeaderSize = 8 + 4 + 4 + 8;
constexpr const char* kDatasetFormat = "mil-demo-dataset";
constexpr const char* kModelFormat = "mil-model";
constexpr const char* kCheckpointFormat = "mil-checkpoint";

// Little-endian byte helpers.
template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const std::string& in, std::size_t at) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

void put_f64(std::string& out, double v) { put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v)); }
double get_f64(const std::string& in, std::size_t at) { return std::bit_cast<double>(get_le<std::uint64_t>(in, at)); }

std::size_t doubles_per_step(bool has_actions) { return 4 + 2 + (has_actions ? 2 : 0); }

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Dataset validation

void DemoDataset::validate() const {
  auto check_task = [](const DatasetTask& t, reach::Split split, const std::string& where) {
    if (t.task.split != split) throw DatasetError(where + ": task is tagged " + reach::to_string(t.task.split));
    std::vector<reach::Color> colors{t.task.target_color, t.task.distractor_colors[0], t.task.distractor_colors[1]};
    for (const auto& c : colors) {
      if (reach::is_meta_test_color(c) != (split == reach::Split::kMetaTest)) {
        throw DatasetError(where + ": color outside the " + reach::to_string(split) + " palette");
      }
    }
    for (std::size_t d = 0; d < t.demos.size(); ++d) {
      const Demonstration& demo = t.demos[d];
      if (!(demo.task == t.task)) throw DatasetError(where + " demo " + std::to_string(d) + ": task mismatch");
      try {
        demo.validate();
      } catch (const std::invalid_argument& e) {
        throw DatasetError(where + " demo " + std::to_string(d) + ": " + e.what());
      }
    }
  };
  for (std::size_t i = 0; i < meta_train.size(); ++i) {
    const std::string where = "meta-train task " + std::to_string(i);
    check_task(meta_train[i], reach::Split::kMetaTrain, where);
    if (meta_train[i].demos.size() < 2) {
      throw DatasetError(where + " has " + std::to_string(meta_train[i].demos.size()) +
                         " demonstrations; meta-training needs at least 2 per task");
    }
  }
  for (std::size_t i = 0; i < meta_test.size(); ++i) {
    check_task(meta_test[i], reach::Split::kMetaTest, "meta-test task " + std::to_string(i));
  }
}

// ---------------------------------------------------------------------------
// Dataset file

void write_dataset(const DemoDataset& data, const fs::path& path) {
  data.validate();
  std::string payload;
  json tasks = json::array();
  std::size_t offset = 0, demo_count = 0;
  json split_seeds{{"meta_train", json::array()}, {"meta_test", json::array()}};
  auto emit = [&](const DatasetTask& t) {
    json demos = json::array();
    for (const Demonstration& d : t.demos) {
      const bool acts = d.has_actions();
      demos.push_back({{"episode_seed", d.episode_seed},
                       {"modality", to_string(d.modality)},
                       {"length", d.length()},
                       {"has_actions", acts},
                       {"offset", offset}});
      for (const auto& s : d.arm_states) {
        put_f64(payload, s.q[0]);
        put_f64(payload, s.q[1]);
        put_f64(payload, s.qdot[0]);
        put_f64(payload, s.qdot[1]);
      }
      for (const auto& e : d.ee) {
        put_f64(payload, e[0]);
        put_f64(payload, e[1]);
      }
      for (const auto& a : d.actions) {
        put_f64(payload, a[0]);
        put_f64(payload, a[1]);
      }
      offset += d.length() * doubles_per_step(acts);
      ++demo_count;
    }
    split_seeds[t.task.split == reach::Split::kMetaTrain ? "meta_train" : "meta_test"].push_back(t.task.seed);
    tasks.push_back({{"task", t.task}, {"demos", std::move(demos)}});
  };
  for (const auto& t : data.meta_train) emit(t);
  for (const auto& t : data.meta_test) emit(t);

  const json manifest{{"format", kDatasetFormat},
                      {"version", kDatasetVersion},
                      {"env_config", data.env},
                      {"env_hash", reach::config_hash(data.env)},
                      {"noise_sigma", data.noise_sigma},
                      {"counts",
                       {{"meta_train_tasks", data.meta_train.size()},
                        {"meta_test_tasks", data.meta_test.size()},
                        {"demos", demo_count},
                        {"payload_doubles", offset}}},
                      {"splits", std::move(split_seeds)},
                      {"tasks", std::move(tasks)},
                      {"info", data.info}};
  const std::string text = manifest.dump();

  std::string bytes(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(bytes, kDatasetVersion);
  put_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(text.size()));
  put_le<std::uint64_t>(bytes, payload.size());
  bytes += text;
  bytes += payload;
  put_le<std::uint64_t>(bytes, fnv1a64(bytes.data(), bytes.size()));
  write_file(path, bytes);
}

ReadResult read_dataset(const fs::path& path, const ReadOptions& opts) {
  const std::string bytes = read_file(path);
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw DatasetError(path.string() + ": not a demonstration dataset");
  }
  if (bytes.size() < kHeaderSize) throw DatasetChecksumError(path.string() + ": truncated header");
  const auto version = get_le<std::uint32_t>(bytes, 8);
  if (version != kDatasetVersion) {
    throw DatasetVersionError(path.string() + ": unknown dataset version " + std::to_string(version));
  }
  const std::size_t manifest_size = get_le<std::uint32_t>(bytes, 12);
  const std::uint64_t payload_size = get_le<std::uint64_t>(bytes, 16);
  const std::uint64_t expected_size = kHeaderSize + manifest_size + payload_size + 8;
  if (bytes.size() != expected_size) {
    throw DatasetChecksumError(path.string() + ": checksum mismatch (file is " + std::to_string(bytes.size()) +
                               " bytes, header declares " + std::to_string(expected_size) + ")");
  }
  const std::size_t body = bytes.size() - 8;
  if (fnv1a64(bytes.data(), body) != get_le<std::uint64_t>(bytes, body)) {
    throw DatasetChecksumError(path.string() + ": checksum mismatch");
  }

  ReadResult out;
  json manifest;
  try {
    manifest = json::parse(bytes.substr(kHeaderSize, manifest_size));
  } catch (const json::exception& e) {
    throw DatasetError(path.string() + ": bad manifest: " + e.what());
  }
  DemoDataset& data = out.data;
  try {
    if (manifest.at("format") != kDatasetFormat) throw DatasetError(path.string() + ": unexpected format tag");
    manifest.at("env_config").get_to(data.env);
    data.noise_sigma = manifest.at("noise_sigma").get<double>();
    if (manifest.contains("info")) data.info = manifest.at("info");
    const std::string stored_hash = manifest.at("env_hash").get<std::string>();
    if (stored_hash != reach::config_hash(data.env)) {
      throw DatasetError(path.string() + ": stored environment hash does not match the stored environment config");
    }
    if (opts.expected_env) {
      const std::string want = reach::config_hash(*opts.expected_env);
      if (want != stored_hash) {
        const std::string msg = path.string() + ": environment hash mismatch (dataset " + stored_hash +
                                ", configuration " + want + ")";
        if (!opts.allow_env_mismatch) throw EnvHashMismatch(msg);
        out.warnings.push_back(msg);
      }
    }

    const std::size_t doubles = payload_size / 8;
    for (const json& jt : manifest.at("tasks")) {
      DatasetTask t;
      jt.at("task").get_to(t.task);
      for (const json& jd : jt.at("demos")) {
        Demonstration d;
        d.task = t.task;
        d.episode_seed = jd.at("episode_seed").get<std::uint64_t>();
        d.modality = modality_from_string(jd.at("modality").get<std::string>());
        const auto len = jd.at("length").get<std::size_t>();
        const bool acts = jd.at("has_actions").get<bool>();
        const auto off = jd.at("offset").get<std::size_t>();
        if (acts != d.has_actions()) throw DatasetError("demo action flag disagrees with its modality");
        if (off + len * doubles_per_step(acts) > doubles) throw DatasetError("demo extends past the payload");
        std::size_t at = kHeaderSize + manifest_size + off * 8;
        auto next = [&] {
          const double v = get_f64(bytes, at);
          at += 8;
          return v;
        };
        d.arm_states.resize(len);
        for (auto& s : d.arm_states) {
          s.q[0] = next();
          s.q[1] = next();
          s.qdot[0] = next();
          s.qdot[1] = next();
        }
        d.ee.resize(len);
        for (auto& e : d.ee) {
          e[0] = next();
          e[1] = next();
        }
        if (acts) {
          d.actions.resize(len);
          for (auto& a : d.actions) {
            a[0] = next();
            a[1] = next();
          }
        }
        t.demos.push_back(std::move(d));
      }
      (t.task.split == reach::Split::kMetaTrain ? data.meta_train : data.meta_test).push_back(std::move(t));
    }
    const json& counts = manifest.at("counts");
    if (counts.at("meta_train_tasks").get<std::size_t>() != data.meta_train.size() ||
        counts.at("meta_test_tasks").get<std::size_t>() != data.meta_test.size()) {
      throw DatasetError("task counts disagree with the manifest");
    }
    // Split manifests must list exactly the tasks found under each tag.
    auto listed = [&](const char* key, const std::vector<DatasetTask>& tasks) {
      std::vector<std::uint64_t> want = manifest.at("splits").at(key).get<std::vector<std::uint64_t>>();
      std::vector<std::uint64_t> got;
      for (const auto& t : tasks) got.push_back(t.task.seed);
      if (want != got) throw DatasetError(std::string("split manifest ") + key + " disagrees with the task list");
    };
    listed("meta_train", data.meta_train);
    listed("meta_test", data.meta_test);
  } catch (const json::exception& e) {
    throw DatasetError(path.string() + ": bad manifest: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw DatasetError(path.string() + ": " + e.what());
  }
  data.validate();
  return out;
}

std::vector<meta::TaskData> prepare_tasks(const reach::EnvConfig& env, const std::vector<DatasetTask>& tasks) {
  std::vector<meta::TaskData> out(tasks.size());
  parallel_for(tasks.size(), [&](std::size_t i) {
    for (const auto& d : tasks[i].demos) out[i].demos.push_back(demo_batch(env, d));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Generation

void GenerateConfig::validate() const {
  env.validate();
  auto fail = [](const std::string& m) { throw std::invalid_argument("generate: " + m); };
  if (train_tasks == 0) fail("train_tasks must be at least 1");
  if (demos_per_train_task < 2) {
    fail("demos_per_train_task is " + std::to_string(demos_per_train_task) +
         "; meta-training needs at least 2 demonstrations per task");
  }
  if (test_tasks == 0) fail("test_tasks must be at least 1");
  if (demos_per_test_task < 2) fail("demos_per_test_task must be at least 2 (adaptation plus validation)");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) fail("noise_sigma must be finite and >= 0");
  if (!(min_expert_success >= 0.0 && min_expert_success <= 1.0)) fail("min_expert_success must lie in [0, 1]");
  if (ilqg.max_iterations == 0) fail("ilqg.max_iterations must be at least 1");
}

void to_json(json& j, const GenerateConfig& c) {
  j = json{{"env", c.env},
           {"train_tasks", c.train_tasks},
           {"demos_per_train_task", c.demos_per_train_task},
           {"test_tasks", c.test_tasks},
           {"demos_per_test_task", c.demos_per_test_task},
           {"noise_sigma", c.noise_sigma},
           {"seed", c.seed},
           {"ilqg_iterations", c.ilqg.max_iterations},
           {"min_expert_success", c.min_expert_success}};
}

void from_json(const json& j, GenerateConfig& c) {
  static const std::set<std::string> known{"env",         "train_tasks", "demos_per_train_task", "test_tasks",
                                           "demos_per_test_task", "noise_sigma", "seed", "ilqg_iterations",
                                           "min_expert_success"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("generate config: unknown field '" + key + "'");
  }
  c = GenerateConfig{};
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("env", c.env);
  get("train_tasks", c.train_tasks);
  get("demos_per_train_task", c.demos_per_train_task);
  get("test_tasks", c.test_tasks);
  get("demos_per_test_task", c.demos_per_test_task);
  get("noise_sigma", c.noise_sigma);
  get("seed", c.seed);
  get("ilqg_iterations", c.ilqg.max_iterations);
  get("min_expert_success", c.min_expert_success);
}

double GenerateResult::expert_success_rate() const {
  return expert_trials == 0 ? 0.0 : static_cast<double>(expert_successes) / static_cast<double>(expert_trials);
}

GenerateResult generate_dataset(const GenerateConfig& config) {
  config.validate();
  struct Job {
    reach::Split split;
    std::size_t index;
    std::size_t demos;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < config.train_tasks; ++i) jobs.push_back({reach::Split::kMetaTrain, i, config.demos_per_train_task});
  for (std::size_t i = 0; i < config.test_tasks; ++i) jobs.push_back({reach::Split::kMetaTest, i, config.demos_per_test_task});

  struct Out {
    DatasetTask task;
    std::size_t expert_ok = 0, demo_ok = 0;
  };
  std::vector<Out> out(jobs.size());
  const reach::EnvConfig& env = config.env;
  parallel_for(jobs.size(), [&](std::size_t j) {
    const Job& job = jobs[j];
    Out& o = out[j];
    o.task.task = reach::sample_task(mix_seed(config.seed, job.index), job.split);
    for (std::uint64_t e = 0; e < job.demos; ++e) {
      const auto controller = ilqg::solve_reach(env, o.task.task, e, env.horizon, config.ilqg);
      const Demonstration clean = generate_demo(env, controller, o.task.task, e, 0.0);
      o.expert_ok += reach::is_success(clean.ee, clean.goal(env));
      Demonstration d = generate_demo(env, controller, o.task.task, e, config.noise_sigma);
      o.demo_ok += reach::is_success(d.ee, d.goal(env));
      o.task.demos.push_back(std::move(d));
    }
  });

  GenerateResult r;
  r.data.env = env;
  r.data.noise_sigma = config.noise_sigma;
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    r.expert_successes += out[j].expert_ok;
    r.demo_successes += out[j].demo_ok;
    r.expert_trials += jobs[j].demos;
    (jobs[j].split == reach::Split::kMetaTrain ? r.data.meta_train : r.data.meta_test).push_back(std::move(out[j].task));
  }
  json cfg = config;
  cfg.erase("env");  // stored separately in the manifest
  r.data.info = json{{"generate_config", cfg},
                     {"expert_successes", r.expert_successes},
                     {"expert_trials", r.expert_trials},
                     {"demo_successes", r.demo_successes}};
  return r;
}

// ---------------------------------------------------------------------------
// Models

std::string to_string(Method m) {
  switch (m) {
    case Method::kMil:
      return "mil";
    case Method::kContextual:
      return "contextual";
    case Method::kLstm:
      return "lstm";
    case Method::kRandom:
      return "random";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  if (s == "mil") return Method::kMil;
  if (s == "contextual") return Method::kContextual;
  if (s == "lstm") return Method::kLstm;
  if (s == "random") return Method::kRandom;
  throw std::invalid_argument("unknown method '" + s + "' (expected mil, contextual, lstm or random)");
}

ArchitectureConfig network_arch(const Model& m) {
  switch (m.method) {
    case Method::kContextual:
      return baselines::contextual_arch(m.arch);
    case Method::kLstm: {
      ArchitectureConfig a = m.arch;
      a.two_head = false;
      return a;
    }
    default:
      return m.arch;
  }
}

baselines::LstmConfig lstm_config(const Model& m) { return {network_arch(m), m.lstm_width}; }

Model init_model(Method method, const ArchitectureConfig& arch, const meta::TrainConfig& train,
                 const reach::EnvConfig& env, std::size_t lstm_width) {
  Model m;
  m.method = method;
  m.arch = arch;
  m.arch.two_head = method == Method::kMil && train.inner_loss != meta::InnerLoss::kBc;
  m.lstm_width = lstm_width;
  m.train = train;
  m.env_hash = reach::config_hash(env);
  switch (method) {
    case Method::kMil:
    case Method::kContextual:
      m.params = init_policy_params(network_arch(m), train.seed);
      break;
    case Method::kLstm:
      m.params = baselines::init_lstm_params(lstm_config(m), train.seed);
      break;
    case Method::kRandom:
      break;
  }
  return m;
}

meta::TaskLoss training_loss(const Model& m) {
  switch (m.method) {
    case Method::kMil: {
      const ArchitectureConfig arch = m.arch;
      const meta::TrainConfig cfg = m.train;
      return [arch, cfg](const VarSet& params, const meta::TaskSample& s, bool training) {
        meta::TrainConfig c = cfg;
        if (!training) c.first_order = true;
        return meta::meta_loss(arch, params, {s}, c);
      };
    }
    case Method::kContextual:
      return baselines::contextual_loss(network_arch(m));
    case Method::kLstm:
      return baselines::lstm_loss(lstm_config(m));
    case Method::kRandom:
      break;
  }
  throw std::invalid_argument("the random policy is not trained");
}

namespace {

json params_json(const ParamSet& p) {
  json j = json::object();
  for (const auto& [name, t] : p) j[name] = {{"shape", t.shape()}, {"data", t.values()}};
  return j;
}

ParamSet params_from(const json& j) {
  ParamSet p;
  for (const auto& [name, v] : j.items()) {
    p[name] = Tensor(v.at("shape").get<Shape>(), v.at("data").get<std::vector<double>>());
  }
  return p;
}

double number_or_nan(const json& j) { return j.is_null() ? std::nan("") : j.get<double>(); }

json history_json(const std::vector<meta::EpochStats>& h) {
  json out = json::array();
  for (const auto& s : h) {
    out.push_back({{"epoch", s.epoch},
                   {"train_loss", s.train_loss},
                   {"validation_loss", std::isfinite(s.validation_loss) ? json(s.validation_loss) : json(nullptr)}});
  }
  return out;
}

void expect_format(const json& j, const char* format, int version) {
  if (!j.is_object() || !j.contains("format") || j.at("format") != format) {
    throw std::invalid_argument(std::string("not a ") + format + " file");
  }
  if (j.at("version").get<int>() != version) {
    throw std::invalid_argument(std::string("unsupported ") + format + " version " + j.at("version").dump());
  }
}

}  // namespace

json model_to_json(const Model& m) {
  return json{{"format", kModelFormat},
              {"version", kModelFileVersion},
              {"method", to_string(m.method)},
              {"arch", m.arch},
              {"train_config", m.train},
              {"lstm_width", m.lstm_width},
              {"env_hash", m.env_hash},
              {"params", params_json(m.params)}};
}

Model model_from_json(const json& j) {
  expect_format(j, kModelFormat, kModelFileVersion);
  Model m;
  m.method = method_from_string(j.at("method").get<std::string>());
  j.at("arch").get_to(m.arch);
  j.at("train_config").get_to(m.train);
  m.lstm_width = j.at("lstm_width").get<std::size_t>();
  m.env_hash = j.at("env_hash").get<std::string>();
  m.params = params_from(j.at("params"));
  return m;
}

void write_json_file(const json& j, const fs::path& path) { write_file(path, j.dump(2) + "\n"); }

json read_json_file(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

void save_model(const Model& m, const fs::path& path) { write_json_file(model_to_json(m), path); }

Model load_model(const fs::path& path) { return model_from_json(read_json_file(path)); }

void save_checkpoint(const Checkpoint& c, const fs::path& path) {
  Model m = c.model;
  m.params = c.state.params;
  const AdamState& a = c.state.adam;
  write_json_file(json{{"format", kCheckpointFormat},
                       {"version", kModelFileVersion},
                       {"model", model_to_json(m)},
                       {"epoch", c.state.epoch},
                       {"history", history_json(c.state.history)},
                       {"adam",
                        {{"step", a.step},
                         {"learning_rate", a.learning_rate},
                         {"beta1", a.beta1},
                         {"beta2", a.beta2},
                         {"epsilon", a.epsilon},
                         {"first_moment", params_json(a.first_moment)},
                         {"second_moment", params_json(a.second_moment)}}}},
                  path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  const json j = read_json_file(path);
  expect_format(j, kCheckpointFormat, kModelFileVersion);
  Checkpoint c;
  c.model = model_from_json(j.at("model"));
  c.state.params = c.model.params;
  c.state.epoch = j.at("epoch").get<std::size_t>();
  for (const json& h : j.at("history")) {
    c.state.history.push_back({h.at("epoch").get<std::size_t>(), h.at("train_loss").get<double>(),
                               number_or_nan(h.at("validation_loss"))});
  }
  const json& a = j.at("adam");
  c.state.adam.step = a.at("step").get<std::uint64_t>();
  c.state.adam.learning_rate = a.at("learning_rate").get<double>();
  c.state.adam.beta1 = a.at("beta1").get<double>();
  c.state.adam.beta2 = a.at("beta2").get<double>();
  c.state.adam.epsilon = a.at("epsilon").get<double>();
  c.state.adam.first_moment = params_from(a.at("first_moment"));
  c.state.adam.second_moment = params_from(a.at("second_moment"));
  return c;
}

namespace {

std::string fmt(double v) {
  if (!std::isfinite(v)) return "nan";
  std::ostringstream ss;
  ss << std::setprecision(17) << v;
  return ss.str();
}

}  // namespace

std::string history_csv(const std::vector<meta::EpochStats>& history) {
  std::string out = "epoch,train_loss,validation_loss\n";
  for (const auto& s : history) {
    out += std::to_string(s.epoch) + "," + fmt(s.train_loss) + "," + fmt(s.validation_loss) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

std::uint64_t trial_episode_seed(std::uint64_t seed, std::size_t task, std::size_t trial) {
  return (1ULL << 63) | mix_seed(mix_seed(seed, task), trial);
}

namespace {

// Per-task policy once the conditioning demos are known.
using StepPolicy = std::function<reach::Vec2(const ObservationBatch& obs, Rng& rng)>;

void check_compatible(const Model& m, const DemoDataset& data, std::size_t shots) {
  const ArchitectureConfig& arch = m.arch;
  if (arch.vision != data.env.vision) {
    throw ModalityError(std::string("model expects ") + (arch.vision ? "image" : "state") +
                        " observations but the dataset environment is " + (data.env.vision ? "vision" : "state-only"));
  }
  const bool needs_actions = m.method == Method::kMil && m.train.inner_loss != meta::InnerLoss::kActionFree;
  for (std::size_t i = 0; i < data.meta_test.size(); ++i) {
    for (std::size_t d = 0; d < std::min(shots, data.meta_test[i].demos.size()); ++d) {
      if (needs_actions && !data.meta_test[i].demos[d].has_actions()) {
        throw ModalityError("inner loss '" + meta::to_string(m.train.inner_loss) +
                            "' needs demonstration actions, but meta-test task " + std::to_string(i) +
                            " has a " + to_string(data.meta_test[i].demos[d].modality) + " demonstration");
      }
    }
  }
}

}  // namespace

EvalReport evaluate(const Model* model, Method method, const DemoDataset& data, const EvalOptions& opts) {
  if (opts.shots == 0) throw std::invalid_argument("evaluate: shots must be at least 1");
  if (opts.trials == 0) throw std::invalid_argument("evaluate: trials must be at least 1");
  if (method != Method::kRandom) {
    if (!model) throw std::invalid_argument("evaluate: method '" + to_string(method) + "' needs a model");
    if (model->method != method) {
      throw std::invalid_argument("evaluate: model was trained as '" + to_string(model->method) + "', not '" +
                                  to_string(method) + "'");
    }
  }
  if (data.meta_test.size() < opts.tasks) {
    throw EvalError("insufficient meta-test tasks: requested " + std::to_string(opts.tasks) + ", dataset has " +
                    std::to_string(data.meta_test.size()));
  }
  for (std::size_t i = 0; i < opts.tasks; ++i) {
    if (data.meta_test[i].task.split != reach::Split::kMetaTest) throw EvalError("evaluation task is not meta-test");
    if (method != Method::kRandom && data.meta_test[i].demos.size() < opts.shots) {
      throw EvalError("meta-test task " + std::to_string(i) + " has " +
                      std::to_string(data.meta_test[i].demos.size()) + " demonstrations; " +
                      std::to_string(opts.shots) + "-shot evaluation needs that many");
    }
  }
  if (model) check_compatible(*model, data, opts.shots);

  const reach::EnvConfig& env = data.env;
  const std::size_t n = opts.tasks;
  EvalReport r;
  r.method = to_string(method);
  r.shots = opts.shots;
  r.tasks = n;
  r.trials = opts.trials;
  r.seed = opts.seed;
  r.env_hash = reach::config_hash(env);
  r.successes.assign(n, 0);
  const bool mil = method == Method::kMil;
  std::vector<double> pre(n, std::nan("")), post(n, std::nan(""));

  // Condition every task first (adaptation for MIL, demo encoding for the
  // LSTM), then roll out all (task, trial) pairs.
  std::vector<StepPolicy> policies(n);
  parallel_for(n, [&](std::size_t i) {
    const DatasetTask& task = data.meta_test[i];
    std::vector<DemoBatch> demos;
    if (method != Method::kRandom) {
      for (std::size_t d = 0; d < opts.shots; ++d) demos.push_back(demo_batch(env, task.demos[d]));
    }
    std::vector<const DemoBatch*> ptrs;
    for (const auto& d : demos) ptrs.push_back(&d);
    switch (method) {
      case Method::kRandom:
        policies[i] = [](const ObservationBatch&, Rng& rng) { return baselines::random_action(rng); };
        break;
      case Method::kMil: {
        const ArchitectureConfig arch = model->arch;
        ParamSet adapted = opts.adapt ? meta::adapt_values(arch, model->params, ptrs, model->train) : model->params;
        if (task.demos.size() > opts.shots && task.demos[opts.shots].has_actions()) {
          const DemoBatch val = demo_batch(env, task.demos[opts.shots]);
          pre[i] = meta::bc_loss(arch, make_constants(model->params), val).value().item();
          post[i] = meta::bc_loss(arch, make_constants(adapted), val).value().item();
        }
        policies[i] = [arch, p = std::move(adapted)](const ObservationBatch& obs, Rng&) {
          const Tensor a = policy_action(arch, p, obs);
          return reach::Vec2{a[0], a[1]};
        };
        break;
      }
      case Method::kContextual: {
        const ArchitectureConfig arch = network_arch(*model);
        policies[i] = [arch, params = model->params, demos = std::move(demos)](const ObservationBatch& obs, Rng&) {
          std::vector<const DemoBatch*> ptrs;
          for (const auto& d : demos) ptrs.push_back(&d);
          const Tensor a = baselines::contextual_action(arch, params, ptrs, obs);
          return reach::Vec2{a[0], a[1]};
        };
        break;
      }
      case Method::kLstm: {
        const baselines::LstmConfig cfg = lstm_config(*model);
        const VarSet v = make_constants(model->params);
        std::vector<baselines::LstmState> enc;
        for (const DemoBatch* d : ptrs) {
          const auto s = baselines::lstm_encode(cfg, v, *d);
          enc.push_back({ad::constant(s.hidden.value()), ad::constant(s.cell.value())});
        }
        policies[i] = [cfg, v, enc = std::move(enc)](const ObservationBatch& obs, Rng&) {
          const Tensor a = baselines::lstm_action(cfg, v, enc, obs);
          return reach::Vec2{a[0], a[1]};
        };
        break;
      }
    }
  });

  std::vector<char> success(n * opts.trials, 0);
  parallel_for(n * opts.trials, [&](std::size_t k) {
    const std::size_t i = k / opts.trials, trial = k % opts.trials;
    Rng rng(mix_seed(mix_seed(opts.seed, i), trial));
    const StepPolicy& policy = policies[i];
    const auto traj = reach::rollout(
        env,
        [&](const reach::Observation& o, const reach::ArmState&, std::size_t) {
          return policy(reach::to_batch(env, {o}), rng);
        },
        data.meta_test[i].task, trial_episode_seed(opts.seed, i, trial), env.horizon);
    success[k] = reach::is_success(traj.ee, traj.goal) ? 1 : 0;
  });

  std::size_t total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    r.task_seeds.push_back(data.meta_test[i].task.seed);
    for (std::size_t t = 0; t < opts.trials; ++t) r.successes[i] += success[i * opts.trials + t];
    total += r.successes[i];
  }
  r.success_rate = static_cast<double>(total) / static_cast<double>(n * opts.trials);

  if (mil && std::all_of(pre.begin(), pre.end(), [](double v) { return std::isfinite(v); })) {
    r.pre_loss = pre;
    r.post_loss = post;
    double sp = 0, sq = 0;
    std::size_t below = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sp += pre[i];
      sq += post[i];
      below += post[i] < pre[i];
    }
    r.mean_pre_loss = sp / static_cast<double>(n);
    r.mean_post_loss = sq / static_cast<double>(n);
    r.post_below_pre_fraction = static_cast<double>(below) / static_cast<double>(n);
  }
  return r;
}

json report_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return json{{"format", "mil-eval-report"},
              {"version", 1},
              {"env_hash", r.env_hash},
              {"method", r.method},
              {"shots", r.shots},
              {"tasks", r.tasks},
              {"trials", r.trials},
              {"seed", r.seed},
              {"task_seeds", r.task_seeds},
              {"successes", r.successes},
              {"success_rate", r.success_rate},
              {"pre_loss", r.pre_loss.empty() ? json(nullptr) : json(r.pre_loss)},
              {"post_loss", r.post_loss.empty() ? json(nullptr) : json(r.post_loss)},
              {"mean_pre_loss", opt(r.mean_pre_loss)},
              {"mean_post_loss", opt(r.mean_post_loss)},
              {"post_below_pre_fraction", opt(r.post_below_pre_fraction)}};
}

std::string report_csv(const EvalReport& r) {
  std::string out = "# mil-eval-report v1 env_hash=" + r.env_hash + " method=" + r.method +
                    " shots=" + std::to_string(r.shots) + " seed=" + std::to_string(r.seed) + "\n";
  out += "task,task_seed,successes,trials,pre_loss,post_loss\n";
  for (std::size_t i = 0; i < r.tasks; ++i) {
    out += std::to_string(i) + "," + std::to_string(r.task_seeds[i]) + "," + std::to_string(r.successes[i]) + "," +
           std::to_string(r.trials) + "," + (r.pre_loss.empty() ? "" : fmt(r.pre_loss[i])) + "," +
           (r.post_loss.empty() ? "" : fmt(r.post_loss[i])) + "\n";
  }
  return out;
}

}  // namespace mil
