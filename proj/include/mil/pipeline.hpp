#pragma once

// Dataset persistence, model files and the evaluation protocol.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mil/baselines.hpp"
#include "mil/demo.hpp"
#include "mil/meta.hpp"
#include "mil/parallel.hpp"
#include "mil/reach_env.hpp"

namespace mil {

// ---------------------------------------------------------------------------
// Datasets

inline constexpr std::uint32_t kDatasetVersion = 1;

struct DatasetTask {
  reach::Task task;
  std::vector<Demonstration> demos;
};

struct DemoDataset {
  reach::EnvConfig env;
  double noise_sigma = 0.05;
  std::vector<DatasetTask> meta_train;
  std::vector<DatasetTask> meta_test;
  nlohmann::json info = nlohmann::json::object();  // free-form provenance (expert stats, seeds)

  // Split tags, color disjointness, the two-demo minimum for meta-train
  // tasks and per-demo consistency. Throws DatasetError.
  void validate() const;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class DatasetVersionError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};
// Also raised for truncated files.
class DatasetChecksumError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};
class EnvHashMismatch : public DatasetError {
 public:
  using DatasetError::DatasetError;
};

void write_dataset(const DemoDataset& data, const std::filesystem::path& path);

struct ReadOptions {
  std::optional<reach::EnvConfig> expected_env;  // checked against the stored hash
  bool allow_env_mismatch = false;               // downgrade the mismatch to a warning
};

struct ReadResult {
  DemoDataset data;
  std::vector<std::string> warnings;
};

ReadResult read_dataset(const std::filesystem::path& path, const ReadOptions& opts = {});

// FNV-1a 64 over bytes.
std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL);

// Demo batches for training, one TaskData per dataset task.
std::vector<meta::TaskData> prepare_tasks(const reach::EnvConfig& env, const std::vector<DatasetTask>& tasks);

// ---------------------------------------------------------------------------
// Expert data generation

struct GenerateConfig {
  reach::EnvConfig env;
  std::size_t train_tasks = 300;
  std::size_t demos_per_train_task = 2;
  std::size_t test_tasks = 20;
  std::size_t demos_per_test_task = 6;  // up to 5 shots plus one validation demo
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;
  ilqg::Options ilqg;
  double min_expert_success = 0.95;

  void validate() const;  // throws std::invalid_argument
};

void to_json(nlohmann::json& j, const GenerateConfig& c);
void from_json(const nlohmann::json& j, GenerateConfig& c);

struct GenerateResult {
  DemoDataset data;
  std::size_t expert_successes = 0;  // noise-free expert rollouts that succeed
  std::size_t expert_trials = 0;
  std::size_t demo_successes = 0;  // noisy demonstrations that succeed
  double expert_success_rate() const;
};

// Solves iLQG per (task, episode) and records noisy demonstrations; task
// solves run on up to max_threads() workers, results in fixed order.
GenerateResult generate_dataset(const GenerateConfig& config);

// ---------------------------------------------------------------------------
// Models

enum class Method { kMil, kContextual, kLstm, kRandom };
std::string to_string(Method m);
Method method_from_string(const std::string& s);

// Everything needed to run a trained policy. `arch` is the base (MIL)
// architecture; the contextual network widens it and the LSTM uses it as
// its trunk.
struct Model {
  Method method = Method::kMil;
  ArchitectureConfig arch;
  std::size_t lstm_width = 512;
  meta::TrainConfig train;
  std::string env_hash;
  ParamSet params;
};

ArchitectureConfig network_arch(const Model& m);  // arch actually evaluated
baselines::LstmConfig lstm_config(const Model& m);
Model init_model(Method method, const ArchitectureConfig& arch, const meta::TrainConfig& train,
                 const reach::EnvConfig& env, std::size_t lstm_width = 512);
meta::TaskLoss training_loss(const Model& m);

inline constexpr int kModelFileVersion = 1;

nlohmann::json model_to_json(const Model& m);
Model model_from_json(const nlohmann::json& j);
void save_model(const Model& m, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

struct Checkpoint {
  Model model;  // params are the current iterate
  meta::TrainState state;
};
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Writes JSON with a fixed layout; numbers use shortest round-trip form.
void write_json_file(const nlohmann::json& j, const std::filesystem::path& path);
nlohmann::json read_json_file(const std::filesystem::path& path);

// Loss history as CSV: epoch,train_loss,validation_loss.
std::string history_csv(const std::vector<meta::EpochStats>& history);

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
  std::size_t tasks = 20;
  std::size_t trials = 10;
  std::size_t shots = 1;
  std::uint64_t seed = 0;
  bool adapt = true;  // MIL only: false evaluates the unadapted parameters
};

struct EvalReport {
  std::string method;
  std::size_t shots = 0;
  std::size_t tasks = 0;
  std::size_t trials = 0;
  std::vector<std::size_t> task_seeds;
  std::vector<std::size_t> successes;  // per task
  double success_rate = 0.0;
  // MIL only: validation BC loss before and after adaptation.
  std::vector<double> pre_loss, post_loss;
  std::optional<double> mean_pre_loss, mean_post_loss;
  std::optional<double> post_below_pre_fraction;
  std::uint64_t seed = 0;
  std::string env_hash;
  double wall_clock_seconds = 0.0;  // not part of the metric files
};

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Episode seed of an evaluation trial; always disjoint from the (small)
// episode seeds used for demonstrations.
std::uint64_t trial_episode_seed(std::uint64_t seed, std::size_t task, std::size_t trial);

// Meta-test tasks only. `model` may be null for the random method.
EvalReport evaluate(const Model* model, Method method, const DemoDataset& data, const EvalOptions& opts);

nlohmann::json report_json(const EvalReport& r);
std::string report_csv(const EvalReport& r);

}  // namespace mil
