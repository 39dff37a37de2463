// mil: generate demonstrations, meta-train, evaluate, check gradients.
//
// Exit codes: 0 ok, 1 I/O or configuration error, 2 expert below the quality
// bar, 3 training diverged, 4 modality mismatch, 5 gradient check failed.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mil/gradcheck.hpp"
#include "mil/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mil;

namespace {

enum Exit { kOk = 0, kConfigError = 1, kExpertQuality = 2, kDiverged = 3, kModality = 4, kGradcheck = 5 };

// Raised for anything the operator has to fix in the config or flags.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration file

struct Config {
  GenerateConfig generate;
  std::optional<reach::EnvConfig> env;  // present when the file names one
  Method method = Method::kMil;
  json arch_overrides = json::object();
  std::size_t lstm_width = 512;
  meta::TrainConfig train;
  std::size_t checkpoint_every = 10;
  EvalOptions eval;
};

// Rejects keys that the default-constructed struct does not serialize.
template <typename T>
void check_keys(const json& j, const std::string& where, std::set<std::string> extra = {}) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  const json defaults = T{};
  for (const auto& [key, _] : j.items()) {
    if (!defaults.contains(key) && !extra.count(key)) throw ConfigError(where + ": unknown field '" + key + "'");
  }
}

template <typename T>
T parse_section(const json& j, const std::string& where) {
  check_keys<T>(j, where);
  // Merge over the serialized defaults so omitted fields keep their values.
  json merged = T{};
  merged.merge_patch(j);
  try {
    return merged.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

Config load_config(const std::string& path) {
  Config c;
  if (path.empty()) return c;
  json j;
  {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      // nlohmann reports "line L, column C" for syntax errors.
      throw ConfigError(path + ": " + e.what());
    }
  }
  if (!j.is_object()) throw ConfigError(path + ": top level must be an object");
  static const std::set<std::string> top{"env", "generate", "model", "train", "checkpoint_every", "eval"};
  for (const auto& [key, _] : j.items()) {
    if (!top.count(key)) throw ConfigError(path + ": unknown top-level field '" + key + "'");
  }
  try {
    if (j.contains("env")) c.env = parse_section<reach::EnvConfig>(j.at("env"), "env");
    if (j.contains("generate")) {
      json g = j.at("generate");
      if (g.contains("env")) throw ConfigError("generate: put the environment under the top-level 'env' key");
      GenerateConfig defaults;
      json merged = defaults;
      merged.erase("env");
      for (const auto& [key, _] : g.items()) {
        if (!merged.contains(key)) throw ConfigError("generate: unknown field '" + key + "'");
      }
      merged.merge_patch(g);
      try {
        c.generate = merged.get<GenerateConfig>();
      } catch (const json::exception& e) {
        throw ConfigError(std::string("generate: ") + e.what());
      }
    }
    if (c.env) c.generate.env = *c.env;
    if (j.contains("model")) {
      const json& m = j.at("model");
      if (!m.is_object()) throw ConfigError("model: expected an object");
      for (const auto& [key, _] : m.items()) {
        if (key != "method" && key != "arch" && key != "lstm_width") {
          throw ConfigError("model: unknown field '" + key + "'");
        }
      }
      if (m.contains("method")) c.method = method_from_string(m.at("method").get<std::string>());
      if (m.contains("arch")) {
        check_keys<ArchitectureConfig>(m.at("arch"), "model.arch");
        c.arch_overrides = m.at("arch");
      }
      if (m.contains("lstm_width")) c.lstm_width = m.at("lstm_width").get<std::size_t>();
    }
    if (j.contains("train")) c.train = parse_section<meta::TrainConfig>(j.at("train"), "train");
    if (j.contains("checkpoint_every")) c.checkpoint_every = j.at("checkpoint_every").get<std::size_t>();
    if (j.contains("eval")) {
      const json& e = j.at("eval");
      if (!e.is_object()) throw ConfigError("eval: expected an object");
      for (const auto& [key, v] : e.items()) {
        if (key == "tasks") c.eval.tasks = v.get<std::size_t>();
        else if (key == "trials") c.eval.trials = v.get<std::size_t>();
        else if (key == "shots") c.eval.shots = v.get<std::size_t>();
        else if (key == "seed") c.eval.seed = v.get<std::uint64_t>();
        else throw ConfigError("eval: unknown field '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return c;
}

ArchitectureConfig build_arch(const reach::EnvConfig& env, const json& overrides) {
  json merged = reach::default_architecture(env);
  merged.merge_patch(overrides);
  ArchitectureConfig a = merged.get<ArchitectureConfig>();
  // The observation layout is the environment's, whatever the file says.
  const ArchitectureConfig fixed = reach::default_architecture(env);
  a.vision = fixed.vision;
  a.state_dim = fixed.state_dim;
  a.image_height = fixed.image_height;
  a.image_width = fixed.image_width;
  a.action_dim = fixed.action_dim;
  try {
    a.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model.arch: ") + e.what());
  }
  return a;
}

// ---------------------------------------------------------------------------
// Shared flags

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string method;
  std::optional<std::size_t> shots;
  std::string inner_loss;
  std::optional<bool> vision;
};

void add_vision_flags(CLI::App* app, Flags& f) {
  app->add_flag_callback("--vision", [&f] { f.vision = true; }, "Use image observations");
  app->add_flag_callback("--no-vision", [&f] { f.vision = false; }, "Use state observations");
}

std::string default_out(const std::string& flag, const std::string& fallback) { return flag.empty() ? fallback : flag; }

void print_json(const json& j) { std::cout << j.dump(2) << std::endl; }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// generate

int cmd_generate(const Flags& f) {
  Config c = load_config(f.config);
  GenerateConfig g = c.generate;
  if (f.seed) g.seed = *f.seed;
  if (f.vision) g.env.vision = *f.vision;
  try {
    g.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const auto t0 = std::chrono::steady_clock::now();
  const GenerateResult r = generate_dataset(g);
  const fs::path out = default_out(f.out, "demos.mil");
  json summary{{"dataset", out.string()},
               {"env_hash", reach::config_hash(g.env)},
               {"meta_train_tasks", r.data.meta_train.size()},
               {"meta_test_tasks", r.data.meta_test.size()},
               {"demos", r.expert_trials},
               {"expert_success_rate", r.expert_success_rate()},
               {"demo_success_rate", static_cast<double>(r.demo_successes) / static_cast<double>(r.expert_trials)},
               {"seed", g.seed}};
  if (r.expert_success_rate() < g.min_expert_success) {
    summary["error"] = "expert success below the required minimum";
    summary.erase("dataset");
    print_json(summary);
    std::cerr << "error: expert success " << r.expert_success_rate() << " is below " << g.min_expert_success
              << "; dataset not written\n";
    return kExpertQuality;
  }
  write_dataset(r.data, out);
  print_json(summary);
  std::cerr << "generated in " << seconds_since(t0) << " s\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainFlags {
  std::string data;
  std::string resume;
  std::optional<std::size_t> epochs;
  bool allow_env_mismatch = false;
};

ReadResult load_dataset(const std::string& path, const Config& c, bool allow_mismatch) {
  if (path.empty()) throw ConfigError("--data is required");
  ReadOptions opts;
  opts.expected_env = c.env;
  opts.allow_env_mismatch = allow_mismatch;
  ReadResult r = read_dataset(path, opts);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
  return r;
}

int cmd_train(const Flags& f, const TrainFlags& tf) {
  Config c = load_config(f.config);
  const ReadResult rr = load_dataset(tf.data, c, tf.allow_env_mismatch);
  const DemoDataset& data = rr.data;
  if (f.vision && *f.vision != data.env.vision) {
    throw ConfigError(std::string("--") + (*f.vision ? "" : "no-") + "vision disagrees with the dataset environment");
  }

  const fs::path out = default_out(f.out, "model.json");
  const fs::path history_path = fs::path(out).replace_extension(".history.csv");
  const fs::path checkpoint_path = fs::path(out).replace_extension(".ckpt.json");

  Model model;
  meta::TrainState state;
  if (!tf.resume.empty()) {
    Checkpoint ck = load_checkpoint(tf.resume);
    model = std::move(ck.model);
    state = std::move(ck.state);
    if (model.env_hash != reach::config_hash(data.env)) {
      throw ConfigError("checkpoint was trained on a different environment (hash " + model.env_hash + ")");
    }
    if (tf.epochs) model.train.epochs = *tf.epochs;
  } else {
    meta::TrainConfig tc = c.train;
    if (f.seed) tc.seed = *f.seed;
    if (f.shots) tc.shots = *f.shots;
    if (!f.inner_loss.empty()) tc.inner_loss = meta::inner_loss_from_string(f.inner_loss);
    if (tf.epochs) tc.epochs = *tf.epochs;
    try {
      tc.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("train: ") + e.what());
    }
    const Method method = f.method.empty() ? c.method : method_from_string(f.method);
    if (method == Method::kRandom) throw ConfigError("the random policy has nothing to train");
    model = init_model(method, build_arch(data.env, c.arch_overrides), tc, data.env, c.lstm_width);
    state = meta::initial_state(model.params, tc);
  }
  const meta::TrainConfig& tc = model.train;
  // Any meta-train demo may be drawn as the behavioral-cloning target.
  for (const auto& t : data.meta_train) {
    for (const auto& d : t.demos) {
      if (!d.has_actions()) throw ModalityError("meta-training needs demonstrations with actions");
    }
  }

  const auto t0 = std::chrono::steady_clock::now();
  const auto train = prepare_tasks(data.env, data.meta_train);
  // Meta-test tasks with enough demos serve as a held-out monitor.
  std::vector<DatasetTask> monitor_src;
  for (const auto& t : data.meta_test) {
    if (t.demos.size() > tc.shots && t.demos[tc.shots].has_actions()) monitor_src.push_back(t);
  }
  const auto monitor = prepare_tasks(data.env, monitor_src);
  const meta::TaskLoss loss = training_loss(model);

  auto save_progress = [&](const meta::TrainState& s) {
    write_text(history_path, history_csv(s.history));
    if (c.checkpoint_every > 0 && (s.epoch % c.checkpoint_every == 0 || s.epoch == tc.epochs)) {
      save_checkpoint({model, s}, checkpoint_path);
    }
    const auto& h = s.history.back();
    std::cerr << "epoch " << h.epoch << " train " << h.train_loss << " held-out " << h.validation_loss << " ("
              << seconds_since(t0) << " s)\n";
  };

  meta::TrainState last = state;
  try {
    state = meta::train_loop(loss, std::move(state), train, monitor, tc, [&](const meta::TrainState& s) {
      last = s;
      save_progress(s);
    });
  } catch (const meta::DivergenceError& e) {
    write_text(history_path, history_csv(last.history));
    print_json({{"error", "diverged"}, {"epoch", e.epoch}, {"message", e.what()}});
    std::cerr << "error: training diverged in epoch " << e.epoch << "\n";
    return kDiverged;
  }
  model.params = state.params;
  save_model(model, out);
  write_text(history_path, history_csv(state.history));
  json summary{{"model", out.string()},
               {"history", history_path.string()},
               {"method", to_string(model.method)},
               {"epochs", state.epoch},
               {"parameters", total_size(model.params)},
               {"env_hash", model.env_hash}};
  if (!state.history.empty()) {
    summary["final_train_loss"] = state.history.back().train_loss;
    const double v = state.history.back().validation_loss;
    summary["final_held_out_loss"] = std::isfinite(v) ? json(v) : json(nullptr);
  }
  print_json(summary);
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalFlags {
  std::string model;
  std::string data;
  std::optional<std::size_t> tasks, trials;
  bool no_adapt = false;
  bool allow_env_mismatch = false;
};

int cmd_eval(const Flags& f, const EvalFlags& ef) {
  Config c = load_config(f.config);
  const ReadResult rr = load_dataset(ef.data, c, ef.allow_env_mismatch);
  const DemoDataset& data = rr.data;
  if (f.vision && *f.vision != data.env.vision) {
    throw ModalityError(std::string("--") + (*f.vision ? "" : "no-") + "vision disagrees with the dataset environment");
  }
  std::optional<Model> model;
  if (!ef.model.empty()) model = load_model(ef.model);
  Method method = f.method.empty() ? (model ? model->method : c.method) : method_from_string(f.method);
  if (method != Method::kRandom && !model) throw ConfigError("--model is required for method " + to_string(method));
  if (model && method != Method::kRandom && model->env_hash != reach::config_hash(data.env)) {
    const std::string msg = "model was trained on environment " + model->env_hash + ", dataset uses " +
                            reach::config_hash(data.env);
    if (!ef.allow_env_mismatch) throw ConfigError(msg);
    std::cerr << "warning: " << msg << "\n";
  }
  if (model && !f.inner_loss.empty() &&
      meta::inner_loss_from_string(f.inner_loss) != model->train.inner_loss) {
    throw ModalityError("model was meta-trained with the '" + meta::to_string(model->train.inner_loss) +
                        "' inner loss, not '" + f.inner_loss + "'");
  }

  EvalOptions o = c.eval;
  if (f.seed) o.seed = *f.seed;
  if (f.shots) o.shots = *f.shots;
  if (ef.tasks) o.tasks = *ef.tasks;
  if (ef.trials) o.trials = *ef.trials;
  o.adapt = !ef.no_adapt;

  const auto t0 = std::chrono::steady_clock::now();
  const EvalReport r = evaluate(method == Method::kRandom ? nullptr : &*model, method, data, o);
  std::string stem = default_out(f.out, "report_" + to_string(method) + "_k" + std::to_string(o.shots));
  if (fs::path(stem).extension() == ".json") stem = fs::path(stem).replace_extension().string();
  write_text(stem + ".json", report_json(r).dump(2) + "\n");
  write_text(stem + ".csv", report_csv(r));
  std::cout << "success_rate " << r.success_rate << " (" << to_string(method) << ", " << o.shots << "-shot, "
            << o.tasks << " tasks x " << o.trials << " trials)\n";
  if (r.mean_pre_loss) {
    std::cout << "validation_loss pre " << *r.mean_pre_loss << " post " << *r.mean_post_loss << " (post < pre on "
              << *r.post_below_pre_fraction * 100 << "% of tasks)\n";
  }
  std::cerr << "evaluated in " << seconds_since(t0) << " s; reports " << stem << ".{json,csv}\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradFlags {
  std::vector<std::string> inject;
  double threshold = 1e-4;
};

int cmd_gradcheck(const Flags& f, const GradFlags& gf) {
  gradcheck::Options o;
  if (f.seed) o.seed = *f.seed;
  o.threshold = gf.threshold;
  o.vision = f.vision.value_or(true);
  for (const auto& label : gf.inject) {
    const auto& known = gradcheck::layer_labels();
    if (std::find(known.begin(), known.end(), label) == known.end()) {
      throw ConfigError("--inject-fault: unknown layer '" + label + "'");
    }
    ad::set_flipped_backward(label, true);
  }
  const auto results = gradcheck::run_all(o);
  ad::clear_flipped_backward();

  std::vector<std::string> failing;
  json report = json::array();
  for (const auto& r : results) {
    std::printf("%-28s max_rel_error %.3e  threshold %.0e  %s\n", r.name.c_str(), r.max_rel_error, r.threshold,
                r.passed() ? "ok" : "FAIL");
    report.push_back({{"check", r.name},
                      {"max_rel_error", r.max_rel_error},
                      {"threshold", r.threshold},
                      {"worst_param", r.worst_param},
                      {"passed", r.passed()}});
    if (!r.passed()) failing.push_back(r.name);
  }
  if (!f.out.empty()) write_text(f.out, json{{"format", "mil-gradcheck"}, {"version", 1}, {"checks", report}}.dump(2) + "\n");
  if (!failing.empty()) {
    std::string list;
    for (const auto& n : failing) list += (list.empty() ? "" : ", ") + n;
    std::printf("failing: %s\n", list.c_str());
    return kGradcheck;
  }
  std::printf("all %zu checks passed\n", results.size());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-imitation learning on a planar reaching task"};
  app.require_subcommand(1);
  Flags flags;
  TrainFlags train_flags;
  EvalFlags eval_flags;
  GradFlags grad_flags;

  auto common = [&flags](CLI::App* sub) {
    sub->add_option("--config", flags.config, "JSON configuration file");
    sub->add_option("--seed", flags.seed, "Seed (overrides the config)");
    sub->add_option("--out", flags.out, "Output path");
  };

  CLI::App* gen = app.add_subcommand("generate", "Generate expert demonstrations");
  common(gen);
  add_vision_flags(gen, flags);

  CLI::App* train = app.add_subcommand("train", "Meta-train a policy (or a baseline)");
  common(train);
  add_vision_flags(train, flags);
  train->add_option("--data", train_flags.data, "Dataset file")->required();
  train->add_option("--method", flags.method, "mil | contextual | lstm");
  train->add_option("--shots", flags.shots, "Demonstrations per adaptation");
  train->add_option("--inner-loss", flags.inner_loss, "bc | two-head | action-free")
      ->check(CLI::IsMember({"bc", "two-head", "action-free"}));
  train->add_option("--epochs", train_flags.epochs, "Epochs (overrides the config)");
  train->add_option("--resume", train_flags.resume, "Checkpoint to resume from");
  train->add_flag("--allow-env-mismatch", train_flags.allow_env_mismatch, "Warn instead of failing on env hash");

  CLI::App* ev = app.add_subcommand("eval", "Evaluate on held-out tasks");
  common(ev);
  add_vision_flags(ev, flags);
  ev->add_option("--model", eval_flags.model, "Trained model file (not needed for --method random)");
  ev->add_option("--data", eval_flags.data, "Dataset file")->required();
  ev->add_option("--method", flags.method, "mil | contextual | lstm | random");
  ev->add_option("--shots", flags.shots, "Demonstrations given per task");
  ev->add_option("--inner-loss", flags.inner_loss, "Expected inner loss of the model")
      ->check(CLI::IsMember({"bc", "two-head", "action-free"}));
  ev->add_option("--tasks", eval_flags.tasks, "Held-out tasks");
  ev->add_option("--trials", eval_flags.trials, "Trials per task");
  ev->add_flag("--no-adapt", eval_flags.no_adapt, "Evaluate MIL parameters without adaptation");
  ev->add_flag("--allow-env-mismatch", eval_flags.allow_env_mismatch, "Warn instead of failing on env hash");

  CLI::App* gc = app.add_subcommand("gradcheck", "Compare gradients with finite differences");
  gc->add_option("--seed", flags.seed, "Seed");
  gc->add_option("--out", flags.out, "Write results as JSON");
  add_vision_flags(gc, flags);
  gc->add_option("--inject-fault", grad_flags.inject, "Flip the backward pass of a layer (test hook)");
  gc->add_option("--threshold", grad_flags.threshold, "Relative error bound");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*gen) return cmd_generate(flags);
    if (*train) return cmd_train(flags, train_flags);
    if (*ev) return cmd_eval(flags, eval_flags);
    if (*gc) return cmd_gradcheck(flags, grad_flags);
  } catch (const ModalityError& e) {
    std::cerr << "error: modality mismatch: " << e.what() << "\n";
    return kModality;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const meta::DivergenceError& e) {
    std::cerr << "error: diverged in epoch " << e.epoch << ": " << e.what() << "\n";
    return kDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  }
  return kConfigError;
}
