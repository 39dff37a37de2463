#include <cstring>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "mil/pipeline.hpp"
#include "mil/random.hpp"

namespace mil {
namespace {

namespace fs = std::filesystem;

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mil_pipeline_test";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void dump(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

GenerateConfig small_config() {
  GenerateConfig c;
  c.train_tasks = 4;
  c.demos_per_train_task = 2;
  c.test_tasks = 3;
  c.demos_per_test_task = 3;
  c.seed = 5;
  return c;
}

const GenerateResult& small_dataset() {
  static const GenerateResult r = generate_dataset(small_config());
  return r;
}

void expect_same(const DemoDataset& a, const DemoDataset& b) {
  EXPECT_EQ(reach::config_hash(a.env), reach::config_hash(b.env));
  EXPECT_EQ(a.noise_sigma, b.noise_sigma);
  EXPECT_EQ(a.info, b.info);
  auto same_tasks = [](const std::vector<DatasetTask>& x, const std::vector<DatasetTask>& y) {
    ASSERT_EQ(x.size(), y.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_EQ(x[i].task, y[i].task);
      ASSERT_EQ(x[i].demos.size(), y[i].demos.size());
      for (std::size_t d = 0; d < x[i].demos.size(); ++d) {
        const auto &p = x[i].demos[d], &q = y[i].demos[d];
        EXPECT_EQ(p.task, q.task);
        EXPECT_EQ(p.episode_seed, q.episode_seed);
        EXPECT_EQ(p.modality, q.modality);
        EXPECT_EQ(p.arm_states, q.arm_states);
        EXPECT_EQ(p.actions, q.actions);
        EXPECT_EQ(p.ee, q.ee);
      }
    }
  };
  same_tasks(a.meta_train, b.meta_train);
  same_tasks(a.meta_test, b.meta_test);
}

TEST(Generate, CountsAndSplits) {
  const auto& r = small_dataset();
  EXPECT_EQ(r.data.meta_train.size(), 4u);
  EXPECT_EQ(r.data.meta_test.size(), 3u);
  EXPECT_EQ(r.expert_trials, 4u * 2 + 3u * 3);
  EXPECT_GE(r.expert_success_rate(), 0.95);
  for (const auto& t : r.data.meta_train) EXPECT_EQ(t.task.split, reach::Split::kMetaTrain);
  for (const auto& t : r.data.meta_test) EXPECT_EQ(t.task.split, reach::Split::kMetaTest);
  EXPECT_NO_THROW(r.data.validate());
}

TEST(Generate, Deterministic) {
  const GenerateResult again = generate_dataset(small_config());
  expect_same(small_dataset().data, again.data);
}

TEST(Generate, RejectsSingleDemoTasks) {
  GenerateConfig c = small_config();
  c.demos_per_train_task = 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(nlohmann::json({{"train_taks", 3}}).get<GenerateConfig>(), std::invalid_argument);
}

TEST(Dataset, RoundTrip) {
  const fs::path p = temp_path("round_trip.mil");
  write_dataset(small_dataset().data, p);
  const ReadResult r = read_dataset(p);
  EXPECT_TRUE(r.warnings.empty());
  expect_same(small_dataset().data, r.data);
  // Writing the read-back dataset reproduces the file byte for byte.
  const fs::path q = temp_path("round_trip_again.mil");
  write_dataset(r.data, q);
  EXPECT_EQ(slurp(p), slurp(q));
}

TEST(Dataset, HeaderLayout) {
  const fs::path p = temp_path("layout.mil");
  write_dataset(small_dataset().data, p);
  const std::string b = slurp(p);
  ASSERT_GT(b.size(), 32u);
  EXPECT_EQ(b.substr(0, 8), std::string("MILDATA\0", 8));
  EXPECT_EQ(static_cast<unsigned char>(b[8]), 1);  // version, little-endian
  std::uint32_t manifest = 0;
  std::uint64_t payload = 0;
  for (int i = 0; i < 4; ++i) manifest |= std::uint32_t(static_cast<unsigned char>(b[12 + i])) << (8 * i);
  for (int i = 0; i < 8; ++i) payload |= std::uint64_t(static_cast<unsigned char>(b[16 + i])) << (8 * i);
  EXPECT_EQ(b.size(), 24 + manifest + payload + 8);
  const auto j = nlohmann::json::parse(b.substr(24, manifest));
  EXPECT_EQ(j.at("format"), "mil-demo-dataset");
  EXPECT_EQ(j.at("env_hash"), reach::config_hash(small_dataset().data.env));
  EXPECT_EQ(j.at("counts").at("demos"), 17);
  // First payload double is the first demo's initial shoulder angle.
  double q0 = 0;
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t(static_cast<unsigned char>(b[24 + manifest + i])) << (8 * i);
  std::memcpy(&q0, &bits, 8);
  EXPECT_EQ(q0, small_dataset().data.meta_train[0].demos[0].arm_states[0].q[0]);
}

TEST(Dataset, TruncatedFileIsAChecksumError) {
  const fs::path p = temp_path("truncated.mil");
  write_dataset(small_dataset().data, p);
  const std::string b = slurp(p);
  for (std::size_t cut : {b.size() - 1, b.size() - 9, b.size() / 2, std::size_t{20}}) {
    dump(p, b.substr(0, cut));
    EXPECT_THROW(read_dataset(p), DatasetChecksumError) << cut;
  }
}

TEST(Dataset, CorruptedByteIsAChecksumError) {
  const fs::path p = temp_path("corrupt.mil");
  write_dataset(small_dataset().data, p);
  std::string b = slurp(p);
  b[b.size() - 100] ^= 0x01;
  dump(p, b);
  EXPECT_THROW(read_dataset(p), DatasetChecksumError);
}

TEST(Dataset, UnknownVersion) {
  const fs::path p = temp_path("version.mil");
  write_dataset(small_dataset().data, p);
  std::string b = slurp(p);
  b[8] = 2;
  dump(p, b);
  EXPECT_THROW(read_dataset(p), DatasetVersionError);
}

TEST(Dataset, NotADataset) {
  const fs::path p = temp_path("garbage.mil");
  dump(p, "hello world, this is not a dataset");
  EXPECT_THROW(read_dataset(p), DatasetError);
  EXPECT_THROW(read_dataset(temp_path("missing.mil")), std::runtime_error);
}

TEST(Dataset, EnvironmentHashMismatch) {
  const fs::path p = temp_path("env.mil");
  write_dataset(small_dataset().data, p);
  reach::EnvConfig other = small_dataset().data.env;
  other.damping = 0.2;
  EXPECT_THROW(read_dataset(p, {other, false}), EnvHashMismatch);
  const ReadResult r = read_dataset(p, {other, true});
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("hash mismatch"), std::string::npos);
  EXPECT_TRUE(read_dataset(p, {small_dataset().data.env, false}).warnings.empty());
}

TEST(Dataset, InvariantsEnforcedOnWrite) {
  DemoDataset d = small_dataset().data;
  d.meta_train[1].demos.pop_back();
  EXPECT_THROW(write_dataset(d, temp_path("bad.mil")), DatasetError);

  DemoDataset swapped = small_dataset().data;
  swapped.meta_train.push_back(swapped.meta_test[0]);
  EXPECT_THROW(swapped.validate(), DatasetError);
}

TEST(Dataset, ActionFreeDemosRoundTrip) {
  DemoDataset d = small_dataset().data;
  for (auto& t : d.meta_test) {
    for (auto& demo : t.demos) demo = with_modality(demo, Modality::kVideoOnly);
  }
  const fs::path p = temp_path("video_only.mil");
  write_dataset(d, p);
  const auto r = read_dataset(p);
  expect_same(d, r.data);
  EXPECT_TRUE(r.data.meta_test[0].demos[0].actions.empty());
}

// ---------------------------------------------------------------------------

ArchitectureConfig small_arch() {
  ArchitectureConfig a = reach::default_architecture(reach::EnvConfig{});
  a.fc_hidden = 16;
  a.fc_layers = 3;
  return a;
}

TEST(Model, SaveLoadRoundTrip) {
  meta::TrainConfig tc;
  tc.inner_loss = meta::InnerLoss::kTwoHead;
  tc.seed = 3;
  const Model m = init_model(Method::kMil, small_arch(), tc, reach::EnvConfig{});
  EXPECT_TRUE(m.arch.two_head);
  const fs::path p = temp_path("model.json");
  save_model(m, p);
  const Model back = load_model(p);
  EXPECT_EQ(back.method, Method::kMil);
  EXPECT_EQ(back.params, m.params);
  EXPECT_EQ(nlohmann::json(back.arch), nlohmann::json(m.arch));
  EXPECT_EQ(nlohmann::json(back.train), nlohmann::json(m.train));
  EXPECT_EQ(back.env_hash, m.env_hash);
  EXPECT_THROW(load_checkpoint(p), std::invalid_argument);
}

TEST(Model, CheckpointRoundTrip) {
  const auto& data = small_dataset().data;
  meta::TrainConfig tc;
  tc.epochs = 2;
  tc.meta_batch = 2;
  const Model m = init_model(Method::kMil, small_arch(), tc, data.env);
  const auto train = prepare_tasks(data.env, data.meta_train);
  const auto state = meta::train_loop(training_loss(m), meta::initial_state(m.params, tc), train, {}, tc);
  const fs::path p = temp_path("checkpoint.json");
  save_checkpoint({m, state}, p);
  const Checkpoint c = load_checkpoint(p);
  EXPECT_EQ(c.state.params, state.params);
  EXPECT_EQ(c.state.adam.first_moment, state.adam.first_moment);
  EXPECT_EQ(c.state.adam.second_moment, state.adam.second_moment);
  EXPECT_EQ(c.state.adam.step, state.adam.step);
  EXPECT_EQ(c.state.epoch, 2u);
  ASSERT_EQ(c.state.history.size(), 2u);
  EXPECT_EQ(c.state.history[1].train_loss, state.history[1].train_loss);
  EXPECT_TRUE(std::isnan(c.state.history[1].validation_loss));
  EXPECT_EQ(history_csv(c.state.history), history_csv(state.history));
}

TEST(Model, BaselineInitialisation) {
  const Model ctx = init_model(Method::kContextual, small_arch(), {}, reach::EnvConfig{});
  EXPECT_EQ(network_arch(ctx).state_dim, 2 * reach::kStateDim);
  const Model lstm = init_model(Method::kLstm, small_arch(), {}, reach::EnvConfig{}, 8);
  EXPECT_EQ(lstm.params.at("lstm.weight").shape(), (Shape{32, 16 + 2 + 8}));
  EXPECT_THROW(training_loss(init_model(Method::kRandom, small_arch(), {}, reach::EnvConfig{})),
               std::invalid_argument);
  EXPECT_THROW(method_from_string("maml"), std::invalid_argument);
}

// ---------------------------------------------------------------------------

TEST(Evaluate, TrialSeedsAreDisjointFromDemoSeeds) {
  for (std::size_t task = 0; task < 50; ++task) {
    for (std::size_t trial = 0; trial < 20; ++trial) EXPECT_GE(trial_episode_seed(0, task, trial), 1ULL << 63);
  }
  EXPECT_NE(trial_episode_seed(0, 1, 2), trial_episode_seed(1, 1, 2));
}

TEST(Evaluate, RandomPolicyMatchesIndependentMonteCarlo) {
  const auto& data = small_dataset().data;
  EvalOptions o;
  o.tasks = 3;
  o.trials = 1500;
  o.seed = 11;
  const EvalReport r = evaluate(nullptr, Method::kRandom, data, o);
  EXPECT_EQ(r.method, "random");
  EXPECT_FALSE(r.mean_pre_loss.has_value());
  std::size_t total = 0;
  for (auto s : r.successes) total += s;
  EXPECT_DOUBLE_EQ(r.success_rate, static_cast<double>(total) / 4500.0);

  // Independent estimate: own seeds, own torque stream.
  std::size_t wins = 0, n = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t trial = 0; trial < 1500; ++trial, ++n) {
      Rng rng(mix_seed(987654321, n));
      const auto traj = reach::rollout(
          data.env,
          [&](const reach::Observation&, const reach::ArmState&, std::size_t) {
            return reach::Vec2{rng.normal(), rng.normal()};
          },
          data.meta_test[i].task, 5'000'000 + n, data.env.horizon);
      wins += reach::is_success(traj.ee, traj.goal);
    }
  }
  EXPECT_NEAR(r.success_rate, static_cast<double>(wins) / static_cast<double>(n), 0.02);
}

TEST(Evaluate, ReportsAreReproducible) {
  const auto& data = small_dataset().data;
  const Model m = init_model(Method::kMil, small_arch(), {}, data.env);
  EvalOptions o;
  o.tasks = 3;
  o.trials = 4;
  const EvalReport a = evaluate(&m, Method::kMil, data, o);
  const EvalReport b = evaluate(&m, Method::kMil, data, o);
  EXPECT_EQ(report_json(a).dump(), report_json(b).dump());
  EXPECT_EQ(report_csv(a), report_csv(b));
  ASSERT_TRUE(a.mean_pre_loss && a.mean_post_loss && a.post_below_pre_fraction);
  EXPECT_EQ(a.pre_loss.size(), 3u);
  EXPECT_EQ(a.task_seeds[0], data.meta_test[0].task.seed);
  o.seed = 1;
  EXPECT_NE(report_json(evaluate(&m, Method::kMil, data, o)).dump(), report_json(a).dump());
}

TEST(Evaluate, BaselinesRun) {
  const auto& data = small_dataset().data;
  EvalOptions o;
  o.tasks = 2;
  o.trials = 2;
  o.shots = 2;
  const Model ctx = init_model(Method::kContextual, small_arch(), {}, data.env);
  const Model lstm = init_model(Method::kLstm, small_arch(), {}, data.env, 8);
  const EvalReport rc = evaluate(&ctx, Method::kContextual, data, o);
  const EvalReport rl = evaluate(&lstm, Method::kLstm, data, o);
  EXPECT_EQ(rc.successes.size(), 2u);
  EXPECT_EQ(rl.successes.size(), 2u);
  EXPECT_FALSE(rl.mean_post_loss.has_value());
  EXPECT_THROW(evaluate(&ctx, Method::kMil, data, o), std::invalid_argument);
}

TEST(Evaluate, Errors) {
  const auto& data = small_dataset().data;
  const Model m = init_model(Method::kMil, small_arch(), {}, data.env);
  EvalOptions o;
  o.tasks = 4;
  EXPECT_THROW(evaluate(&m, Method::kMil, data, o), EvalError);
  o.tasks = 3;
  o.shots = 4;
  EXPECT_THROW(evaluate(&m, Method::kMil, data, o), EvalError);
  EXPECT_THROW(evaluate(nullptr, Method::kMil, data, {}), std::invalid_argument);

  // Behavioral-cloning adaptation needs actions.
  DemoDataset video = data;
  for (auto& t : video.meta_test) {
    for (auto& d : t.demos) d = with_modality(d, Modality::kVideoState);
  }
  o.shots = 1;
  EXPECT_THROW(evaluate(&m, Method::kMil, video, o), ModalityError);
  meta::TrainConfig af;
  af.inner_loss = meta::InnerLoss::kActionFree;
  const Model action_free = init_model(Method::kMil, small_arch(), af, data.env);
  const EvalReport r = evaluate(&action_free, Method::kMil, video, o);
  EXPECT_FALSE(r.mean_pre_loss.has_value());  // no validation actions to score
}

TEST(Evaluate, CsvLayout) {
  const auto& data = small_dataset().data;
  EvalOptions o;
  o.tasks = 2;
  o.trials = 3;
  const std::string csv = report_csv(evaluate(nullptr, Method::kRandom, data, o));
  EXPECT_EQ(csv.rfind("# mil-eval-report v1 env_hash=", 0), 0u);
  EXPECT_NE(csv.find("\ntask,task_seed,successes,trials,pre_loss,post_loss\n0,"), std::string::npos);
}

TEST(Parallel, DeterministicSlotsAndErrors) {
  std::vector<std::size_t> out(100);
  parallel_for(out.size(), [&](std::size_t i) { out[i] = i * i; });
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], i * i);
  EXPECT_THROW(parallel_for(10,
                            [](std::size_t i) {
                              if (i == 7) throw std::runtime_error("seven");
                            }),
               std::runtime_error);
  EXPECT_GE(max_threads(), 1u);
}

}  // namespace
}  // namespace mil
