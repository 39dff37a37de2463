#pragma once

// Comparison policies: random N(0, 1) torques, a contextual network that sees
// the demonstration's final observation next to the current one, and an LSTM
// that reads the whole demonstration before the current observation.

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "mil/demo.hpp"
#include "mil/meta.hpp"
#include "mil/policy.hpp"
#include "mil/random.hpp"

namespace mil::baselines {

reach::Vec2 random_action(Rng& rng);

// ---------------------------------------------------------------------------
// Contextual

// Input widths doubled: state is [demo final state, current state]; images
// are stacked along channels.
ArchitectureConfig contextual_arch(const ArchitectureConfig& base);

// Pairs the (single-row) demo final observation with every row of `current`.
ObservationBatch contextual_input(const ObservationBatch& demo_final, const ObservationBatch& current);

// Last row of a demonstration batch.
ObservationBatch final_observation(const DemoBatch& demo);

// Throws ModalityError if the two observations differ in modality.
ad::Var contextual_forward(const ArchitectureConfig& ctx_arch, const VarSet& params, const ObservationBatch& demo_final,
                           const ObservationBatch& current);

// BC loss of the target demo's actions, conditioned on the mean prediction
// over the conditioning demos.
meta::TaskLoss contextual_loss(const ArchitectureConfig& ctx_arch);

// ---------------------------------------------------------------------------
// LSTM

struct LstmConfig {
  ArchitectureConfig trunk;  // feature extractor; its head is unused
  std::size_t width = 512;
  void validate() const;
};

void to_json(nlohmann::json& j, const LstmConfig& c);
void from_json(const nlohmann::json& j, LstmConfig& c);

// Trunk parameters (no heads) plus lstm.weight [4W, F + A + W], lstm.bias
// [4W] (forget-gate bias 1), lstm_head.weight [A, W], lstm_head.bias [A].
ParamSet init_lstm_params(const LstmConfig& config, std::uint64_t seed);

struct LstmState {
  ad::Var hidden;  // [N, W]
  ad::Var cell;    // [N, W]
};

// One recurrence step; input is [N, F + A].
LstmState lstm_cell(const LstmConfig& config, const VarSet& params, const LstmState& state, const ad::Var& input);

// Runs the demo (features and actions per step; zero actions when the demo
// has none), then each row of `current` as one further step from the demo's
// final state with a zero action slot, and decodes to actions [N, A].
ad::Var lstm_forward(const LstmConfig& config, const VarSet& params, const DemoBatch& demo,
                     const ObservationBatch& current);

// The two halves of lstm_forward: the state after reading the demo, and the
// action decoded from that state for each row of `current`.
LstmState lstm_encode(const LstmConfig& config, const VarSet& params, const DemoBatch& demo);
ad::Var lstm_decode(const LstmConfig& config, const VarSet& params, const LstmState& state,
                    const ObservationBatch& current);

meta::TaskLoss lstm_loss(const LstmConfig& config);

// ---------------------------------------------------------------------------

// Mean of per-demo predictions, the k-shot rule for conditioned baselines.
Tensor contextual_action(const ArchitectureConfig& ctx_arch, const ParamSet& params,
                         const std::vector<const DemoBatch*>& demos, const ObservationBatch& current);
Tensor lstm_action(const LstmConfig& config, const ParamSet& params, const std::vector<const DemoBatch*>& demos,
                   const ObservationBatch& current);
// Same, from states already encoded (with constant params), so a rollout
// reads each demo once.
Tensor lstm_action(const LstmConfig& config, const VarSet& params, const std::vector<LstmState>& encoded,
                   const ObservationBatch& current);

}  // namespace mil::baselines
