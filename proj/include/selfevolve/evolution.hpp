#pragma once

// The self-evolving loop: warmup, query scheduling, the continuity semantics
// of the three training methods, Generate / Improve, and unlabeled prompts
// with pseudo-labels.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "selfevolve/dynamics.hpp"
#include "selfevolve/policy.hpp"
#include "selfevolve/reward.hpp"
#include "selfevolve/task_env.hpp"

namespace selfevolve {

enum class InitFrom { FirstCheckpoint, LastCheckpoint };

struct TrainMethodConfig {
    InitFrom init_from = InitFrom::LastCheckpoint;
    bool optimizer_continuous = true;
    double interval_fraction = 0.25;

    static TrainMethodConfig continuous(double interval = 0.25) { return {InitFrom::LastCheckpoint, true, interval}; }
    static TrainMethodConfig iterative_rft(double interval = 1.0) { return {InitFrom::LastCheckpoint, false, interval}; }
    static TrainMethodConfig rest_em(double interval = 1.0) { return {InitFrom::FirstCheckpoint, false, interval}; }

    // Rejects (FirstCheckpoint, continuous) and intervals outside the allowed set.
    void validate() const;
    friend bool operator==(const TrainMethodConfig&, const TrainMethodConfig&) = default;
};

inline constexpr double kIntervalChoices[] = {0.0625, 0.125, 0.25, 0.5, 1.0};

enum class VoteWeight { PRMAggregate, Uniform };

struct UnlabeledConfig {
    bool enabled = false;
    double t_mixin = 0.5;
    bool oracle = false;
    VoteWeight vote_weight = VoteWeight::PRMAggregate;
    // Unlabeled queries per labeled query in a mixed batch.
    double ratio = 1.0;

    void validate() const;
    friend bool operator==(const UnlabeledConfig&, const UnlabeledConfig&) = default;
};

struct PolicyState {
    PolicyParams params;
    OptimizerState optimizer;
    LrSchedule schedule;

    friend bool operator==(const PolicyState&, const PolicyState&) = default;
};

struct WarmupConfig {
    std::size_t rollouts = 16;
    double temperature = 1.0;
    std::size_t per_query_cap = 4;
    std::size_t steps = 200;
    std::size_t batch_size = 16;
    double lr = 0.05;
    double warmup_ratio = 0.1;
    std::uint64_t seed = 0;
};

// Retained correct rollouts of the base policy.
struct WarmupSet {
    std::vector<TrainPair> pairs;
};

struct WarmupResult {
    PolicyParams params;
    WarmupSet set;
    std::vector<std::string> warnings;
};

WarmupResult run_warmup(const PolicyParams& base, std::span<const TaskInstance> train, const WarmupConfig& cfg);

struct ImproveResult {
    std::size_t updates = 0;
    double mean_loss = 0.0;
    double last_lr = 0.0;
};

// `steps` sft_update calls over `pairs` in seeded shuffled mini-batches,
// reshuffling after each pass.
ImproveResult improve(PolicyState& state, std::span<const TrainPair> pairs, std::size_t steps,
                      std::size_t batch_size, std::uint64_t seed);

struct EvolutionState {
    std::uint64_t t = 0;
    PolicyState policy;
    PolicyParams pi0;
    std::vector<std::size_t> order;
    std::vector<std::size_t> unlabeled_order;
    std::size_t cursor = 0;
    std::size_t unlabeled_cursor = 0;
    double temperature = 1.0;
    std::uint64_t updates_done = 0;
    std::uint64_t carry = 0;  // steps left over from iterations that selected nothing
    std::uint64_t rng_state = 0;
    std::vector<DynamicsRecord> history;
};

// Policy state at the start of an iteration. Restarting methods get a fresh
// optimizer and the schedule rewound to position 0; total_steps stays the
// global budget.
PolicyState iteration_init(const TrainMethodConfig& method, const EvolutionState& state);

struct QueryRef {
    bool unlabeled = false;
    std::size_t index = 0;

    friend bool operator==(const QueryRef&, const QueryRef&) = default;
};

// max(1, round(interval * pool))
std::size_t queries_per_iteration(double interval_fraction, std::size_t pool);

// Next query batch; advances the cursors. Unlabeled queries are interleaved
// once t >= t_mixin * total_iterations.
std::vector<QueryRef> schedule_batches(EvolutionState& state, const TrainMethodConfig& method,
                                       const UnlabeledConfig& unlabeled, std::size_t total_iterations);

struct PseudoLabel {
    int answer = 0;
    // Rollouts agreeing with `answer`, marked correct.
    std::vector<ScoredResponse> survivors;
};

// Weighted vote over emitted answers (ties to the smaller answer); in oracle
// mode the gold answer replaces the vote. Empty when no rollout answers.
std::optional<PseudoLabel> pseudo_label_and_filter(std::span<const ScoredResponse> rollouts, const TaskInstance& inst,
                                                   const UnlabeledConfig& cfg);

struct EvolutionConfig {
    TrainMethodConfig method;
    SelectionConfig selection = SelectionConfig::all();
    UnlabeledConfig unlabeled;
    bool sft_only = false;  // train on the warmup set only, no Generate

    std::size_t rollouts = 16;
    double temperature = 1.0;
    bool adaptive_temperature = false;
    TemperatureControllerConfig controller;
    EvalConfig eval;

    std::uint64_t budget = 2000;
    double epochs = 5.0;
    std::size_t batch_size = 16;
    double lr = 0.05;
    double warmup_ratio = 0.1;

    // Planned iterations: max(1, round(epochs / interval)).
    std::size_t planned_iterations() const;
    // Steps allotted to iteration t before carry-over.
    std::uint64_t allotment(std::uint64_t t) const;
    bool selection_needs_prm() const;
    void validate() const;
};

struct EvolutionInputs {
    std::span<const TaskInstance> train;
    std::span<const TaskInstance> validation;
    std::span<const TaskInstance> unlabeled;
    const WarmupSet* warmup = nullptr;
    const PRMParams* prm = nullptr;
    std::uint64_t seed = 0;
};

// State after warmup, with the iteration-0 dynamics record.
EvolutionState start_evolution(const PolicyParams& pi0, const EvolutionConfig& cfg, const EvolutionInputs& in);

// One Generate / Improve cycle followed by a dynamics record.
void run_iteration(EvolutionState& state, const EvolutionConfig& cfg, const EvolutionInputs& in);

bool budget_exhausted(const EvolutionState& state, const EvolutionConfig& cfg);

// Hard cap on iterations so a run that keeps selecting nothing terminates.
std::size_t iteration_cap(const EvolutionConfig& cfg);

}  // namespace selfevolve
