#pragma once

// End-to-end run: splits, warmup, PRM stage, then the evolution loop.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "selfevolve/evolution.hpp"
#include "selfevolve/reward.hpp"
#include "selfevolve/run_config.hpp"

namespace selfevolve {

struct Splits {
    std::vector<TaskInstance> train;
    std::vector<TaskInstance> validation;
    std::vector<TaskInstance> unlabeled;
};

// Train, validation and unlabeled queries for a run seed.
Splits make_splits(const RunConfig& cfg, std::uint64_t seed);

PolicyFeatureSpec policy_spec(const RunConfig& cfg, std::uint64_t seed);

struct PrmStageResult {
    PRMParams prm;
    PrmDataset dataset;
};

// Samples the completer on `questions`, builds the balanced MC-labelled
// dataset and fits the PRM.
PrmStageResult run_prm_stage(const PolicyParams& completer, std::span<const TaskInstance> questions,
                             const PrmStageConfig& cfg, std::uint64_t seed);

// Not copyable: the warmup set points into `splits`.
struct RunResult {
    RunResult() = default;
    RunResult(const RunResult&) = delete;
    RunResult& operator=(const RunResult&) = delete;
    RunResult(RunResult&&) = default;
    RunResult& operator=(RunResult&&) = default;

    Splits splits;
    PolicyParams base;
    WarmupResult warmup;
    PolicyParams completer;
    PrmStageResult prm;
    EvolutionState state;
    std::vector<std::string> warnings;
};

using IterationObserver = std::function<void(const EvolutionState&)>;

// Base policy trained on the warmup set for completer_factor times the warmup
// steps, with the same rollouts as the warmup.
PolicyParams train_completer(const PolicyParams& base, std::span<const TaskInstance> train, const RunConfig& cfg,
                             std::uint64_t seed);

// Runs warmup, the PRM stage and iterations until the budget is spent. The
// observer sees the state after warmup and after every iteration.
RunResult run_evolution(const RunConfig& cfg, std::uint64_t seed, const IterationObserver& observer = {});

}  // namespace selfevolve
