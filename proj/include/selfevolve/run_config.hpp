#pragma once

// Run configuration: an INI file with the sections [env] [policy] [reward]
// [method] [unlabeled] [dynamics] [budget], plus named presets.
//
// Resolution order: built-in defaults, then the file, then the preset (the
// preset named on the command line wins over a `preset` key in the file).
// Every section must be present, even if empty. Unknown keys, malformed
// values and invariant violations are collected and reported together.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "selfevolve/evolution.hpp"
#include "selfevolve/policy.hpp"
#include "selfevolve/reward.hpp"
#include "selfevolve/task_env.hpp"

namespace selfevolve {

struct PrmStageConfig {
    std::size_t rollouts = 16;
    double temperature = 1.0;
    // The completer is the base policy trained on the warmup set for
    // completer_factor * warmup steps.
    std::size_t completer_factor = 5;
    PrmDatasetConfig dataset;
    PrmTrainConfig train;
};

struct RunConfig {
    EnvConfig env;
    std::size_t train_size = 500;
    std::size_t val_size = 200;
    std::size_t unlabeled_size = 500;

    double misread_rate = 0.12;
    double blur_rate = 0.08;
    PolicyPrior prior;
    WarmupConfig warmup;
    PrmStageConfig prm;
    EvolutionConfig evo;
    std::string preset;  // empty = none

    // [reward] selection; evo.selection is rebuilt from these.
    std::string selection = "all";  // all | topk | threshold | randomk
    std::size_t select_k = 2;
    double alpha = 0.2;
};

// Rebuilds evo.selection from the [reward] selection keys.
void sync_selection(RunConfig& cfg);

struct ConfigIssue {
    std::string key;  // "section.key" or "section"
    std::string message;
};

class ConfigValidationError : public std::runtime_error {
public:
    explicit ConfigValidationError(std::vector<ConfigIssue> issues);
    const std::vector<ConfigIssue>& issues() const noexcept { return issues_; }

private:
    std::vector<ConfigIssue> issues_;
};

inline constexpr const char* kConfigSections[] = {"env", "policy", "reward", "method", "unlabeled", "dynamics", "budget"};

// Defaults of the reference environment.
RunConfig default_run_config();

// Parses INI text over the defaults. Throws ConfigValidationError.
RunConfig parse_run_config(std::string_view text);

std::vector<std::string> preset_names();
// Throws ConfigValidationError for an unknown name.
void apply_preset(RunConfig& cfg, std::string_view name);

// Every invariant violation; empty when valid.
std::vector<ConfigIssue> validate_run_config(const RunConfig& cfg);

// Canonical INI text of a resolved config; parse_run_config(serialize(c))
// reproduces c.
std::string serialize_run_config(const RunConfig& cfg);

// parse, apply the preset (argument wins over the file), validate.
RunConfig resolve_run_config(std::string_view text, std::string_view preset_override);

}  // namespace selfevolve
