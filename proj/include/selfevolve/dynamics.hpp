#pragma once

// Exploration and exploitation metrics, the adaptive temperature controller
// and the top-2 versus rest analysis.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "selfevolve/policy.hpp"
#include "selfevolve/reward.hpp"
#include "selfevolve/task_env.hpp"

namespace selfevolve {

// 1 - C(n-c, K) / C(n, K). DomainError unless 0 <= c <= n and 1 <= K <= n.
double pass_at_k_estimate(std::uint64_t n, std::uint64_t c, std::uint64_t k);

// 1 iff one of the K highest-aggregate rollouts (ties to the lower index) is
// correct. Fewer than K rollouts uses all of them.
int reward_pass_at_k(std::span<const ScoredResponse> rollouts, std::size_t k = 2);

struct VerifierOutcome {
    bool best_of_n = false;
    bool weighted_vote = false;
    bool majority_vote = false;
};

// Voting ignores rollouts without an answer; ties go to the smaller answer.
std::optional<int> best_of_n_answer(std::span<const ScoredResponse> rollouts, const TaskInstance& inst);
std::optional<int> weighted_vote_answer(std::span<const ScoredResponse> rollouts, const TaskInstance& inst);
std::optional<int> majority_vote_answer(std::span<const ScoredResponse> rollouts, const TaskInstance& inst);
VerifierOutcome verifier_outcome(std::span<const ScoredResponse> rollouts, const TaskInstance& inst);

struct VerifierMetrics {
    double best_of_n = 0.0;
    double weighted_vote = 0.0;
    double majority_vote = 0.0;
};

struct TemperatureControllerConfig {
    std::vector<double> grid = default_grid();
    std::size_t period = 2;
    double initial = 1.0;
    std::size_t rollouts = 16;

    // 0.3, 0.4, ..., 1.6
    static std::vector<double> default_grid();
    void validate() const;
};

std::vector<double> default_monitor_temperatures();

// Index of the largest value; ties go to the lowest index.
std::size_t argmax_lowest(std::span<const double> values);

struct TemperatureChoice {
    double temperature = 1.0;
    std::vector<double> reward_pass_at_2;  // aligned with the grid
};

// Sweeps the controller grid on the validation set. Rollouts for grid point g
// and query q use derive_seed(seed, {g-temperature in milli-units, q}).
TemperatureChoice select_temperature(const TemperatureControllerConfig& ctrl, const PolicyParams& params,
                                     std::span<const TaskInstance> validation, const PRMParams* prm,
                                     std::uint64_t seed);

struct SelectionAnalysis {
    std::size_t queries = 0;
    double top2_steps = 0.0;
    double rest_steps = 0.0;
    double top2_relevance = 0.0;
    double rest_relevance = 0.0;
    // Set when no query had at least three correct rollouts.
    std::optional<std::string> empty_reason;
};

struct QueryScored {
    const TaskInstance* instance = nullptr;
    std::vector<ScoredResponse> rollouts;
};

SelectionAnalysis analyze_selected(std::span<const QueryScored> queries);

inline constexpr const char* kMetricsSchema = "selfevolve.metrics/1";

// One line of metrics.jsonl.
//
//   schema             "selfevolve.metrics/1"
//   iteration          0 = after warmup, t = after t evolution iterations
//   temperature        sampling temperature chosen for the next Generate
//   greedy_accuracy    validation accuracy of greedy decoding
//   pass_at_k          {"<T>": {"<K>": fraction}} over the monitor temperatures
//   reward_pass_at_2   {"<T>": fraction}
//   best_of_n, weighted_vote, majority_vote
//                      verifier accuracies at the chosen temperature
//   controller_rp2     {"<T>": fraction} when the controller swept this record
//   train              {selected, updates, mean_loss, lr, skipped_queries,
//                       unlabeled_queries, pseudo_label_accuracy}
//   warnings           list of strings
struct TrainStats {
    std::size_t selected = 0;
    std::size_t updates = 0;
    double mean_loss = 0.0;
    double lr = 0.0;
    std::size_t skipped_queries = 0;
    std::size_t unlabeled_queries = 0;
    std::optional<double> pseudo_label_accuracy;

    friend bool operator==(const TrainStats&, const TrainStats&) = default;
};

struct DynamicsRecord {
    std::uint64_t iteration = 0;
    double temperature = 1.0;
    double greedy_accuracy = 0.0;
    std::map<double, std::map<int, double>> pass_at_k;
    std::map<double, double> reward_pass_at_2;
    VerifierMetrics verifier;
    std::map<double, double> controller_rp2;
    TrainStats train;
    std::vector<std::string> warnings;
};

bool operator==(const VerifierMetrics& a, const VerifierMetrics& b);
bool operator==(const DynamicsRecord& a, const DynamicsRecord& b);

// Stable key for a temperature, e.g. "1.00".
std::string temperature_key(double t);

nlohmann::json to_json(const DynamicsRecord& r);
// Throws SchemaMismatch for another schema version.
DynamicsRecord record_from_json(const nlohmann::json& j);

struct EvalConfig {
    std::vector<double> temperatures = default_monitor_temperatures();
    std::vector<int> ks = {1, 2, 4, 8, 16};
    std::size_t rollouts = 16;
};

// Fills greedy accuracy, Pass@K and Reward-Pass@2 for every monitor
// temperature, and verifier metrics at `chosen_temperature`.
void evaluate_policy(const PolicyParams& params, std::span<const TaskInstance> validation, const PRMParams* prm,
                     const EvalConfig& cfg, double chosen_temperature, std::uint64_t seed, DynamicsRecord& out);

double greedy_accuracy(const PolicyParams& params, std::span<const TaskInstance> instances);

}  // namespace selfevolve
