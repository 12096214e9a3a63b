#pragma once

// Answer-match rewards, the process reward model (PRM) and the selection
// operations applied to answer-filtered rollouts.

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "selfevolve/checkpoint.hpp"
#include "selfevolve/policy.hpp"
#include "selfevolve/task_env.hpp"

namespace selfevolve {

int exact_match(std::optional<int> predicted, int gold);

// PRM features of step k given the prefix s^{<k}. The PRM reads the query
// without the policy's perception noise.
//
//   0 bias                 6 full match on a valid prefix    12..14 position one-hot (1, 2, 3+)
//   1 full hop match       7 step beyond H                   15 prefix length / max_steps
//   2 agg match            8 last required hop (k = H-1)     16 beyond H on a valid prefix
//   3 axis match           9 one hop left after this step    17 trailing steps so far / max_steps
//   4 index match         10 two hops left after this step
//   5 valid prefix        11 position one-hot (0)
struct PrmFeatureSpec {
    int max_steps = 8;

    static constexpr std::size_t kDimension = 18;
    std::size_t dimension() const { return kDimension; }
    friend bool operator==(const PrmFeatureSpec&, const PrmFeatureSpec&) = default;
};

struct PRMParams {
    PrmFeatureSpec spec;
    std::vector<double> weights;

    static PRMParams zeros(const PrmFeatureSpec& spec);
    friend bool operator==(const PRMParams&, const PRMParams&) = default;
};

// phi_PRM for every step of `steps` (row k = features of step k).
std::vector<std::vector<double>> prm_features(const PrmFeatureSpec& spec, const TaskInstance& inst,
                                              std::span<const Step> steps);

double logistic(double z);

struct ScoredResponse {
    Response response;
    bool correct = false;
    std::vector<double> step_scores;
    double aggregate = 0.0;
};

// Throws UndefinedInput for a response without steps.
ScoredResponse prm_score(const PRMParams& prm, const TaskInstance& inst, const Response& resp);

// Scores a rollout; responses without steps (an immediate ANSWER) get an
// empty score list and aggregate 0.
ScoredResponse score_rollout(const PRMParams* prm, const TaskInstance& inst, const Response& resp);

// min over step scores; UndefinedInput when empty.
double min_aggregate(std::span<const double> step_scores);

struct TopK {
    std::size_t k = 2;
};
struct Threshold {
    double alpha = 0.2;
};
struct RandomK {
    std::size_t k = 2;
    std::uint64_t seed = 0;
};

struct SelectionConfig {
    std::variant<TopK, Threshold, RandomK> strategy = TopK{};

    // Every correct response (plain rejection fine-tuning).
    static SelectionConfig all() { return {TopK{std::numeric_limits<std::size_t>::max()}}; }
    void validate() const;
};

// Indices (into `rollouts`) of the selected responses. Only correct rollouts
// are candidates. TopK orders by aggregate descending with ties to the lower
// index; Threshold keeps aggregate > alpha in rollout order; RandomK draws k
// without replacement.
std::vector<std::size_t> select_indices(std::span<const ScoredResponse> rollouts, const SelectionConfig& cfg);
std::vector<Response> rerank_select(std::span<const ScoredResponse> rollouts, const SelectionConfig& cfg);

// label[k] = (1/N) sum_j 1(completion j of s^{<=k} is correct). The final step
// of a finished response takes the response's own correctness.
std::vector<double> mc_annotate(const PolicyParams& completer, const TaskInstance& inst, const Response& resp,
                                std::size_t completions, double temperature, std::uint64_t seed);

struct PRMDatasetRow {
    TaskInstance instance;
    Response response;
    bool correct = false;
    std::vector<double> step_labels;

    friend bool operator==(const PRMDatasetRow&, const PRMDatasetRow&) = default;
};

// Record schema: {instance_id, steps, answer, correct, step_labels}.
nlohmann::json to_json(const PRMDatasetRow& row);
PRMDatasetRow prm_row_from_json(const nlohmann::json& j, const std::map<std::uint64_t, TaskInstance>& instances);

struct QuestionRollouts {
    const TaskInstance* instance = nullptr;
    std::vector<Response> rollouts;
};

struct PrmDatasetConfig {
    std::size_t per_question_cap = 4;
    std::size_t completions = 8;
    double temperature = 1.0;
    std::uint64_t seed = 0;
};

struct PrmDataset {
    std::vector<PRMDatasetRow> rows;
    std::vector<std::string> warnings;
};

// Dedup + per-question cap, then 1:1 correct/wrong balance, then MC labels.
std::vector<PRMDatasetRow> retain_rows(std::span<const QuestionRollouts> questions, const PrmDatasetConfig& cfg);
PrmDataset build_prm_dataset(const PolicyParams& completer, std::span<const QuestionRollouts> questions,
                             const PrmDatasetConfig& cfg);

struct PrmTrainConfig {
    std::size_t steps = 300;
    std::size_t batch_rows = 64;
    double lr = 0.05;
    double warmup_ratio = 0.1;
    std::uint64_t seed = 0;
};

// Mean squared error over all labelled steps of `rows`, and its gradient.
double prm_mse_and_gradient(const PRMParams& prm, std::span<const PRMDatasetRow> rows, std::span<double> grad);
double prm_mse(const PRMParams& prm, std::span<const PRMDatasetRow> rows);

PRMParams train_prm(std::span<const PRMDatasetRow> rows, const PrmFeatureSpec& spec, const PrmTrainConfig& cfg);

// PRM payload: u32 max_steps, u64 n, f64[n] weights (kind tag 2).
std::vector<std::uint8_t> save_prm(const PRMParams& prm);
PRMParams load_prm(std::span<const std::uint8_t> bytes);

}  // namespace selfevolve
