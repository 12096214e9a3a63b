#include "selfevolve/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "selfevolve/errors.hpp"
#include "selfevolve/rng.hpp"

namespace selfevolve {

double pass_at_k_estimate(std::uint64_t n, std::uint64_t c, std::uint64_t k) {
    if (c > n) throw DomainError("pass@k needs c <= n");
    if (k < 1 || k > n) throw DomainError("pass@k needs 1 <= K <= n");
    if (n - c < k) return 1.0;
    // C(n-c, K) / C(n, K) = prod_{i=n-c+1}^{n} (1 - K/i)
    double miss = 1.0;
    for (std::uint64_t i = n - c + 1; i <= n; ++i) {
        miss *= 1.0 - static_cast<double>(k) / static_cast<double>(i);
    }
    return 1.0 - miss;
}

namespace {

// Rollout indices by aggregate descending, ties to the lower index.
std::vector<std::size_t> ranked(std::span<const ScoredResponse> rollouts) {
    std::vector<std::size_t> order(rollouts.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return rollouts[a].aggregate > rollouts[b].aggregate; });
    return order;
}

std::optional<int> predicted(const ScoredResponse& r, const TaskInstance& inst) {
    return evaluate_response(inst, r.response).predicted;
}

std::optional<int> vote(std::span<const ScoredResponse> rollouts, const TaskInstance& inst, bool weighted) {
    std::map<int, double> tally;  // ordered, so the first maximum is the smaller answer
    for (const auto& r : rollouts) {
        if (auto a = predicted(r, inst)) tally[*a] += weighted ? r.aggregate : 1.0;
    }
    std::optional<int> best;
    double best_w = 0.0;
    for (const auto& [answer, w] : tally) {
        if (!best || w > best_w) {
            best = answer;
            best_w = w;
        }
    }
    return best;
}

}  // namespace

int reward_pass_at_k(std::span<const ScoredResponse> rollouts, std::size_t k) {
    const auto order = ranked(rollouts);
    const std::size_t take = std::min(k, order.size());
    for (std::size_t i = 0; i < take; ++i) {
        if (rollouts[order[i]].correct) return 1;
    }
    return 0;
}

std::optional<int> best_of_n_answer(std::span<const ScoredResponse> rollouts, const TaskInstance& inst) {
    std::optional<int> best;
    double best_score = 0.0;
    for (const auto& r : rollouts) {
        const auto a = predicted(r, inst);
        if (!a) continue;
        if (!best || r.aggregate > best_score || (r.aggregate == best_score && *a < *best)) {
            best = a;
            best_score = r.aggregate;
        }
    }
    return best;
}

std::optional<int> weighted_vote_answer(std::span<const ScoredResponse> rollouts, const TaskInstance& inst) {
    return vote(rollouts, inst, true);
}

std::optional<int> majority_vote_answer(std::span<const ScoredResponse> rollouts, const TaskInstance& inst) {
    return vote(rollouts, inst, false);
}

VerifierOutcome verifier_outcome(std::span<const ScoredResponse> rollouts, const TaskInstance& inst) {
    auto hit = [&](std::optional<int> a) { return a.has_value() && *a == inst.gold_answer; };
    return {hit(best_of_n_answer(rollouts, inst)), hit(weighted_vote_answer(rollouts, inst)),
            hit(majority_vote_answer(rollouts, inst))};
}

std::vector<double> TemperatureControllerConfig::default_grid() {
    std::vector<double> g;
    for (int i = 3; i <= 16; ++i) g.push_back(i / 10.0);
    return g;
}

void TemperatureControllerConfig::validate() const {
    if (grid.empty()) throw ConfigError("dynamics.grid", "dynamics.grid must not be empty");
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (!(grid[i] > 0.0)) throw ConfigError("dynamics.grid", "dynamics.grid temperatures must be positive");
        if (i > 0 && !(grid[i] > grid[i - 1])) {
            throw ConfigError("dynamics.grid", "dynamics.grid must be strictly increasing");
        }
    }
    if (period < 1) throw ConfigError("dynamics.period", "dynamics.period must be at least 1");
    if (!(initial > 0.0)) throw ConfigError("dynamics.initial_temperature", "dynamics.initial_temperature must be positive");
    if (rollouts < 1) throw ConfigError("dynamics.controller_rollouts", "dynamics.controller_rollouts must be positive");
}

std::vector<double> default_monitor_temperatures() { return {0.5, 0.7, 1.0, 1.2, 1.5, 1.7, 2.0}; }

std::size_t argmax_lowest(std::span<const double> values) {
    if (values.empty()) throw UndefinedInput("argmax of an empty list");
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) best = i;
    }
    return best;
}

namespace {

constexpr std::uint64_t kTagController = 0xC047;
constexpr std::uint64_t kTagMonitor = 0x3017;
constexpr std::uint64_t kTagVerifier = 0x7E21;

std::uint64_t milli(double t) { return static_cast<std::uint64_t>(std::llround(t * 1000.0)); }

std::vector<ScoredResponse> scored_rollouts(const PolicyParams& params, const TaskInstance& inst, const PRMParams* prm,
                                            double temperature, std::size_t n, std::uint64_t seed) {
    std::vector<ScoredResponse> out;
    out.reserve(n);
    for (const Response& r : sample_responses(params, inst, temperature, n, seed)) {
        out.push_back(score_rollout(prm, inst, r));
    }
    return out;
}

}  // namespace

TemperatureChoice select_temperature(const TemperatureControllerConfig& ctrl, const PolicyParams& params,
                                     std::span<const TaskInstance> validation, const PRMParams* prm,
                                     std::uint64_t seed) {
    ctrl.validate();
    if (validation.empty()) throw ConfigError("env.val_size", "temperature controller needs a validation set");
    TemperatureChoice choice;
    for (double t : ctrl.grid) {
        std::size_t hits = 0;
        for (std::size_t q = 0; q < validation.size(); ++q) {
            const auto rollouts =
                scored_rollouts(params, validation[q], prm, t, ctrl.rollouts, derive_seed(seed, {kTagController, milli(t), q}));
            hits += static_cast<std::size_t>(reward_pass_at_k(rollouts, 2));
        }
        choice.reward_pass_at_2.push_back(static_cast<double>(hits) / static_cast<double>(validation.size()));
    }
    choice.temperature = ctrl.grid[argmax_lowest(choice.reward_pass_at_2)];
    return choice;
}

SelectionAnalysis analyze_selected(std::span<const QueryScored> queries) {
    SelectionAnalysis out;
    double top_steps = 0, rest_steps = 0, top_rel = 0, rest_rel = 0;
    std::size_t top_n = 0, rest_n = 0;
    for (const QueryScored& q : queries) {
        std::vector<ScoredResponse> correct;
        for (const auto& r : q.rollouts) {
            if (r.correct) correct.push_back(r);
        }
        if (correct.size() < 3) continue;
        ++out.queries;
        const auto order = ranked(correct);
        for (std::size_t i = 0; i < order.size(); ++i) {
            const Response& resp = correct[order[i]].response;
            const double steps = static_cast<double>(resp.steps.size());
            const double rel = relevance_fraction(*q.instance, resp);
            if (i < 2) {
                top_steps += steps;
                top_rel += rel;
                ++top_n;
            } else {
                rest_steps += steps;
                rest_rel += rel;
                ++rest_n;
            }
        }
    }
    if (out.queries == 0) {
        out.empty_reason = "no query has at least three correct rollouts";
        return out;
    }
    out.top2_steps = top_steps / static_cast<double>(top_n);
    out.rest_steps = rest_steps / static_cast<double>(rest_n);
    out.top2_relevance = top_rel / static_cast<double>(top_n);
    out.rest_relevance = rest_rel / static_cast<double>(rest_n);
    return out;
}

bool operator==(const VerifierMetrics& a, const VerifierMetrics& b) {
    return a.best_of_n == b.best_of_n && a.weighted_vote == b.weighted_vote && a.majority_vote == b.majority_vote;
}

bool operator==(const DynamicsRecord& a, const DynamicsRecord& b) {
    return a.iteration == b.iteration && a.temperature == b.temperature && a.greedy_accuracy == b.greedy_accuracy &&
           a.pass_at_k == b.pass_at_k && a.reward_pass_at_2 == b.reward_pass_at_2 && a.verifier == b.verifier &&
           a.controller_rp2 == b.controller_rp2 && a.train == b.train && a.warnings == b.warnings;
}

std::string temperature_key(double t) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", t);
    return buf;
}

namespace {

nlohmann::json temperature_map(const std::map<double, double>& m) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [t, v] : m) j[temperature_key(t)] = v;
    return j;
}

std::map<double, double> temperature_map_from(const nlohmann::json& j) {
    std::map<double, double> m;
    for (const auto& [k, v] : j.items()) m[std::stod(k)] = v.get<double>();
    return m;
}

}  // namespace

nlohmann::json to_json(const DynamicsRecord& r) {
    nlohmann::json j;
    j["schema"] = kMetricsSchema;
    j["iteration"] = r.iteration;
    j["temperature"] = r.temperature;
    j["greedy_accuracy"] = r.greedy_accuracy;
    nlohmann::json pk = nlohmann::json::object();
    for (const auto& [t, byk] : r.pass_at_k) {
        nlohmann::json inner = nlohmann::json::object();
        for (const auto& [k, v] : byk) inner[std::to_string(k)] = v;
        pk[temperature_key(t)] = std::move(inner);
    }
    j["pass_at_k"] = std::move(pk);
    j["reward_pass_at_2"] = temperature_map(r.reward_pass_at_2);
    j["best_of_n"] = r.verifier.best_of_n;
    j["weighted_vote"] = r.verifier.weighted_vote;
    j["majority_vote"] = r.verifier.majority_vote;
    j["controller_rp2"] = temperature_map(r.controller_rp2);
    nlohmann::json train;
    train["selected"] = r.train.selected;
    train["updates"] = r.train.updates;
    train["mean_loss"] = r.train.mean_loss;
    train["lr"] = r.train.lr;
    train["skipped_queries"] = r.train.skipped_queries;
    train["unlabeled_queries"] = r.train.unlabeled_queries;
    train["pseudo_label_accuracy"] =
        r.train.pseudo_label_accuracy ? nlohmann::json(*r.train.pseudo_label_accuracy) : nlohmann::json(nullptr);
    j["train"] = std::move(train);
    j["warnings"] = r.warnings;
    return j;
}

DynamicsRecord record_from_json(const nlohmann::json& j) {
    const std::string schema = j.value("schema", std::string("<missing>"));
    if (schema != kMetricsSchema) {
        throw SchemaMismatch("metrics record has schema '" + schema + "', this build reads '" + kMetricsSchema +
                             "'; regenerate the run or migrate the log");
    }
    DynamicsRecord r;
    r.iteration = j.at("iteration").get<std::uint64_t>();
    r.temperature = j.at("temperature").get<double>();
    r.greedy_accuracy = j.at("greedy_accuracy").get<double>();
    for (const auto& [t, inner] : j.at("pass_at_k").items()) {
        auto& byk = r.pass_at_k[std::stod(t)];
        for (const auto& [k, v] : inner.items()) byk[std::stoi(k)] = v.get<double>();
    }
    r.reward_pass_at_2 = temperature_map_from(j.at("reward_pass_at_2"));
    r.verifier.best_of_n = j.at("best_of_n").get<double>();
    r.verifier.weighted_vote = j.at("weighted_vote").get<double>();
    r.verifier.majority_vote = j.at("majority_vote").get<double>();
    r.controller_rp2 = temperature_map_from(j.at("controller_rp2"));
    const auto& tr = j.at("train");
    r.train.selected = tr.at("selected").get<std::size_t>();
    r.train.updates = tr.at("updates").get<std::size_t>();
    r.train.mean_loss = tr.at("mean_loss").get<double>();
    r.train.lr = tr.at("lr").get<double>();
    r.train.skipped_queries = tr.at("skipped_queries").get<std::size_t>();
    r.train.unlabeled_queries = tr.at("unlabeled_queries").get<std::size_t>();
    if (!tr.at("pseudo_label_accuracy").is_null()) r.train.pseudo_label_accuracy = tr.at("pseudo_label_accuracy").get<double>();
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    return r;
}

double greedy_accuracy(const PolicyParams& params, std::span<const TaskInstance> instances) {
    if (instances.empty()) return 0.0;
    std::size_t hits = 0;
    for (const auto& inst : instances) {
        if (evaluate_response(inst, greedy_decode(params, inst)).correct) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(instances.size());
}

void evaluate_policy(const PolicyParams& params, std::span<const TaskInstance> validation, const PRMParams* prm,
                     const EvalConfig& cfg, double chosen_temperature, std::uint64_t seed, DynamicsRecord& out) {
    out.greedy_accuracy = greedy_accuracy(params, validation);
    out.pass_at_k.clear();
    out.reward_pass_at_2.clear();
    const double nq = static_cast<double>(std::max<std::size_t>(validation.size(), 1));
    auto verifier_from = [&](const std::vector<std::vector<ScoredResponse>>& per_query) {
        VerifierMetrics m;
        for (std::size_t q = 0; q < validation.size(); ++q) {
            const auto o = verifier_outcome(per_query[q], validation[q]);
            m.best_of_n += o.best_of_n ? 1.0 : 0.0;
            m.weighted_vote += o.weighted_vote ? 1.0 : 0.0;
            m.majority_vote += o.majority_vote ? 1.0 : 0.0;
        }
        m.best_of_n /= nq;
        m.weighted_vote /= nq;
        m.majority_vote /= nq;
        return m;
    };
    bool verifier_done = false;
    for (double t : cfg.temperatures) {
        std::vector<std::vector<ScoredResponse>> per_query;
        per_query.reserve(validation.size());
        std::map<int, double> pk;
        double rp2 = 0.0;
        for (std::size_t q = 0; q < validation.size(); ++q) {
            per_query.push_back(
                scored_rollouts(params, validation[q], prm, t, cfg.rollouts, derive_seed(seed, {kTagMonitor, milli(t), q})));
            std::uint64_t c = 0;
            for (const auto& r : per_query.back()) c += r.correct ? 1 : 0;
            for (int k : cfg.ks) {
                if (static_cast<std::size_t>(k) <= cfg.rollouts) {
                    pk[k] += pass_at_k_estimate(cfg.rollouts, c, static_cast<std::uint64_t>(k));
                }
            }
            rp2 += reward_pass_at_k(per_query.back(), 2);
        }
        for (auto& [k, v] : pk) v /= nq;
        out.pass_at_k[t] = std::move(pk);
        out.reward_pass_at_2[t] = rp2 / nq;
        if (t == chosen_temperature) {
            out.verifier = verifier_from(per_query);
            verifier_done = true;
        }
    }
    if (!verifier_done) {
        std::vector<std::vector<ScoredResponse>> per_query;
        for (std::size_t q = 0; q < validation.size(); ++q) {
            per_query.push_back(scored_rollouts(params, validation[q], prm, chosen_temperature, cfg.rollouts,
                                                derive_seed(seed, {kTagVerifier, milli(chosen_temperature), q})));
        }
        out.verifier = verifier_from(per_query);
    }
}

}  // namespace selfevolve
