#include "selfevolve/reward.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "selfevolve/errors.hpp"
#include "selfevolve/rng.hpp"

namespace selfevolve {

int exact_match(std::optional<int> predicted, int gold) { return predicted && *predicted == gold ? 1 : 0; }

PRMParams PRMParams::zeros(const PrmFeatureSpec& spec) { return {spec, std::vector<double>(spec.dimension(), 0.0)}; }

double logistic(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

std::vector<std::vector<double>> prm_features(const PrmFeatureSpec& spec, const TaskInstance& inst,
                                              std::span<const Step> steps) {
    const int hops = inst.hop_count();
    const double horizon = static_cast<double>(std::max(spec.max_steps, 1));
    std::vector<std::vector<double>> rows;
    rows.reserve(steps.size());
    bool valid = true;  // all earlier steps matched their hop
    for (std::size_t i = 0; i < steps.size(); ++i) {
        const int k = static_cast<int>(i);
        std::vector<double> phi(spec.dimension(), 0.0);
        phi[0] = 1.0;
        bool full = false;
        if (k < hops) {
            const Hop& want = inst.hops[i];
            const Hop got = steps[i].hop();
            full = got == want;
            phi[1] = full ? 1.0 : 0.0;
            phi[2] = got.agg == want.agg ? 1.0 : 0.0;
            phi[3] = got.axis == want.axis ? 1.0 : 0.0;
            phi[4] = got.index == want.index ? 1.0 : 0.0;
            const int left = hops - k - 1;
            phi[8 + static_cast<std::size_t>(std::min(left, 2))] = 1.0;
        } else {
            phi[7] = 1.0;
            phi[16] = valid ? 1.0 : 0.0;
            phi[17] = static_cast<double>(k - hops + 1) / horizon;
        }
        phi[5] = valid ? 1.0 : 0.0;
        phi[6] = full && valid ? 1.0 : 0.0;
        phi[11 + static_cast<std::size_t>(std::min(k, 3))] = 1.0;
        phi[15] = static_cast<double>(k) / horizon;
        rows.push_back(std::move(phi));
        if (k < hops && !full) valid = false;
    }
    return rows;
}

double min_aggregate(std::span<const double> step_scores) {
    if (step_scores.empty()) throw UndefinedInput("cannot aggregate an empty list of step scores");
    return *std::min_element(step_scores.begin(), step_scores.end());
}

ScoredResponse prm_score(const PRMParams& prm, const TaskInstance& inst, const Response& resp) {
    if (resp.steps.empty()) throw UndefinedInput("cannot score a response without steps");
    ScoredResponse out;
    out.response = resp;
    out.correct = evaluate_response(inst, resp).correct;
    for (const auto& phi : prm_features(prm.spec, inst, resp.steps)) {
        double z = 0.0;
        for (std::size_t f = 0; f < phi.size(); ++f) z += prm.weights[f] * phi[f];
        out.step_scores.push_back(logistic(z));
    }
    out.aggregate = min_aggregate(out.step_scores);
    return out;
}

ScoredResponse score_rollout(const PRMParams* prm, const TaskInstance& inst, const Response& resp) {
    if (prm != nullptr && !resp.steps.empty()) return prm_score(*prm, inst, resp);
    ScoredResponse out;
    out.response = resp;
    out.correct = evaluate_response(inst, resp).correct;
    // Without a reward model every answered response ties.
    out.aggregate = prm == nullptr && !resp.steps.empty() ? 1.0 : 0.0;
    return out;
}

void SelectionConfig::validate() const {
    if (const auto* t = std::get_if<TopK>(&strategy); t && t->k < 1) {
        throw ConfigError("reward.k", "reward.k must be at least 1");
    }
    if (const auto* r = std::get_if<RandomK>(&strategy); r && r->k < 1) {
        throw ConfigError("reward.k", "reward.k must be at least 1");
    }
    if (const auto* th = std::get_if<Threshold>(&strategy); th && !(th->alpha >= 0.0 && th->alpha <= 1.0)) {
        throw ConfigError("reward.alpha", "reward.alpha must be in [0,1]");
    }
}

std::vector<std::size_t> select_indices(std::span<const ScoredResponse> rollouts, const SelectionConfig& cfg) {
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < rollouts.size(); ++i) {
        if (rollouts[i].correct) candidates.push_back(i);
    }
    if (const auto* top = std::get_if<TopK>(&cfg.strategy)) {
        std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
            return rollouts[a].aggregate > rollouts[b].aggregate;
        });
        if (candidates.size() > top->k) candidates.resize(top->k);
        return candidates;
    }
    if (const auto* th = std::get_if<Threshold>(&cfg.strategy)) {
        std::erase_if(candidates, [&](std::size_t i) { return !(rollouts[i].aggregate > th->alpha); });
        return candidates;
    }
    const auto& rk = std::get<RandomK>(cfg.strategy);
    Rng rng(rk.seed);
    const std::size_t take = std::min(rk.k, candidates.size());
    // Partial Fisher-Yates: the first `take` slots are a uniform draw.
    for (std::size_t i = 0; i < take; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(candidates.size() - i));
        std::swap(candidates[i], candidates[j]);
    }
    candidates.resize(take);
    return candidates;
}

std::vector<Response> rerank_select(std::span<const ScoredResponse> rollouts, const SelectionConfig& cfg) {
    std::vector<Response> out;
    for (std::size_t i : select_indices(rollouts, cfg)) out.push_back(rollouts[i].response);
    return out;
}

std::vector<double> mc_annotate(const PolicyParams& completer, const TaskInstance& inst, const Response& resp,
                                std::size_t completions, double temperature, std::uint64_t seed) {
    if (completions == 0) throw DomainError("completion count N must be positive");
    if (!(temperature > 0.0)) throw DomainError("completion temperature must be positive");
    if (resp.steps.empty()) throw UndefinedInput("cannot annotate a response without steps");
    PolicyView view(completer.spec, inst);
    view.decode(resp);  // validates the chain against the action space
    const bool finished = resp.answer.has_value() || static_cast<int>(resp.steps.size()) >= completer.spec.max_steps;
    const bool own = evaluate_response(inst, resp).correct;
    std::vector<double> labels;
    labels.reserve(resp.steps.size());
    for (std::size_t k = 0; k < resp.steps.size(); ++k) {
        if (finished && k + 1 == resp.steps.size()) {
            labels.push_back(own ? 1.0 : 0.0);
            continue;
        }
        const std::span<const Step> prefix(resp.steps.data(), k + 1);
        std::size_t hits = 0;
        for (std::size_t j = 0; j < completions; ++j) {
            const Response c = complete_response(completer, view, prefix, temperature, derive_seed(seed, {k, j}));
            if (evaluate_response(inst, c).correct) ++hits;
        }
        labels.push_back(static_cast<double>(hits) / static_cast<double>(completions));
    }
    return labels;
}

nlohmann::json to_json(const PRMDatasetRow& row) {
    nlohmann::json steps = nlohmann::json::array();
    for (const Step& s : row.response.steps) steps.push_back(to_json(s));
    nlohmann::json j;
    j["instance_id"] = row.instance.id;
    j["steps"] = std::move(steps);
    j["answer"] = row.response.answer ? nlohmann::json(*row.response.answer) : nlohmann::json(nullptr);
    j["correct"] = row.correct;
    j["step_labels"] = row.step_labels;
    return j;
}

PRMDatasetRow prm_row_from_json(const nlohmann::json& j, const std::map<std::uint64_t, TaskInstance>& instances) {
    PRMDatasetRow row;
    const auto id = j.at("instance_id").get<std::uint64_t>();
    const auto it = instances.find(id);
    if (it == instances.end()) throw MalformedResponse("PRM row references unknown instance " + std::to_string(id));
    row.instance = it->second;
    for (const auto& s : j.at("steps")) row.response.steps.push_back(step_from_json(s));
    if (!j.at("answer").is_null()) row.response.answer = j.at("answer").get<int>();
    row.correct = j.at("correct").get<bool>();
    row.step_labels = j.at("step_labels").get<std::vector<double>>();
    return row;
}

namespace {

bool same_chain(const Response& a, const Response& b) { return a.steps == b.steps && a.answer == b.answer; }

}  // namespace

std::vector<PRMDatasetRow> retain_rows(std::span<const QuestionRollouts> questions, const PrmDatasetConfig& cfg) {
    std::vector<PRMDatasetRow> rows;
    for (const QuestionRollouts& q : questions) {
        std::vector<std::size_t> distinct;
        for (std::size_t i = 0; i < q.rollouts.size(); ++i) {
            if (q.rollouts[i].steps.empty()) continue;  // nothing to label
            const bool dup = std::any_of(distinct.begin(), distinct.end(),
                                         [&](std::size_t d) { return same_chain(q.rollouts[d], q.rollouts[i]); });
            if (!dup) distinct.push_back(i);
        }
        std::vector<bool> correct(q.rollouts.size(), false);
        for (std::size_t i : distinct) correct[i] = evaluate_response(*q.instance, q.rollouts[i]).correct;

        // The first correct and first wrong response go in before anything else.
        std::vector<std::size_t> keep;
        for (bool cls : {true, false}) {
            auto it = std::find_if(distinct.begin(), distinct.end(), [&](std::size_t i) { return correct[i] == cls; });
            if (it != distinct.end() && keep.size() < cfg.per_question_cap) keep.push_back(*it);
        }
        for (std::size_t i : distinct) {
            if (keep.size() >= cfg.per_question_cap) break;
            if (std::find(keep.begin(), keep.end(), i) == keep.end()) keep.push_back(i);
        }
        std::sort(keep.begin(), keep.end());
        for (std::size_t i : keep) {
            PRMDatasetRow row;
            row.instance = *q.instance;
            row.response = q.rollouts[i];
            row.correct = correct[i];
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

PrmDataset build_prm_dataset(const PolicyParams& completer, std::span<const QuestionRollouts> questions,
                             const PrmDatasetConfig& cfg) {
    PrmDataset out;
    std::vector<PRMDatasetRow> rows = retain_rows(questions, cfg);
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < rows.size(); ++i) (rows[i].correct ? pos : neg).push_back(i);
    const std::size_t m = std::min(pos.size(), neg.size());
    if (m == 0) {
        out.warnings.push_back("PRM dataset cannot be balanced: " + std::to_string(pos.size()) + " correct and " +
                               std::to_string(neg.size()) + " wrong rows");
        return out;
    }
    Rng rng(derive_seed(cfg.seed, {0xBA1A}));
    rng.shuffle(pos);
    rng.shuffle(neg);
    pos.resize(m);
    neg.resize(m);
    std::vector<std::size_t> chosen(pos);
    chosen.insert(chosen.end(), neg.begin(), neg.end());
    std::sort(chosen.begin(), chosen.end());
    out.rows.reserve(chosen.size());
    for (std::size_t n = 0; n < chosen.size(); ++n) {
        PRMDatasetRow& row = rows[chosen[n]];
        row.step_labels = mc_annotate(completer, row.instance, row.response, cfg.completions, cfg.temperature,
                                      derive_seed(cfg.seed, {0xA77, chosen[n]}));
        out.rows.push_back(std::move(row));
    }
    return out;
}

double prm_mse_and_gradient(const PRMParams& prm, std::span<const PRMDatasetRow> rows, std::span<double> grad) {
    std::fill(grad.begin(), grad.end(), 0.0);
    std::size_t count = 0;
    for (const auto& row : rows) count += row.step_labels.size();
    if (count == 0) throw DomainError("PRM loss needs at least one labelled step");
    const double scale = 1.0 / static_cast<double>(count);
    double loss = 0.0;
    for (const auto& row : rows) {
        const auto feats = prm_features(prm.spec, row.instance, row.response.steps);
        for (std::size_t k = 0; k < row.step_labels.size(); ++k) {
            const auto& phi = feats[k];
            double z = 0.0;
            for (std::size_t f = 0; f < phi.size(); ++f) z += prm.weights[f] * phi[f];
            const double s = logistic(z);
            const double err = s - row.step_labels[k];
            loss += scale * err * err;
            const double dz = scale * 2.0 * err * s * (1.0 - s);
            for (std::size_t f = 0; f < phi.size(); ++f) grad[f] += dz * phi[f];
        }
    }
    return loss;
}

double prm_mse(const PRMParams& prm, std::span<const PRMDatasetRow> rows) {
    std::vector<double> grad(prm.weights.size());
    return prm_mse_and_gradient(prm, rows, grad);
}

PRMParams train_prm(std::span<const PRMDatasetRow> rows, const PrmFeatureSpec& spec, const PrmTrainConfig& cfg) {
    if (rows.empty()) throw DomainError("cannot train a PRM on an empty dataset");
    if (cfg.batch_rows == 0) throw ConfigError("reward.prm_batch_rows", "reward.prm_batch_rows must be positive");
    PRMParams prm = PRMParams::zeros(spec);
    OptimizerState opt = OptimizerState::zeros(prm.weights.size());
    LrSchedule sched{cfg.lr, cfg.warmup_ratio, cfg.steps, 0};
    std::vector<std::size_t> order(rows.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, {0x7EA1}));
    rng.shuffle(order);
    std::size_t cursor = 0;
    std::vector<PRMDatasetRow> batch;
    std::vector<double> grad(prm.weights.size());
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        batch.clear();
        while (batch.size() < std::min(cfg.batch_rows, rows.size())) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(rows[order[cursor++]]);
        }
        prm_mse_and_gradient(prm, batch, grad);
        for (double g : grad) {
            if (!std::isfinite(g)) throw NumericError("non-finite PRM gradient at step " + std::to_string(step));
        }
        adam_step(prm.weights, grad, opt, sched.lr());
        sched.position += 1;
    }
    return prm;
}

std::vector<std::uint8_t> save_prm(const PRMParams& prm) {
    ByteWriter w = begin_frame(CheckpointKind::RewardModel);
    w.u32(static_cast<std::uint32_t>(prm.spec.max_steps));
    w.u64(prm.weights.size());
    w.f64s(prm.weights);
    return end_frame(std::move(w));
}

PRMParams load_prm(std::span<const std::uint8_t> bytes) {
    ByteReader r = open_frame(bytes, CheckpointKind::RewardModel);
    PRMParams prm;
    prm.spec.max_steps = static_cast<int>(r.u32());
    const std::uint64_t n = r.u64();
    if (n != prm.spec.dimension()) throw CorruptCheckpoint("PRM weight count disagrees with the feature map");
    prm.weights = r.f64s(n);
    expect_end(r);
    return prm;
}

}  // namespace selfevolve
