#include "selfevolve/evolution.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "selfevolve/errors.hpp"
#include "selfevolve/rng.hpp"

namespace selfevolve {

namespace {

constexpr std::uint64_t kTagWarmupSample = 0x3A01;
constexpr std::uint64_t kTagWarmupTrain = 0x3A02;
constexpr std::uint64_t kTagOrder = 0x3A03;
constexpr std::uint64_t kTagUnlabeledOrder = 0x3A04;
constexpr std::uint64_t kTagGenerate = 0x3A05;
constexpr std::uint64_t kTagSelect = 0x3A06;
constexpr std::uint64_t kTagImprove = 0x3A07;
constexpr std::uint64_t kTagController = 0x3A08;
constexpr std::uint64_t kTagEval = 0x3A09;

bool close_to(double a, double b) { return std::fabs(a - b) < 1e-12; }

}  // namespace

void TrainMethodConfig::validate() const {
    if (init_from == InitFrom::FirstCheckpoint && optimizer_continuous) {
        throw ConfigError("method.optimizer_continuous",
                          "method.optimizer_continuous=true cannot be combined with method.init_from=first");
    }
    if (std::none_of(std::begin(kIntervalChoices), std::end(kIntervalChoices),
                     [&](double c) { return close_to(c, interval_fraction); })) {
        throw ConfigError("method.interval", "method.interval must be one of 0.0625, 0.125, 0.25, 0.5, 1.0");
    }
}

void UnlabeledConfig::validate() const {
    if (!enabled) return;
    if (!(close_to(t_mixin, 0.0) || close_to(t_mixin, 0.25) || close_to(t_mixin, 0.5) || close_to(t_mixin, 0.75))) {
        throw ConfigError("unlabeled.t_mixin", "unlabeled.t_mixin must be one of 0, 0.25, 0.5, 0.75");
    }
    if (!(ratio > 0.0)) throw ConfigError("unlabeled.ratio", "unlabeled.ratio must be positive");
}

WarmupResult run_warmup(const PolicyParams& base, std::span<const TaskInstance> train, const WarmupConfig& cfg) {
    WarmupResult out;
    out.params = base;
    for (std::size_t q = 0; q < train.size(); ++q) {
        std::size_t kept = 0;
        for (Response& r : sample_responses(base, train[q], cfg.temperature, cfg.rollouts,
                                            derive_seed(cfg.seed, {kTagWarmupSample, q}))) {
            if (kept >= cfg.per_query_cap) break;
            if (!evaluate_response(train[q], r).correct) continue;
            out.set.pairs.push_back({&train[q], std::move(r)});
            ++kept;
        }
    }
    if (out.set.pairs.empty()) {
        out.warnings.push_back("warmup kept no correct rollouts; the base policy is used unchanged");
        return out;
    }
    PolicyState state{base, OptimizerState::zeros(base.weights.size()),
                      LrSchedule{cfg.lr, cfg.warmup_ratio, cfg.steps, 0}};
    improve(state, out.set.pairs, cfg.steps, cfg.batch_size, derive_seed(cfg.seed, {kTagWarmupTrain}));
    out.params = std::move(state.params);
    return out;
}

ImproveResult improve(PolicyState& state, std::span<const TrainPair> pairs, std::size_t steps,
                      std::size_t batch_size, std::uint64_t seed) {
    ImproveResult out;
    if (steps == 0) return out;
    if (pairs.empty()) throw DomainError("cannot improve on an empty selection");
    if (batch_size == 0) throw ConfigError("policy.batch_size", "policy.batch_size must be positive");
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    std::size_t cursor = 0;
    const std::size_t take = std::min(batch_size, pairs.size());
    std::vector<TrainPair> batch;
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
        batch.clear();
        while (batch.size() < take) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(pairs[order[cursor++]]);
        }
        const UpdateResult u = sft_update(state.params, state.optimizer, state.schedule, batch, s);
        loss_sum += u.loss;
        out.last_lr = u.lr;
        ++out.updates;
    }
    out.mean_loss = loss_sum / static_cast<double>(out.updates);
    return out;
}

PolicyState iteration_init(const TrainMethodConfig& method, const EvolutionState& state) {
    method.validate();
    if (method.optimizer_continuous) return state.policy;
    PolicyState next;
    next.params = method.init_from == InitFrom::FirstCheckpoint ? state.pi0 : state.policy.params;
    next.optimizer = OptimizerState::zeros(next.params.weights.size());
    next.schedule = state.policy.schedule;
    next.schedule.position = 0;
    return next;
}

std::size_t queries_per_iteration(double interval_fraction, std::size_t pool) {
    const auto n = static_cast<std::size_t>(std::llround(interval_fraction * static_cast<double>(pool)));
    return std::max<std::size_t>(1, n);
}

std::vector<QueryRef> schedule_batches(EvolutionState& state, const TrainMethodConfig& method,
                                       const UnlabeledConfig& unlabeled, std::size_t total_iterations) {
    std::vector<QueryRef> out;
    if (state.order.empty()) return out;
    const std::size_t n = queries_per_iteration(method.interval_fraction, state.order.size());
    std::vector<std::size_t> labeled;
    for (std::size_t i = 0; i < n; ++i) {
        labeled.push_back(state.order[state.cursor]);
        state.cursor = (state.cursor + 1) % state.order.size();
    }
    const bool mix = unlabeled.enabled && !state.unlabeled_order.empty() &&
                     static_cast<double>(state.t) >= unlabeled.t_mixin * static_cast<double>(total_iterations);
    std::vector<std::size_t> extra;
    if (mix) {
        const auto m = static_cast<std::size_t>(std::llround(unlabeled.ratio * static_cast<double>(n)));
        for (std::size_t i = 0; i < m; ++i) {
            extra.push_back(state.unlabeled_order[state.unlabeled_cursor]);
            state.unlabeled_cursor = (state.unlabeled_cursor + 1) % state.unlabeled_order.size();
        }
    }
    // Interleave: labeled, unlabeled, labeled, ...
    std::size_t a = 0, b = 0;
    while (a < labeled.size() || b < extra.size()) {
        if (a < labeled.size()) out.push_back({false, labeled[a++]});
        if (b < extra.size()) out.push_back({true, extra[b++]});
    }
    return out;
}

std::optional<PseudoLabel> pseudo_label_and_filter(std::span<const ScoredResponse> rollouts, const TaskInstance& inst,
                                                   const UnlabeledConfig& cfg) {
    std::map<int, double> tally;
    std::vector<std::optional<int>> answers;
    answers.reserve(rollouts.size());
    for (const auto& r : rollouts) {
        answers.push_back(evaluate_response(inst, r.response).predicted);
        if (answers.back()) tally[*answers.back()] += cfg.vote_weight == VoteWeight::Uniform ? 1.0 : r.aggregate;
    }
    if (tally.empty()) return std::nullopt;
    PseudoLabel out;
    if (cfg.oracle) {
        out.answer = inst.gold_answer;
    } else {
        double best = -1.0;
        for (const auto& [answer, w] : tally) {
            if (w > best) {
                best = w;
                out.answer = answer;
            }
        }
    }
    for (std::size_t i = 0; i < rollouts.size(); ++i) {
        if (answers[i] && *answers[i] == out.answer) {
            ScoredResponse s = rollouts[i];
            s.correct = true;
            out.survivors.push_back(std::move(s));
        }
    }
    return out;
}

std::size_t EvolutionConfig::planned_iterations() const {
    const auto n = static_cast<long long>(std::llround(epochs / method.interval_fraction));
    return static_cast<std::size_t>(std::max<long long>(1, n));
}

std::uint64_t EvolutionConfig::allotment(std::uint64_t t) const {
    const std::uint64_t p = planned_iterations();
    if (t >= p) return 0;
    return (t + 1) * budget / p - t * budget / p;
}

bool EvolutionConfig::selection_needs_prm() const {
    if (const auto* top = std::get_if<TopK>(&selection.strategy)) {
        return top->k != std::numeric_limits<std::size_t>::max();
    }
    return std::holds_alternative<Threshold>(selection.strategy);
}

void EvolutionConfig::validate() const {
    method.validate();
    selection.validate();
    unlabeled.validate();
    if (adaptive_temperature) controller.validate();
    if (rollouts < 1) throw ConfigError("method.rollouts", "method.rollouts must be positive");
    if (!(temperature > 0.0)) throw ConfigError("method.temperature", "method.temperature must be positive");
    if (budget < 1) throw ConfigError("budget.steps", "budget.steps must be positive");
    if (!(epochs > 0.0)) throw ConfigError("budget.epochs", "budget.epochs must be positive");
    if (batch_size < 1) throw ConfigError("policy.batch_size", "policy.batch_size must be positive");
    if (!(lr > 0.0)) throw ConfigError("policy.lr", "policy.lr must be positive");
}

bool budget_exhausted(const EvolutionState& state, const EvolutionConfig& cfg) {
    return state.updates_done >= cfg.budget;
}

std::size_t iteration_cap(const EvolutionConfig& cfg) { return 2 * cfg.planned_iterations() + 8; }

namespace {

const PRMParams* selection_prm(const EvolutionConfig& cfg, const EvolutionInputs& in) {
    return cfg.selection_needs_prm() ? in.prm : nullptr;
}

void record_dynamics(EvolutionState& state, const EvolutionConfig& cfg, const EvolutionInputs& in,
                     DynamicsRecord rec) {
    rec.iteration = state.t;
    rec.temperature = state.temperature;
    evaluate_policy(state.policy.params, in.validation, in.prm, cfg.eval, state.temperature,
                    derive_seed(in.seed, {kTagEval, state.t}), rec);
    state.history.push_back(std::move(rec));
}

void maybe_adjust_temperature(EvolutionState& state, const EvolutionConfig& cfg, const EvolutionInputs& in,
                              DynamicsRecord& rec) {
    if (!cfg.adaptive_temperature || state.t % cfg.controller.period != 0) return;
    const TemperatureChoice c = select_temperature(cfg.controller, state.policy.params, in.validation, in.prm,
                                                   derive_seed(in.seed, {kTagController, state.t}));
    state.temperature = c.temperature;
    for (std::size_t g = 0; g < cfg.controller.grid.size(); ++g) rec.controller_rp2[cfg.controller.grid[g]] = c.reward_pass_at_2[g];
}

}  // namespace

EvolutionState start_evolution(const PolicyParams& pi0, const EvolutionConfig& cfg, const EvolutionInputs& in) {
    cfg.validate();
    if (cfg.selection_needs_prm() && in.prm == nullptr) {
        throw ConfigError("reward.selection", "reward.selection needs a process reward model");
    }
    EvolutionState s;
    s.pi0 = pi0;
    s.policy = {pi0, OptimizerState::zeros(pi0.weights.size()), LrSchedule{cfg.lr, cfg.warmup_ratio, cfg.budget, 0}};
    s.order.resize(in.train.size());
    std::iota(s.order.begin(), s.order.end(), 0);
    Rng(derive_seed(in.seed, {kTagOrder})).shuffle(s.order);
    s.unlabeled_order.resize(in.unlabeled.size());
    std::iota(s.unlabeled_order.begin(), s.unlabeled_order.end(), 0);
    Rng(derive_seed(in.seed, {kTagUnlabeledOrder})).shuffle(s.unlabeled_order);
    s.temperature = cfg.adaptive_temperature ? cfg.controller.initial : cfg.temperature;
    s.rng_state = derive_seed(in.seed, {0});
    record_dynamics(s, cfg, in, {});
    return s;
}

void run_iteration(EvolutionState& state, const EvolutionConfig& cfg, const EvolutionInputs& in) {
    DynamicsRecord rec;
    const std::uint64_t t = state.t;
    const std::uint64_t steps =
        std::min<std::uint64_t>(cfg.allotment(t) + state.carry, cfg.budget - state.updates_done);
    maybe_adjust_temperature(state, cfg, in, rec);
    const double temperature = state.temperature;

    std::vector<TrainPair> pairs;
    if (cfg.sft_only) {
        if (in.warmup != nullptr) pairs = in.warmup->pairs;
    } else {
        const PRMParams* sel_prm = selection_prm(cfg, in);
        std::size_t pseudo_hits = 0;
        for (const QueryRef& ref : schedule_batches(state, cfg.method, cfg.unlabeled, cfg.planned_iterations())) {
            const TaskInstance& inst = ref.unlabeled ? in.unlabeled[ref.index] : in.train[ref.index];
            const std::uint64_t qseed = derive_seed(in.seed, {kTagGenerate, t, ref.unlabeled ? 1u : 0u, ref.index});
            const auto responses = sample_responses(state.policy.params, inst, temperature, cfg.rollouts, qseed);
            SelectionConfig sel = cfg.selection;
            if (auto* rk = std::get_if<RandomK>(&sel.strategy)) {
                rk->seed = derive_seed(in.seed, {kTagSelect, t, ref.unlabeled ? 1u : 0u, ref.index});
            }
            std::vector<Response> chosen;
            if (ref.unlabeled) {
                ++rec.train.unlabeled_queries;
                const PRMParams* vote_prm = cfg.unlabeled.vote_weight == VoteWeight::PRMAggregate ? in.prm : nullptr;
                UnlabeledConfig ucfg = cfg.unlabeled;
                if (vote_prm == nullptr) ucfg.vote_weight = VoteWeight::Uniform;
                std::vector<ScoredResponse> scored;
                for (const Response& r : responses) scored.push_back(score_rollout(vote_prm ? vote_prm : sel_prm, inst, r));
                const auto label = pseudo_label_and_filter(scored, inst, ucfg);
                if (!label) {
                    ++rec.train.skipped_queries;
                    continue;
                }
                if (label->answer == inst.gold_answer) ++pseudo_hits;
                chosen = rerank_select(label->survivors, sel);
            } else {
                std::vector<ScoredResponse> scored;
                for (const Response& r : responses) scored.push_back(score_rollout(sel_prm, inst, r));
                chosen = rerank_select(scored, sel);
            }
            if (chosen.empty()) ++rec.train.skipped_queries;
            for (Response& r : chosen) pairs.push_back({&inst, std::move(r)});
        }
        if (rec.train.unlabeled_queries > 0) {
            rec.train.pseudo_label_accuracy =
                static_cast<double>(pseudo_hits) / static_cast<double>(rec.train.unlabeled_queries);
        }
    }
    rec.train.selected = pairs.size();

    if (pairs.empty() || steps == 0) {
        if (pairs.empty()) rec.warnings.push_back("iteration " + std::to_string(t) + " selected no responses; Improve skipped");
        state.carry = steps;
    } else {
        state.policy = iteration_init(cfg.method, state);
        const ImproveResult r = improve(state.policy, pairs, steps, cfg.batch_size, derive_seed(in.seed, {kTagImprove, t}));
        state.updates_done += r.updates;
        state.carry = 0;
        rec.train.updates = r.updates;
        rec.train.mean_loss = r.mean_loss;
        rec.train.lr = r.last_lr;
    }
    state.t += 1;
    state.rng_state = derive_seed(in.seed, {state.t});
    record_dynamics(state, cfg, in, std::move(rec));
}

}  // namespace selfevolve
