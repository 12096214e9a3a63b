#include "selfevolve/experiment.hpp"

#include "selfevolve/errors.hpp"
#include "selfevolve/rng.hpp"

namespace selfevolve {

namespace {

constexpr std::uint64_t kTagTrain = 1;
constexpr std::uint64_t kTagValidation = 2;
constexpr std::uint64_t kTagUnlabeled = 3;
constexpr std::uint64_t kTagPerception = 4;
constexpr std::uint64_t kTagWarmup = 5;
constexpr std::uint64_t kTagPrm = 6;
constexpr std::uint64_t kTagEvolution = 7;

}  // namespace

Splits make_splits(const RunConfig& cfg, std::uint64_t seed) {
    Splits s;
    s.train = generate_split(derive_seed(seed, {kTagTrain}), cfg.train_size, cfg.env);
    s.validation = generate_split(derive_seed(seed, {kTagValidation}), cfg.val_size, cfg.env);
    if (cfg.evo.unlabeled.enabled) {
        s.unlabeled = generate_split(derive_seed(seed, {kTagUnlabeled}), cfg.unlabeled_size, cfg.env);
    }
    return s;
}

PolicyFeatureSpec policy_spec(const RunConfig& cfg, std::uint64_t seed) {
    PolicyFeatureSpec spec;
    spec.hop_slots = cfg.env.hops_max;
    spec.max_steps = cfg.env.max_steps();
    spec.misread_rate = cfg.misread_rate;
    spec.blur_rate = cfg.blur_rate;
    spec.perception_seed = derive_seed(seed, {kTagPerception});
    return spec;
}

PrmStageResult run_prm_stage(const PolicyParams& completer, std::span<const TaskInstance> questions,
                             const PrmStageConfig& cfg, std::uint64_t seed) {
    std::vector<QuestionRollouts> rollouts;
    rollouts.reserve(questions.size());
    for (std::size_t q = 0; q < questions.size(); ++q) {
        rollouts.push_back({&questions[q], sample_responses(completer, questions[q], cfg.temperature, cfg.rollouts,
                                                            derive_seed(seed, {0x5A, q}))});
    }
    PrmDatasetConfig dcfg = cfg.dataset;
    dcfg.seed = derive_seed(seed, {0x5B});
    PrmStageResult out;
    out.dataset = build_prm_dataset(completer, rollouts, dcfg);
    PrmFeatureSpec spec;
    spec.max_steps = completer.spec.max_steps;
    if (out.dataset.rows.empty()) {
        out.dataset.warnings.push_back("PRM dataset is empty; the reward model stays at zero weights");
        out.prm = PRMParams::zeros(spec);
        return out;
    }
    PrmTrainConfig tcfg = cfg.train;
    tcfg.seed = derive_seed(seed, {0x5C});
    out.prm = train_prm(out.dataset.rows, spec, tcfg);
    return out;
}

namespace {

WarmupConfig warmup_config(const RunConfig& cfg, std::uint64_t seed) {
    WarmupConfig w = cfg.warmup;
    w.batch_size = cfg.evo.batch_size;
    w.warmup_ratio = cfg.evo.warmup_ratio;
    w.seed = derive_seed(seed, {kTagWarmup});
    return w;
}

}  // namespace

PolicyParams train_completer(const PolicyParams& base, std::span<const TaskInstance> train, const RunConfig& cfg,
                             std::uint64_t seed) {
    WarmupConfig w = warmup_config(cfg, seed);
    w.steps *= cfg.prm.completer_factor;
    return run_warmup(base, train, w).params;
}

RunResult run_evolution(const RunConfig& cfg, std::uint64_t seed, const IterationObserver& observer) {
    if (auto issues = validate_run_config(cfg); !issues.empty()) throw ConfigValidationError(std::move(issues));
    RunResult r;
    r.splits = make_splits(cfg, seed);
    r.base = base_policy(policy_spec(cfg, seed), cfg.prior);

    r.warmup = run_warmup(r.base, r.splits.train, warmup_config(cfg, seed));
    r.warnings.insert(r.warnings.end(), r.warmup.warnings.begin(), r.warmup.warnings.end());

    r.completer = train_completer(r.base, r.splits.train, cfg, seed);
    r.prm = run_prm_stage(r.completer, r.splits.train, cfg.prm, derive_seed(seed, {kTagPrm}));
    r.warnings.insert(r.warnings.end(), r.prm.dataset.warnings.begin(), r.prm.dataset.warnings.end());

    EvolutionInputs in;
    in.train = r.splits.train;
    in.validation = r.splits.validation;
    in.unlabeled = r.splits.unlabeled;
    in.warmup = &r.warmup.set;
    in.prm = &r.prm.prm;
    in.seed = derive_seed(seed, {kTagEvolution});

    r.state = start_evolution(r.warmup.params, cfg.evo, in);
    if (observer) observer(r.state);
    const std::size_t cap = iteration_cap(cfg.evo);
    while (!budget_exhausted(r.state, cfg.evo)) {
        if (r.state.t >= cap) {
            r.warnings.push_back("stopped after " + std::to_string(cap) + " iterations with " +
                                 std::to_string(cfg.evo.budget - r.state.updates_done) + " budget steps unspent");
            break;
        }
        run_iteration(r.state, cfg.evo, in);
        if (observer) observer(r.state);
    }
    return r;
}

}  // namespace selfevolve
