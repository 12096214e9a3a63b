#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "selfevolve/errors.hpp"
#include "selfevolve/reward.hpp"
#include "selfevolve/rng.hpp"
#include "support.hpp"

using namespace selfevolve;

namespace {

ScoredResponse scored(double aggregate, bool correct, int tag = 0) {
    ScoredResponse s;
    s.response.steps = {Step{Agg::Sum, Axis::Row, 0, tag}};
    s.correct = correct;
    s.step_scores = {aggregate};
    s.aggregate = aggregate;
    return s;
}

std::vector<ScoredResponse> random_rollouts(Rng& rng, std::size_t n) {
    std::vector<ScoredResponse> v;
    for (std::size_t i = 0; i < n; ++i) {
        // Coarse values so ties occur.
        v.push_back(scored(static_cast<double>(rng.below(6)) / 5.0, rng.below(2) == 0, static_cast<int>(i)));
    }
    return v;
}

PolicyParams mixed_policy(std::uint64_t seed) {
    PolicyFeatureSpec spec;
    spec.misread_rate = 0.2;
    spec.perception_seed = seed;
    PolicyPrior prior;
    prior.agg_match = prior.axis_match = 2.0;
    prior.index_match = 1.0;
    prior.full_match = 0.5;
    prior.answer_at_h = 2.0;
    prior.answer_bias = 0.0;
    prior.salience = 0.0;
    return base_policy(spec, prior);
}

PRMParams random_prm(Rng& rng) {
    PRMParams p = PRMParams::zeros(PrmFeatureSpec{});
    for (double& w : p.weights) w = 2.0 * rng.uniform() - 1.0;
    return p;
}

bool multiple_of(double x, std::size_t n) {
    const double k = x * static_cast<double>(n);
    return std::abs(k - std::round(k)) < 1e-9;
}

}  // namespace

TEST_CASE("exact match") {
    CHECK(exact_match(42, 42) == 1);
    CHECK(exact_match(7, 42) == 0);
    CHECK(exact_match(std::nullopt, 42) == 0);
}

TEST_CASE("min aggregation") {
    CHECK(min_aggregate(std::vector<double>{0.9, 0.5, 0.7}) == 0.5);
    CHECK(min_aggregate(std::vector<double>{0.3}) == 0.3);
    CHECK_THROWS_AS(min_aggregate(std::vector<double>{}), UndefinedInput);
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> s(1 + rng.below(6));
        for (double& x : s) x = rng.uniform();
        const double agg = min_aggregate(s);
        for (double x : s) REQUIRE(agg <= x);
        std::vector<double> perm = s;
        rng.shuffle(perm);
        REQUIRE(min_aggregate(perm) == agg);
        s.push_back(0.2);
        REQUIRE(min_aggregate(s) <= agg);
    }
}

TEST_CASE("PRM scores are logistic of the feature dot product, aggregated by min") {
    Rng rng(2);
    for (const auto& inst : generate_split(3, 50, EnvConfig{})) {
        const PRMParams prm = random_prm(rng);
        const Response r = sample_responses(mixed_policy(1), inst, 1.0, 1, rng.next_u64())[0];
        if (r.steps.empty()) {
            CHECK_THROWS_AS(prm_score(prm, inst, r), UndefinedInput);
            const ScoredResponse s = score_rollout(&prm, inst, r);
            CHECK(s.step_scores.empty());
            CHECK(s.aggregate == 0.0);
            continue;
        }
        const ScoredResponse s = prm_score(prm, inst, r);
        const auto phi = prm_features(prm.spec, inst, r.steps);
        REQUIRE(s.step_scores.size() == r.steps.size());
        for (std::size_t k = 0; k < phi.size(); ++k) {
            REQUIRE(phi[k].size() == PrmFeatureSpec::kDimension);
            const double z = std::inner_product(phi[k].begin(), phi[k].end(), prm.weights.begin(), 0.0);
            CHECK(s.step_scores[k] == doctest::Approx(1.0 / (1.0 + std::exp(-z))).epsilon(1e-12));
            CHECK(s.step_scores[k] >= 0.0);
            CHECK(s.step_scores[k] <= 1.0);
        }
        CHECK(s.aggregate == *std::min_element(s.step_scores.begin(), s.step_scores.end()));
        CHECK(s.correct == evaluate_response(inst, r).correct);
    }
    CHECK(logistic(-1000.0) >= 0.0);
    CHECK(logistic(1000.0) <= 1.0);
}

TEST_CASE("selection examples") {
    const std::vector<ScoredResponse> three = {scored(0.7, true, 0), scored(0.9, true, 1), scored(0.4, true, 2)};
    const auto top = rerank_select(three, {TopK{2}});
    REQUIRE(top.size() == 2);
    CHECK(top[0] == three[1].response);
    CHECK(top[1] == three[0].response);

    const std::vector<ScoredResponse> thr = {scored(0.25, true, 0), scored(0.15, true, 1), scored(0.2, true, 2)};
    const auto kept = select_indices(thr, {Threshold{0.2}});
    CHECK(kept == std::vector<std::size_t>{0});

    const std::vector<ScoredResponse> none = {scored(0.9, false), scored(0.8, false)};
    CHECK(rerank_select(none, {TopK{2}}).empty());
    CHECK(rerank_select(none, {Threshold{0.0}}).empty());
    CHECK(rerank_select(none, {RandomK{2, 5}}).empty());

    const std::vector<ScoredResponse> tied = {scored(0.5, true, 0), scored(0.5, true, 1), scored(0.5, true, 2)};
    CHECK(select_indices(tied, {TopK{2}}) == std::vector<std::size_t>{0, 1});
}

TEST_CASE("selection configs validate their ranges") {
    CHECK_THROWS_AS((SelectionConfig{TopK{0}}.validate()), ConfigError);
    CHECK_THROWS_AS((SelectionConfig{RandomK{0, 1}}.validate()), ConfigError);
    CHECK_THROWS_AS((SelectionConfig{Threshold{1.5}}.validate()), ConfigError);
    CHECK_THROWS_AS((SelectionConfig{Threshold{-0.1}}.validate()), ConfigError);
    CHECK_NOTHROW((SelectionConfig{Threshold{0.2}}.validate()));
    CHECK_NOTHROW(SelectionConfig::all().validate());
}

TEST_CASE("selection soundness and cardinality on random rollout sets") {
    Rng rng(3);
    for (int trial = 0; trial < 500; ++trial) {
        const auto rollouts = random_rollouts(rng, 1 + rng.below(16));
        std::vector<std::size_t> correct;
        for (std::size_t i = 0; i < rollouts.size(); ++i) {
            if (rollouts[i].correct) correct.push_back(i);
        }
        const std::size_t k = 1 + rng.below(5);

        const auto top = select_indices(rollouts, {TopK{k}});
        REQUIRE(top.size() == std::min(k, correct.size()));
        for (std::size_t i : top) REQUIRE(rollouts[i].correct);
        // Oracle: stable sort of the correct indices by aggregate.
        std::vector<std::size_t> expected = correct;
        std::stable_sort(expected.begin(), expected.end(),
                         [&](std::size_t a, std::size_t b) { return rollouts[a].aggregate > rollouts[b].aggregate; });
        expected.resize(std::min(k, expected.size()));
        REQUIRE(top == expected);

        const double alpha = static_cast<double>(rng.below(6)) / 5.0;
        const auto thr = select_indices(rollouts, {Threshold{alpha}});
        std::vector<std::size_t> above;
        for (std::size_t i : correct) {
            if (rollouts[i].aggregate > alpha) above.push_back(i);
        }
        REQUIRE(thr == above);

        const std::uint64_t seed = rng.next_u64();
        const auto rnd = select_indices(rollouts, {RandomK{k, seed}});
        REQUIRE(rnd.size() == std::min(k, correct.size()));
        REQUIRE(std::set<std::size_t>(rnd.begin(), rnd.end()).size() == rnd.size());
        for (std::size_t i : rnd) REQUIRE(rollouts[i].correct);
        REQUIRE(rnd == select_indices(rollouts, {RandomK{k, seed}}));
    }
}

TEST_CASE("oracle rewards with k = n reduce to rejection filtering on 1000 sets") {
    Rng rng(4);
    for (int trial = 0; trial < 1000; ++trial) {
        auto rollouts = random_rollouts(rng, 1 + rng.below(16));
        std::set<std::size_t> correct;
        for (std::size_t i = 0; i < rollouts.size(); ++i) {
            const double s = rollouts[i].correct ? 1.0 : 0.0;
            rollouts[i].step_scores.assign(rollouts[i].step_scores.size(), s);
            rollouts[i].aggregate = s;
            if (rollouts[i].correct) correct.insert(i);
        }
        const auto sel = select_indices(rollouts, {TopK{rollouts.size()}});
        REQUIRE(std::set<std::size_t>(sel.begin(), sel.end()) == correct);
        REQUIRE(sel.size() == correct.size());
    }
}

TEST_CASE("random-k picks each candidate with equal frequency") {
    std::vector<ScoredResponse> rollouts;
    for (int i = 0; i < 8; ++i) rollouts.push_back(scored(0.1 * i, i % 4 != 3, i));
    std::vector<double> counts(rollouts.size(), 0.0);
    constexpr int N = 20000;
    for (int s = 0; s < N; ++s) {
        for (std::size_t i : select_indices(rollouts, {RandomK{2, derive_seed(77, {static_cast<std::uint64_t>(s)})}})) {
            counts[i] += 1;
        }
    }
    const double p = 2.0 / 6.0;
    for (std::size_t i = 0; i < rollouts.size(); ++i) {
        if (!rollouts[i].correct) {
            CHECK(counts[i] == 0);
            continue;
        }
        CHECK(std::abs(counts[i] / N - p) <= 3 * std::sqrt(p * (1 - p) / N));
    }
}

TEST_CASE("MC labels: arithmetic, dead prefixes, final step, determinism") {
    const PolicyParams completer = mixed_policy(5);
    const auto pool = generate_split(6, 60, EnvConfig{});
    for (const auto& inst : pool) {
        for (const Response& r : sample_responses(completer, inst, 1.0, 3, inst.id)) {
            if (r.steps.empty()) {
                CHECK_THROWS_AS(mc_annotate(completer, inst, r, 8, 1.0, 1), UndefinedInput);
                continue;
            }
            const auto labels = mc_annotate(completer, inst, r, 8, 1.0, 11);
            REQUIRE(labels.size() == r.steps.size());
            for (double l : labels) {
                REQUIRE(l >= 0.0);
                REQUIRE(l <= 1.0);
                REQUIRE(multiple_of(l, 8));
            }
            if (r.answer.has_value()) CHECK(labels.back() == (evaluate_response(inst, r).correct ? 1.0 : 0.0));
            CHECK(labels == mc_annotate(completer, inst, r, 8, 1.0, 11));
        }
    }
    CHECK_THROWS_AS(mc_annotate(completer, pool[0], canonical_solution(pool[0]), 0, 1.0, 1), DomainError);
    CHECK_THROWS_AS(mc_annotate(completer, pool[0], canonical_solution(pool[0]), 8, 0.0, 1), DomainError);
}

TEST_CASE("near-zero completion temperature gives 0/1 labels when argmaxes are unique") {
    // Random weights: exact logit ties have probability zero.
    Rng rng(16);
    PolicyParams completer = mixed_policy(7);
    for (double& w : completer.weights) w = 4.0 * rng.uniform() - 2.0;
    for (const auto& inst : generate_split(17, 60, EnvConfig{})) {
        for (const Response& r : sample_responses(completer, inst, 1.0, 2, inst.id)) {
            if (r.steps.empty()) continue;
            for (double l : mc_annotate(completer, inst, r, 4, 1e-6, 12)) REQUIRE((l == 0.0 || l == 1.0));
        }
    }
}

TEST_CASE("a wrong first hop on a one-hop question is labelled dead at every step") {
    const PolicyParams completer = mixed_policy(6);
    for (const auto& inst : generate_split(7, 200, EnvConfig{})) {
        if (inst.hop_count() != 1) continue;
        Response bad = testing::corrupt_first_hop(inst);
        if (bad.steps.empty()) continue;
        bad.answer.reset();  // unfinished: completions continue after the step
        for (double l : mc_annotate(completer, inst, bad, 8, 1.0, 3)) REQUIRE(l == 0.0);
    }
}

TEST_CASE("PRM dataset: dedup and cap per question") {
    const TaskInstance inst = generate_instance(8, EnvConfig{});
    const Response good = canonical_solution(inst);
    const Response bad = testing::corrupt_first_hop(inst);
    REQUIRE_FALSE(bad.steps.empty());
    Response good_long = good;
    good_long.steps.push_back(good.steps[0]);
    Response bad_long = bad;
    bad_long.steps.push_back(bad.steps[0]);
    QuestionRollouts q{&inst, {good, good, bad, bad, good_long, bad_long}};
    const auto rows = retain_rows(std::span(&q, 1), PrmDatasetConfig{});
    CHECK(rows.size() == 4);
    std::set<std::string> distinct;
    bool has_correct = false, has_wrong = false;
    for (const auto& r : rows) {
        distinct.insert(to_json(r).dump());
        has_correct |= r.correct;
        has_wrong |= !r.correct;
    }
    CHECK(distinct.size() == rows.size());
    CHECK(has_correct);
    CHECK(has_wrong);

    QuestionRollouts small{&inst, {good, good, bad}};
    CHECK(retain_rows(std::span(&small, 1), PrmDatasetConfig{}).size() == 2);
}

TEST_CASE("PRM dataset: 7 correct and 3 wrong rows balance to 3 and 3") {
    const auto pool = generate_split(9, 10, EnvConfig{});
    std::vector<QuestionRollouts> qs;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const Response r = i < 7 ? canonical_solution(pool[i]) : testing::corrupt_first_hop(pool[i]);
        REQUIRE_FALSE(r.steps.empty());
        qs.push_back({&pool[i], {r}});
    }
    PrmDatasetConfig cfg;
    cfg.seed = 5;
    const PrmDataset ds = build_prm_dataset(mixed_policy(2), qs, cfg);
    std::size_t pos = 0, neg = 0;
    for (const auto& r : ds.rows) (r.correct ? pos : neg) += 1;
    CHECK(pos == 3);
    CHECK(neg == 3);
    CHECK(build_prm_dataset(mixed_policy(2), qs, cfg).rows == ds.rows);

    std::vector<QuestionRollouts> only_correct(qs.begin(), qs.begin() + 7);
    const PrmDataset empty = build_prm_dataset(mixed_policy(2), only_correct, cfg);
    CHECK(empty.rows.empty());
    CHECK_FALSE(empty.warnings.empty());
}

TEST_CASE("PRM dataset rows round-trip with the documented field names") {
    const TaskInstance inst = generate_instance(10, EnvConfig{});
    PRMDatasetRow row{inst, canonical_solution(inst), true, std::vector<double>(inst.hops.size(), 0.625)};
    const auto j = to_json(row);
    std::set<std::string> keys;
    for (const auto& [k, v] : j.items()) keys.insert(k);
    CHECK(keys == std::set<std::string>{"instance_id", "steps", "answer", "correct", "step_labels"});
    const std::map<std::uint64_t, TaskInstance> by_id = {{inst.id, inst}};
    CHECK(prm_row_from_json(nlohmann::json::parse(j.dump()), by_id) == row);
    CHECK_THROWS_AS(prm_row_from_json(j, {}), MalformedResponse);
}

namespace {

std::vector<PRMDatasetRow> separable_rows(std::uint64_t seed, std::size_t n) {
    std::vector<PRMDatasetRow> rows;
    for (const auto& inst : generate_split(seed, n, EnvConfig{})) {
        const Response good = canonical_solution(inst);
        const Response bad = testing::corrupt_first_hop(inst);
        rows.push_back({inst, good, true, std::vector<double>(good.steps.size(), 1.0)});
        if (!bad.steps.empty()) rows.push_back({inst, bad, false, std::vector<double>(bad.steps.size(), 0.0)});
    }
    return rows;
}

}  // namespace

TEST_CASE("PRM gradient matches central finite differences") {
    Rng rng(11);
    const PolicyParams pol = mixed_policy(3);
    const auto pool = generate_split(12, 80, EnvConfig{});
    double worst = 0.0;
    for (int draw = 0; draw < 100; ++draw) {
        PRMParams prm = random_prm(rng);
        std::vector<PRMDatasetRow> rows;
        while (rows.size() < 1 + rng.below(4)) {
            const TaskInstance& inst = pool[rng.below(pool.size())];
            Response r = sample_responses(pol, inst, 1.0, 1, rng.next_u64())[0];
            if (r.steps.empty()) continue;
            std::vector<double> labels(r.steps.size());
            for (double& l : labels) l = static_cast<double>(rng.below(9)) / 8.0;
            rows.push_back({inst, r, evaluate_response(inst, r).correct, labels});
        }
        std::vector<double> grad(prm.weights.size()), scratch(prm.weights.size());
        prm_mse_and_gradient(prm, rows, grad);
        for (std::size_t i = 0; i < prm.weights.size(); ++i) {
            const double w = prm.weights[i];
            constexpr double h = 1e-6;
            prm.weights[i] = w + h;
            const double up = prm_mse_and_gradient(prm, rows, scratch);
            prm.weights[i] = w - h;
            const double down = prm_mse_and_gradient(prm, rows, scratch);
            prm.weights[i] = w;
            const double fd = (up - down) / (2 * h);
            worst = std::max(worst, std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-8}));
        }
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("PRM training lowers MSE and separates clean from corrupted responses") {
    const auto train = separable_rows(13, 150);
    PrmTrainConfig cfg;
    cfg.steps = 200;
    cfg.seed = 3;
    const PRMParams zero = PRMParams::zeros(PrmFeatureSpec{});
    const PRMParams prm = train_prm(train, PrmFeatureSpec{}, cfg);
    CHECK(prm_mse(prm, train) < prm_mse(zero, train));
    CHECK(train_prm(train, PrmFeatureSpec{}, cfg) == prm);

    const auto held = separable_rows(14, 100);
    double clean = 0, bad = 0, nc = 0, nb = 0;
    for (const auto& row : held) {
        const double a = prm_score(prm, row.instance, row.response).aggregate;
        REQUIRE(a >= 0.0);
        REQUIRE(a <= 1.0);
        (row.correct ? clean : bad) += a;
        (row.correct ? nc : nb) += 1;
    }
    CHECK(clean / nc > bad / nb);
    CHECK_THROWS_AS(train_prm({}, PrmFeatureSpec{}, cfg), DomainError);
}

TEST_CASE("PRM checkpoints round-trip and reject other payloads") {
    Rng rng(15);
    const PRMParams prm = random_prm(rng);
    const auto bytes = save_prm(prm);
    CHECK(load_prm(bytes) == prm);
    CHECK_THROWS_AS(load_prm(std::span(bytes).first(bytes.size() - 3)), CorruptCheckpoint);
    Checkpoint c;
    c.params = PolicyParams::zeros(PolicyFeatureSpec{});
    CHECK_THROWS_AS(load_prm(save_checkpoint(c)), CorruptCheckpoint);
    CHECK_THROWS_AS(load_checkpoint(bytes), CorruptCheckpoint);
}
