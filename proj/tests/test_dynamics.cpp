#include <doctest.h>

#include <bit>
#include <cmath>
#include <set>

#include "selfevolve/dynamics.hpp"
#include "selfevolve/errors.hpp"
#include "selfevolve/rng.hpp"
#include "support.hpp"

using namespace selfevolve;

namespace {

// Fraction of K-subsets of n items (the first c correct) holding a correct one.
double enumerated_pass_at_k(unsigned n, unsigned c, unsigned k) {
    std::uint64_t subsets = 0, hits = 0;
    for (unsigned mask = 0; mask < (1u << n); ++mask) {
        if (static_cast<unsigned>(std::popcount(mask)) != k) continue;
        ++subsets;
        if ((mask & ((1u << c) - 1u)) != 0) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(subsets);
}

// grid [[5,7],[0,0]], gold max(col 0) = 5
TaskInstance voting_instance() { return testing::make_instance(2, 2, {5, 7, 0, 0}, {{Agg::Max, Axis::Col, 0}}, {}); }

ScoredResponse on(const TaskInstance& inst, Hop hop, double aggregate) {
    ScoredResponse s;
    s.response = testing::response_of(inst, {hop});
    s.correct = evaluate_response(inst, s.response).correct;
    s.step_scores = {aggregate};
    s.aggregate = aggregate;
    return s;
}

ScoredResponse flag(bool correct, double aggregate) {
    ScoredResponse s;
    s.correct = correct;
    s.aggregate = aggregate;
    return s;
}

PolicyParams prior_policy() {
    PolicyFeatureSpec spec;
    spec.misread_rate = 0.15;
    spec.blur_rate = 0.05;
    PolicyPrior prior;
    prior.agg_match = prior.axis_match = 2.0;
    prior.index_match = 1.0;
    prior.salience = 0.0;
    return base_policy(spec, prior);
}

}  // namespace

TEST_CASE("pass@k worked values") {
    CHECK(pass_at_k_estimate(16, 0, 4) == 0.0);
    CHECK(pass_at_k_estimate(16, 16, 1) == 1.0);
    CHECK(pass_at_k_estimate(4, 1, 1) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(pass_at_k_estimate(4, 1, 2) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(pass_at_k_estimate(16, 4, 16) == 1.0);
    CHECK_THROWS_AS(pass_at_k_estimate(4, 5, 1), DomainError);
    CHECK_THROWS_AS(pass_at_k_estimate(4, 1, 0), DomainError);
    CHECK_THROWS_AS(pass_at_k_estimate(4, 1, 5), DomainError);
}

TEST_CASE("pass@k equals subset enumeration for n <= 8") {
    for (unsigned n = 1; n <= 8; ++n) {
        for (unsigned c = 0; c <= n; ++c) {
            for (unsigned k = 1; k <= n; ++k) {
                CAPTURE(n);
                CAPTURE(c);
                CAPTURE(k);
                REQUIRE(std::abs(pass_at_k_estimate(n, c, k) - enumerated_pass_at_k(n, c, k)) <= 1e-12);
            }
        }
    }
}

TEST_CASE("pass@k is monotone in c and k") {
    for (std::uint64_t n = 1; n <= 32; ++n) {
        for (std::uint64_t c = 0; c <= n; ++c) {
            for (std::uint64_t k = 1; k <= n; ++k) {
                const double v = pass_at_k_estimate(n, c, k);
                REQUIRE(v >= 0.0);
                REQUIRE(v <= 1.0);
                if (k < n) REQUIRE(pass_at_k_estimate(n, c, k + 1) >= v - 1e-15);
                if (c < n) REQUIRE(pass_at_k_estimate(n, c + 1, k) >= v - 1e-15);
            }
        }
    }
}

TEST_CASE("reward-pass@2 worked values") {
    CHECK(reward_pass_at_k(std::vector<ScoredResponse>{flag(false, 0.9), flag(true, 0.8), flag(false, 0.1)}) == 1);
    CHECK(reward_pass_at_k(std::vector<ScoredResponse>{flag(false, 0.9), flag(false, 0.8), flag(true, 0.1)}) == 0);
    CHECK(reward_pass_at_k(std::vector<ScoredResponse>{flag(true, 0.1)}) == 1);
    CHECK(reward_pass_at_k(std::vector<ScoredResponse>{}) == 0);
    // Ties go to the lower index.
    CHECK(reward_pass_at_k(std::vector<ScoredResponse>{flag(false, 0.5), flag(false, 0.5), flag(true, 0.5)}) == 0);
    CHECK(reward_pass_at_k(std::vector<ScoredResponse>{flag(true, 0.5), flag(false, 0.5), flag(false, 0.5)}) == 1);
}

TEST_CASE("reward-pass@k against a sort oracle") {
    Rng rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<ScoredResponse> rs(1 + rng.below(10));
        for (auto& r : rs) r = flag(rng.below(3) == 0, static_cast<double>(rng.below(4)) / 3.0);
        const std::size_t k = 1 + rng.below(4);
        std::vector<std::size_t> idx(rs.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return rs[a].aggregate > rs[b].aggregate; });
        int expected = 0;
        for (std::size_t i = 0; i < std::min(k, idx.size()); ++i) expected |= rs[idx[i]].correct ? 1 : 0;
        REQUIRE(reward_pass_at_k(rs, k) == expected);
    }
}

TEST_CASE("verifier metrics on the worked example") {
    const TaskInstance inst = voting_instance();
    const Hop five{Agg::Max, Axis::Col, 0};
    const Hop seven{Agg::Max, Axis::Row, 0};
    const std::vector<ScoredResponse> rs = {on(inst, five, 0.2), on(inst, five, 0.3), on(inst, seven, 0.9)};
    CHECK(best_of_n_answer(rs, inst) == 7);
    CHECK(weighted_vote_answer(rs, inst) == 7);
    CHECK(majority_vote_answer(rs, inst) == 5);
    const VerifierOutcome o = verifier_outcome(rs, inst);
    CHECK_FALSE(o.best_of_n);
    CHECK_FALSE(o.weighted_vote);
    CHECK(o.majority_vote);

    const std::vector<ScoredResponse> tie = {on(inst, seven, 0.4), on(inst, five, 0.4)};
    CHECK(best_of_n_answer(tie, inst) == 5);
    CHECK(weighted_vote_answer(tie, inst) == 5);
    CHECK(majority_vote_answer(tie, inst) == 5);

    ScoredResponse silent = on(inst, seven, 1.0);
    silent.response.answer.reset();
    const std::vector<ScoredResponse> with_silent = {silent, on(inst, five, 0.1)};
    CHECK(best_of_n_answer(with_silent, inst) == 5);
    CHECK_FALSE(majority_vote_answer(std::vector<ScoredResponse>{silent}, inst).has_value());
}

TEST_CASE("argmax ties go to the lowest index") {
    CHECK(argmax_lowest(std::vector<double>{0.2, 0.5, 0.5, 0.1}) == 1);
    CHECK(argmax_lowest(std::vector<double>{0.7}) == 0);
    CHECK_THROWS_AS(argmax_lowest(std::vector<double>{}), UndefinedInput);
}

TEST_CASE("controller grid and validation") {
    const auto g = TemperatureControllerConfig::default_grid();
    REQUIRE(g.size() == 14);
    CHECK(g.front() == doctest::Approx(0.3));
    CHECK(g.back() == doctest::Approx(1.6));
    for (std::size_t i = 1; i < g.size(); ++i) CHECK(g[i] - g[i - 1] == doctest::Approx(0.1));
    CHECK(default_monitor_temperatures() == std::vector<double>{0.5, 0.7, 1.0, 1.2, 1.5, 1.7, 2.0});
    TemperatureControllerConfig ctrl;
    CHECK(ctrl.period == 2);
    CHECK_NOTHROW(ctrl.validate());
    ctrl.grid = {0.5, 0.4};
    CHECK_THROWS_AS(ctrl.validate(), ConfigError);
    ctrl = {};
    ctrl.period = 0;
    CHECK_THROWS_AS(ctrl.validate(), ConfigError);
    ctrl = {};
    ctrl.grid = {};
    CHECK_THROWS_AS(ctrl.validate(), ConfigError);
}

TEST_CASE("temperature selection is deterministic and picks the lowest best grid point") {
    const auto val = generate_split(41, 12, EnvConfig{});
    const PolicyParams pol = prior_policy();
    PRMParams prm = PRMParams::zeros(PrmFeatureSpec{});
    TemperatureControllerConfig ctrl;
    ctrl.grid = {0.3, 0.8, 1.3};
    ctrl.rollouts = 4;
    const TemperatureChoice a = select_temperature(ctrl, pol, val, &prm, 17);
    const TemperatureChoice b = select_temperature(ctrl, pol, val, &prm, 17);
    CHECK(a.temperature == b.temperature);
    CHECK(a.reward_pass_at_2 == b.reward_pass_at_2);
    REQUIRE(a.reward_pass_at_2.size() == 3);
    CHECK(a.temperature == ctrl.grid[argmax_lowest(a.reward_pass_at_2)]);
    for (double v : a.reward_pass_at_2) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK_THROWS_AS(select_temperature(ctrl, pol, {}, &prm, 17), ConfigError);
}

TEST_CASE("top-2 versus rest analysis") {
    // grid [[1,2],[3,4]], gold sum(row 0) = 3
    const TaskInstance inst = testing::small_one_hop();
    const Response clean = testing::response_of(inst, {{Agg::Sum, Axis::Row, 0}});
    const Response padded = testing::response_of(inst, {{Agg::Sum, Axis::Row, 0}, {Agg::Max, Axis::Col, 0}});
    const auto mk = [&](const Response& r, double a) {
        ScoredResponse s;
        s.response = r;
        s.correct = evaluate_response(inst, r).correct;
        s.aggregate = a;
        return s;
    };
    REQUIRE(mk(padded, 0).correct);
    QueryScored q{&inst, {mk(padded, 0.1), mk(clean, 0.9), mk(clean, 0.8), mk(padded, 0.2)}};
    const SelectionAnalysis a = analyze_selected(std::span(&q, 1));
    CHECK(a.queries == 1);
    CHECK_FALSE(a.empty_reason.has_value());
    CHECK(a.top2_steps == 1.0);
    CHECK(a.rest_steps == 2.0);
    CHECK(a.top2_relevance == 1.0);
    CHECK(a.rest_relevance == 0.5);

    QueryScored thin{&inst, {mk(clean, 0.9), mk(clean, 0.8)}};
    const SelectionAnalysis none = analyze_selected(std::span(&thin, 1));
    CHECK(none.queries == 0);
    CHECK(none.empty_reason.has_value());
}

TEST_CASE("records round-trip through JSON and reject other schemas") {
    DynamicsRecord r;
    r.iteration = 3;
    r.temperature = 0.7;
    r.greedy_accuracy = 0.625;
    r.pass_at_k[1.0] = {{1, 0.5}, {16, 0.875}};
    r.pass_at_k[0.5] = {{1, 0.25}};
    r.reward_pass_at_2 = {{1.0, 0.75}, {0.5, 0.5}};
    r.verifier = {0.5, 0.625, 0.75};
    r.controller_rp2 = {{0.3, 0.1}};
    r.train.selected = 40;
    r.train.updates = 25;
    r.train.mean_loss = 1.25;
    r.train.lr = 0.001;
    r.train.pseudo_label_accuracy = 0.8;
    r.warnings = {"w"};
    const auto j = to_json(r);
    CHECK(j.at("schema") == kMetricsSchema);
    CHECK(j.at("pass_at_k").contains(temperature_key(1.0)));
    CHECK(temperature_key(1.0) == "1.00");
    CHECK(record_from_json(nlohmann::json::parse(j.dump())) == r);

    DynamicsRecord bare;
    CHECK(record_from_json(to_json(bare)) == bare);

    auto old = j;
    old["schema"] = "selfevolve.metrics/0";
    CHECK_THROWS_AS(record_from_json(old), SchemaMismatch);
    old.erase("schema");
    CHECK_THROWS_AS(record_from_json(old), SchemaMismatch);
}

TEST_CASE("policy evaluation fills every monitor temperature") {
    const auto val = generate_split(51, 10, EnvConfig{});
    const PolicyParams pol = prior_policy();
    const PRMParams prm = PRMParams::zeros(PrmFeatureSpec{});
    EvalConfig cfg;
    cfg.temperatures = {0.5, 1.0};
    cfg.ks = {1, 4, 16};
    cfg.rollouts = 8;
    DynamicsRecord a, b;
    evaluate_policy(pol, val, &prm, cfg, 1.0, 3, a);
    evaluate_policy(pol, val, &prm, cfg, 1.0, 3, b);
    CHECK(a == b);
    CHECK(a.greedy_accuracy == greedy_accuracy(pol, val));
    REQUIRE(a.pass_at_k.size() == 2);
    for (const auto& [t, byk] : a.pass_at_k) {
        CHECK(byk.size() == 2);  // K=16 exceeds the rollout count
        CHECK(byk.at(1) <= byk.at(4));
        CHECK(a.reward_pass_at_2.at(t) >= 0.0);
    }
    for (double v : {a.verifier.best_of_n, a.verifier.weighted_vote, a.verifier.majority_vote}) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(std::abs(v * 10 - std::round(v * 10)) < 1e-9);
    }
}
