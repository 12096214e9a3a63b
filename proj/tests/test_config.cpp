#include <doctest.h>

#include <algorithm>

#include "selfevolve/run_config.hpp"
#include "support.hpp"

using namespace selfevolve;

namespace {

std::vector<ConfigIssue> issues_of(const std::string& text, const std::string& preset = "") {
    try {
        resolve_run_config(text, preset);
    } catch (const ConfigValidationError& e) {
        return e.issues();
    }
    return {};
}

bool has_key(const std::vector<ConfigIssue>& issues, const std::string& key) {
    return std::any_of(issues.begin(), issues.end(), [&](const ConfigIssue& i) { return i.key == key; });
}

std::string with_line(const std::string& section, const std::string& line) {
    std::string t = testing::empty_config_text();
    const std::string header = "[" + section + "]\n";
    t.insert(t.find(header) + header.size(), line + "\n");
    return t;
}

}  // namespace

TEST_CASE("an all-empty file yields the defaults") {
    const RunConfig cfg = resolve_run_config(testing::empty_config_text(), "");
    CHECK(serialize_run_config(cfg) == serialize_run_config(default_run_config()));
    CHECK(validate_run_config(cfg).empty());
    CHECK(cfg.evo.budget == 2000);
    CHECK(cfg.env.max_steps() == 8);
    CHECK(cfg.prm.dataset.per_question_cap == 4);
    CHECK(cfg.prm.dataset.completions == 8);
    CHECK(cfg.evo.controller.period == 2);
}

TEST_CASE("a missing section is named") {
    std::string t = testing::empty_config_text();
    t.erase(t.find("[budget]\n"), 9);
    const auto issues = issues_of(t);
    REQUIRE_FALSE(issues.empty());
    CHECK(has_key(issues, "budget"));
}

TEST_CASE("every bad key is reported at once") {
    std::string t = with_line("env", "train_sise = 10");
    t = [&] {
        std::string u = t;
        const std::string h = "[policy]\n";
        u.insert(u.find(h) + h.size(), "lr = fast\n");
        const std::string m = "[method]\n";
        u.insert(u.find(m) + m.size(), "interval = 0.3\n");
        return u;
    }();
    const auto issues = issues_of(t);
    CHECK(has_key(issues, "env.train_sise"));
    CHECK(has_key(issues, "policy.lr"));
    CHECK(has_key(issues, "method.interval"));
    CHECK(issues.size() >= 3);
}

TEST_CASE("invariant violations are reported with their keys") {
    CHECK(has_key(issues_of(with_line("method", "init_from = first\noptimizer_continuous = true")),
                  "method.optimizer_continuous"));
    CHECK(has_key(issues_of(with_line("reward", "selection = threshold\nalpha = 1.5")), "reward.alpha"));
    CHECK(has_key(issues_of(with_line("reward", "prm_completer_factor = 0")), "reward.prm_completer_factor"));
    CHECK(has_key(issues_of(with_line("env", "rows_min = 1")), "env.rows_min"));
    CHECK(has_key(issues_of(testing::empty_config_text(), "nonesuch"), "method.preset"));
}

TEST_CASE("presets resolve to their documented settings") {
    const auto names = preset_names();
    for (const char* n : {"sft_only", "iterative_rft", "rest_em", "continuous", "continuous_prm_topk",
                          "continuous_prm_threshold", "continuous_random2", "mstar"}) {
        CHECK(std::find(names.begin(), names.end(), n) != names.end());
    }
    for (const auto& n : names) {
        CAPTURE(n);
        const RunConfig c = resolve_run_config(testing::empty_config_text(), n);
        CHECK(validate_run_config(c).empty());
        CHECK(c.preset == n);
    }
    const RunConfig m = resolve_run_config(testing::empty_config_text(), "mstar");
    CHECK(m.evo.adaptive_temperature);
    CHECK(m.evo.method == TrainMethodConfig::continuous(0.25));
    REQUIRE(std::holds_alternative<TopK>(m.evo.selection.strategy));
    CHECK(std::get<TopK>(m.evo.selection.strategy).k == 2);

    const RunConfig r = resolve_run_config(testing::empty_config_text(), "rest_em");
    CHECK(r.evo.method == TrainMethodConfig::rest_em(1.0));
    const RunConfig it = resolve_run_config(testing::empty_config_text(), "iterative_rft");
    CHECK(it.evo.method == TrainMethodConfig::iterative_rft(1.0));
    const RunConfig rnd = resolve_run_config(testing::empty_config_text(), "continuous_random2");
    CHECK(std::holds_alternative<RandomK>(rnd.evo.selection.strategy));
    const RunConfig thr = resolve_run_config(testing::empty_config_text(), "continuous_prm_threshold");
    REQUIRE(std::holds_alternative<Threshold>(thr.evo.selection.strategy));
    CHECK(std::get<Threshold>(thr.evo.selection.strategy).alpha == 0.2);
    const RunConfig u = resolve_run_config(testing::empty_config_text(), "unlabeled_pseudo_t050");
    CHECK(u.evo.unlabeled.enabled);
    CHECK(u.evo.unlabeled.t_mixin == 0.5);
    CHECK_FALSE(u.evo.unlabeled.oracle);
}

TEST_CASE("the command-line preset wins over the file") {
    const std::string t = with_line("method", "preset = rest_em");
    CHECK(resolve_run_config(t, "").preset == "rest_em");
    const RunConfig c = resolve_run_config(t, "mstar");
    CHECK(c.preset == "mstar");
    CHECK(c.evo.adaptive_temperature);
}

TEST_CASE("serialization round-trips") {
    for (const auto& n : preset_names()) {
        CAPTURE(n);
        const RunConfig c = resolve_run_config(testing::tiny_config_text(), n);
        const std::string text = serialize_run_config(c);
        const RunConfig back = parse_run_config(text);
        CHECK(serialize_run_config(back) == text);
        CHECK(back.evo.method == c.evo.method);
        CHECK(back.evo.unlabeled == c.evo.unlabeled);
        CHECK(back.train_size == c.train_size);
    }
}
