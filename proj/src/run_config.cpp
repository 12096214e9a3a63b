#include "selfevolve/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <functional>
#include <limits>
#include <map>
#include <sstream>

#include "selfevolve/errors.hpp"

namespace selfevolve {

namespace {

std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw std::invalid_argument("expected a number, got '" + s + "'");
    return v;
}

std::uint64_t parse_u64(const std::string& s) {
    std::uint64_t v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
    }
    return v;
}

bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw std::invalid_argument("expected true or false, got '" + s + "'");
}

std::string fmt_list(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt_double(v[i]);
    return out;
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        out.push_back(parse_double(item));
    }
    return out;
}

struct Key {
    const char* section;
    const char* name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

#define SE_DOUBLE(sec, key, expr) \
    Key{sec, key, [](const RunConfig& c) { return fmt_double(c.expr); }, [](RunConfig& c, const std::string& v) { c.expr = parse_double(v); }}
#define SE_SIZE(sec, key, expr)                                                        \
    Key{sec, key, [](const RunConfig& c) { return std::to_string(c.expr); },           \
        [](RunConfig& c, const std::string& v) { c.expr = static_cast<decltype(c.expr)>(parse_u64(v)); }}
#define SE_INT(sec, key, expr)                                                         \
    Key{sec, key, [](const RunConfig& c) { return std::to_string(c.expr); },           \
        [](RunConfig& c, const std::string& v) {                                       \
            const auto n = parse_u64(v);                                               \
            if (n > 1000000) throw std::invalid_argument("value too large: " + v);     \
            c.expr = static_cast<int>(n);                                              \
        }}
#define SE_BOOL(sec, key, expr) \
    Key{sec, key, [](const RunConfig& c) { return std::string(c.expr ? "true" : "false"); }, [](RunConfig& c, const std::string& v) { c.expr = parse_bool(v); }}
#define SE_LIST(sec, key, expr) \
    Key{sec, key, [](const RunConfig& c) { return fmt_list(c.expr); }, [](RunConfig& c, const std::string& v) { c.expr = parse_list(v); }}

const std::vector<Key>& keys() {
    static const std::vector<Key> table = {
        SE_INT("env", "rows_min", env.rows_min),
        SE_INT("env", "rows_max", env.rows_max),
        SE_INT("env", "cols_min", env.cols_min),
        SE_INT("env", "cols_max", env.cols_max),
        SE_INT("env", "hops_min", env.hops_min),
        SE_INT("env", "hops_max", env.hops_max),
        SE_SIZE("env", "train_size", train_size),
        SE_SIZE("env", "val_size", val_size),
        SE_SIZE("env", "unlabeled_size", unlabeled_size),

        SE_DOUBLE("policy", "misread_rate", misread_rate),
        SE_DOUBLE("policy", "blur_rate", blur_rate),
        SE_DOUBLE("policy", "prior_agg_match", prior.agg_match),
        SE_DOUBLE("policy", "prior_axis_match", prior.axis_match),
        SE_DOUBLE("policy", "prior_index_match", prior.index_match),
        SE_DOUBLE("policy", "prior_full_match", prior.full_match),
        SE_DOUBLE("policy", "prior_answer_at_h", prior.answer_at_h),
        SE_DOUBLE("policy", "prior_answer_bias", prior.answer_bias),
        SE_DOUBLE("policy", "prior_trailing_step", prior.trailing_step),
        SE_DOUBLE("policy", "prior_salience", prior.salience),
        SE_DOUBLE("policy", "prior_blur_shift", prior.blur_shift),
        SE_DOUBLE("policy", "lr", evo.lr),
        SE_DOUBLE("policy", "warmup_ratio", evo.warmup_ratio),
        SE_SIZE("policy", "batch_size", evo.batch_size),

        Key{"reward", "selection", [](const RunConfig& c) { return c.selection; },
            [](RunConfig& c, const std::string& v) {
                if (v != "all" && v != "topk" && v != "threshold" && v != "randomk") {
                    throw std::invalid_argument("expected all, topk, threshold or randomk, got '" + v + "'");
                }
                c.selection = v;
            }},
        SE_SIZE("reward", "k", select_k),
        SE_DOUBLE("reward", "alpha", alpha),
        SE_SIZE("reward", "prm_rollouts", prm.rollouts),
        SE_DOUBLE("reward", "prm_temperature", prm.temperature),
        SE_SIZE("reward", "prm_cap", prm.dataset.per_question_cap),
        SE_SIZE("reward", "prm_completions", prm.dataset.completions),
        SE_SIZE("reward", "prm_steps", prm.train.steps),
        SE_SIZE("reward", "prm_batch_rows", prm.train.batch_rows),
        SE_DOUBLE("reward", "prm_lr", prm.train.lr),
        SE_SIZE("reward", "prm_completer_factor", prm.completer_factor),

        Key{"method", "preset", [](const RunConfig& c) { return c.preset; },
            [](RunConfig& c, const std::string& v) { c.preset = v; }},
        Key{"method", "mode", [](const RunConfig& c) { return std::string(c.evo.sft_only ? "sft_only" : "self_evolve"); },
            [](RunConfig& c, const std::string& v) {
                if (v != "sft_only" && v != "self_evolve") throw std::invalid_argument("expected self_evolve or sft_only, got '" + v + "'");
                c.evo.sft_only = v == "sft_only";
            }},
        Key{"method", "init_from",
            [](const RunConfig& c) { return std::string(c.evo.method.init_from == InitFrom::FirstCheckpoint ? "first" : "last"); },
            [](RunConfig& c, const std::string& v) {
                if (v != "first" && v != "last") throw std::invalid_argument("expected first or last, got '" + v + "'");
                c.evo.method.init_from = v == "first" ? InitFrom::FirstCheckpoint : InitFrom::LastCheckpoint;
            }},
        SE_BOOL("method", "optimizer_continuous", evo.method.optimizer_continuous),
        SE_DOUBLE("method", "interval", evo.method.interval_fraction),
        SE_SIZE("method", "rollouts", evo.rollouts),
        SE_DOUBLE("method", "temperature", evo.temperature),
        SE_SIZE("method", "warmup_rollouts", warmup.rollouts),
        SE_DOUBLE("method", "warmup_temperature", warmup.temperature),
        SE_SIZE("method", "warmup_cap", warmup.per_query_cap),
        SE_SIZE("method", "warmup_steps", warmup.steps),
        SE_DOUBLE("method", "warmup_lr", warmup.lr),

        SE_BOOL("unlabeled", "enabled", evo.unlabeled.enabled),
        SE_DOUBLE("unlabeled", "t_mixin", evo.unlabeled.t_mixin),
        SE_BOOL("unlabeled", "oracle", evo.unlabeled.oracle),
        Key{"unlabeled", "vote_weight",
            [](const RunConfig& c) { return std::string(c.evo.unlabeled.vote_weight == VoteWeight::Uniform ? "uniform" : "prm"); },
            [](RunConfig& c, const std::string& v) {
                if (v != "prm" && v != "uniform") throw std::invalid_argument("expected prm or uniform, got '" + v + "'");
                c.evo.unlabeled.vote_weight = v == "prm" ? VoteWeight::PRMAggregate : VoteWeight::Uniform;
            }},
        SE_DOUBLE("unlabeled", "ratio", evo.unlabeled.ratio),

        SE_BOOL("dynamics", "adaptive", evo.adaptive_temperature),
        SE_LIST("dynamics", "grid", evo.controller.grid),
        SE_SIZE("dynamics", "period", evo.controller.period),
        SE_DOUBLE("dynamics", "initial_temperature", evo.controller.initial),
        SE_SIZE("dynamics", "controller_rollouts", evo.controller.rollouts),
        SE_LIST("dynamics", "monitor_temperatures", evo.eval.temperatures),
        SE_SIZE("dynamics", "eval_rollouts", evo.eval.rollouts),
        Key{"dynamics", "pass_k",
            [](const RunConfig& c) {
                std::string out;
                for (std::size_t i = 0; i < c.evo.eval.ks.size(); ++i) out += (i ? "," : "") + std::to_string(c.evo.eval.ks[i]);
                return out;
            },
            [](RunConfig& c, const std::string& v) {
                c.evo.eval.ks.clear();
                for (double k : parse_list(v)) {
                    if (k < 1 || k != static_cast<int>(k)) throw std::invalid_argument("pass_k entries must be positive integers");
                    c.evo.eval.ks.push_back(static_cast<int>(k));
                }
            }},

        SE_SIZE("budget", "steps", evo.budget),
        SE_DOUBLE("budget", "epochs", evo.epochs),
    };
    return table;
}

#undef SE_DOUBLE
#undef SE_SIZE
#undef SE_INT
#undef SE_BOOL
#undef SE_LIST

std::string join_issues(const std::vector<ConfigIssue>& issues) {
    std::string out = "invalid run configuration:";
    for (const auto& i : issues) out += "\n  " + i.key + ": " + i.message;
    return out;
}

}  // namespace

ConfigValidationError::ConfigValidationError(std::vector<ConfigIssue> issues)
    : std::runtime_error(join_issues(issues)), issues_(std::move(issues)) {}

void sync_selection(RunConfig& cfg) {
    if (cfg.selection == "all") {
        cfg.evo.selection = SelectionConfig::all();
    } else if (cfg.selection == "topk") {
        cfg.evo.selection = {TopK{cfg.select_k}};
    } else if (cfg.selection == "threshold") {
        cfg.evo.selection = {Threshold{cfg.alpha}};
    } else {
        cfg.evo.selection = {RandomK{cfg.select_k, 0}};
    }
}

RunConfig default_run_config() {
    RunConfig c;
    // Reference-environment calibration of the synthetic policy.
    c.prior.agg_match = 2.0;
    c.prior.axis_match = 2.0;
    c.prior.index_match = 1.0;
    c.prior.full_match = 0.5;
    c.prior.salience = 0.0;
    c.prior.answer_bias = 1.0;
    c.evo.lr = 0.002;
    c.warmup.lr = 0.02;
    c.warmup.steps = 300;
    sync_selection(c);
    return c;
}

namespace {

struct IniEntry {
    std::string section;
    std::string key;
    std::string value;
    int line = 0;
};

std::string trim(std::string s) {
    s.erase(0, s.find_first_not_of(" \t\r"));
    s.erase(s.find_last_not_of(" \t\r") + 1);
    return s;
}

// Sections in file order (empty ones included) and key = value entries.
// Lines starting with ';' or '#' are comments.
void read_ini(std::string_view text, std::vector<std::string>& sections, std::vector<IniEntry>& entries,
              std::vector<ConfigIssue>& issues) {
    std::istringstream in{std::string(text)};
    std::string raw;
    std::string current;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        const std::string s = trim(raw);
        if (s.empty() || s[0] == ';' || s[0] == '#') continue;
        if (s.front() == '[') {
            if (s.back() != ']') {
                issues.push_back({"<line " + std::to_string(line) + ">", "unterminated section header"});
                continue;
            }
            current = trim(s.substr(1, s.size() - 2));
            if (std::find(sections.begin(), sections.end(), current) != sections.end()) {
                issues.push_back({current, "duplicate section [" + current + "]"});
            }
            sections.push_back(current);
            continue;
        }
        const auto eq = s.find('=');
        if (eq == std::string::npos) {
            issues.push_back({"<line " + std::to_string(line) + ">", "expected key = value"});
            continue;
        }
        if (current.empty()) {
            issues.push_back({"<line " + std::to_string(line) + ">", "key outside any section"});
            continue;
        }
        entries.push_back({current, trim(s.substr(0, eq)), trim(s.substr(eq + 1)), line});
    }
}

}  // namespace

namespace {

RunConfig parse_collecting(std::string_view text, std::vector<ConfigIssue>& issues) {
    std::vector<std::string> sections;
    std::vector<IniEntry> entries;
    read_ini(text, sections, entries, issues);
    RunConfig cfg = default_run_config();
    for (const char* section : kConfigSections) {
        if (std::find(sections.begin(), sections.end(), section) == sections.end()) {
            issues.push_back({section, "missing section [" + std::string(section) + "]"});
        }
    }
    for (const std::string& section : sections) {
        if (std::none_of(std::begin(kConfigSections), std::end(kConfigSections),
                         [&](const char* s) { return section == s; })) {
            issues.push_back({section, "unknown section [" + section + "]"});
        }
    }
    std::vector<std::string> seen;
    for (const IniEntry& e : entries) {
        const std::string full = e.section + "." + e.key;
        const auto& table = keys();
        auto it = std::find_if(table.begin(), table.end(),
                               [&](const Key& k) { return e.section == k.section && e.key == k.name; });
        if (it == table.end()) {
            if (std::any_of(std::begin(kConfigSections), std::end(kConfigSections),
                            [&](const char* s) { return e.section == s; })) {
                issues.push_back({full, "unknown key"});
            }
            continue;
        }
        if (std::find(seen.begin(), seen.end(), full) != seen.end()) {
            issues.push_back({full, "duplicate key"});
            continue;
        }
        seen.push_back(full);
        try {
            it->set(cfg, e.value);
        } catch (const std::invalid_argument& ex) {
            issues.push_back({full, ex.what()});
        }
    }
    sync_selection(cfg);
    return cfg;
}

}  // namespace

RunConfig parse_run_config(std::string_view text) {
    std::vector<ConfigIssue> issues;
    RunConfig cfg = parse_collecting(text, issues);
    if (!issues.empty()) throw ConfigValidationError(std::move(issues));
    return cfg;
}

namespace {

struct Preset {
    std::string name;
    std::function<void(RunConfig&)> apply;
};

void continuous(RunConfig& c) {
    c.evo.sft_only = false;
    c.evo.method = TrainMethodConfig::continuous(0.25);
    c.selection = "all";
    c.evo.adaptive_temperature = false;
    c.evo.unlabeled.enabled = false;
}

void prm_topk(RunConfig& c) {
    continuous(c);
    c.selection = "topk";
    c.select_k = 2;
}

const std::vector<Preset>& presets() {
    static const std::vector<Preset> table = [] {
        std::vector<Preset> t = {
            {"sft_only", [](RunConfig& c) { continuous(c); c.evo.sft_only = true; }},
            {"iterative_rft", [](RunConfig& c) { continuous(c); c.evo.method = TrainMethodConfig::iterative_rft(1.0); }},
            {"rest_em", [](RunConfig& c) { continuous(c); c.evo.method = TrainMethodConfig::rest_em(1.0); }},
            {"continuous", continuous},
            {"continuous_prm_topk", prm_topk},
            {"continuous_prm_threshold", [](RunConfig& c) { continuous(c); c.selection = "threshold"; c.alpha = 0.2; }},
            {"continuous_random2", [](RunConfig& c) { continuous(c); c.selection = "randomk"; c.select_k = 2; }},
            {"mstar", [](RunConfig& c) { prm_topk(c); c.evo.adaptive_temperature = true; }},
        };
        static const char* mixins[] = {"000", "025", "050", "075"};
        for (int i = 0; i < 4; ++i) {
            const double tm = 0.25 * i;
            for (bool oracle : {false, true}) {
                t.push_back({std::string(oracle ? "unlabeled_oracle_t" : "unlabeled_pseudo_t") + mixins[i],
                             [tm, oracle](RunConfig& c) {
                                 prm_topk(c);
                                 c.evo.unlabeled.enabled = true;
                                 c.evo.unlabeled.t_mixin = tm;
                                 c.evo.unlabeled.oracle = oracle;
                             }});
            }
        }
        return t;
    }();
    return table;
}

}  // namespace

std::vector<std::string> preset_names() {
    std::vector<std::string> out;
    for (const auto& p : presets()) out.push_back(p.name);
    return out;
}

void apply_preset(RunConfig& cfg, std::string_view name) {
    const auto& table = presets();
    auto it = std::find_if(table.begin(), table.end(), [&](const Preset& p) { return name == p.name; });
    if (it == table.end()) {
        std::string known;
        for (const auto& p : table) known += (known.empty() ? "" : ", ") + p.name;
        throw ConfigValidationError({{"method.preset", "unknown preset '" + std::string(name) + "' (known: " + known + ")"}});
    }
    it->apply(cfg);
    cfg.preset = std::string(name);
    sync_selection(cfg);
}

std::vector<ConfigIssue> validate_run_config(const RunConfig& cfg) {
    std::vector<ConfigIssue> issues;
    auto check = [&](auto&& fn) {
        try {
            fn();
        } catch (const ConfigError& e) {
            issues.push_back({e.field(), e.what()});
        }
    };
    check([&] { cfg.env.validate(); });
    if (cfg.train_size < 1) issues.push_back({"env.train_size", "env.train_size must be positive"});
    if (cfg.val_size < 1) issues.push_back({"env.val_size", "env.val_size must be positive"});
    if (cfg.evo.unlabeled.enabled && cfg.unlabeled_size < 1) {
        issues.push_back({"env.unlabeled_size", "env.unlabeled_size must be positive when unlabeled.enabled"});
    }
    if (!(cfg.misread_rate >= 0.0 && cfg.misread_rate <= 1.0)) {
        issues.push_back({"policy.misread_rate", "policy.misread_rate must be in [0,1]"});
    }
    if (!(cfg.blur_rate >= 0.0 && cfg.blur_rate + cfg.misread_rate <= 1.0)) {
        issues.push_back({"policy.blur_rate", "policy.blur_rate must be in [0, 1 - policy.misread_rate]"});
    }
    if (!(cfg.evo.warmup_ratio >= 0.0 && cfg.evo.warmup_ratio <= 1.0)) {
        issues.push_back({"policy.warmup_ratio", "policy.warmup_ratio must be in [0,1]"});
    }
    check([&] { cfg.evo.method.validate(); });
    check([&] { cfg.evo.selection.validate(); });
    check([&] { cfg.evo.unlabeled.validate(); });
    check([&] { cfg.evo.controller.validate(); });
    if (cfg.evo.rollouts < 1) issues.push_back({"method.rollouts", "method.rollouts must be positive"});
    if (!(cfg.evo.temperature > 0.0)) issues.push_back({"method.temperature", "method.temperature must be positive"});
    if (!(cfg.evo.lr > 0.0)) issues.push_back({"policy.lr", "policy.lr must be positive"});
    if (cfg.evo.batch_size < 1) issues.push_back({"policy.batch_size", "policy.batch_size must be positive"});
    if (cfg.evo.budget < 1) issues.push_back({"budget.steps", "budget.steps must be positive"});
    if (!(cfg.evo.epochs > 0.0)) issues.push_back({"budget.epochs", "budget.epochs must be positive"});
    if (cfg.warmup.rollouts < 1) issues.push_back({"method.warmup_rollouts", "method.warmup_rollouts must be positive"});
    if (!(cfg.warmup.temperature > 0.0)) issues.push_back({"method.warmup_temperature", "method.warmup_temperature must be positive"});
    if (cfg.warmup.steps < 1) issues.push_back({"method.warmup_steps", "method.warmup_steps must be positive"});
    if (!(cfg.warmup.lr > 0.0)) issues.push_back({"method.warmup_lr", "method.warmup_lr must be positive"});
    if (cfg.prm.completer_factor < 1) {
        issues.push_back({"reward.prm_completer_factor", "reward.prm_completer_factor must be positive"});
    }
    if (cfg.prm.rollouts < 1) issues.push_back({"reward.prm_rollouts", "reward.prm_rollouts must be positive"});
    if (!(cfg.prm.temperature > 0.0)) issues.push_back({"reward.prm_temperature", "reward.prm_temperature must be positive"});
    if (cfg.prm.dataset.per_question_cap < 2) issues.push_back({"reward.prm_cap", "reward.prm_cap must be at least 2"});
    if (cfg.prm.dataset.completions < 1) issues.push_back({"reward.prm_completions", "reward.prm_completions must be positive"});
    if (cfg.prm.train.steps < 1) issues.push_back({"reward.prm_steps", "reward.prm_steps must be positive"});
    if (cfg.prm.train.batch_rows < 1) issues.push_back({"reward.prm_batch_rows", "reward.prm_batch_rows must be positive"});
    if (!(cfg.prm.train.lr > 0.0)) issues.push_back({"reward.prm_lr", "reward.prm_lr must be positive"});
    if (cfg.evo.eval.temperatures.empty()) issues.push_back({"dynamics.monitor_temperatures", "must not be empty"});
    for (double t : cfg.evo.eval.temperatures) {
        if (!(t > 0.0)) issues.push_back({"dynamics.monitor_temperatures", "temperatures must be positive"});
    }
    if (cfg.evo.eval.rollouts < 1) issues.push_back({"dynamics.eval_rollouts", "dynamics.eval_rollouts must be positive"});
    for (int k : cfg.evo.eval.ks) {
        if (static_cast<std::size_t>(k) > cfg.evo.eval.rollouts) {
            issues.push_back({"dynamics.pass_k", "every K must be at most dynamics.eval_rollouts"});
        }
    }
    return issues;
}

std::string serialize_run_config(const RunConfig& cfg) {
    std::string out;
    for (const char* section : kConfigSections) {
        out += out.empty() ? "" : "\n";
        out += "[" + std::string(section) + "]\n";
        for (const Key& k : keys()) {
            if (std::string_view(k.section) == section) out += std::string(k.name) + " = " + k.get(cfg) + "\n";
        }
    }
    return out;
}

RunConfig resolve_run_config(std::string_view text, std::string_view preset_override) {
    // Parse problems and invariant violations are reported together.
    std::vector<ConfigIssue> issues;
    RunConfig cfg = parse_collecting(text, issues);
    const std::string preset = preset_override.empty() ? cfg.preset : std::string(preset_override);
    if (!preset.empty()) {
        try {
            apply_preset(cfg, preset);
        } catch (const ConfigValidationError& e) {
            issues.insert(issues.end(), e.issues().begin(), e.issues().end());
        }
    }
    sync_selection(cfg);
    for (auto& i : validate_run_config(cfg)) issues.push_back(std::move(i));
    if (!issues.empty()) throw ConfigValidationError(std::move(issues));
    return cfg;
}

}  // namespace selfevolve
