#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "selfevolve/run_config.hpp"
#include "selfevolve/task_env.hpp"

namespace testing {

using namespace selfevolve;

inline TaskInstance make_instance(int rows, int cols, std::vector<int> cells, std::vector<Hop> hops,
                                  std::vector<Combinator> combs, std::uint64_t id = 1) {
    TaskInstance inst;
    inst.id = id;
    inst.grid = Grid(rows, cols, std::move(cells));
    inst.hops = std::move(hops);
    inst.combinators = std::move(combs);
    std::vector<int> values;
    for (const Hop& h : inst.hops) values.push_back(inst.grid.line_value(h));
    inst.gold_answer = fold_values(values, inst.combinators);
    return inst;
}

// grid [[1,2],[3,4]]
inline TaskInstance small_one_hop() { return make_instance(2, 2, {1, 2, 3, 4}, {{Agg::Sum, Axis::Row, 0}}, {}); }

inline TaskInstance small_two_hop() {
    return make_instance(2, 2, {1, 2, 3, 4}, {{Agg::Max, Axis::Col, 1}, {Agg::Min, Axis::Row, 1}},
                         {Combinator::Minus});
}

inline Response response_of(const TaskInstance& inst, const std::vector<Hop>& hops, bool with_answer = true) {
    Response r;
    for (const Hop& h : hops) r.steps.push_back(make_step(inst.grid, h));
    if (with_answer) r.answer = fold_steps(inst, r.steps);
    return r;
}

// A response whose first hop is replaced by another line with a different
// value; nullopt-like empty response when no such line exists.
inline Response corrupt_first_hop(const TaskInstance& inst) {
    Response good = canonical_solution(inst);
    const Hop h0 = inst.hops[0];
    for (int a = 0; a < 3; ++a) {
        for (int ax = 0; ax < 2; ++ax) {
            const Axis axis = static_cast<Axis>(ax);
            for (int i = 0; i < inst.grid.lines(axis); ++i) {
                Hop h{static_cast<Agg>(a), axis, i};
                if (h == h0) continue;
                std::vector<Hop> hops = inst.hops;
                hops[0] = h;
                Response r = response_of(inst, hops);
                if (!evaluate_response(inst, r).correct) return r;
            }
        }
    }
    return {};
}

// Every section, no keys: the built-in defaults.
inline std::string empty_config_text() {
    std::string t;
    for (const char* s : kConfigSections) t += "[" + std::string(s) + "]\n";
    return t;
}

// A small environment that runs in well under a second.
inline std::string tiny_config_text(const std::string& budget_steps = "48", const std::string& method_extra = "") {
    return "[env]\ntrain_size = 32\nval_size = 16\nunlabeled_size = 32\n"
           "[policy]\n"
           "[reward]\nprm_rollouts = 4\nprm_steps = 20\nprm_completions = 2\nprm_completer_factor = 2\n"
           "[method]\nrollouts = 4\nwarmup_rollouts = 4\nwarmup_steps = 20\n" +
           method_extra +
           "[unlabeled]\n"
           "[dynamics]\nmonitor_temperatures = 0.7, 1.0\neval_rollouts = 4\ncontroller_rollouts = 4\npass_k = 1, 2, 4\n"
           "[budget]\nsteps = " +
           budget_steps + "\nepochs = 2\n";
}

inline std::filesystem::path scratch_dir(const std::string& name) {
    const char* root = std::getenv("SELFEVOLVE_TEST_TMP");
    std::filesystem::path p = root != nullptr ? std::filesystem::path(root) : std::filesystem::temp_directory_path() / "selfevolve_tests";
    p /= name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace testing
