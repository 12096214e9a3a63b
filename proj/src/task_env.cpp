#include "selfevolve/task_env.hpp"

#include <algorithm>

#include "selfevolve/errors.hpp"
#include "selfevolve/rng.hpp"

namespace selfevolve {

std::string_view to_string(Agg a) {
    switch (a) {
        case Agg::Sum: return "sum";
        case Agg::Max: return "max";
        case Agg::Min: return "min";
    }
    return "?";
}

std::string_view to_string(Axis a) { return a == Axis::Row ? "row" : "col"; }

std::string_view to_string(Combinator c) { return c == Combinator::Plus ? "plus" : "minus"; }

Agg parse_agg(std::string_view s) {
    if (s == "sum") return Agg::Sum;
    if (s == "max") return Agg::Max;
    if (s == "min") return Agg::Min;
    throw MalformedResponse("unknown aggregation '" + std::string(s) + "'");
}

Axis parse_axis(std::string_view s) {
    if (s == "row") return Axis::Row;
    if (s == "col") return Axis::Col;
    throw MalformedResponse("unknown axis '" + std::string(s) + "'");
}

Combinator parse_combinator(std::string_view s) {
    if (s == "plus") return Combinator::Plus;
    if (s == "minus") return Combinator::Minus;
    throw MalformedResponse("unknown combinator '" + std::string(s) + "'");
}

Grid::Grid(int rows, int cols, std::vector<int> cells) : rows_(rows), cols_(cols), cells_(std::move(cells)) {
    if (rows <= 0 || cols <= 0 || cells_.size() != static_cast<std::size_t>(rows * cols)) {
        throw MalformedResponse("grid shape does not match its cell count");
    }
}

int Grid::line_value(const Hop& h) const {
    if (!contains(h)) {
        throw MalformedResponse("step references " + std::string(to_string(h.axis)) + " " + std::to_string(h.index) +
                                " outside a " + std::to_string(rows_) + "x" + std::to_string(cols_) + " grid");
    }
    const int n = h.axis == Axis::Row ? cols_ : rows_;
    int acc = 0;
    for (int k = 0; k < n; ++k) {
        const int v = h.axis == Axis::Row ? at(h.index, k) : at(k, h.index);
        if (k == 0) {
            acc = v;
            continue;
        }
        switch (h.agg) {
            case Agg::Sum: acc += v; break;
            case Agg::Max: acc = std::max(acc, v); break;
            case Agg::Min: acc = std::min(acc, v); break;
        }
    }
    return acc;
}

void EnvConfig::validate() const {
    auto check = [](bool ok, const char* field, const char* msg) {
        if (!ok) throw ConfigError(field, std::string(field) + ": " + msg);
    };
    check(rows_min >= 2 && rows_min <= 4, "env.rows_min", "must be in [2,4]");
    check(rows_max >= rows_min && rows_max <= 4, "env.rows_max", "must be in [rows_min,4]");
    check(cols_min >= 2 && cols_min <= 4, "env.cols_min", "must be in [2,4]");
    check(cols_max >= cols_min && cols_max <= 4, "env.cols_max", "must be in [cols_min,4]");
    check(hops_min >= 1 && hops_min <= 3, "env.hops_min", "must be in [1,3]");
    check(hops_max >= hops_min && hops_max <= 3, "env.hops_max", "must be in [hops_min,3]");
}

int fold_values(std::span<const int> values, std::span<const Combinator> combinators) {
    if (values.empty()) return 0;
    int acc = values[0];
    for (std::size_t i = 1; i < values.size(); ++i) {
        acc = combinators[i - 1] == Combinator::Plus ? acc + values[i] : acc - values[i];
    }
    return acc;
}

TaskInstance generate_instance(std::uint64_t seed, const EnvConfig& cfg) {
    cfg.validate();
    Rng rng(seed);
    const int rows = static_cast<int>(rng.between(cfg.rows_min, cfg.rows_max));
    const int cols = static_cast<int>(rng.between(cfg.cols_min, cfg.cols_max));
    std::vector<int> cells(static_cast<std::size_t>(rows * cols));
    for (int& c : cells) c = static_cast<int>(rng.below(10));

    TaskInstance inst;
    inst.id = seed;
    inst.grid = Grid(rows, cols, std::move(cells));
    const int hops = static_cast<int>(rng.between(cfg.hops_min, cfg.hops_max));
    std::vector<int> values;
    for (int i = 0; i < hops; ++i) {
        Hop h;
        h.agg = static_cast<Agg>(rng.below(3));
        h.axis = static_cast<Axis>(rng.below(2));
        h.index = static_cast<int>(rng.below(static_cast<std::uint64_t>(inst.grid.lines(h.axis))));
        inst.hops.push_back(h);
        values.push_back(inst.grid.line_value(h));
        if (i > 0) inst.combinators.push_back(static_cast<Combinator>(rng.below(2)));
    }
    inst.gold_answer = fold_values(values, inst.combinators);
    return inst;
}

std::vector<TaskInstance> generate_split(std::uint64_t split_seed, std::size_t count, const EnvConfig& cfg) {
    std::vector<TaskInstance> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back(generate_instance(derive_seed(split_seed, {i}), cfg));
    }
    return out;
}

std::optional<int> fold_steps(const TaskInstance& inst, std::span<const Step> steps) {
    if (steps.empty()) return std::nullopt;
    const std::size_t n = std::min(steps.size(), inst.hops.size());
    std::vector<int> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = steps[i].value;
    return fold_values(values, inst.combinators);
}

Evaluation evaluate_response(const TaskInstance& inst, const Response& resp) {
    for (const Step& s : resp.steps) {
        if (inst.grid.line_value(s.hop()) != s.value) {
            throw MalformedResponse("step value " + std::to_string(s.value) + " disagrees with the grid");
        }
    }
    if (resp.answer && resp.steps.empty()) {
        throw MalformedResponse("answer emitted without any reasoning step");
    }
    Evaluation ev;
    if (resp.answer) ev.predicted = fold_steps(inst, resp.steps);
    ev.correct = ev.predicted.has_value() && *ev.predicted == inst.gold_answer;
    return ev;
}

Step make_step(const Grid& grid, const Hop& hop) {
    return {hop.agg, hop.axis, hop.index, grid.line_value(hop)};
}

Response canonical_solution(const TaskInstance& inst) {
    Response r;
    for (const Hop& h : inst.hops) r.steps.push_back(make_step(inst.grid, h));
    r.answer = fold_steps(inst, r.steps);
    return r;
}

double relevance_fraction(const TaskInstance& inst, const Response& resp) {
    if (resp.steps.empty()) throw UndefinedInput("relevance of an empty response is undefined");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < resp.steps.size(); ++i) {
        if (i < inst.hops.size() && resp.steps[i].hop() == inst.hops[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(resp.steps.size());
}

namespace {

nlohmann::json hop_json(const Hop& h) {
    return {{"agg", to_string(h.agg)}, {"axis", to_string(h.axis)}, {"index", h.index}};
}

Hop hop_from(const nlohmann::json& j) {
    return {parse_agg(j.at("agg").get<std::string>()), parse_axis(j.at("axis").get<std::string>()),
            j.at("index").get<int>()};
}

}  // namespace

nlohmann::json to_json(const TaskInstance& inst) {
    nlohmann::json grid = nlohmann::json::array();
    for (int r = 0; r < inst.grid.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < inst.grid.cols(); ++c) row.push_back(inst.grid.at(r, c));
        grid.push_back(std::move(row));
    }
    nlohmann::json hops = nlohmann::json::array();
    for (const Hop& h : inst.hops) hops.push_back(hop_json(h));
    nlohmann::json comb = nlohmann::json::array();
    for (Combinator c : inst.combinators) comb.push_back(to_string(c));
    nlohmann::json j;
    j["id"] = inst.id;
    j["grid"] = std::move(grid);
    j["hops"] = std::move(hops);
    j["combinators"] = std::move(comb);
    j["gold_answer"] = inst.gold_answer;
    return j;
}

TaskInstance instance_from_json(const nlohmann::json& j) {
    TaskInstance inst;
    inst.id = j.at("id").get<std::uint64_t>();
    const auto& g = j.at("grid");
    const int rows = static_cast<int>(g.size());
    const int cols = rows > 0 ? static_cast<int>(g.at(0).size()) : 0;
    std::vector<int> cells;
    for (const auto& row : g) {
        if (static_cast<int>(row.size()) != cols) throw MalformedResponse("ragged grid record");
        for (const auto& v : row) cells.push_back(v.get<int>());
    }
    inst.grid = Grid(rows, cols, std::move(cells));
    for (const auto& h : j.at("hops")) inst.hops.push_back(hop_from(h));
    for (const auto& c : j.at("combinators")) inst.combinators.push_back(parse_combinator(c.get<std::string>()));
    inst.gold_answer = j.at("gold_answer").get<int>();
    return inst;
}

nlohmann::json to_json(const Step& s) {
    return {{"agg", to_string(s.agg)}, {"axis", to_string(s.axis)}, {"index", s.index}, {"value", s.value}};
}

Step step_from_json(const nlohmann::json& j) {
    return {parse_agg(j.at("agg").get<std::string>()), parse_axis(j.at("axis").get<std::string>()),
            j.at("index").get<int>(), j.at("value").get<int>()};
}

}  // namespace selfevolve
