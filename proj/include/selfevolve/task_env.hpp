#pragma once

// Synthetic multi-hop grid reasoning tasks.
//
// A task shows a small integer grid (the visual context) and asks for a chain
// of line aggregations combined with +/-, e.g. "max of column 1 minus min of
// row 1". A response is a chain of steps, each naming one line aggregation
// and recording its value, optionally followed by an answer. The answer is
// the fold of the first H step values, so steps after the H-th are irrelevant
// to correctness.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace selfevolve {

enum class Agg : std::uint8_t { Sum = 0, Max = 1, Min = 2 };
enum class Axis : std::uint8_t { Row = 0, Col = 1 };
enum class Combinator : std::uint8_t { Plus = 0, Minus = 1 };

std::string_view to_string(Agg a);
std::string_view to_string(Axis a);
std::string_view to_string(Combinator c);
Agg parse_agg(std::string_view s);
Axis parse_axis(std::string_view s);
Combinator parse_combinator(std::string_view s);

struct Hop {
    Agg agg = Agg::Sum;
    Axis axis = Axis::Row;
    int index = 0;

    friend bool operator==(const Hop&, const Hop&) = default;
};

struct Step {
    Agg agg = Agg::Sum;
    Axis axis = Axis::Row;
    int index = 0;
    int value = 0;

    Hop hop() const { return {agg, axis, index}; }
    friend bool operator==(const Step&, const Step&) = default;
};

class Grid {
public:
    Grid() = default;
    Grid(int rows, int cols, std::vector<int> cells);

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    int at(int r, int c) const { return cells_[static_cast<std::size_t>(r * cols_ + c)]; }
    std::span<const int> cells() const { return cells_; }

    // Number of lines along an axis (rows for Row, columns for Col).
    int lines(Axis axis) const { return axis == Axis::Row ? rows_ : cols_; }
    bool contains(const Hop& h) const { return h.index >= 0 && h.index < lines(h.axis); }

    // Aggregation of one line. Throws MalformedResponse if out of range.
    int line_value(const Hop& h) const;

    friend bool operator==(const Grid&, const Grid&) = default;

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<int> cells_;
};

struct TaskInstance {
    std::uint64_t id = 0;
    Grid grid;
    std::vector<Hop> hops;
    std::vector<Combinator> combinators;  // hops.size() - 1 entries
    int gold_answer = 0;

    int hop_count() const { return static_cast<int>(hops.size()); }
    friend bool operator==(const TaskInstance&, const TaskInstance&) = default;
};

struct Response {
    std::vector<Step> steps;
    std::optional<int> answer;
    std::optional<double> logprob;

    friend bool operator==(const Response&, const Response&) = default;
};

struct EnvConfig {
    int rows_min = 2;
    int rows_max = 4;
    int cols_min = 2;
    int cols_max = 4;
    int hops_min = 1;
    int hops_max = 3;

    // Throws ConfigError naming the first offending field.
    void validate() const;
    int max_steps() const { return 2 * hops_max + 2; }

    friend bool operator==(const EnvConfig&, const EnvConfig&) = default;
};

TaskInstance generate_instance(std::uint64_t seed, const EnvConfig& cfg);

// `count` instances with seeds derived from `split_seed`.
std::vector<TaskInstance> generate_split(std::uint64_t split_seed, std::size_t count, const EnvConfig& cfg);

// Left fold of `values` under `combinators` (only the first values.size()-1
// combinators are used).
int fold_values(std::span<const int> values, std::span<const Combinator> combinators);

// Fold of the first min(H, len) step values. Absent for an empty chain.
std::optional<int> fold_steps(const TaskInstance& inst, std::span<const Step> steps);

struct Evaluation {
    std::optional<int> predicted;
    bool correct = false;
};

// Throws MalformedResponse when a step references a line outside the grid or
// records a value that differs from the grid.
Evaluation evaluate_response(const TaskInstance& inst, const Response& resp);

Response canonical_solution(const TaskInstance& inst);

// Fraction of steps equal to the query hop at their position. Throws
// UndefinedInput for an empty chain.
double relevance_fraction(const TaskInstance& inst, const Response& resp);

Step make_step(const Grid& grid, const Hop& hop);

// Line-delimited record schema: {id, grid, hops, combinators, gold_answer}.
nlohmann::json to_json(const TaskInstance& inst);
TaskInstance instance_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Step& s);
Step step_from_json(const nlohmann::json& j);

}  // namespace selfevolve
