#pragma once

// Trainable softmax sequence policy over grid-reasoning actions.
//
// At each position the policy scores every action (one per valid line
// aggregation, plus ANSWER) with a linear function of a small feature map and
// samples from softmax(score / T). The feature map is deliberately tiny so a
// full self-evolving run takes seconds.
//
// Feature layout (dimension = 4 * hop_slots + 5):
//   [4j + 0..3]  for a step action at position j < H, compared with the hop
//                the policy perceives at position j: agg match, axis match,
//                index match, full hop match
//   [4s + 0]     ANSWER at position H
//   [4s + 1]     ANSWER at any position (answer-early habit)
//   [4s + 2]     step action at position >= H (trailing step habit)
//   [4s + 3]     line salience in [0,1]: the action's value relative to the
//                other lines with the same aggregation
//   [4s + 4]     blurred hop, step action matching the perceived agg and axis
//                with the index one below the perceived one
//
// Perception is a deterministic function of the instance content, the
// position and perception_seed. With probability `blur_rate` the hop is
// blurred: the policy sees the blur and reads the index one too high; only
// rollouts that explore away from that reading teach the blur_shift feature.
// With probability `misread_rate` the index is read one too high with no
// visible sign, which no weight setting can fix.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "selfevolve/task_env.hpp"

namespace selfevolve {

struct PolicyFeatureSpec {
    int hop_slots = 3;
    int max_steps = 8;
    double misread_rate = 0.0;
    double blur_rate = 0.0;
    std::uint64_t perception_seed = 0;

    std::size_t dimension() const { return static_cast<std::size_t>(4 * hop_slots + 5); }
    std::size_t agg_match(int slot) const { return static_cast<std::size_t>(4 * slot); }
    std::size_t axis_match(int slot) const { return static_cast<std::size_t>(4 * slot + 1); }
    std::size_t index_match(int slot) const { return static_cast<std::size_t>(4 * slot + 2); }
    std::size_t full_match(int slot) const { return static_cast<std::size_t>(4 * slot + 3); }
    std::size_t answer_at_h() const { return static_cast<std::size_t>(4 * hop_slots); }
    std::size_t answer_bias() const { return answer_at_h() + 1; }
    std::size_t trailing_step() const { return answer_at_h() + 2; }
    std::size_t salience() const { return answer_at_h() + 3; }
    std::size_t blur_shift() const { return answer_at_h() + 4; }

    void validate() const;
    friend bool operator==(const PolicyFeatureSpec&, const PolicyFeatureSpec&) = default;
};

struct PolicyParams {
    PolicyFeatureSpec spec;
    std::vector<double> weights;

    static PolicyParams zeros(const PolicyFeatureSpec& spec);
    // Throws DomainError on a length mismatch or non-finite weight.
    void validate() const;
    friend bool operator==(const PolicyParams&, const PolicyParams&) = default;
};

// Pretrained prior of the base model before any self-evolving training.
struct PolicyPrior {
    double agg_match = 0.4;
    double axis_match = 0.4;
    double index_match = 0.4;
    double full_match = 0.4;
    double answer_at_h = 0.0;
    double answer_bias = 2.0;
    double trailing_step = 0.0;
    double salience = 1.0;
    double blur_shift = 0.0;

    friend bool operator==(const PolicyPrior&, const PolicyPrior&) = default;
};

PolicyParams base_policy(const PolicyFeatureSpec& spec, const PolicyPrior& prior);

struct OptimizerState {
    std::vector<double> first_moments;
    std::vector<double> second_moments;
    std::uint64_t step_count = 0;

    static OptimizerState zeros(std::size_t n);
    friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Linear warmup to base_lr over warmup_ratio * total_steps, then constant.
struct LrSchedule {
    double base_lr = 0.01;
    double warmup_ratio = 0.1;
    std::uint64_t total_steps = 0;
    std::uint64_t position = 0;

    double lr() const { return lr_at(position); }
    double lr_at(std::uint64_t pos) const;
    friend bool operator==(const LrSchedule&, const LrSchedule&) = default;
};

// Applies one Adam update in place; `lr` is the step size for this update.
void adam_step(std::span<double> weights, std::span<const double> grad, OptimizerState& opt, double lr,
               const AdamConfig& adam = {});

// Canonical action order: aggregation, then axis, then index; ANSWER last.
class ActionSpace {
public:
    explicit ActionSpace(const Grid& grid);

    std::size_t size() const { return hops_.size() + 1; }
    std::size_t answer() const { return hops_.size(); }
    bool is_answer(std::size_t a) const { return a == hops_.size(); }
    const Hop& hop(std::size_t a) const { return hops_[a]; }
    // Throws MalformedResponse for a hop outside the grid.
    std::size_t ordinal(const Hop& h) const;

private:
    std::vector<Hop> hops_;
    int rows_;
    int cols_;
};

// Per-instance precomputation shared by scoring, sampling and gradients.
class PolicyView {
public:
    PolicyView(const PolicyFeatureSpec& spec, const TaskInstance& inst);

    const TaskInstance& instance() const { return *inst_; }
    const ActionSpace& actions() const { return actions_; }
    const Hop& perceived_hop(int position) const { return perceived_[static_cast<std::size_t>(position)]; }
    bool misread(int position) const { return perceived_hop(position) != inst_->hops[static_cast<std::size_t>(position)]; }
    bool blurred(int position) const { return blurred_[static_cast<std::size_t>(position)]; }
    int line_value(std::size_t a) const { return values_[a]; }

    // Raw scores (temperature 1) of every action at `position`.
    void logits(std::span<const double> weights, int position, std::span<double> out) const;
    // out += coef * phi(position, action)
    void add_features(int position, std::size_t action, double coef, std::span<double> out) const;
    // Dense phi(position, action), for tests.
    std::vector<double> features(int position, std::size_t action) const;

    // Action ordinals of a response: its steps, then ANSWER when an answer was
    // emitted (or when the chain is empty, which is an immediate ANSWER).
    std::vector<std::size_t> decode(const Response& resp) const;

private:
    const PolicyFeatureSpec* spec_;
    const TaskInstance* inst_;
    ActionSpace actions_;
    int shifted_index(const Hop& perceived) const;

    std::vector<Hop> perceived_;
    std::vector<bool> blurred_;
    std::vector<int> values_;
    std::vector<double> salience_;
};

// Softmax of logits / temperature, written into `probs`.
void softmax(std::span<const double> logits, double temperature, std::span<double> probs);

// Continues sampling after `prefix` until ANSWER or max_steps.
Response complete_response(const PolicyParams& params, const PolicyView& view, std::span<const Step> prefix,
                           double temperature, std::uint64_t seed);

std::vector<Response> sample_responses(const PolicyParams& params, const TaskInstance& inst, double temperature,
                                       std::size_t n, std::uint64_t seed);

Response greedy_decode(const PolicyParams& params, const TaskInstance& inst);

double response_logprob(const PolicyParams& params, const TaskInstance& inst, const Response& resp,
                        double temperature);

struct TrainPair {
    const TaskInstance* instance = nullptr;
    Response response;
};

// Mean per-response negative log-likelihood at T=1 and its gradient.
double nll_and_gradient(const PolicyParams& params, std::span<const TrainPair> batch, std::span<double> grad);

struct UpdateResult {
    double loss = 0.0;
    double lr = 0.0;
};

// One Adam step on the mean NLL of `batch`; advances opt.step_count and
// sched.position. Throws NumericError on a non-finite gradient.
UpdateResult sft_update(PolicyParams& params, OptimizerState& opt, LrSchedule& sched, std::span<const TrainPair> batch,
                        std::uint64_t batch_id = 0, const AdamConfig& adam = {});

}  // namespace selfevolve
