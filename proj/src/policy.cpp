#include "selfevolve/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "selfevolve/errors.hpp"
#include "selfevolve/rng.hpp"

namespace selfevolve {

void PolicyFeatureSpec::validate() const {
    if (hop_slots < 1 || hop_slots > 3) throw ConfigError("policy.hop_slots", "policy.hop_slots must be in [1,3]");
    if (max_steps < 1) throw ConfigError("policy.max_steps", "policy.max_steps must be positive");
    if (!(misread_rate >= 0.0 && misread_rate <= 1.0)) {
        throw ConfigError("policy.misread_rate", "policy.misread_rate must be in [0,1]");
    }
    if (!(blur_rate >= 0.0 && blur_rate + misread_rate <= 1.0)) {
        throw ConfigError("policy.blur_rate", "policy.blur_rate must be in [0, 1 - misread_rate]");
    }
}

PolicyParams PolicyParams::zeros(const PolicyFeatureSpec& spec) {
    return {spec, std::vector<double>(spec.dimension(), 0.0)};
}

void PolicyParams::validate() const {
    if (weights.size() != spec.dimension()) {
        throw DomainError("policy has " + std::to_string(weights.size()) + " weights, feature map declares " +
                          std::to_string(spec.dimension()));
    }
    for (double w : weights) {
        if (!std::isfinite(w)) throw DomainError("policy weight is not finite");
    }
}

PolicyParams base_policy(const PolicyFeatureSpec& spec, const PolicyPrior& prior) {
    PolicyParams p = PolicyParams::zeros(spec);
    for (int j = 0; j < spec.hop_slots; ++j) {
        p.weights[spec.agg_match(j)] = prior.agg_match;
        p.weights[spec.axis_match(j)] = prior.axis_match;
        p.weights[spec.index_match(j)] = prior.index_match;
        p.weights[spec.full_match(j)] = prior.full_match;
    }
    p.weights[spec.answer_at_h()] = prior.answer_at_h;
    p.weights[spec.answer_bias()] = prior.answer_bias;
    p.weights[spec.trailing_step()] = prior.trailing_step;
    p.weights[spec.salience()] = prior.salience;
    p.weights[spec.blur_shift()] = prior.blur_shift;
    return p;
}

OptimizerState OptimizerState::zeros(std::size_t n) {
    return {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0};
}

double LrSchedule::lr_at(std::uint64_t pos) const {
    const double warm = warmup_ratio * static_cast<double>(total_steps);
    if (warm <= 0.0) return base_lr;
    return base_lr * std::min(1.0, static_cast<double>(pos) / warm);
}

void adam_step(std::span<double> weights, std::span<const double> grad, OptimizerState& opt, double lr,
               const AdamConfig& adam) {
    opt.step_count += 1;
    const double t = static_cast<double>(opt.step_count);
    const double c1 = 1.0 - std::pow(adam.beta1, t);
    const double c2 = 1.0 - std::pow(adam.beta2, t);
    for (std::size_t i = 0; i < weights.size(); ++i) {
        double& m = opt.first_moments[i];
        double& v = opt.second_moments[i];
        m = adam.beta1 * m + (1.0 - adam.beta1) * grad[i];
        v = adam.beta2 * v + (1.0 - adam.beta2) * grad[i] * grad[i];
        weights[i] -= lr * (m / c1) / (std::sqrt(v / c2) + adam.epsilon);
    }
}

ActionSpace::ActionSpace(const Grid& grid) : rows_(grid.rows()), cols_(grid.cols()) {
    for (Agg agg : {Agg::Sum, Agg::Max, Agg::Min}) {
        for (Axis axis : {Axis::Row, Axis::Col}) {
            for (int i = 0; i < grid.lines(axis); ++i) hops_.push_back({agg, axis, i});
        }
    }
}

std::size_t ActionSpace::ordinal(const Hop& h) const {
    const int lines = h.axis == Axis::Row ? rows_ : cols_;
    if (h.index < 0 || h.index >= lines) {
        throw MalformedResponse("step " + std::string(to_string(h.agg)) + " " + std::string(to_string(h.axis)) + " " +
                                std::to_string(h.index) + " is not in the action space");
    }
    const std::size_t per_agg = static_cast<std::size_t>(rows_ + cols_);
    std::size_t base = static_cast<std::size_t>(h.agg) * per_agg;
    if (h.axis == Axis::Col) base += static_cast<std::size_t>(rows_);
    return base + static_cast<std::size_t>(h.index);
}

namespace {

std::uint64_t content_hash(const TaskInstance& inst) {
    std::uint64_t h = mix64(static_cast<std::uint64_t>(inst.grid.rows()) * 131 + static_cast<std::uint64_t>(inst.grid.cols()));
    for (int v : inst.grid.cells()) h = mix64(h ^ static_cast<std::uint64_t>(v + 17));
    for (const Hop& hop : inst.hops) {
        h = mix64(h ^ (static_cast<std::uint64_t>(hop.agg) << 16 | static_cast<std::uint64_t>(hop.axis) << 8 |
                       static_cast<std::uint64_t>(hop.index)));
    }
    return h;
}

}  // namespace

PolicyView::PolicyView(const PolicyFeatureSpec& spec, const TaskInstance& inst)
    : spec_(&spec), inst_(&inst), actions_(inst.grid) {
    const std::uint64_t h = content_hash(inst);
    for (int p = 0; p < inst.hop_count(); ++p) {
        Hop hop = inst.hops[static_cast<std::size_t>(p)];
        bool blurred = false;
        if (spec.misread_rate > 0.0 || spec.blur_rate > 0.0) {
            const double u = static_cast<double>(derive_seed(h ^ spec.perception_seed, {static_cast<std::uint64_t>(p)}) >> 11) * 0x1.0p-53;
            blurred = u < spec.blur_rate;
            if (u < spec.blur_rate + spec.misread_rate) hop.index = (hop.index + 1) % inst.grid.lines(hop.axis);
        }
        perceived_.push_back(hop);
        blurred_.push_back(blurred);
    }
    const std::size_t steps = actions_.size() - 1;
    values_.resize(steps);
    salience_.assign(steps, 0.0);
    int lo[3] = {std::numeric_limits<int>::max(), std::numeric_limits<int>::max(), std::numeric_limits<int>::max()};
    int hi[3] = {std::numeric_limits<int>::min(), std::numeric_limits<int>::min(), std::numeric_limits<int>::min()};
    for (std::size_t a = 0; a < steps; ++a) {
        values_[a] = inst.grid.line_value(actions_.hop(a));
        const auto g = static_cast<std::size_t>(actions_.hop(a).agg);
        lo[g] = std::min(lo[g], values_[a]);
        hi[g] = std::max(hi[g], values_[a]);
    }
    for (std::size_t a = 0; a < steps; ++a) {
        const auto g = static_cast<std::size_t>(actions_.hop(a).agg);
        if (hi[g] > lo[g]) salience_[a] = static_cast<double>(values_[a] - lo[g]) / static_cast<double>(hi[g] - lo[g]);
    }
}

int PolicyView::shifted_index(const Hop& perceived) const {
    const int lines = inst_->grid.lines(perceived.axis);
    return (perceived.index + lines - 1) % lines;
}

void PolicyView::add_features(int position, std::size_t action, double coef, std::span<double> out) const {
    const PolicyFeatureSpec& s = *spec_;
    const int hops = inst_->hop_count();
    if (actions_.is_answer(action)) {
        if (position == hops) out[s.answer_at_h()] += coef;
        out[s.answer_bias()] += coef;
        return;
    }
    out[s.salience()] += coef * salience_[action];
    if (position >= hops) {
        out[s.trailing_step()] += coef;
        return;
    }
    const int slot = std::min(position, s.hop_slots - 1);
    const Hop& want = perceived_[static_cast<std::size_t>(position)];
    const Hop& got = actions_.hop(action);
    const bool agg = got.agg == want.agg;
    const bool axis = got.axis == want.axis;
    const bool index = got.index == want.index;
    if (agg) out[s.agg_match(slot)] += coef;
    if (axis) out[s.axis_match(slot)] += coef;
    if (index) out[s.index_match(slot)] += coef;
    if (agg && axis && index) out[s.full_match(slot)] += coef;
    if (agg && axis && blurred_[static_cast<std::size_t>(position)] && got.index == shifted_index(want)) {
        out[s.blur_shift()] += coef;
    }
}

void PolicyView::logits(std::span<const double> w, int position, std::span<double> out) const {
    const PolicyFeatureSpec& s = *spec_;
    const int hops = inst_->hop_count();
    const std::size_t steps = actions_.size() - 1;
    const double sal = w[s.salience()];
    if (position >= hops) {
        const double base = w[s.trailing_step()];
        for (std::size_t a = 0; a < steps; ++a) out[a] = base + sal * salience_[a];
    } else {
        const int slot = std::min(position, s.hop_slots - 1);
        const Hop& want = perceived_[static_cast<std::size_t>(position)];
        const double wa = w[s.agg_match(slot)];
        const double wx = w[s.axis_match(slot)];
        const double wi = w[s.index_match(slot)];
        const double wf = w[s.full_match(slot)];
        const bool blurred = blurred_[static_cast<std::size_t>(position)];
        const int shifted = shifted_index(want);
        const double wb = w[s.blur_shift()];
        for (std::size_t a = 0; a < steps; ++a) {
            const Hop& got = actions_.hop(a);
            const bool agg = got.agg == want.agg;
            const bool axis = got.axis == want.axis;
            const bool index = got.index == want.index;
            double z = sal * salience_[a];
            if (agg) z += wa;
            if (axis) z += wx;
            if (index) z += wi;
            if (agg && axis && index) z += wf;
            if (agg && axis && blurred && got.index == shifted) z += wb;
            out[a] = z;
        }
    }
    double ans = w[s.answer_bias()];
    if (position == hops) ans += w[s.answer_at_h()];
    out[steps] = ans;
}

std::vector<double> PolicyView::features(int position, std::size_t action) const {
    std::vector<double> phi(spec_->dimension(), 0.0);
    add_features(position, action, 1.0, phi);
    return phi;
}

std::vector<std::size_t> PolicyView::decode(const Response& resp) const {
    std::vector<std::size_t> seq;
    seq.reserve(resp.steps.size() + 1);
    for (const Step& s : resp.steps) seq.push_back(actions_.ordinal(s.hop()));
    if (resp.answer || resp.steps.empty()) seq.push_back(actions_.answer());
    if (static_cast<int>(seq.size()) > spec_->max_steps + 1 ||
        static_cast<int>(resp.steps.size()) > spec_->max_steps) {
        throw MalformedResponse("response is longer than the decoding horizon");
    }
    return seq;
}

void softmax(std::span<const double> logits, double temperature, std::span<double> probs) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double z : logits) mx = std::max(mx, z);
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        probs[i] = std::exp((logits[i] - mx) / temperature);
        sum += probs[i];
    }
    for (double& p : probs) p /= sum;
}

namespace {

void check_temperature(double temperature) {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw DomainError("sampling temperature must be positive, got " + std::to_string(temperature));
    }
}

// log softmax(logits / T)[a]
double log_prob_of(std::span<const double> logits, double temperature, std::size_t a) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double z : logits) mx = std::max(mx, z);
    double sum = 0.0;
    for (double z : logits) sum += std::exp((z - mx) / temperature);
    return (logits[a] - mx) / temperature - std::log(sum);
}

}  // namespace

Response complete_response(const PolicyParams& params, const PolicyView& view, std::span<const Step> prefix,
                           double temperature, std::uint64_t seed) {
    check_temperature(temperature);
    Rng rng(seed);
    Response r;
    r.steps.assign(prefix.begin(), prefix.end());
    const std::size_t n = view.actions().size();
    std::vector<double> z(n), p(n);
    double lp = 0.0;
    const int horizon = params.spec.max_steps;
    for (int pos = static_cast<int>(prefix.size()); pos < horizon; ++pos) {
        view.logits(params.weights, pos, z);
        softmax(z, temperature, p);
        const double u = rng.uniform();
        double acc = 0.0;
        std::size_t a = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
            acc += p[i];
            if (u < acc) {
                a = i;
                break;
            }
        }
        // Guard against the cumulative sum rounding below u.
        while (p[a] == 0.0 && a > 0) --a;
        lp += log_prob_of(z, temperature, a);
        if (view.actions().is_answer(a)) {
            r.answer = fold_steps(view.instance(), r.steps);
            r.logprob = lp;
            return r;
        }
        r.steps.push_back({view.actions().hop(a).agg, view.actions().hop(a).axis, view.actions().hop(a).index,
                           view.line_value(a)});
    }
    r.logprob = lp;
    return r;
}

std::vector<Response> sample_responses(const PolicyParams& params, const TaskInstance& inst, double temperature,
                                       std::size_t n, std::uint64_t seed) {
    check_temperature(temperature);
    if (n == 0) throw DomainError("sample count must be at least 1");
    PolicyView view(params.spec, inst);
    std::vector<Response> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(complete_response(params, view, {}, temperature, derive_seed(seed, {i})));
    }
    return out;
}

Response greedy_decode(const PolicyParams& params, const TaskInstance& inst) {
    PolicyView view(params.spec, inst);
    const std::size_t n = view.actions().size();
    std::vector<double> z(n);
    Response r;
    for (int pos = 0; pos < params.spec.max_steps; ++pos) {
        view.logits(params.weights, pos, z);
        std::size_t best = 0;
        for (std::size_t a = 1; a < n; ++a) {
            if (z[a] > z[best]) best = a;
        }
        if (view.actions().is_answer(best)) {
            r.answer = fold_steps(inst, r.steps);
            return r;
        }
        const Hop& h = view.actions().hop(best);
        r.steps.push_back({h.agg, h.axis, h.index, view.line_value(best)});
    }
    return r;
}

double response_logprob(const PolicyParams& params, const TaskInstance& inst, const Response& resp,
                        double temperature) {
    check_temperature(temperature);
    PolicyView view(params.spec, inst);
    const auto seq = view.decode(resp);
    std::vector<double> z(view.actions().size());
    double lp = 0.0;
    for (std::size_t pos = 0; pos < seq.size(); ++pos) {
        view.logits(params.weights, static_cast<int>(pos), z);
        lp += log_prob_of(z, temperature, seq[pos]);
    }
    return lp;
}

double nll_and_gradient(const PolicyParams& params, std::span<const TrainPair> batch, std::span<double> grad) {
    std::fill(grad.begin(), grad.end(), 0.0);
    if (batch.empty()) throw DomainError("training batch is empty");
    const double scale = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    std::vector<double> z, p;
    for (const TrainPair& pair : batch) {
        PolicyView view(params.spec, *pair.instance);
        const auto seq = view.decode(pair.response);
        const std::size_t n = view.actions().size();
        z.resize(n);
        p.resize(n);
        for (std::size_t pos = 0; pos < seq.size(); ++pos) {
            const int ipos = static_cast<int>(pos);
            view.logits(params.weights, ipos, z);
            softmax(z, 1.0, p);
            loss -= scale * std::log(p[seq[pos]]);
            view.add_features(ipos, seq[pos], -scale, grad);
            for (std::size_t a = 0; a < n; ++a) {
                if (p[a] > 0.0) view.add_features(ipos, a, scale * p[a], grad);
            }
        }
    }
    return loss;
}

UpdateResult sft_update(PolicyParams& params, OptimizerState& opt, LrSchedule& sched, std::span<const TrainPair> batch,
                        std::uint64_t batch_id, const AdamConfig& adam) {
    if (batch.empty()) throw DomainError("sft_update requires a non-empty batch");
    if (sched.position >= sched.total_steps) {
        throw DomainError("learning-rate schedule exhausted at position " + std::to_string(sched.position));
    }
    if (opt.first_moments.size() != params.weights.size()) opt = OptimizerState::zeros(params.weights.size());
    std::vector<double> grad(params.weights.size());
    UpdateResult res;
    res.loss = nll_and_gradient(params, batch, grad);
    if (!std::isfinite(res.loss)) throw NumericError("non-finite loss in batch " + std::to_string(batch_id));
    for (double g : grad) {
        if (!std::isfinite(g)) throw NumericError("non-finite gradient in batch " + std::to_string(batch_id));
    }
    res.lr = sched.lr();
    adam_step(params.weights, grad, opt, res.lr, adam);
    sched.position += 1;
    return res;
}

}  // namespace selfevolve
