#pragma once

// Actor-critic dispatcher with forecast-augmented state and necessity patching.
//
// State layout (all powers in per-unit of the case base):
//
//   group              length
//   gen_q              n_gen
//   bus_v              n_bus
//   branch_p_from      n_branch
//   branch_q_from      n_branch
//   branch_p_to        n_branch
//   branch_q_to        n_branch
//   branch_load        n_branch
//   branch_current     n_branch
//   load_p             n_load
//   load_q             n_load
//   grid_loss          1
//   gen_p              n_gen
//   gen_status         n_gen
//   forecast           rows * n_new   (row-major, day t0+1 first)
//
// Actions live in [-1, 1] inside the networks. In the absolute mode they map
// affinely onto [P_min, P_max] for thermal units and [0, P_max] for
// renewables. In the incremental mode a_i scales a per-unit step added to the
// previous set-point, P_i = clip(P_i' + a_i * step_i, box): thermal steps
// equal the ramp limit and renewable steps a fixed share of capacity, so a
// zero output holds the current dispatch.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gridpatch/confidence.hpp"
#include "gridpatch/dispatcher.hpp"
#include "gridpatch/grid.hpp"
#include "gridpatch/params.hpp"

namespace gridpatch {

// ---------------------------------------------------------------- state

struct StateSegment {
    std::string name;
    std::size_t offset = 0;
    std::size_t length = 0;
};

inline std::vector<StateSegment> state_layout(const GridCase& c, std::size_t forecast_rows) {
    const std::size_t ng = c.generators.size(), nb = c.buses.size(), nl = c.branches.size(), nd = c.loads.size();
    const std::vector<std::pair<const char*, std::size_t>> groups{
        {"gen_q", ng},          {"bus_v", nb},       {"branch_p_from", nl}, {"branch_q_from", nl},
        {"branch_p_to", nl},    {"branch_q_to", nl}, {"branch_load", nl},   {"branch_current", nl},
        {"load_p", nd},         {"load_q", nd},      {"grid_loss", 1},      {"gen_p", ng},
        {"gen_status", ng},     {"forecast", forecast_rows * c.renewable_count()}};
    std::vector<StateSegment> out;
    std::size_t off = 0;
    for (const auto& [name, len] : groups) {
        out.push_back({name, off, len});
        off += len;
    }
    return out;
}

inline std::size_t state_length(const GridCase& c, std::size_t forecast_rows) {
    return observation_length(c) + forecast_rows * c.renewable_count();
}

/// Observation groups followed by the forecast block (rows x n_new, MW).
/// A forecast with zero rows is allowed for the no-forecast variant.
inline std::vector<double> assemble_state(const GridCase& c, const Observation& obs, const Tensor* forecast,
                                          std::size_t forecast_rows) {
    const std::size_t ng = c.generators.size(), nl = c.branches.size();
    if (obs.gen_q.size() != ng || obs.gen_p.size() != ng || obs.gen_status.size() != ng || obs.bus_v.size() != c.buses.size() ||
        obs.branch_p_from.size() != nl || obs.branch_load.size() != nl || obs.load_p.size() != c.loads.size())
        throw ShapeError("assemble_state: observation does not match the case");
    std::vector<double> s = flatten(obs, c.base_mva);
    if (forecast_rows == 0) return s;
    if (!forecast || forecast->rank() != 2 || forecast->dim(0) != forecast_rows || forecast->dim(1) != c.renewable_count())
        throw ShapeError("assemble_state: forecast must be " + std::to_string(forecast_rows) + " x " +
                         std::to_string(c.renewable_count()) +
                         (forecast ? ", got " + gridpatch::to_string(forecast->shape()) : std::string(", got none")));
    for (double x : forecast->values()) s.push_back(x / c.base_mva);
    return s;
}

// ---------------------------------------------------------------- actions

struct ActionBox {
    std::vector<double> lo, hi;
    std::vector<double> step;  // empty in the absolute mode

    static ActionBox from_case(const GridCase& c) {
        ActionBox b;
        for (const auto& g : c.generators) {
            b.lo.push_back(g.type == GenType::renewable ? 0.0 : g.p_min);
            b.hi.push_back(g.p_max);
        }
        return b;
    }
    static ActionBox incremental_from_case(const GridCase& c, double renewable_step) {
        ActionBox b = from_case(c);
        for (const auto& g : c.generators)
            b.step.push_back(g.type == GenType::renewable ? renewable_step * g.p_max : g.ramp_rate * g.p_max);
        return b;
    }
    std::size_t size() const noexcept { return lo.size(); }
    bool incremental() const noexcept { return !step.empty(); }

    /// MW set-points for unit actions; `prev` is required in the incremental mode.
    std::vector<double> to_mw(std::span<const double> a, std::span<const double> prev = {}) const {
        check(a.size(), prev.size());
        std::vector<double> p(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double x = std::clamp(a[i], -1.0, 1.0);
            p[i] = incremental() ? std::clamp(prev[i] + x * step[i], lo[i], hi[i]) : lo[i] + (x + 1.0) * 0.5 * (hi[i] - lo[i]);
        }
        return p;
    }
    std::vector<double> to_unit(std::span<const double> p, std::span<const double> prev = {}) const {
        check(p.size(), prev.size());
        std::vector<double> a(p.size(), 0.0);
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (incremental())
                a[i] = step[i] > 0.0 ? std::clamp((p[i] - prev[i]) / step[i], -1.0, 1.0) : 0.0;
            else if (hi[i] > lo[i])
                a[i] = std::clamp(2.0 * (p[i] - lo[i]) / (hi[i] - lo[i]) - 1.0, -1.0, 1.0);
        }
        return a;
    }

private:
    void check(std::size_t n, std::size_t n_prev) const {
        if (n != lo.size()) throw ShapeError("action box: expected " + std::to_string(lo.size()) + " entries");
        if (incremental() && n_prev != lo.size()) throw ShapeError("action box: incremental actions need the previous set-points");
    }
};

/// Per-feature standardization with constants fixed once per case.
struct StateScaler {
    std::vector<double> mean, scale;  // x' = (x - mean) * scale; empty means identity

    bool empty() const noexcept { return mean.empty(); }
    void apply(std::vector<double>& x) const {
        if (empty()) return;
        if (x.size() != mean.size()) throw ShapeError("state scaler: length mismatch");
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - mean[i]) * scale[i];
    }
};

/// Mean and spread of each feature over the given states. The spread is
/// floored so features that barely move (statuses, slack voltage) are not
/// blown up when they do change.
inline StateScaler fit_scaler(const std::vector<std::vector<double>>& states, double floor = 0.05) {
    if (states.empty()) throw std::invalid_argument("state scaler: no states");
    const std::size_t n = states[0].size();
    StateScaler sc{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
    for (const auto& x : states) {
        if (x.size() != n) throw ShapeError("state scaler: ragged states");
        for (std::size_t i = 0; i < n; ++i) sc.mean[i] += x[i];
    }
    for (auto& m : sc.mean) m /= static_cast<double>(states.size());
    for (const auto& x : states)
        for (std::size_t i = 0; i < n; ++i) sc.scale[i] += (x[i] - sc.mean[i]) * (x[i] - sc.mean[i]);
    for (auto& v : sc.scale) v = 1.0 / std::max(std::sqrt(v / static_cast<double>(states.size())), floor);
    return sc;
}

// ---------------------------------------------------------------- networks

struct AgentConfig {
    double gamma = 0.99;
    double tau = 0.005;
    std::size_t batch_size = 64;
    std::size_t replay_capacity = 20000;
    std::size_t hidden = 128;
    double actor_lr = 1e-3;
    double critic_lr = 1e-3;
    double sigma_start = 0.2;
    double sigma_end = 0.02;
    std::size_t warmup = 64;  // transitions stored before the first update
    std::size_t updates_per_step = 1;
    double critic_l2 = 1e-2;  // weight decay on critic weight matrices
    bool incremental = false;      // actions adjust the previous set-points
    double renewable_step = 0.25;  // incremental step for renewables, share of capacity
    std::uint64_t seed = 1;

    void validate() const {
        if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("agent: gamma must lie in (0, 1)");
        if (!(tau > 0.0 && tau <= 1.0)) throw std::invalid_argument("agent: tau must lie in (0, 1]");
        if (batch_size == 0 || hidden == 0) throw std::invalid_argument("agent: batch size and hidden width must be positive");
        if (replay_capacity < batch_size) throw std::invalid_argument("agent: replay capacity below batch size");
        if (warmup < batch_size) throw std::invalid_argument("agent: warm-up must cover one batch");
        if (updates_per_step == 0) throw std::invalid_argument("agent: updates_per_step must be positive");
        if (!(critic_l2 >= 0.0)) throw std::invalid_argument("agent: critic_l2 must be nonnegative");
        if (!(renewable_step > 0.0 && renewable_step <= 1.0))
            throw std::invalid_argument("agent: renewable_step must lie in (0, 1]");
    }
};

inline ActionBox make_action_box(const GridCase& c, const AgentConfig& cfg) {
    return cfg.incremental ? ActionBox::incremental_from_case(c, cfg.renewable_step) : ActionBox::from_case(c);
}

namespace detail {

inline ParameterSet make_mlp(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng) {
    ParameterSet p;
    p.add("l0.w", glorot({in, hidden}, in, hidden, rng));
    p.add("l0.b", Tensor(Shape{hidden}));
    p.add("l1.w", glorot({hidden, hidden}, hidden, hidden, rng));
    p.add("l1.b", Tensor(Shape{hidden}));
    // Small head so initial outputs sit near zero.
    std::uniform_real_distribution<double> head(-3e-3, 3e-3);
    Tensor w(Shape{hidden, out});
    for (auto& x : w.storage()) x = head(rng);
    p.add("l2.w", std::move(w));
    p.add("l2.b", Tensor(Shape{out}));
    return p;
}

inline NodeId mlp(Graph& g, const BoundParams& p, NodeId x, bool tanh_head) {
    NodeId h = g.relu(g.add(g.matmul(x, p[0]), p[1]));
    h = g.relu(g.add(g.matmul(h, p[2]), p[3]));
    const NodeId y = g.add(g.matmul(h, p[4]), p[5]);
    return tanh_head ? g.tanh(y) : y;
}

}  // namespace detail

inline ParameterSet make_actor(std::size_t state_dim, std::size_t action_dim, std::size_t hidden, std::mt19937_64& rng) {
    return detail::make_mlp(state_dim, hidden, action_dim, rng);
}
inline ParameterSet make_critic(std::size_t state_dim, std::size_t action_dim, std::size_t hidden, std::mt19937_64& rng) {
    return detail::make_mlp(state_dim + action_dim, hidden, 1, rng);
}

/// Batch of unit-scale actions in [-1, 1], one row per state row.
inline Tensor actor_forward(const ParameterSet& actor, const Tensor& states) {
    Graph g;
    const auto p = bind(g, actor, false);
    return g.value(detail::mlp(g, p, g.constant(states), true));
}

/// Q values, shape [batch, 1].
inline Tensor critic_forward(const ParameterSet& critic, const Tensor& states, const Tensor& actions) {
    Graph g;
    const auto p = bind(g, critic, false);
    return g.value(detail::mlp(g, p, g.concat_cols({g.constant(states), g.constant(actions)}), false));
}

struct Batch {
    Tensor s, a, r, s2, done;  // r and done are [N, 1]
    std::size_t size() const { return s.dim(0); }
};

struct LossGrad {
    double value = 0.0;
    std::vector<Tensor> grads;
};

/// Mean squared TD error against target networks; terminal rows drop the bootstrap.
inline LossGrad critic_loss(const ParameterSet& critic, const ParameterSet& critic_target, const ParameterSet& actor_target,
                            const Batch& b, double gamma, bool with_grad = true) {
    if (b.size() == 0) throw std::invalid_argument("critic_loss: empty batch");
    const Tensor q_next = critic_forward(critic_target, b.s2, actor_forward(actor_target, b.s2));
    Tensor y(Shape{b.size(), 1});
    for (std::size_t i = 0; i < b.size(); ++i) y[i] = b.r[i] + gamma * (1.0 - b.done[i]) * q_next[i];
    Graph g;
    const auto p = bind(g, critic, with_grad);
    const NodeId q = detail::mlp(g, p, g.concat_cols({g.constant(b.s), g.constant(b.a)}), false);
    const NodeId loss = g.mse_loss(q, g.constant(std::move(y)));
    LossGrad out;
    out.value = g.value(loss).item();
    if (with_grad) out.grads = collect(g.backward(loss), p);
    return out;
}

/// -mean Q(s, mu(s)); gradients are for the actor only.
inline LossGrad actor_loss(const ParameterSet& actor, const ParameterSet& critic, const Tensor& states, bool with_grad = true) {
    if (states.dim(0) == 0) throw std::invalid_argument("actor_loss: empty batch");
    Graph g;
    const auto pa = bind(g, actor, with_grad);
    const auto pc = bind(g, critic, false);
    const NodeId s = g.constant(states);
    const NodeId a = detail::mlp(g, pa, s, true);
    const NodeId q = detail::mlp(g, pc, g.concat_cols({s, a}), false);
    const NodeId loss = g.scale(g.sum(q), -1.0 / static_cast<double>(states.dim(0)));
    LossGrad out;
    out.value = g.value(loss).item();
    if (with_grad) out.grads = collect(g.backward(loss), pa);
    return out;
}

/// target <- tau * online + (1 - tau) * target.
inline void soft_update(ParameterSet& target, const ParameterSet& online, double tau) {
    if (target.size() != online.size()) throw ShapeError("soft_update: parameter counts differ");
    for (std::size_t i = 0; i < target.size(); ++i) {
        Tensor& t = target.at(i);
        const Tensor& o = online.at(i);
        if (t.shape() != o.shape()) throw ShapeError("soft_update: shape mismatch for " + target.name(i));
        for (std::size_t j = 0; j < t.size(); ++j) t[j] = tau * o[j] + (1.0 - tau) * t[j];
    }
}

// ---------------------------------------------------------------- replay

struct Transition {
    std::vector<double> s;
    std::vector<double> a;  // unit scale
    double r = 0.0;
    std::vector<double> s2;
    bool done = false;
};

/// Fixed-capacity ring; the oldest transition is overwritten first. States
/// are kept in single precision to bound memory at full capacity.
class ReplayPool {
public:
    ReplayPool(std::size_t capacity, std::size_t state_dim, std::size_t action_dim)
        : capacity_(capacity), sd_(state_dim), ad_(action_dim) {
        if (capacity == 0) throw std::invalid_argument("replay pool: capacity must be positive");
    }

    void push(const Transition& t) {
        if (t.s.size() != sd_ || t.s2.size() != sd_ || t.a.size() != ad_)
            throw ShapeError("replay pool: transition shape does not match the pool");
        if (!std::isfinite(t.r)) throw std::invalid_argument("replay pool: non-finite reward");
        const std::size_t slot = count_ < capacity_ ? count_ : head_;
        if (count_ < capacity_) {
            s_.resize((count_ + 1) * sd_);
            s2_.resize((count_ + 1) * sd_);
            a_.resize((count_ + 1) * ad_);
            r_.push_back(0.0);
            done_.push_back(0.0);
            ++count_;
        } else {
            head_ = (head_ + 1) % capacity_;
        }
        std::copy(t.s.begin(), t.s.end(), s_.begin() + static_cast<std::ptrdiff_t>(slot * sd_));
        std::copy(t.s2.begin(), t.s2.end(), s2_.begin() + static_cast<std::ptrdiff_t>(slot * sd_));
        std::copy(t.a.begin(), t.a.end(), a_.begin() + static_cast<std::ptrdiff_t>(slot * ad_));
        r_[slot] = t.r;
        done_[slot] = t.done ? 1.0 : 0.0;
        ++pushed_;
    }

    std::size_t size() const noexcept { return count_; }
    std::size_t capacity() const noexcept { return capacity_; }
    std::size_t total_pushed() const noexcept { return pushed_; }

    /// Slot index of the i-th oldest transition.
    std::size_t slot(std::size_t i) const { return count_ < capacity_ ? i : (head_ + i) % capacity_; }
    double reward_at(std::size_t i) const { return r_.at(slot(i)); }

    /// Distinct transitions drawn uniformly; order follows storage age.
    Batch sample(std::size_t n, std::mt19937_64& rng) const {
        if (n == 0 || n > count_) throw std::invalid_argument("replay pool: cannot draw " + std::to_string(n) +
                                                              " from " + std::to_string(count_));
        std::vector<std::size_t> all(count_), pick;
        std::iota(all.begin(), all.end(), 0);
        pick.reserve(n);
        std::sample(all.begin(), all.end(), std::back_inserter(pick), n, rng);
        return gather(pick);
    }

    Batch gather(const std::vector<std::size_t>& ages) const {
        const std::size_t n = ages.size();
        Batch b{Tensor(Shape{n, sd_}), Tensor(Shape{n, ad_}), Tensor(Shape{n, 1}), Tensor(Shape{n, sd_}), Tensor(Shape{n, 1})};
        for (std::size_t k = 0; k < n; ++k) {
            const std::size_t j = slot(ages[k]);
            std::copy_n(s_.begin() + static_cast<std::ptrdiff_t>(j * sd_), sd_, b.s.data() + k * sd_);
            std::copy_n(s2_.begin() + static_cast<std::ptrdiff_t>(j * sd_), sd_, b.s2.data() + k * sd_);
            std::copy_n(a_.begin() + static_cast<std::ptrdiff_t>(j * ad_), ad_, b.a.data() + k * ad_);
            b.r[k] = r_[j];
            b.done[k] = done_[j];
        }
        return b;
    }

private:
    std::size_t capacity_, sd_, ad_;
    std::size_t count_ = 0, head_ = 0, pushed_ = 0;
    std::vector<float> s_, s2_, a_;
    std::vector<double> r_, done_;
};

// ---------------------------------------------------------------- agent

struct UpdateStats {
    double critic = 0.0;
    double actor = 0.0;
};

class Agent {
public:
    Agent() = default;
    Agent(std::size_t state_dim, ActionBox box, AgentConfig cfg)
        : cfg_(cfg), box_(std::move(box)), state_dim_(state_dim), rng_(cfg.seed),
          actor_opt_(cfg.actor_lr), critic_opt_(cfg.critic_lr) {
        cfg_.validate();
        if (state_dim == 0 || box_.size() == 0) throw std::invalid_argument("agent: empty state or action");
        actor_ = make_actor(state_dim, box_.size(), cfg_.hidden, rng_);
        critic_ = make_critic(state_dim, box_.size(), cfg_.hidden, rng_);
        actor_target_ = actor_;
        critic_target_ = critic_;
    }

    const AgentConfig& config() const noexcept { return cfg_; }
    const ActionBox& box() const noexcept { return box_; }
    std::size_t state_dim() const noexcept { return state_dim_; }
    const ParameterSet& actor() const noexcept { return actor_; }
    const ParameterSet& critic() const noexcept { return critic_; }
    const ParameterSet& actor_target() const noexcept { return actor_target_; }
    const ParameterSet& critic_target() const noexcept { return critic_target_; }
    ParameterSet& actor() noexcept { return actor_; }
    ParameterSet& critic() noexcept { return critic_; }
    std::mt19937_64& rng() noexcept { return rng_; }

    const StateScaler& scaler() const noexcept { return scaler_; }
    void set_scaler(StateScaler sc) {
        if (!sc.empty() && (sc.mean.size() != state_dim_ || sc.scale.size() != state_dim_))
            throw ShapeError("agent: scaler length does not match the state");
        scaler_ = std::move(sc);
    }

    /// Unit-scale action for one (already scaled) state.
    std::vector<double> act_unit(std::span<const double> s) const {
        if (s.size() != state_dim_) throw ShapeError("agent: state length " + std::to_string(s.size()) + ", expected " +
                                                     std::to_string(state_dim_));
        const Tensor out = actor_forward(actor_, Tensor(Shape{1, s.size()}, std::vector<double>(s.begin(), s.end())));
        return {out.storage().begin(), out.storage().end()};
    }
    std::vector<double> act(std::span<const double> s, std::span<const double> prev = {}) const {
        return box_.to_mw(act_unit(s), prev);
    }

    UpdateStats update(const Batch& b) {
        UpdateStats st;
        auto lc = critic_loss(critic_, critic_target_, actor_target_, b, cfg_.gamma);
        if (cfg_.critic_l2 > 0.0)
            for (std::size_t i = 0; i < critic_.size(); ++i) {
                if (critic_.at(i).rank() != 2) continue;
                for (std::size_t j = 0; j < critic_.at(i).size(); ++j) lc.grads[i][j] += cfg_.critic_l2 * critic_.at(i)[j];
            }
        critic_opt_.step(critic_.tensors(), lc.grads);
        auto la = actor_loss(actor_, critic_, b.s);
        actor_opt_.step(actor_.tensors(), la.grads);
        soft_update(critic_target_, critic_, cfg_.tau);
        soft_update(actor_target_, actor_, cfg_.tau);
        st.critic = lc.value;
        st.actor = la.value;
        return st;
    }

    Checkpoint to_checkpoint(nlohmann::json meta = nlohmann::json::object()) const {
        Checkpoint ck;
        ck.meta = std::move(meta);
        ck.meta["kind"] = "ddpg";
        ck.meta["state_dim"] = state_dim_;
        ck.meta["hidden"] = cfg_.hidden;
        ck.meta["action_lo"] = box_.lo;
        ck.meta["action_hi"] = box_.hi;
        if (box_.incremental()) ck.meta["action_step"] = box_.step;
        auto put = [&](const char* prefix, const ParameterSet& p) {
            for (std::size_t i = 0; i < p.size(); ++i) ck.params.add(std::string(prefix) + p.name(i), p.at(i));
        };
        put("actor.", actor_);
        put("critic.", critic_);
        put("actor_target.", actor_target_);
        put("critic_target.", critic_target_);
        if (!scaler_.empty()) {
            ck.params.add("scaler.mean", Tensor(Shape{state_dim_}, scaler_.mean));
            ck.params.add("scaler.scale", Tensor(Shape{state_dim_}, scaler_.scale));
        }
        return ck;
    }

    static Agent from_checkpoint(const Checkpoint& ck, AgentConfig cfg = {}) {
        if (ck.meta.value("kind", "") != "ddpg") throw std::invalid_argument("checkpoint is not a dispatch agent");
        cfg.hidden = ck.meta.at("hidden").get<std::size_t>();
        ActionBox box{ck.meta.at("action_lo").get<std::vector<double>>(), ck.meta.at("action_hi").get<std::vector<double>>(),
                      ck.meta.value("action_step", std::vector<double>{})};
        Agent a(ck.meta.at("state_dim").get<std::size_t>(), std::move(box), cfg);
        auto take = [&](const char* prefix, ParameterSet& p) {
            for (std::size_t i = 0; i < p.size(); ++i) {
                const Tensor& t = ck.params[std::string(prefix) + p.name(i)];
                if (t.shape() != p.at(i).shape()) throw ShapeError("checkpoint: shape mismatch for " + p.name(i));
                p.at(i) = t;
            }
        };
        take("actor.", a.actor_);
        take("critic.", a.critic_);
        take("actor_target.", a.actor_target_);
        take("critic_target.", a.critic_target_);
        if (ck.params.contains("scaler.mean"))
            a.set_scaler({ck.params["scaler.mean"].storage(), ck.params["scaler.scale"].storage()});
        return a;
    }

private:
    AgentConfig cfg_;
    ActionBox box_;
    std::size_t state_dim_ = 0;
    std::mt19937_64 rng_;
    ParameterSet actor_, critic_, actor_target_, critic_target_;
    StateScaler scaler_;
    Adam actor_opt_{1e-4}, critic_opt_{1e-3};
};

// ---------------------------------------------------------------- forecasts

/// Final forecasts for a contiguous range of decision days, produced by running
/// the snapshot pool forward one day at a time. The pool starts five days early
/// so every cached day uses a full ensemble.
class ForecastCache {
public:
    ForecastCache() = default;
    ForecastCache(const ForecastModel& model, const RenewableSeries& series, std::size_t first_day, std::size_t last_day,
                  ConformerOptions opt = {})
        : first_(first_day), length_(opt.length) {
        if (last_day < first_day || last_day >= series.num_days)
            throw std::invalid_argument("forecast cache: bad day range");
        const std::size_t warm = std::max(model.config().input_len - 1 + kEnsembleSize, first_day) - kEnsembleSize;
        SnapshotPool pool;
        pool.reset(warm);
        for (std::size_t t = warm; t <= last_day; ++t) {
            auto res = conformer_predict(t, pool, model, series, opt);
            if (t >= first_day) days_.push_back(std::move(res.forecast));
        }
        if (days_.empty() || days_.front().dim(0) != length_) throw std::logic_error("forecast cache: empty");
    }

    /// Cache from precomputed forecasts (tests, persistence baselines).
    ForecastCache(std::size_t first_day, std::vector<Tensor> days) : first_(first_day), days_(std::move(days)) {
        if (days_.empty()) throw std::invalid_argument("forecast cache: no days");
        length_ = days_.front().dim(0);
    }

    bool contains(std::size_t day) const { return day >= first_ && day < first_ + days_.size(); }
    std::size_t first_day() const noexcept { return first_; }
    std::size_t last_day() const noexcept { return first_ + days_.size() - 1; }
    std::size_t length() const noexcept { return length_; }

    /// Leading `rows` rows of the forecast issued on `day`.
    Tensor rows(std::size_t day, std::size_t rows) const {
        if (!contains(day)) throw std::out_of_range("forecast cache: no forecast for day " + std::to_string(day));
        const Tensor& f = days_[day - first_];
        if (rows > f.dim(0)) throw std::invalid_argument("forecast cache: only " + std::to_string(f.dim(0)) + " rows");
        return Tensor(Shape{rows, f.dim(1)}, std::vector<double>(f.storage().begin(),
                                                                 f.storage().begin() + static_cast<std::ptrdiff_t>(rows * f.dim(1))));
    }

private:
    std::size_t first_ = 0, length_ = 0;
    std::vector<Tensor> days_;
};

// ---------------------------------------------------------------- episodes

struct DispatchConfig {
    AgentConfig agent;
    NecessityConfig necessity;
    std::size_t forecast_rows = 10;  // 10 long horizon, 1 next day only, 0 no forecast
    std::size_t episodes = 300;
    std::size_t max_steps = 30;
    std::size_t eval_episodes = 10;
    bool standardize_state = true;
};

struct StepLog {
    std::size_t step = 0;
    std::size_t day = 0;  // day the set-points applied to
    RewardBreakdown reward;
    std::vector<std::size_t> selected;
    std::vector<double> output;  // MW after clipping and the power flow
    std::vector<int> status;
};

struct EpisodeRecord {
    std::size_t start_day = 0;
    std::vector<double> initial_output;  // set-points right after reset
    std::vector<int> initial_status;
    std::string reason;  // why the episode stopped; "step-cap" when max_steps was reached
    EpisodeScores scores;
    std::vector<StepLog> steps;
    double critic_loss = 0.0;  // mean over updates in the episode, 0 without updates
    double actor_loss = 0.0;
};

enum class PolicyKind { explore, greedy, random };

inline double exploration_sigma(const AgentConfig& cfg, std::size_t episode, std::size_t episodes) {
    if (episodes <= 1) return cfg.sigma_start;
    const double f = std::min(1.0, static_cast<double>(episode) / static_cast<double>(episodes - 1));
    return cfg.sigma_start + f * (cfg.sigma_end - cfg.sigma_start);
}

namespace detail {

inline std::vector<double> build_state(const GridEnv& env, const Observation& obs, const ForecastCache* fc, std::size_t day,
                                       std::size_t rows) {
    if (rows == 0) return assemble_state(env.grid(), obs, nullptr, 0);
    if (!fc) throw std::invalid_argument("episode: forecast rows requested without a forecast cache");
    const Tensor f = fc->rows(day, rows);
    return assemble_state(env.grid(), obs, &f, rows);
}

}  // namespace detail

/// One episode starting on `start_day`. With an agent and `explore`, Gaussian
/// noise is added to the actor output, transitions go to the pool and networks
/// update once per step after warm-up. `random` draws unit actions uniformly.
/// Every proposal passes through necessity patching before the grid sees it.
inline EpisodeRecord run_episode(GridEnv& env, Agent* agent, const ForecastCache* fc, std::size_t start_day,
                                 const DispatchConfig& cfg, PolicyKind kind, std::mt19937_64& rng, ReplayPool* replay = nullptr,
                                 double sigma = 0.0) {
    if (kind != PolicyKind::random && !agent) throw std::invalid_argument("episode: policy needs an agent");
    if (kind == PolicyKind::explore && !replay) throw std::invalid_argument("episode: training needs a replay pool");
    const GridCase& grid = env.grid();
    const ActionBox box = agent ? agent->box() : make_action_box(grid, cfg.agent);
    cfg.necessity.validate(grid.generators.size());

    EpisodeRecord rec;
    rec.start_day = start_day;
    std::vector<double> s = detail::build_state(env, env.reset(start_day), fc, start_day, cfg.forecast_rows);
    if (agent) agent->scaler().apply(s);
    rec.initial_output = env.output();
    rec.initial_status = env.status();
    std::vector<RewardBreakdown> rewards;
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    std::size_t updates = 0;

    for (std::size_t step = 0;; ++step) {
        std::vector<double> unit;
        if (kind == PolicyKind::random) {
            unit.resize(box.size());
            for (auto& x : unit) x = uni(rng);
        } else {
            unit = agent->act_unit(s);
            if (kind == PolicyKind::explore)
                for (auto& x : unit) x = std::clamp(x + sigma * noise(rng), -1.0, 1.0);
        }
        const std::vector<double> prev = env.output();
        std::vector<double> proposed = box.to_mw(unit, prev);
        proposed[grid.slack_gen] = prev[grid.slack_gen];  // the slack follows the power flow
        const auto patch = patch_action(prev, proposed, env.utilization(), env.neighborhood_load(), cfg.necessity);

        const std::size_t day = env.day() + 1;
        const StepResult res = env.step(patch.action);
        rewards.push_back(res.reward);
        rec.steps.push_back({step, day, res.reward, patch.selected, env.output(), env.status()});

        const bool capped = step + 1 >= cfg.max_steps;
        std::vector<double> s2 = detail::build_state(env, res.obs, fc, day, cfg.forecast_rows);
        if (agent) agent->scaler().apply(s2);
        if (kind == PolicyKind::explore) {
            replay->push({s, box.to_unit(patch.action, prev), res.reward.reward, s2, is_failure(res.reason)});
            if (replay->size() >= agent->config().warmup)
                for (std::size_t k = 0; k < agent->config().updates_per_step; ++k) {
                    const auto st = agent->update(replay->sample(agent->config().batch_size, rng));
                    rec.critic_loss += st.critic;
                    rec.actor_loss += st.actor;
                    ++updates;
                }
        }
        if (res.done) {
            rec.reason = res.reason;
            break;
        }
        if (capped) {
            rec.reason = "step-cap";
            break;
        }
        s = std::move(s2);
    }
    if (updates) {
        rec.critic_loss /= static_cast<double>(updates);
        rec.actor_loss /= static_cast<double>(updates);
    }
    rec.scores = episode_scores(rewards);
    return rec;
}

/// Start days usable for an episode: the forecast cache must cover every
/// decision day and the series must hold the following day.
struct StartRange {
    std::size_t first = 0, last = 0;
};

inline StartRange start_range(const GridEnv& env, const ForecastCache* fc, std::size_t rows, std::size_t first_day) {
    std::size_t last = env.series().num_days - 2;
    std::size_t first = first_day;
    if (rows > 0) {
        if (!fc) throw std::invalid_argument("start range: forecast cache required");
        first = std::max(first, fc->first_day());
        last = std::min(last, fc->last_day());
    }
    if (first > last) throw std::invalid_argument("start range: no usable start day");
    return {first, last};
}

/// Evenly spaced evaluation start days, leaving room for `room` steps before
/// the end of the range when the range is long enough.
inline std::vector<std::size_t> evaluation_days(StartRange r, std::size_t count, std::size_t room = 0) {
    std::vector<std::size_t> out;
    if (r.last - r.first > room) r.last -= room;
    const std::size_t span = r.last - r.first;
    for (std::size_t i = 0; i < count; ++i)
        out.push_back(r.first + (count > 1 ? span * i / (count - 1) : 0));
    return out;
}

/// Scaler fitted on the states seen right after reset on `count` evenly
/// spaced days of the range.
inline StateScaler fit_state_scaler(GridEnv& env, const ForecastCache* fc, std::size_t rows, StartRange range,
                                    std::size_t count = 64) {
    std::vector<std::vector<double>> states;
    for (std::size_t d : evaluation_days(range, count)) states.push_back(detail::build_state(env, env.reset(d), fc, d, rows));
    return fit_scaler(states);
}

struct TrainingResult {
    Agent agent;
    std::vector<EpisodeRecord> episodes;
};

inline EpisodeRecord train_episode(GridEnv& env, Agent& agent, const ForecastCache* fc, std::size_t start_day,
                                   const DispatchConfig& cfg, ReplayPool& replay, double sigma) {
    return run_episode(env, &agent, fc, start_day, cfg, PolicyKind::explore, agent.rng(), &replay, sigma);
}

/// Trains a fresh agent for cfg.episodes episodes with random start days in
/// [range.first, range.last]. `on_episode` is called after every episode.
inline TrainingResult train_agent(GridEnv& env, const ForecastCache* fc, StartRange range, const DispatchConfig& cfg,
                                  const std::function<void(std::size_t, const EpisodeRecord&)>& on_episode = {}) {
    const std::size_t sd = state_length(env.grid(), cfg.forecast_rows);
    TrainingResult out{Agent(sd, make_action_box(env.grid(), cfg.agent), cfg.agent), {}};
    if (cfg.standardize_state) out.agent.set_scaler(fit_state_scaler(env, fc, cfg.forecast_rows, range));
    ReplayPool replay(cfg.agent.replay_capacity, sd, env.grid().generators.size());
    std::uniform_int_distribution<std::size_t> start(range.first, range.last);
    for (std::size_t e = 0; e < cfg.episodes; ++e) {
        const std::size_t day = start(out.agent.rng());
        auto rec = train_episode(env, out.agent, fc, day, cfg, replay, exploration_sigma(cfg.agent, e, cfg.episodes));
        if (on_episode) on_episode(e, rec);
        out.episodes.push_back(std::move(rec));
    }
    return out;
}

/// Greedy (agent) or random evaluation over the given start days.
inline std::vector<EpisodeRecord> evaluate(GridEnv& env, Agent* agent, const ForecastCache* fc,
                                           const std::vector<std::size_t>& days, const DispatchConfig& cfg,
                                           PolicyKind kind, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<EpisodeRecord> out;
    for (std::size_t d : days) out.push_back(run_episode(env, agent, fc, d, cfg, kind, rng));
    return out;
}

inline double mean_total_reward(const std::vector<EpisodeRecord>& eps) {
    if (eps.empty()) return 0.0;
    double s = 0.0;
    for (const auto& e : eps) s += e.scores.total_reward;
    return s / static_cast<double>(eps.size());
}

}  // namespace gridpatch
