#pragma once

// Small hand-built cases and finite-difference drivers shared by the unit
// tests and the acceptance runner.

#include <complex>
#include <functional>
#include <random>
#include <set>

#include "gridpatch/ddpg.hpp"
#include "gridpatch/forecast.hpp"
#include "gridpatch/graph.hpp"
#include "oracles.hpp"

namespace fixture {

using namespace gridpatch;
using cd = std::complex<double>;

// ---------------------------------------------------------------- grid

inline Generator unit(GenType type, std::size_t bus, double pmin, double pmax) {
    Generator g;
    g.type = type;
    g.bus = bus;
    g.p_min = pmin;
    g.p_max = pmax;
    g.q_min = -0.3 * pmax;
    g.q_max = 0.6 * pmax;
    return g;
}

inline GridCase two_bus() {
    GridCase c;
    c.buses.assign(2, Bus{});
    c.branches.push_back({0, 1, 0.0, 0.1, 10.0});
    c.generators.push_back(unit(GenType::thermal, 0, 0.0, 200.0));
    c.loads.push_back({1, 50.0, 10.0});
    return c;
}

// Stagg-type 5-bus network without line charging; bus 0 slack, bus 1 PV.
inline GridCase five_bus() {
    GridCase c;
    c.buses.assign(5, Bus{});
    c.buses[0].v_set = 1.06;
    c.buses[1].v_set = 1.0;
    const double rx[7][4] = {{0, 1, 0.02, 0.06}, {0, 2, 0.08, 0.24}, {1, 2, 0.06, 0.18}, {1, 3, 0.06, 0.18},
                             {1, 4, 0.04, 0.12}, {2, 3, 0.01, 0.03}, {3, 4, 0.08, 0.24}};
    for (const auto& r : rx)
        c.branches.push_back({static_cast<std::size_t>(r[0]), static_cast<std::size_t>(r[1]), r[2], r[3], 5.0});
    c.generators.push_back(unit(GenType::thermal, 0, 0.0, 300.0));
    c.generators.push_back(unit(GenType::thermal, 1, 0.0, 100.0));
    c.loads = {{1, 20.0, 10.0}, {2, 45.0, 15.0}, {3, 40.0, 5.0}, {4, 60.0, 10.0}};
    return c;
}

inline std::vector<std::vector<cd>> oracle_ybus(const GridCase& c) {
    const std::size_t n = c.buses.size();
    std::vector<std::vector<cd>> y(n, std::vector<cd>(n, 0.0));
    for (const auto& b : c.branches) {
        const cd ys = 1.0 / cd(b.r, b.x);
        y[b.from][b.from] += ys;
        y[b.to][b.to] += ys;
        y[b.from][b.to] -= ys;
        y[b.to][b.from] -= ys;
    }
    return y;
}

inline std::pair<std::vector<double>, std::vector<double>> base_loads(const GridCase& c) {
    std::vector<double> p, q;
    for (const auto& l : c.loads) {
        p.push_back(l.p);
        q.push_back(l.q);
    }
    return {p, q};
}

/// Hand Newton iteration for the two-bus case: receiving end of a lossless
/// 10 pu susceptance line, P2 = 10 V sin(th), Q2 = 10 V^2 - 10 V cos(th),
/// target (-0.5, -0.1). Returns (V, theta).
inline std::pair<double, double> two_bus_newton() {
    double th = 0.0, v = 1.0;
    for (int it = 0; it < 30; ++it) {
        const double fp = 10 * v * std::sin(th) + 0.5, fq = 10 * v * v - 10 * v * std::cos(th) + 0.1;
        const double j11 = 10 * v * std::cos(th), j12 = 10 * std::sin(th);
        const double j21 = 10 * v * std::sin(th), j22 = 20 * v - 10 * std::cos(th);
        const double det = j11 * j22 - j12 * j21;
        th -= (j22 * fp - j12 * fq) / det;
        v -= (-j21 * fp + j11 * fq) / det;
    }
    return {v, th};
}

/// Gauss-Seidel voltages for the five-bus case with the PV unit at 40 MW.
inline std::vector<cd> five_bus_gauss_seidel() {
    const std::vector<double> p_inj{0.0, 0.4 - 0.2, -0.45, -0.40, -0.60}, q_inj{0.0, 0.0, -0.15, -0.05, -0.10};
    const std::vector<bool> pv{false, true, false, false, false};
    const std::vector<double> vset{1.06, 1.0, 1.0, 1.0, 1.0};
    return oracle::gauss_seidel(oracle_ybus(five_bus()), p_inj, q_inj, pv, vset);
}

// ---------------------------------------------------------------- autodiff

struct OpCase {
    OpKind kind;
    std::vector<Tensor> inputs;
    OpAttrs attrs;
};

// loss = sum(op(inputs) * R) for a fixed random R, so every output entry matters.
inline double weighted_output(const OpCase& c, const std::vector<Tensor>& inputs, const Tensor& weights) {
    Graph g;
    std::vector<NodeId> ids;
    for (const auto& t : inputs) ids.push_back(g.constant(t));
    const NodeId out = g.apply(c.kind, ids, c.attrs);
    const NodeId w = g.constant(weights);
    return g.value(g.sum(g.mul(out, w))).item();
}

inline double max_op_gradient_error(const OpCase& c, std::mt19937_64& rng) {
    Graph probe;
    std::vector<NodeId> ids;
    for (const auto& t : c.inputs) ids.push_back(probe.parameter(t));
    const NodeId out = probe.apply(c.kind, ids, c.attrs);
    const Tensor weights = oracle::random_tensor(probe.value(out).shape(), rng);
    const NodeId loss = probe.sum(probe.mul(out, probe.constant(weights)));
    const Gradients grads = probe.backward(loss);

    double worst = 0.0;
    for (std::size_t i = 0; i < c.inputs.size(); ++i) {
        auto f = [&](const Tensor& x) {
            auto in = c.inputs;
            in[i] = x;
            return weighted_output(c, in, weights);
        };
        const Tensor numeric = oracle::finite_difference(f, c.inputs[i]);
        worst = std::max(worst, oracle::relative_error(grads.at(ids[i]), numeric));
    }
    return worst;
}

// Keeps values away from the relu kink so central differences stay on one side.
inline Tensor away_from_zero(Tensor t) {
    for (auto& v : t.values())
        if (std::abs(v) < 1e-2) v = 0.5;
    return t;
}

inline std::vector<OpCase> random_cases(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> dim(1, 5);
    auto rnd = [&](Shape s) { return oracle::random_tensor(std::move(s), rng, -2.0, 2.0); };
    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng) + 1, len = dim(rng) + 2;
    std::vector<OpCase> cases;
    cases.push_back({OpKind::matmul, {rnd({m, k}), rnd({k, n})}, {}});
    cases.push_back({OpKind::add, {rnd({m, n}), rnd({m, n})}, {}});
    cases.push_back({OpKind::add, {rnd({m, n}), rnd({n})}, {}});
    cases.push_back({OpKind::mul, {rnd({m, n}), rnd({m, n})}, {}});
    cases.push_back({OpKind::relu, {away_from_zero(rnd({m, n}))}, {}});
    cases.push_back({OpKind::gelu, {rnd({m, n})}, {}});
    cases.push_back({OpKind::tanh, {rnd({m, n})}, {}});
    cases.push_back({OpKind::softmax, {rnd({m, n})}, {}});
    cases.push_back({OpKind::layer_norm, {rnd({m, n}), rnd({n}), rnd({n})}, {}});
    cases.push_back({OpKind::conv1d, {rnd({len, k}), rnd({3, k, n}), rnd({n})}, {}});
    cases.push_back({OpKind::maxpool1d, {rnd({len, k})}, {}});
    cases.push_back({OpKind::mse_loss, {rnd({m, n}), rnd({m, n})}, {}});
    cases.push_back({OpKind::transpose, {rnd({m, n})}, {}});
    cases.push_back({OpKind::scale, {rnd({m, n})}, OpAttrs{.scalar = -1.7}});
    cases.push_back({OpKind::concat_cols, {rnd({m, k}), rnd({m, n}), rnd({m, 2})}, {}});
    cases.push_back({OpKind::slice_cols, {rnd({m, n})}, OpAttrs{.begin = 1, .end = n}});
    cases.push_back({OpKind::gather_rows, {rnd({m, n})}, OpAttrs{.index = {m - 1, 0, m - 1}}});
    cases.push_back({OpKind::scatter_rows, {rnd({len, n}), rnd({2, n})}, OpAttrs{.index = {len - 1, 0}}});
    cases.push_back({OpKind::mean_rows, {rnd({m, n})}, {}});
    cases.push_back({OpKind::sum, {rnd({m, n})}, {}});
    return cases;
}

// ---------------------------------------------------------------- dispatch losses

inline Batch random_batch(std::size_t n, std::size_t sd, std::size_t ad, std::mt19937_64& rng) {
    Batch b{oracle::random_tensor({n, sd}, rng), oracle::random_tensor({n, ad}, rng), oracle::random_tensor({n, 1}, rng, -2, 2),
            oracle::random_tensor({n, sd}, rng), Tensor(Shape{n, 1})};
    for (std::size_t i = 0; i < n; i += 3) b.done[i] = 1.0;
    return b;
}

// Random values everywhere, biases included, so no ReLU input sits exactly at 0.
inline ParameterSet randomized(ParameterSet p, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> d(-0.8, 0.8);
    for (auto& t : p.tensors())
        for (auto& x : t.storage()) x = d(rng);
    return p;
}

// Perturbs one tensor of a parameter set and re-evaluates a loss.
inline double relerr_for(ParameterSet p, std::size_t t, const Tensor& analytic, const std::function<double(const ParameterSet&)>& f) {
    const Tensor x = p.at(t);
    const Tensor numeric = oracle::finite_difference(
        [&](const Tensor& v) {
            p.at(t) = v;
            return f(p);
        },
        x);
    p.at(t) = x;
    return oracle::relative_error(analytic, numeric);
}

// ---------------------------------------------------------------- forecaster

inline ForecastConfig small_config(std::size_t units) {
    ForecastConfig c;
    c.num_units = units;
    c.d_model = 16;
    c.heads = 1;
    c.encoder_layers = 1;
    c.decoder_layers = 1;
    c.ff_dim = 16;
    return c;
}

inline WindowSample random_window(const ForecastConfig& c, std::mt19937_64& rng) {
    WindowSample w;
    w.encoder_input = oracle::random_tensor({c.input_len, c.num_units}, rng, 0.0, 3.0);
    w.decoder_known = Tensor(Shape{c.decoder_len, c.num_units});
    for (std::size_t r = 0; r < c.decoder_len; ++r)
        for (std::size_t u = 0; u < c.num_units; ++u)
            w.decoder_known(r, u) = w.encoder_input(c.input_len - c.decoder_len + r, u);
    w.target = oracle::random_tensor({c.horizon, c.num_units}, rng, 0.0, 3.0);
    w.encoder_time = time_codes(0, c.input_len);
    w.decoder_time = time_codes(c.input_len - c.decoder_len, c.decoder_len + c.horizon);
    return w;
}

/// Worst directional central-difference error over every parameter tensor of
/// the forecaster on one window.
inline double forecaster_gradient_error(ForecastModel& m, const WindowSample& w, std::mt19937_64& rng) {
    const auto analytic = window_loss(m, w).grads;
    double worst = 0.0;
    for (std::size_t t = 0; t < m.params().size(); ++t) {
        const Tensor dir = oracle::random_tensor(m.params().at(t).shape(), rng);
        double directional = 0.0;
        for (std::size_t j = 0; j < dir.size(); ++j) directional += analytic[t][j] * dir[j];
        const Tensor base = m.params().at(t);
        auto f = [&](double step) {
            for (std::size_t j = 0; j < dir.size(); ++j) m.params().at(t)[j] = base[j] + step * dir[j];
            const double v = window_loss(m, w, false).value;
            m.params().at(t) = base;
            return v;
        };
        const double numeric = (f(oracle::kFdStep) - f(-oracle::kFdStep)) / (2.0 * oracle::kFdStep);
        worst = std::max(worst, std::abs(directional - numeric) / std::max({std::abs(directional), std::abs(numeric), 1e-7}));
    }
    return worst;
}

/// Worst relative error of the critic and actor loss gradients for one
/// random draw of networks and batch.
inline double dispatch_loss_gradient_error(std::mt19937_64& rng) {
    const ParameterSet critic = randomized(make_critic(4, 2, 6, rng), rng),
                       target = randomized(make_critic(4, 2, 6, rng), rng), actor = randomized(make_actor(4, 2, 6, rng), rng);
    const Batch b = random_batch(5, 4, 2, rng);
    double worst = 0.0;
    const auto lc = critic_loss(critic, target, actor, b, 0.9);
    for (std::size_t t = 0; t < critic.size(); ++t)
        worst = std::max(worst, relerr_for(critic, t, lc.grads[t], [&](const ParameterSet& p) {
                             return critic_loss(p, target, actor, b, 0.9, false).value;
                         }));
    const auto la = actor_loss(actor, critic, b.s);
    for (std::size_t t = 0; t < actor.size(); ++t)
        worst = std::max(worst, relerr_for(actor, t, la.grads[t], [&](const ParameterSet& p) {
                             return actor_loss(p, critic, b.s, false).value;
                         }));
    return worst;
}

// Dispatching necessity

// Full sort over (D desc, id asc), then take the first k with nonzero dP.
inline std::set<std::size_t> sort_oracle(const std::vector<double>& d, const std::vector<double>& delta, std::size_t k) {
    std::vector<std::pair<double, std::size_t>> keyed;
    for (std::size_t i = 0; i < d.size(); ++i)
        if (delta[i] != 0.0) keyed.push_back({-d[i], i});
    std::sort(keyed.begin(), keyed.end());
    std::set<std::size_t> out;
    for (std::size_t i = 0; i < std::min(k, keyed.size()); ++i) out.insert(keyed[i].second);
    return out;
}

inline std::size_t count_changed(const std::vector<double>& a, const std::vector<double>& b) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i];
    return n;
}

}  // namespace fixture
