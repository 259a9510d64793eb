#pragma once

// Synthetic hybrid grid: case model, AC power flow, objective terms and the
// day-by-day dispatch environment.
//
// Units: generator and load powers in MW / MVAr; network quantities (bus
// voltages, branch impedances, currents, thermal limits) in per-unit on a
// 100 MVA base.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <numeric>
#include <queue>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gridpatch/data.hpp"

namespace gridpatch {

class CaseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class GenType { renewable, thermal };

inline const char* gen_type_name(GenType t) { return t == GenType::renewable ? "renewable" : "thermal"; }

struct Bus {
    double v_min = 0.95;
    double v_max = 1.05;
    double v_set = 1.0;  ///< voltage set-point when a generator regulates the bus
};

struct Branch {
    std::size_t from = 0;
    std::size_t to = 0;
    double r = 0.0;
    double x = 0.1;
    double limit = 1.0;  ///< thermal limit T_j, per-unit current
};

struct Generator {
    GenType type = GenType::thermal;
    std::size_t bus = 0;
    double p_max = 0.0;
    double p_min = 0.0;
    double q_max = 0.0;
    double q_min = 0.0;
    double a = 0.0;
    double b = 0.0;
    double c = 0.0;
    double c_start = 0.0;
    double ramp_rate = 0.05;
};

struct Load {
    std::size_t bus = 0;
    double p = 0.0;
    double q = 0.0;
};

struct GridCase {
    double base_mva = 100.0;
    std::size_t slack_gen = 0;
    std::vector<Bus> buses;
    std::vector<Branch> branches;
    std::vector<Generator> generators;
    std::vector<Load> loads;

    std::size_t slack_bus() const { return generators.at(slack_gen).bus; }
    std::size_t renewable_count() const {
        return static_cast<std::size_t>(std::count_if(generators.begin(), generators.end(),
                                                      [](const Generator& g) { return g.type == GenType::renewable; }));
    }
    std::vector<std::size_t> renewable_ids() const {
        std::vector<std::size_t> ids;
        for (std::size_t i = 0; i < generators.size(); ++i)
            if (generators[i].type == GenType::renewable) ids.push_back(i);
        return ids;
    }
};

// ---------------------------------------------------------------------------
// Case files

inline void to_json(nlohmann::json& j, const GridCase& c) {
    j = nlohmann::json::object();
    j["base_mva"] = c.base_mva;
    j["slack_gen"] = c.slack_gen;
    auto& buses = j["buses"] = nlohmann::json::array();
    for (std::size_t i = 0; i < c.buses.size(); ++i)
        buses.push_back({{"id", i}, {"v_min", c.buses[i].v_min}, {"v_max", c.buses[i].v_max}, {"v_set", c.buses[i].v_set}});
    auto& branches = j["branches"] = nlohmann::json::array();
    for (const auto& b : c.branches)
        branches.push_back({{"from", b.from}, {"to", b.to}, {"r", b.r}, {"x", b.x}, {"limit", b.limit}});
    auto& gens = j["generators"] = nlohmann::json::array();
    for (const auto& g : c.generators)
        gens.push_back({{"type", gen_type_name(g.type)}, {"bus", g.bus}, {"p_max", g.p_max}, {"p_min", g.p_min},
                        {"q_max", g.q_max}, {"q_min", g.q_min}, {"a", g.a}, {"b", g.b}, {"c", g.c},
                        {"c_start", g.c_start}, {"ramp_rate", g.ramp_rate}});
    auto& loads = j["loads"] = nlohmann::json::array();
    for (const auto& l : c.loads) loads.push_back({{"bus", l.bus}, {"p", l.p}, {"q", l.q}});
}

inline void validate_case(const GridCase& c);

inline void from_json(const nlohmann::json& j, GridCase& c) {
    c = GridCase{};
    c.base_mva = j.value("base_mva", 100.0);
    c.slack_gen = j.at("slack_gen").get<std::size_t>();
    for (const auto& b : j.at("buses"))
        c.buses.push_back({b.at("v_min").get<double>(), b.at("v_max").get<double>(), b.value("v_set", 1.0)});
    for (const auto& b : j.at("branches"))
        c.branches.push_back({b.at("from").get<std::size_t>(), b.at("to").get<std::size_t>(), b.at("r").get<double>(),
                              b.at("x").get<double>(), b.at("limit").get<double>()});
    for (const auto& g : j.at("generators")) {
        Generator gen;
        const auto type = g.at("type").get<std::string>();
        if (type != "renewable" && type != "thermal") throw CaseError("case: unknown generator type " + type);
        gen.type = type == "renewable" ? GenType::renewable : GenType::thermal;
        gen.bus = g.at("bus");
        gen.p_max = g.at("p_max");
        gen.p_min = g.at("p_min");
        gen.q_max = g.at("q_max");
        gen.q_min = g.at("q_min");
        gen.a = g.at("a");
        gen.b = g.at("b");
        gen.c = g.at("c");
        gen.c_start = g.at("c_start");
        gen.ramp_rate = g.value("ramp_rate", 0.05);
        c.generators.push_back(gen);
    }
    for (const auto& l : j.at("loads"))
        c.loads.push_back({l.at("bus").get<std::size_t>(), l.at("p").get<double>(), l.at("q").get<double>()});
}

inline bool is_connected(std::size_t n_bus, const std::vector<Branch>& branches) {
    if (n_bus == 0) return false;
    std::vector<std::vector<std::size_t>> adj(n_bus);
    for (const auto& b : branches) {
        if (b.from >= n_bus || b.to >= n_bus) return false;
        adj[b.from].push_back(b.to);
        adj[b.to].push_back(b.from);
    }
    std::vector<bool> seen(n_bus, false);
    std::queue<std::size_t> q;
    q.push(0);
    seen[0] = true;
    std::size_t count = 1;
    while (!q.empty()) {
        const auto u = q.front();
        q.pop();
        for (auto v : adj[u])
            if (!seen[v]) {
                seen[v] = true;
                ++count;
                q.push(v);
            }
    }
    return count == n_bus;
}

inline void validate_case(const GridCase& c) {
    const std::size_t n = c.buses.size();
    if (n == 0) throw CaseError("case: no buses");
    if (c.generators.empty()) throw CaseError("case: no generators");
    if (c.slack_gen >= c.generators.size()) throw CaseError("case: slack generator index out of range");
    if (c.generators[c.slack_gen].type != GenType::thermal) throw CaseError("case: slack generator must be thermal");
    for (std::size_t j = 0; j < c.branches.size(); ++j) {
        const auto& b = c.branches[j];
        if (b.from >= n || b.to >= n || b.from == b.to)
            throw CaseError("case: branch " + std::to_string(j) + " has invalid endpoints");
        if (!(b.limit > 0.0)) throw CaseError("case: branch " + std::to_string(j) + " thermal limit must be positive");
        if (b.r == 0.0 && b.x == 0.0) throw CaseError("case: branch " + std::to_string(j) + " has zero impedance");
    }
    if (!is_connected(n, c.branches)) throw CaseError("case: network is not connected");
    for (std::size_t i = 0; i < c.generators.size(); ++i) {
        const auto& g = c.generators[i];
        if (g.bus >= n) throw CaseError("case: generator " + std::to_string(i) + " bus out of range");
        if (g.p_min > g.p_max) throw CaseError("case: generator " + std::to_string(i) + " has P_min > P_max");
        if (g.q_min > g.q_max) throw CaseError("case: generator " + std::to_string(i) + " has q_min > q_max");
    }
    for (std::size_t i = 0; i < c.loads.size(); ++i)
        if (c.loads[i].bus >= n) throw CaseError("case: load " + std::to_string(i) + " bus out of range");
    for (std::size_t k = 0; k < n; ++k)
        if (!(c.buses[k].v_min < c.buses[k].v_max)) throw CaseError("case: bus " + std::to_string(k) + " voltage band empty");
}

inline void save_case(const std::string& path, const GridCase& c) {
    std::ofstream out(path);
    if (!out) throw std::ios_base::failure("case: cannot open " + path + " for writing");
    out << nlohmann::json(c).dump(1) << '\n';
    if (!out) throw std::ios_base::failure("case: write failed for " + path);
}

inline GridCase load_case(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::ios_base::failure("case: cannot open " + path);
    GridCase c;
    try {
        c = nlohmann::json::parse(in).get<GridCase>();
    } catch (const nlohmann::json::exception& e) {
        throw CaseError("case: " + path + ": " + e.what());
    }
    validate_case(c);
    return c;
}

// ---------------------------------------------------------------------------
// Power flow

struct PowerFlowSolution {
    bool converged = false;
    int iterations = 0;
    double max_mismatch = 0.0;           ///< per-unit
    std::vector<double> vm;              ///< bus voltage magnitude, pu
    std::vector<double> va;              ///< bus voltage angle, rad
    std::vector<double> branch_current;  ///< |I_j|, pu
    std::vector<double> p_from, q_from, p_to, q_to;  ///< branch end flows, MW / MVAr
    std::vector<double> gen_p;           ///< MW, slack filled in
    std::vector<double> gen_q;           ///< MVAr
    double loss_mw = 0.0;
};

struct PowerFlowOptions {
    double tolerance = 1e-8;
    int max_iterations = 20;
};

using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;

inline CMatrix build_ybus(const GridCase& c) {
    const auto n = static_cast<Eigen::Index>(c.buses.size());
    CMatrix y = CMatrix::Zero(n, n);
    for (const auto& b : c.branches) {
        const std::complex<double> ys = 1.0 / std::complex<double>(b.r, b.x);
        const auto f = static_cast<Eigen::Index>(b.from), t = static_cast<Eigen::Index>(b.to);
        y(f, f) += ys;
        y(t, t) += ys;
        y(f, t) -= ys;
        y(t, f) -= ys;
    }
    return y;
}

/// Newton-Raphson AC power flow from a flat start. The slack generator's
/// set-point is ignored; its output closes the active-power balance. Buses with
/// an online generator hold their voltage set-point.
inline PowerFlowSolution solve_power_flow(const GridCase& c, const std::vector<int>& status,
                                          const std::vector<double>& gen_p_mw, const std::vector<double>& load_p_mw,
                                          const std::vector<double>& load_q_mvar, const PowerFlowOptions& opt = {}) {
    const std::size_t n = c.buses.size(), ng = c.generators.size();
    if (status.size() != ng || gen_p_mw.size() != ng)
        throw std::invalid_argument("power flow: need one status and set-point per generator");
    if (load_p_mw.size() != c.loads.size() || load_q_mvar.size() != c.loads.size())
        throw std::invalid_argument("power flow: need one P and Q per load");
    const std::size_t slack = c.slack_bus();

    std::vector<int> regulated(n, 0);
    for (std::size_t i = 0; i < ng; ++i)
        if (status[i]) regulated[c.generators[i].bus] = 1;
    std::vector<double> p_spec(n, 0.0), q_load(n, 0.0);
    for (std::size_t i = 0; i < ng; ++i)
        if (status[i] && i != c.slack_gen) p_spec[c.generators[i].bus] += gen_p_mw[i] / c.base_mva;
    for (std::size_t l = 0; l < c.loads.size(); ++l) {
        p_spec[c.loads[l].bus] -= load_p_mw[l] / c.base_mva;
        q_load[c.loads[l].bus] += load_q_mvar[l] / c.base_mva;
    }

    std::vector<Eigen::Index> pvpq, pq;
    for (std::size_t k = 0; k < n; ++k) {
        if (k == slack) continue;
        pvpq.push_back(static_cast<Eigen::Index>(k));
        if (!regulated[k]) pq.push_back(static_cast<Eigen::Index>(k));
    }
    const auto npv = static_cast<Eigen::Index>(pvpq.size()), npq = static_cast<Eigen::Index>(pq.size());

    const CMatrix y = build_ybus(c);
    Eigen::VectorXd vm(static_cast<Eigen::Index>(n)), va = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    for (std::size_t k = 0; k < n; ++k)
        vm(static_cast<Eigen::Index>(k)) = (k == slack || regulated[k]) ? c.buses[k].v_set : 1.0;

    auto voltage = [&]() {
        CVector v(static_cast<Eigen::Index>(n));
        for (Eigen::Index k = 0; k < v.size(); ++k) v(k) = std::polar(vm(k), va(k));
        return v;
    };
    auto mismatch = [&](const CVector& v, Eigen::VectorXd& f) {
        const CVector s = v.cwiseProduct((y * v).conjugate());
        f.resize(npv + npq);
        for (Eigen::Index i = 0; i < npv; ++i) f(i) = s(pvpq[static_cast<std::size_t>(i)]).real() - p_spec[static_cast<std::size_t>(pvpq[static_cast<std::size_t>(i)])];
        for (Eigen::Index i = 0; i < npq; ++i) f(npv + i) = s(pq[static_cast<std::size_t>(i)]).imag() + q_load[static_cast<std::size_t>(pq[static_cast<std::size_t>(i)])];
        return f.size() == 0 ? 0.0 : f.cwiseAbs().maxCoeff();
    };

    PowerFlowSolution sol;
    CVector v = voltage();
    Eigen::VectorXd f;
    double err = mismatch(v, f);
    int it = 0;
    while (err >= opt.tolerance && it < opt.max_iterations && std::isfinite(err)) {
        // dS/dVa = j diag(V) conj(diag(I) - Y diag(V));  dS/dVm = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
        const CVector ibus = y * v;
        CVector vnorm(v.size());
        for (Eigen::Index k = 0; k < v.size(); ++k) vnorm(k) = v(k) / vm(k);
        CMatrix ds_dva = -(y * v.asDiagonal()).conjugate();
        ds_dva.diagonal() += ibus.conjugate();
        ds_dva = (std::complex<double>(0.0, 1.0) * v).asDiagonal() * ds_dva;
        CMatrix ds_dvm = v.asDiagonal() * (y * vnorm.asDiagonal()).conjugate();
        ds_dvm.diagonal() += ibus.conjugate().cwiseProduct(vnorm);

        Eigen::MatrixXd jac(npv + npq, npv + npq);
        for (Eigen::Index r = 0; r < npv; ++r) {
            const auto br = pvpq[static_cast<std::size_t>(r)];
            for (Eigen::Index col = 0; col < npv; ++col) jac(r, col) = ds_dva(br, pvpq[static_cast<std::size_t>(col)]).real();
            for (Eigen::Index col = 0; col < npq; ++col) jac(r, npv + col) = ds_dvm(br, pq[static_cast<std::size_t>(col)]).real();
        }
        for (Eigen::Index r = 0; r < npq; ++r) {
            const auto br = pq[static_cast<std::size_t>(r)];
            for (Eigen::Index col = 0; col < npv; ++col) jac(npv + r, col) = ds_dva(br, pvpq[static_cast<std::size_t>(col)]).imag();
            for (Eigen::Index col = 0; col < npq; ++col) jac(npv + r, npv + col) = ds_dvm(br, pq[static_cast<std::size_t>(col)]).imag();
        }
        const Eigen::VectorXd dx = jac.partialPivLu().solve(-f);
        for (Eigen::Index i = 0; i < npv; ++i) va(pvpq[static_cast<std::size_t>(i)]) += dx(i);
        for (Eigen::Index i = 0; i < npq; ++i) vm(pq[static_cast<std::size_t>(i)]) += dx(npv + i);
        ++it;
        v = voltage();
        err = mismatch(v, f);
    }
    sol.iterations = it;
    sol.max_mismatch = err;
    sol.converged = std::isfinite(err) && err < opt.tolerance && vm.allFinite() && va.allFinite();

    sol.vm.assign(vm.data(), vm.data() + vm.size());
    sol.va.assign(va.data(), va.data() + va.size());
    const CVector s_bus = v.cwiseProduct((y * v).conjugate());

    const std::size_t nb = c.branches.size();
    sol.branch_current.resize(nb);
    sol.p_from.resize(nb);
    sol.q_from.resize(nb);
    sol.p_to.resize(nb);
    sol.q_to.resize(nb);
    for (std::size_t j = 0; j < nb; ++j) {
        const auto& br = c.branches[j];
        const auto vf = v(static_cast<Eigen::Index>(br.from)), vt = v(static_cast<Eigen::Index>(br.to));
        const std::complex<double> i_ft = (vf - vt) / std::complex<double>(br.r, br.x);
        const std::complex<double> s_ft = vf * std::conj(i_ft), s_tf = vt * std::conj(-i_ft);
        sol.branch_current[j] = std::abs(i_ft);
        sol.p_from[j] = s_ft.real() * c.base_mva;
        sol.q_from[j] = s_ft.imag() * c.base_mva;
        sol.p_to[j] = s_tf.real() * c.base_mva;
        sol.q_to[j] = s_tf.imag() * c.base_mva;
        sol.loss_mw += (s_ft + s_tf).real() * c.base_mva;
    }

    // Generator outputs: slack P closes the balance at its bus; reactive output
    // at each regulated bus is shared among its online units in proportion to q_max.
    sol.gen_p.assign(ng, 0.0);
    sol.gen_q.assign(ng, 0.0);
    std::vector<double> q_need(n, 0.0), q_weight(n, 0.0), p_load_bus(n, 0.0), p_other_slack(n, 0.0);
    for (std::size_t l = 0; l < c.loads.size(); ++l) p_load_bus[c.loads[l].bus] += load_p_mw[l];
    for (std::size_t k = 0; k < n; ++k) q_need[k] = s_bus(static_cast<Eigen::Index>(k)).imag() * c.base_mva + q_load[k] * c.base_mva;
    for (std::size_t i = 0; i < ng; ++i) {
        if (!status[i]) continue;
        q_weight[c.generators[i].bus] += std::max(c.generators[i].q_max, 1e-6);
        if (i != c.slack_gen) {
            sol.gen_p[i] = gen_p_mw[i];
            if (c.generators[i].bus == slack) p_other_slack[slack] += gen_p_mw[i];
        }
    }
    sol.gen_p[c.slack_gen] = s_bus(static_cast<Eigen::Index>(slack)).real() * c.base_mva + p_load_bus[slack] - p_other_slack[slack];
    for (std::size_t i = 0; i < ng; ++i) {
        if (!status[i] && i != c.slack_gen) continue;
        const std::size_t k = c.generators[i].bus;
        const double w = q_weight[k] > 0.0 ? std::max(c.generators[i].q_max, 1e-6) / q_weight[k] : 1.0;
        sol.gen_q[i] = q_need[k] * w;
    }
    return sol;
}

// ---------------------------------------------------------------------------
// Objective terms

inline double zeta(double x) { return std::expm1(x); }

/// Reactive overrun. Above q_max: u(1 - q/q_max). Below q_min the overrun is
/// -(q_min - q)/|q_min|, which equals u(q/q_min - 1) whenever q_min > 0.
inline double reactive_term(double q, double q_min, double q_max) {
    if (q > q_max) return 1.0 - q / q_max;
    if (q < q_min) return -(q_min - q) / std::abs(q_min);
    return 0.0;
}

struct SecurityComponents {
    double s_b = 1.0;
    double s_r = 0.0;
    double s_v = 0.0;
};

inline SecurityComponents security_components(const GridCase& c, const PowerFlowSolution& sol,
                                              const std::vector<int>& status) {
    SecurityComponents out;
    if (!c.branches.empty()) {
        double load = 0.0;
        for (std::size_t j = 0; j < c.branches.size(); ++j) load += std::min(sol.branch_current[j] / c.branches[j].limit, 1.0);
        out.s_b = 1.0 - load / static_cast<double>(c.branches.size());
    }
    for (std::size_t i = 0; i < c.generators.size(); ++i) {
        const bool on = i == c.slack_gen || status[i];
        if (!on) continue;
        const auto& g = c.generators[i];
        out.s_r += reactive_term(sol.gen_q[i], g.q_min, g.q_max);
    }
    for (std::size_t k = 0; k < c.buses.size(); ++k) {
        const double v = sol.vm[k];
        if (v > c.buses[k].v_max)
            out.s_v += 1.0 - v / c.buses[k].v_max;
        else if (v < c.buses[k].v_min)
            out.s_v += v / c.buses[k].v_min - 1.0;
    }
    return out;
}

/// Quadratic fuel cost of online units plus start-up cost of units switching on.
inline double operation_cost(const GridCase& c, const std::vector<int>& status, const std::vector<int>& prev_status,
                             const std::vector<double>& p_mw) {
    double cost = 0.0;
    for (std::size_t i = 0; i < c.generators.size(); ++i) {
        if (!status[i]) continue;
        const auto& g = c.generators[i];
        cost += g.a * p_mw[i] * p_mw[i] + g.b * p_mw[i] + g.c;
        if (!prev_status[i]) cost += g.c_start;
    }
    return cost;
}

/// Reference cost: every thermal unit online at the middle of its range.
inline double reference_cost(const GridCase& c) {
    double cost = 0.0;
    for (const auto& g : c.generators) {
        if (g.type != GenType::thermal) continue;
        const double p = 0.5 * (g.p_min + g.p_max);
        cost += g.a * p * p + g.b * p + g.c;
    }
    return cost;
}

inline double renewable_utilization(const std::vector<double>& p_mw, const std::vector<double>& available_mw) {
    if (p_mw.size() != available_mw.size()) throw std::invalid_argument("renewable_utilization: length mismatch");
    const double avail = std::accumulate(available_mw.begin(), available_mw.end(), 0.0);
    if (avail <= 0.0) return 1.0;
    const double used = std::accumulate(p_mw.begin(), p_mw.end(), 0.0);
    return std::clamp(used / avail, 0.0, 1.0);
}

struct RewardBreakdown {
    double s_b = 0.0;
    double s_r = 0.0;
    double s_v = 0.0;
    double cost = 0.0;
    double r = 0.0;  ///< renewable utilization
    double zeta_s_r = 0.0;
    double zeta_s_v = 0.0;
    double zeta_cost = 0.0;
    double reward = 0.0;
};

inline RewardBreakdown compose_reward(const SecurityComponents& sec, double cost, double cost_ref, double urre,
                                      double omega_r) {
    RewardBreakdown rb;
    rb.s_b = sec.s_b;
    rb.s_r = sec.s_r;
    rb.s_v = sec.s_v;
    rb.cost = cost;
    rb.r = urre;
    rb.zeta_s_r = zeta(sec.s_r);
    rb.zeta_s_v = zeta(sec.s_v);
    rb.zeta_cost = zeta(-cost / cost_ref);
    rb.reward = rb.s_b + rb.zeta_s_r + rb.zeta_s_v + rb.zeta_cost + omega_r * rb.r;
    return rb;
}

// ---------------------------------------------------------------------------
// Case generation

struct CaseSizes {
    std::size_t buses = 126;
    std::size_t generators = 54;
    std::size_t branches = 185;
    std::size_t loads = 91;
    std::size_t renewables = 18;
};

struct Archetype {
    double p_max, p_min, a, b, c, c_start;
};

// Generator parameter rows: renewable, then three thermal groups.
inline constexpr Archetype kRenewableArchetype{65.0, 0.0, 0.0696, 26.2438, 31.67, 80.0};
inline constexpr Archetype kThermalArchetypes[3] = {
    {110.0, 15.0, 0.0285, 17.82, 10.15, 100.0},
    {128.0, 25.0, 0.0109, 22.9423, 32.96, 200.0},
    {140.0, 28.0, 0.0097, 12.8875, 58.81, 880.0},
};
inline constexpr std::size_t kThermalGroupShare[3] = {12, 10, 14};

inline Generator make_generator(GenType type, const Archetype& a, std::size_t bus) {
    Generator g;
    g.type = type;
    g.bus = bus;
    g.p_max = a.p_max;
    g.p_min = a.p_min;
    g.a = a.a;
    g.b = a.b;
    g.c = a.c;
    g.c_start = a.c_start;
    g.ramp_rate = 0.05;
    g.q_max = 0.6 * a.p_max;
    g.q_min = -0.3 * a.p_max;
    return g;
}

/// Nominal dispatch: renewables at half capacity, thermal units at mid-range.
inline std::vector<double> nominal_dispatch(const GridCase& c) {
    std::vector<double> p;
    for (const auto& g : c.generators) p.push_back(g.type == GenType::renewable ? 0.5 * g.p_max : 0.5 * (g.p_min + g.p_max));
    return p;
}

namespace detail {

inline bool try_generate_case(std::mt19937_64& rng, const CaseSizes& sz, GridCase& out) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    GridCase c;
    const std::size_t n = sz.buses;
    std::vector<double> px(n), py(n);
    for (std::size_t k = 0; k < n; ++k) {
        px[k] = uni(rng);
        py[k] = uni(rng);
    }
    auto dist = [&](std::size_t a, std::size_t b) { return std::hypot(px[a] - px[b], py[a] - py[b]); };
    // Electrical length grows with distance on the unit square.
    auto add_branch = [&](std::size_t a, std::size_t b) {
        Branch br;
        br.from = std::min(a, b);
        br.to = std::max(a, b);
        br.x = 0.01 + 0.6 * dist(a, b);
        br.r = 0.2 * br.x;
        c.branches.push_back(br);
    };
    std::vector<std::vector<bool>> linked(n, std::vector<bool>(n, false));
    for (std::size_t k = 1; k < n; ++k) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (dist(k, j) < dist(k, best)) best = j;
        add_branch(best, k);
        linked[best][k] = linked[k][best] = true;
    }
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::size_t guard = 0;
    while (c.branches.size() < sz.branches) {
        if (++guard > 100 * sz.branches + 1000) return false;
        const std::size_t a = pick(rng);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](auto u, auto v) { return dist(a, u) < dist(a, v); });
        std::uniform_int_distribution<std::size_t> kth(1, std::min<std::size_t>(4, n - 1));
        const std::size_t b = order[kth(rng)];
        if (b == a || linked[a][b]) continue;
        add_branch(a, b);
        linked[a][b] = linked[b][a] = true;
    }
    if (!is_connected(n, c.branches)) return false;

    c.buses.assign(n, Bus{});
    std::vector<std::size_t> bus_order(n);
    std::iota(bus_order.begin(), bus_order.end(), 0);
    std::shuffle(bus_order.begin(), bus_order.end(), rng);

    const std::size_t n_thermal = sz.generators - sz.renewables;
    std::array<std::size_t, 3> groups{};
    {
        std::size_t assigned = 0;
        for (std::size_t g = 0; g < 3; ++g) {
            groups[g] = n_thermal * kThermalGroupShare[g] / 36;
            assigned += groups[g];
        }
        for (std::size_t g = 2; assigned < n_thermal; g = (g + 2) % 3) {
            ++groups[g];
            ++assigned;
        }
    }
    std::size_t slot = 0;
    auto next_bus = [&]() { return bus_order[slot++ % n]; };
    for (std::size_t i = 0; i < sz.renewables; ++i) c.generators.push_back(make_generator(GenType::renewable, kRenewableArchetype, next_bus()));
    for (std::size_t g = 0; g < 3; ++g)
        for (std::size_t i = 0; i < groups[g]; ++i)
            c.generators.push_back(make_generator(GenType::thermal, kThermalArchetypes[g], next_bus()));
    // Slack: the largest thermal unit (first on ties).
    std::size_t slack = sz.renewables;
    for (std::size_t i = sz.renewables; i < c.generators.size(); ++i)
        if (c.generators[i].p_max > c.generators[slack].p_max) slack = i;
    c.slack_gen = slack;
    for (const auto& g : c.generators) c.buses[g.bus].v_set = 1.0 + 0.01 * uni(rng);

    // Loads roughly match the nominal dispatch.
    const auto nominal = nominal_dispatch(c);
    const double total = std::accumulate(nominal.begin(), nominal.end(), 0.0) * 0.98;
    std::vector<double> weight(sz.loads);
    for (auto& w : weight) w = 0.5 + uni(rng);
    const double wsum = std::accumulate(weight.begin(), weight.end(), 0.0);
    std::vector<std::size_t> load_order(n);
    std::iota(load_order.begin(), load_order.end(), 0);
    std::shuffle(load_order.begin(), load_order.end(), rng);
    for (std::size_t l = 0; l < sz.loads; ++l) {
        Load ld;
        ld.bus = load_order[l % n];
        ld.p = total * weight[l] / wsum;
        ld.q = ld.p * (0.05 + 0.1 * uni(rng));
        c.loads.push_back(ld);
    }

    // Thermal limits from the nominal operating point with headroom.
    std::vector<int> status(c.generators.size(), 1);
    std::vector<double> lp, lq;
    for (const auto& l : c.loads) {
        lp.push_back(l.p);
        lq.push_back(l.q);
    }
    const auto sol = solve_power_flow(c, status, nominal, lp, lq);
    if (!sol.converged) return false;
    for (std::size_t j = 0; j < c.branches.size(); ++j) c.branches[j].limit = 1.4 * sol.branch_current[j] + 0.3;
    out = std::move(c);
    return true;
}

}  // namespace detail

inline GridCase generate_case(std::uint64_t seed, const CaseSizes& sz = {}) {
    if (sz.buses < 2) throw CaseError("generate_case: need at least 2 buses");
    if (sz.branches + 1 < sz.buses) throw CaseError("generate_case: need at least n_bus - 1 branches");
    if (sz.branches > sz.buses * (sz.buses - 1) / 2) throw CaseError("generate_case: more branches than bus pairs");
    if (sz.generators < 1 || sz.renewables >= sz.generators)
        throw CaseError("generate_case: need at least one thermal generator to act as slack");
    if (sz.loads < 1) throw CaseError("generate_case: need at least one load");
    std::mt19937_64 rng(seed);
    for (int attempt = 0; attempt < 100; ++attempt) {
        GridCase c;
        if (detail::try_generate_case(rng, sz, c)) {
            validate_case(c);
            return c;
        }
    }
    throw CaseError("generate_case: no valid case after 100 attempts");
}

/// Sets each renewable unit's capacity to the peak of its series and derives
/// its reactive range from it.
inline void fit_renewable_capacity(GridCase& c, const RenewableSeries& s) {
    const auto ids = c.renewable_ids();
    if (ids.size() != s.num_units)
        throw CaseError("case has " + std::to_string(ids.size()) + " renewable units, series has " +
                        std::to_string(s.num_units));
    for (std::size_t u = 0; u < ids.size(); ++u) {
        double peak = 0.0;
        for (std::size_t d = 0; d < s.num_days; ++d) peak = std::max(peak, s.at(d, u));
        auto& g = c.generators[ids[u]];
        g.p_max = std::max(peak, 1.0);
        g.q_max = 0.6 * g.p_max;
        g.q_min = -0.3 * g.p_max;
    }
}

// ---------------------------------------------------------------------------
// Environment

struct EnvConfig {
    double omega_r = 2.0;
    double load_annual_amplitude = 0.05;  ///< fraction of base load
    double hard_v_min = 0.95;
    double hard_v_max = 1.05;
};

struct Observation {
    std::vector<double> gen_q;          // MVAr
    std::vector<double> bus_v;          // pu
    std::vector<double> branch_p_from;  // MW
    std::vector<double> branch_q_from;  // MVAr
    std::vector<double> branch_p_to;    // MW
    std::vector<double> branch_q_to;    // MVAr
    std::vector<double> branch_load;    // I/T
    std::vector<double> branch_current; // pu
    std::vector<double> load_p;         // MW
    std::vector<double> load_q;         // MVAr
    double grid_loss = 0.0;             // MW
    std::vector<double> gen_p;          // MW
    std::vector<double> gen_status;     // 0/1
};

/// Length of the flattened observation for a case.
inline std::size_t observation_length(const GridCase& c) {
    const std::size_t ng = c.generators.size(), nb = c.buses.size(), nl = c.branches.size(), nd = c.loads.size();
    return ng + nb + 6 * nl + 2 * nd + 1 + 2 * ng;
}

/// Flattens the 13 observation groups in declaration order. Powers are scaled to
/// per-unit so every entry is of order one.
inline std::vector<double> flatten(const Observation& o, double base_mva = 100.0) {
    std::vector<double> out;
    auto put = [&](const std::vector<double>& v, double scale) {
        for (double x : v) out.push_back(x * scale);
    };
    const double s = 1.0 / base_mva;
    put(o.gen_q, s);
    put(o.bus_v, 1.0);
    put(o.branch_p_from, s);
    put(o.branch_q_from, s);
    put(o.branch_p_to, s);
    put(o.branch_q_to, s);
    put(o.branch_load, 1.0);
    put(o.branch_current, 1.0);
    put(o.load_p, s);
    put(o.load_q, s);
    out.push_back(o.grid_loss * s);
    put(o.gen_p, s);
    put(o.gen_status, 1.0);
    return out;
}

struct StepResult {
    Observation obs;
    RewardBreakdown reward;
    bool done = false;
    std::string reason;  ///< empty while running; pf-diverged, voltage, slack-limit, series-end
    bool ramp_ok = true;
};

/// True for reasons where the episode ended because the grid failed.
inline bool is_failure(const std::string& reason) {
    return reason == "pf-diverged" || reason == "voltage" || reason == "slack-limit";
}

class GridEnv {
public:
    GridEnv(GridCase grid, RenewableSeries series, EnvConfig cfg = {})
        : case_(std::move(grid)), series_(std::move(series)), cfg_(cfg) {
        validate_case(case_);
        renewables_ = case_.renewable_ids();
        if (renewables_.size() != series_.num_units)
            throw CaseError("environment: case has " + std::to_string(renewables_.size()) +
                            " renewable units but the series has " + std::to_string(series_.num_units));
        cost_ref_ = reference_cost(case_);
        if (!(cost_ref_ > 0.0)) throw CaseError("environment: reference cost must be positive");
    }

    const GridCase& grid() const noexcept { return case_; }
    const RenewableSeries& series() const noexcept { return series_; }
    const EnvConfig& config() const noexcept { return cfg_; }
    double cost_ref() const noexcept { return cost_ref_; }
    std::size_t day() const noexcept { return day_; }
    const std::vector<double>& output() const noexcept { return p_; }
    const std::vector<int>& status() const noexcept { return u_; }
    const PowerFlowSolution& solution() const noexcept { return sol_; }
    const std::vector<std::size_t>& renewable_ids() const noexcept { return renewables_; }

    std::vector<double> load_p(std::size_t day) const {
        std::vector<double> p;
        const double f = load_factor(day);
        for (const auto& l : case_.loads) p.push_back(l.p * f);
        return p;
    }
    std::vector<double> load_q(std::size_t day) const {
        std::vector<double> q;
        const double f = load_factor(day);
        for (const auto& l : case_.loads) q.push_back(l.q * f);
        return q;
    }
    std::vector<double> availability(std::size_t day) const {
        std::vector<double> a(renewables_.size());
        for (std::size_t u = 0; u < renewables_.size(); ++u)
            a[u] = std::min(series_.at(day, u), case_.generators[renewables_[u]].p_max);
        return a;
    }

    /// Starts on `day` with renewables at full availability and the thermal fleet
    /// sharing the remaining demand at a common fraction of range.
    Observation reset(std::size_t day) {
        if (day + 1 >= series_.num_days) throw std::out_of_range("environment: start day leaves no step");
        day_ = day;
        const std::size_t ng = case_.generators.size();
        p_.assign(ng, 0.0);
        u_.assign(ng, 1);
        const auto avail = availability(day);
        double renew = 0.0;
        for (std::size_t k = 0; k < renewables_.size(); ++k) {
            p_[renewables_[k]] = avail[k];
            renew += avail[k];
            u_[renewables_[k]] = avail[k] > 0.0 ? 1 : 0;
        }
        const auto lp = load_p(day);
        const double demand = std::accumulate(lp.begin(), lp.end(), 0.0);
        double loss = 0.02 * demand;
        for (int pass = 0; pass < 3; ++pass) {
            set_thermal_share(demand + loss - renew);
            sol_ = solve_power_flow(case_, u_, p_, lp, load_q(day));
            if (!sol_.converged) break;
            loss = sol_.loss_mw;
        }
        if (!sol_.converged) throw std::runtime_error("environment: initial power flow did not converge");
        p_[case_.slack_gen] = sol_.gen_p[case_.slack_gen];
        return observe(day);
    }

    /// Applies the set-points to the next day. The action holds one MW value per generator.
    StepResult step(const std::vector<double>& action) {
        const std::size_t ng = case_.generators.size();
        if (action.size() != ng)
            throw std::invalid_argument("environment: action has " + std::to_string(action.size()) + " entries, expected " +
                                        std::to_string(ng));
        for (double a : action)
            if (!std::isfinite(a)) throw std::invalid_argument("environment: action contains a non-finite value");
        if (day_ + 1 >= series_.num_days) throw std::out_of_range("environment: series exhausted");

        const std::size_t next = day_ + 1;
        const auto avail = availability(next);
        const std::vector<int> prev_u = u_;
        const std::vector<double> prev_p = p_;
        std::vector<double> p(ng, 0.0);
        std::vector<int> u = u_;
        for (std::size_t k = 0; k < renewables_.size(); ++k) {
            const std::size_t i = renewables_[k];
            p[i] = std::clamp(action[i], 0.0, avail[k]);
            u[i] = p[i] > 0.0 ? 1 : 0;
        }
        for (std::size_t i = 0; i < ng; ++i) {
            const auto& g = case_.generators[i];
            if (g.type != GenType::thermal || i == case_.slack_gen) continue;
            if (action[i] == 0.0) {  // explicit shutdown
                u[i] = 0;
                p[i] = 0.0;
                continue;
            }
            u[i] = 1;
            double target = std::clamp(action[i], g.p_min, g.p_max);
            if (prev_u[i]) {
                const double step = g.ramp_rate * g.p_max;
                target = std::clamp(target, prev_p[i] - step, prev_p[i] + step);
            } else {
                target = g.p_min;
            }
            p[i] = target;
        }
        u[case_.slack_gen] = 1;

        StepResult res;
        const auto lp = load_p(next), lq = load_q(next);
        PowerFlowSolution sol = solve_power_flow(case_, u, p, lp, lq);
        day_ = next;
        if (!sol.converged) {
            res.done = true;
            res.reason = "pf-diverged";
            p_ = p;
            u_ = u;
            res.obs = observe(next);
            res.ramp_ok = ramp_satisfied(prev_u, prev_p, u, p);
            return res;
        }
        p[case_.slack_gen] = sol.gen_p[case_.slack_gen];
        sol_ = std::move(sol);
        p_ = p;
        u_ = u;

        std::vector<double> renew_p;
        for (auto i : renewables_) renew_p.push_back(p[i]);
        const auto sec = security_components(case_, sol_, u_);
        const double cost = operation_cost(case_, u_, prev_u, p_);
        res.reward = compose_reward(sec, cost, cost_ref_, renewable_utilization(renew_p, avail), cfg_.omega_r);
        res.ramp_ok = ramp_satisfied(prev_u, prev_p, u, p);

        const auto& slack = case_.generators[case_.slack_gen];
        const double ps = p_[case_.slack_gen];
        bool voltage_bad = false;
        for (double v : sol_.vm) voltage_bad = voltage_bad || v < cfg_.hard_v_min || v > cfg_.hard_v_max;
        if (voltage_bad) {
            res.done = true;
            res.reason = "voltage";
        } else if (ps < slack.p_min || ps > slack.p_max) {
            res.done = true;
            res.reason = "slack-limit";
        } else if (day_ + 1 >= series_.num_days) {
            res.done = true;
            res.reason = "series-end";
        }
        res.obs = observe(next);
        return res;
    }

    /// Largest |I/T| over branches touching each generator's bus in the current solution.
    std::vector<double> neighborhood_load() const {
        std::vector<double> bus_load(case_.buses.size(), 0.0);
        for (std::size_t j = 0; j < case_.branches.size(); ++j) {
            const auto& b = case_.branches[j];
            const double ratio = sol_.branch_current.empty() ? 0.0 : sol_.branch_current[j] / b.limit;
            bus_load[b.from] = std::max(bus_load[b.from], ratio);
            bus_load[b.to] = std::max(bus_load[b.to], ratio);
        }
        std::vector<double> out;
        for (const auto& g : case_.generators) out.push_back(bus_load[g.bus]);
        return out;
    }

    /// Per-generator utilization: renewables against today's availability,
    /// thermals against capacity. A renewable with nothing available counts as 1.
    std::vector<double> utilization() const {
        std::vector<double> out;
        for (std::size_t i = 0; i < case_.generators.size(); ++i)
            out.push_back(case_.generators[i].p_max > 0.0 ? p_[i] / case_.generators[i].p_max : 0.0);
        const auto avail = availability(day_);
        for (std::size_t k = 0; k < renewables_.size(); ++k)
            out[renewables_[k]] = avail[k] > 0.0 ? std::min(p_[renewables_[k]] / avail[k], 1.0) : 1.0;
        return out;
    }

    /// Ramp check for every thermal unit other than the slack, online on both days.
    bool ramp_satisfied(const std::vector<int>& prev_u, const std::vector<double>& prev_p, const std::vector<int>& u,
                        const std::vector<double>& p) const {
        for (std::size_t i = 0; i < case_.generators.size(); ++i) {
            const auto& g = case_.generators[i];
            if (g.type != GenType::thermal || i == case_.slack_gen || !prev_u[i] || !u[i]) continue;
            if (std::abs(p[i] - prev_p[i]) > g.ramp_rate * g.p_max + 1e-9) return false;
        }
        return true;
    }

private:
    double load_factor(std::size_t day) const {
        return 1.0 + cfg_.load_annual_amplitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(day) / 365.0);
    }

    void set_thermal_share(double target) {
        std::vector<std::size_t> ids;
        double lo = 0.0, range = 0.0;
        for (std::size_t i = 0; i < case_.generators.size(); ++i) {
            const auto& g = case_.generators[i];
            if (g.type != GenType::thermal) continue;
            ids.push_back(i);
            lo += g.p_min;
            range += g.p_max - g.p_min;
        }
        const double f = range > 0.0 ? std::clamp((target - lo) / range, 0.0, 1.0) : 0.0;
        for (auto i : ids) p_[i] = case_.generators[i].p_min + f * (case_.generators[i].p_max - case_.generators[i].p_min);
    }

    Observation observe(std::size_t day) const {
        Observation o;
        const std::size_t nb = case_.branches.size();
        o.gen_q = sol_.gen_q;
        o.bus_v = sol_.vm;
        o.branch_p_from = sol_.p_from;
        o.branch_q_from = sol_.q_from;
        o.branch_p_to = sol_.p_to;
        o.branch_q_to = sol_.q_to;
        o.branch_current = sol_.branch_current;
        o.branch_load.resize(nb);
        for (std::size_t j = 0; j < nb; ++j) o.branch_load[j] = sol_.branch_current[j] / case_.branches[j].limit;
        o.load_p = load_p(day);
        o.load_q = load_q(day);
        o.grid_loss = sol_.loss_mw;
        o.gen_p = p_;
        for (int s : u_) o.gen_status.push_back(static_cast<double>(s));
        for (auto* v : {&o.gen_q, &o.bus_v, &o.branch_p_from, &o.branch_q_from, &o.branch_p_to, &o.branch_q_to,
                        &o.branch_current, &o.branch_load})
            for (auto& x : *v)
                if (!std::isfinite(x)) x = 0.0;
        if (!std::isfinite(o.grid_loss)) o.grid_loss = 0.0;
        return o;
    }

    GridCase case_;
    RenewableSeries series_;
    EnvConfig cfg_;
    std::vector<std::size_t> renewables_;
    double cost_ref_ = 1.0;
    std::size_t day_ = 0;
    std::vector<double> p_;
    std::vector<int> u_;
    PowerFlowSolution sol_;
};

// ---------------------------------------------------------------------------
// Episode bookkeeping

struct EpisodeScores {
    std::size_t steps = 0;
    double security = 0.0;
    double avg_cost = 0.0;
    double avg_urre = 0.0;
    double total_reward = 0.0;
};

inline EpisodeScores episode_scores(const std::vector<RewardBreakdown>& steps) {
    if (steps.empty()) throw std::invalid_argument("episode_scores: need at least one step");
    EpisodeScores s;
    s.steps = steps.size();
    for (const auto& r : steps) {
        s.total_reward += r.reward;
        s.security += r.s_b + r.zeta_s_r + r.zeta_s_v;
        s.avg_cost += r.cost;
        s.avg_urre += r.r;
    }
    s.avg_cost /= static_cast<double>(s.steps);
    s.avg_urre /= static_cast<double>(s.steps);
    return s;
}

}  // namespace gridpatch
