#include <filesystem>
#include <fstream>
#include <map>
#include <chrono>
#include <complex>
#include <random>

#include <gtest/gtest.h>

#include "gridpatch/grid.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace gridpatch;
using namespace fixture;

namespace {






// Slack thermal at bus 0, a second thermal and a renewable at bus 1, one load.
GridCase small_env_case(double load_mw) {
    GridCase c;
    c.buses.assign(2, Bus{});
    c.branches.push_back({0, 1, 0.01, 0.05, 20.0});
    Generator slack = unit(GenType::thermal, 0, 28.0, 140.0);
    slack.a = 0.0097;
    slack.b = 12.8875;
    slack.c = 58.81;
    slack.c_start = 880.0;
    Generator th = unit(GenType::thermal, 1, 15.0, 110.0);
    th.a = 0.0285;
    th.b = 17.82;
    th.c = 10.15;
    th.c_start = 100.0;
    Generator re = unit(GenType::renewable, 1, 0.0, 100.0);
    re.a = 0.0696;
    re.b = 26.2438;
    re.c = 31.67;
    re.c_start = 80.0;
    c.generators = {slack, th, re};
    c.slack_gen = 0;
    c.loads.push_back({1, load_mw, 0.1 * load_mw});
    return c;
}

RenewableSeries constant_availability(std::size_t days, double mw) {
    RenewableSeries s;
    s.num_units = 1;
    s.num_days = days;
    s.values.assign(days, mw);
    return s;
}

}  // namespace

TEST(PowerFlow, TwoBusMatchesHandNewton) {
    const GridCase c = two_bus();
    const auto [lp, lq] = base_loads(c);
    const auto t0 = std::chrono::steady_clock::now();
    const auto sol = solve_power_flow(c, {1}, {0.0}, lp, lq);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ASSERT_TRUE(sol.converged);
    EXPECT_LE(sol.iterations, 10);
    EXPECT_LT(secs, 1.0);

    const auto [v, th] = two_bus_newton();
    EXPECT_NEAR(sol.vm[1], v, 1e-6);
    EXPECT_NEAR(sol.va[1], th, 1e-6);
    EXPECT_NEAR(sol.vm[0], 1.0, 1e-15);
    EXPECT_NEAR(sol.gen_p[0], 50.0, 1e-6);  // lossless line
}

TEST(PowerFlow, FiveBusMatchesGaussSeidel) {
    const GridCase c = five_bus();
    const auto [lp, lq] = base_loads(c);
    const auto sol = solve_power_flow(c, {1, 1}, {0.0, 40.0}, lp, lq);
    ASSERT_TRUE(sol.converged);
    EXPECT_LE(sol.iterations, 10);

    const auto v = five_bus_gauss_seidel();
    for (std::size_t k = 0; k < 5; ++k) {
        EXPECT_NEAR(sol.vm[k], std::abs(v[k]), 1e-6) << k;
        EXPECT_NEAR(sol.va[k], std::arg(v[k]), 1e-6) << k;
    }
}

TEST(PowerFlow, NoLoadNoGenerationIsFlat) {
    GridCase c = five_bus();
    c.buses[0].v_set = 1.0;
    for (auto& l : c.loads) l.p = l.q = 0.0;
    const auto [lp, lq] = base_loads(c);
    const auto sol = solve_power_flow(c, {1, 1}, {0.0, 0.0}, lp, lq);
    ASSERT_TRUE(sol.converged);
    for (std::size_t k = 0; k < 5; ++k) {
        EXPECT_NEAR(sol.vm[k], 1.0, 1e-12);
        EXPECT_NEAR(sol.va[k], 0.0, 1e-12);
    }
    for (double i : sol.branch_current) EXPECT_NEAR(i, 0.0, 1e-12);
}

TEST(PowerFlow, GeneratedCaseSatisfiesNodalBalance) {
    const GridCase c = generate_case(3);
    const auto [lp, lq] = base_loads(c);
    const std::vector<int> status(c.generators.size(), 1);
    const auto p = nominal_dispatch(c);
    const auto sol = solve_power_flow(c, status, p, lp, lq);
    ASSERT_TRUE(sol.converged);
    const auto y = oracle_ybus(c);
    const std::size_t n = c.buses.size();
    std::vector<cd> v(n);
    for (std::size_t k = 0; k < n; ++k) v[k] = std::polar(sol.vm[k], sol.va[k]);
    std::vector<double> p_net(n, 0.0), q_net(n, 0.0);
    for (std::size_t i = 0; i < c.generators.size(); ++i) {
        p_net[c.generators[i].bus] += sol.gen_p[i] / 100.0;
        q_net[c.generators[i].bus] += sol.gen_q[i] / 100.0;
    }
    for (std::size_t l = 0; l < c.loads.size(); ++l) {
        p_net[c.loads[l].bus] -= lp[l] / 100.0;
        q_net[c.loads[l].bus] -= lq[l] / 100.0;
    }
    for (std::size_t k = 0; k < n; ++k) {
        cd i = 0.0;
        for (std::size_t j = 0; j < n; ++j) i += y[k][j] * v[j];
        const cd s = v[k] * std::conj(i);
        EXPECT_LT(std::abs(s.real() - p_net[k]), 1e-8) << k;
        EXPECT_LT(std::abs(s.imag() - q_net[k]), 1e-8) << k;
    }
}

TEST(PowerFlow, ReportsNonConvergence) {
    GridCase c = two_bus();
    c.loads[0].p = 2000.0;  // far beyond the line's transfer capability
    const auto [lp, lq] = base_loads(c);
    const auto sol = solve_power_flow(c, {1}, {0.0}, lp, lq);
    EXPECT_FALSE(sol.converged);
}

TEST(Security, BranchLoadingTerm) {
    GridCase c = two_bus();
    c.branches.push_back({0, 1, 0.0, 0.1, 2.0});
    c.branches[0].limit = 2.0;
    PowerFlowSolution sol;
    sol.vm = {1.0, 1.0};
    sol.gen_q = {0.0};
    sol.branch_current = {0.0, 0.0};
    EXPECT_DOUBLE_EQ(security_components(c, sol, {1}).s_b, 1.0);
    sol.branch_current = {1.0, 3.0};
    EXPECT_DOUBLE_EQ(security_components(c, sol, {1}).s_b, 0.25);
}

TEST(Security, ReactiveAndVoltageTerms) {
    GridCase c = five_bus();
    PowerFlowSolution sol;
    sol.vm = {1.0, 1.0, 1.0, 1.0, 1.0};
    sol.branch_current.assign(7, 0.0);
    sol.gen_q = {2.0 * c.generators[0].q_max, 0.0};
    EXPECT_DOUBLE_EQ(security_components(c, sol, {1, 1}).s_r, -1.0);
    sol.gen_q = {0.0, 0.0};
    sol.vm[3] = 1.05 * 1.02;
    sol.vm[4] = 0.95 * 0.9;
    const auto s = security_components(c, sol, {1, 1});
    EXPECT_NEAR(s.s_v, (1.0 - 1.02) + (0.9 - 1.0), 1e-12);
    EXPECT_EQ(s.s_r, 0.0);
}

TEST(Security, OfflineUnitsDoNotCount) {
    GridCase c = five_bus();
    PowerFlowSolution sol;
    sol.vm.assign(5, 1.0);
    sol.branch_current.assign(7, 0.0);
    sol.gen_q = {0.0, 3.0 * c.generators[1].q_max};
    EXPECT_EQ(security_components(c, sol, {1, 0}).s_r, 0.0);
    EXPECT_DOUBLE_EQ(security_components(c, sol, {1, 1}).s_r, -2.0);
}

TEST(Security, ReactiveTermSigns) {
    EXPECT_DOUBLE_EQ(reactive_term(30.0, 10.0, 20.0), -0.5);
    EXPECT_DOUBLE_EQ(reactive_term(5.0, 10.0, 20.0), 5.0 / 10.0 - 1.0);  // positive q_min: literal form
    EXPECT_DOUBLE_EQ(reactive_term(-30.0, -20.0, 20.0), -0.5);          // negative q_min stays a penalty
    EXPECT_EQ(reactive_term(0.0, -20.0, 20.0), 0.0);
}

TEST(Cost, ArchetypeUnitAtHundredMegawatts) {
    GridCase c = small_env_case(50.0);
    EXPECT_NEAR(operation_cost(c, {0, 1, 0}, {0, 1, 0}, {0, 100.0, 0}), 2077.15, 1e-9);
    EXPECT_EQ(operation_cost(c, {0, 0, 0}, {1, 1, 1}, {50, 100, 20}), 0.0);
    const double on = operation_cost(c, {0, 1, 0}, {0, 0, 0}, {0, 100.0, 0});
    EXPECT_NEAR(on - 2077.15, 100.0, 1e-9);
}

TEST(Utilization, Cases) {
    EXPECT_EQ(renewable_utilization({5, 10}, {5, 10}), 1.0);
    EXPECT_EQ(renewable_utilization({0, 0}, {5, 10}), 0.0);
    EXPECT_EQ(renewable_utilization({0, 0}, {0, 0}), 1.0);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> d(0, 50);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> p(18), a(18);
        double sp = 0, sa = 0;
        for (std::size_t i = 0; i < 18; ++i) {
            a[i] = d(rng);
            p[i] = a[i] * d(rng) / 50.0;
            sp += p[i];
            sa += a[i];
        }
        EXPECT_NEAR(renewable_utilization(p, a), sp / sa, 1e-12);
    }
}

TEST(Zeta, Values) {
    EXPECT_EQ(zeta(0.0), 0.0);
    EXPECT_NEAR(zeta(-1.0), -0.63212, 1e-5);
    EXPECT_GT(zeta(-5.0), -1.0);
}

TEST(CaseGeneration, DefaultSizesAndDeterminism) {
    const GridCase a = generate_case(11), b = generate_case(11);
    EXPECT_EQ(nlohmann::json(a).dump(), nlohmann::json(b).dump());
    EXPECT_NE(nlohmann::json(a).dump(), nlohmann::json(generate_case(12)).dump());
    EXPECT_EQ(a.buses.size(), 126u);
    EXPECT_EQ(a.generators.size(), 54u);
    EXPECT_EQ(a.branches.size(), 185u);
    EXPECT_EQ(a.loads.size(), 91u);
    EXPECT_EQ(a.renewable_count(), 18u);
    std::map<double, int> by_pmax;
    for (const auto& g : a.generators)
        if (g.type == GenType::thermal) ++by_pmax[g.p_max];
    EXPECT_EQ(by_pmax[110.0], 12);
    EXPECT_EQ(by_pmax[128.0], 10);
    EXPECT_EQ(by_pmax[140.0], 14);
    EXPECT_EQ(a.generators[a.slack_gen].p_max, 140.0);
    EXPECT_NO_THROW(validate_case(a));
}

TEST(CaseGeneration, MinimalCase) {
    const GridCase c = generate_case(5, {.buses = 2, .generators = 1, .branches = 1, .loads = 1, .renewables = 0});
    EXPECT_EQ(c.buses.size(), 2u);
    EXPECT_EQ(c.generators.size(), 1u);
    EXPECT_NO_THROW(validate_case(c));
    EXPECT_THROW(generate_case(5, {.buses = 4, .generators = 1, .branches = 2, .loads = 1, .renewables = 0}), CaseError);
}

TEST(CaseFiles, RoundTripAndValidation) {
    const GridCase c = generate_case(7);
    const auto path = (std::filesystem::temp_directory_path() / "gp_case.json").string();
    save_case(path, c);
    const GridCase back = load_case(path);
    EXPECT_EQ(nlohmann::json(back).dump(), nlohmann::json(c).dump());
    auto doc = nlohmann::json(c);
    for (const char* key : {"buses", "branches", "generators", "loads"}) EXPECT_TRUE(doc.contains(key));

    GridCase broken = c;
    broken.branches.resize(10);  // strands most buses
    EXPECT_THROW(validate_case(broken), CaseError);
    broken = c;
    broken.generators[3].p_min = broken.generators[3].p_max + 1.0;
    EXPECT_THROW(validate_case(broken), CaseError);
    std::ofstream(path) << "{\"buses\": 3}";
    EXPECT_THROW(load_case(path), CaseError);
}

TEST(Environment, HoldingOutputUnderLightLoadKeepsRunning) {
    GridEnv env(small_env_case(60.0), constant_availability(10, 10.0));
    env.reset(0);
    const auto r = env.step(env.output());
    EXPECT_FALSE(r.done) << r.reason;
    EXPECT_GT(r.reward.s_b, 0.9);
    EXPECT_TRUE(r.ramp_ok);
}

TEST(Environment, OverfeedingTripsSlackLimit) {
    GridEnv env(small_env_case(60.0), constant_availability(10, 100.0));
    env.reset(0);
    auto act = env.output();
    act[2] = 100.0;
    act[1] = 110.0;
    const auto r = env.step(act);
    EXPECT_TRUE(r.done);
    EXPECT_EQ(r.reason, "slack-limit");
}

TEST(Environment, RewardIsSumOfComponents) {
    GridEnv env(small_env_case(60.0), constant_availability(10, 30.0));
    env.reset(0);
    auto act = env.output();
    act[2] = 20.0;
    const auto r = env.step(act);
    const auto& b = r.reward;
    EXPECT_NEAR(b.reward, b.s_b + b.zeta_s_r + b.zeta_s_v + b.zeta_cost + 2.0 * b.r, 1e-12);
    EXPECT_NEAR(b.r, 20.0 / 30.0, 1e-12);
}

TEST(Environment, RampIsEnforcedOnThermalUnits) {
    GridEnv env(small_env_case(120.0), constant_availability(10, 10.0));
    env.reset(0);
    const double before = env.output()[1];
    auto act = env.output();
    act[1] = 110.0;
    const auto r = env.step(act);
    EXPECT_TRUE(r.ramp_ok);
    EXPECT_NEAR(env.output()[1], std::min(110.0, before + 0.05 * 110.0), 1e-12);
    act = env.output();
    act[1] = 0.5;  // below P_min, not a shutdown
    env.step(act);
    EXPECT_GE(env.output()[1], 15.0);
    EXPECT_EQ(env.status()[1], 1);
}

TEST(Environment, MalformedActionRejected) {
    GridEnv env(small_env_case(60.0), constant_availability(10, 10.0));
    env.reset(0);
    EXPECT_THROW(env.step({1.0, 2.0}), std::invalid_argument);
    EXPECT_THROW(env.step({1.0, std::nan(""), 3.0}), std::invalid_argument);
}

TEST(Environment, SeriesEndTerminates) {
    GridEnv env(small_env_case(60.0), constant_availability(5, 10.0));
    env.reset(3);
    const auto r = env.step(env.output());
    EXPECT_TRUE(r.done);
    EXPECT_EQ(r.reason, "series-end");
    EXPECT_FALSE(is_failure(r.reason));
}

TEST(Environment, DeterministicAndBoundedOnDefaultCase) {
    GridCase c = generate_case(1);
    const auto s = synth_series(2024, 18, 400);
    fit_renewable_capacity(c, s);
    GridEnv a(c, s), b(c, s);
    EXPECT_EQ(flatten(a.reset(300)), flatten(b.reset(300)));
    EXPECT_EQ(flatten(a.reset(300)).size(), observation_length(c));
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> jitter(-5.0, 5.0);
    for (int t = 0; t < 20; ++t) {
        auto act = a.output();
        for (auto& x : act) x = std::max(0.0, x + jitter(rng));
        const auto ra = a.step(act), rb = b.step(act);
        EXPECT_EQ(ra.reward.reward, rb.reward.reward);
        EXPECT_TRUE(ra.ramp_ok);
        if (!ra.reason.empty() && ra.reason == "pf-diverged") break;
        EXPECT_GT(ra.reward.reward, -3.0);
        EXPECT_LE(ra.reward.reward, 3.0);
        if (ra.done) break;
    }
}

TEST(EpisodeScores, Accumulation) {
    RewardBreakdown only_sb;
    only_sb.s_b = 1.0;
    only_sb.reward = 1.0;
    auto one = episode_scores({only_sb});
    EXPECT_EQ(one.total_reward, 1.0);
    EXPECT_EQ(one.security, 1.0);
    EXPECT_EQ(one.steps, 1u);

    RewardBreakdown r = compose_reward({0.6, -0.2, 0.0}, 30000.0, 50000.0, 0.9, 2.0);
    const auto s1 = episode_scores({r}), s2 = episode_scores({r, r});
    EXPECT_DOUBLE_EQ(s2.total_reward, 2.0 * s1.total_reward);
    EXPECT_DOUBLE_EQ(s2.security, 2.0 * s1.security);
    EXPECT_DOUBLE_EQ(s2.avg_cost, s1.avg_cost);
    EXPECT_DOUBLE_EQ(s2.avg_urre, s1.avg_urre);
    EXPECT_THROW(episode_scores({}), std::invalid_argument);

    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<RewardBreakdown> trace;
    double total = 0, sec = 0, cost = 0, urre = 0;
    for (int t = 0; t < 50; ++t) {
        auto b = compose_reward({u(rng), -u(rng), -0.1 * u(rng)}, 40000 * u(rng), 50000.0, u(rng), 2.0);
        trace.push_back(b);
        total += b.reward;
        sec += b.s_b + std::expm1(b.s_r) + std::expm1(b.s_v);
        cost += b.cost;
        urre += b.r;
    }
    const auto s = episode_scores(trace);
    EXPECT_NEAR(s.total_reward, total, 1e-9);
    EXPECT_NEAR(s.security, sec, 1e-9);
    EXPECT_NEAR(s.avg_cost, cost / 50, 1e-9);
    EXPECT_NEAR(s.avg_urre, urre / 50, 1e-12);
}
