#pragma once

// Dispatching necessity: only the n_dis generators whose proposed change
// scores highest are moved; the rest keep their previous set-point.
//
//   D_i = w_P |dP_i|' + (phi_R - R_i) dP_i + (phi_L - L_i) dP_i
//
// |dP|' is the min-max normalized magnitude, R_i the unit's utilization and
// L_i the worst loading ratio among branches at the unit's bus. The first
// term is dimensionless while the other two scale with MW; that mix is kept
// as written.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gridpatch {

struct NecessityConfig {
    double omega_p = 1.0;
    double phi_r = 0.8;
    double phi_l = 0.8;
    std::size_t n_dis = 40;

    void validate(std::size_t n_gen) const {
        if (!(phi_r > 0.0 && phi_r < 1.0)) throw std::invalid_argument("necessity: phi_r must lie in (0, 1)");
        if (!(phi_l > 0.0 && phi_l < 1.0)) throw std::invalid_argument("necessity: phi_l must lie in (0, 1)");
        if (!std::isfinite(omega_p)) throw std::invalid_argument("necessity: omega_p must be finite");
        if (n_dis < 1 || n_dis > n_gen)
            throw std::invalid_argument("necessity: n_dis " + std::to_string(n_dis) + " outside [1, " +
                                        std::to_string(n_gen) + "]");
    }
};

struct NecessityScore {
    std::size_t id = 0;
    double delta = 0.0;       // MW
    double magnitude = 0.0;   // |dP|' in [0, 1]
    double utilization = 0.0;
    double branch_load = 0.0;
    double d = 0.0;
};

/// (|dP_i| - min) / (max - min); all zeros when every magnitude is equal.
inline std::vector<double> normalize_deltas(std::span<const double> delta) {
    std::vector<double> out(delta.size(), 0.0);
    if (delta.empty()) return out;
    double lo = std::abs(delta[0]), hi = lo;
    for (double x : delta) {
        lo = std::min(lo, std::abs(x));
        hi = std::max(hi, std::abs(x));
    }
    if (hi == lo) return out;
    for (std::size_t i = 0; i < delta.size(); ++i) out[i] = (std::abs(delta[i]) - lo) / (hi - lo);
    return out;
}

inline std::vector<NecessityScore> necessity_scores(std::span<const double> delta, std::span<const double> util,
                                                    std::span<const double> branch_load, const NecessityConfig& cfg) {
    if (util.size() != delta.size() || branch_load.size() != delta.size())
        throw std::invalid_argument("necessity_scores: lengths differ (dP " + std::to_string(delta.size()) + ", R " +
                                    std::to_string(util.size()) + ", L " + std::to_string(branch_load.size()) + ")");
    const auto mag = normalize_deltas(delta);
    std::vector<NecessityScore> out(delta.size());
    for (std::size_t i = 0; i < delta.size(); ++i) {
        auto& s = out[i];
        s.id = i;
        s.delta = delta[i];
        s.magnitude = mag[i];
        s.utilization = util[i];
        s.branch_load = branch_load[i];
        s.d = cfg.omega_p * mag[i] + (cfg.phi_r - util[i]) * delta[i] + (cfg.phi_l - branch_load[i]) * delta[i];
    }
    return out;
}

/// Ids of the (at most) n_dis highest-scoring units with a nonzero change,
/// highest first; ties go to the lower id. Units with dP = 0 are never picked
/// since moving them would not change the action.
inline std::vector<std::size_t> select_top(const std::vector<NecessityScore>& scores, std::size_t n_dis) {
    std::vector<std::size_t> ids;
    for (const auto& s : scores)
        if (s.delta != 0.0) ids.push_back(s.id);
    std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return scores[a].d > scores[b].d; });
    if (ids.size() > n_dis) ids.resize(n_dis);
    return ids;
}

inline std::vector<double> select_and_patch(std::span<const double> previous, std::span<const double> proposed,
                                            const std::vector<NecessityScore>& scores, std::size_t n_dis) {
    if (previous.size() != proposed.size() || scores.size() != proposed.size())
        throw std::invalid_argument("select_and_patch: lengths differ");
    if (n_dis > proposed.size()) throw std::invalid_argument("select_and_patch: n_dis exceeds generator count");
    std::vector<double> out(previous.begin(), previous.end());
    for (std::size_t id : select_top(scores, n_dis)) out[id] = proposed[id];
    return out;
}

struct PatchResult {
    std::vector<double> action;
    std::vector<std::size_t> selected;
    std::vector<NecessityScore> scores;
};

/// Scores proposed - previous and patches in one call.
inline PatchResult patch_action(std::span<const double> previous, std::span<const double> proposed,
                                std::span<const double> util, std::span<const double> branch_load,
                                const NecessityConfig& cfg) {
    if (previous.size() != proposed.size()) throw std::invalid_argument("patch_action: lengths differ");
    cfg.validate(proposed.size());
    std::vector<double> delta(proposed.size());
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = proposed[i] - previous[i];
    PatchResult r;
    r.scores = necessity_scores(delta, util, branch_load, cfg);
    r.selected = select_top(r.scores, cfg.n_dis);
    r.action.assign(previous.begin(), previous.end());
    for (std::size_t id : r.selected) r.action[id] = proposed[id];
    return r;
}

}  // namespace gridpatch
