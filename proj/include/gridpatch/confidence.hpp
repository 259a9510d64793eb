#pragma once

// Confidence-weighted blending of recent forecast snapshots.
//
// A snapshot issued d days ago (1 <= d <= 5) has already been checked against
// d realized days. Each day counts as correct when the RMSE over units is
// below mu. With m correct and n incorrect days,
//
//   con = m * log10(d + 1) / (m + n),   lambda_i = con_i / sum_j con_j
//
// and the blended forecast for days t0+1..t0+F is sum_i lambda_i * rows of
// snapshot i covering those days.

#include <array>
#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gridpatch/data.hpp"
#include "gridpatch/forecast.hpp"

namespace gridpatch {

inline constexpr std::size_t kEnsembleSize = 5;
inline constexpr double kDefaultMu = 5.0;

class PoolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline double day_rmse(std::span<const double> pred, std::span<const double> real) {
    if (pred.size() != real.size())
        throw ShapeError("judge_day: prediction has " + std::to_string(pred.size()) + " units, realized row has " +
                         std::to_string(real.size()));
    if (pred.empty()) throw ShapeError("judge_day: empty row");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - real[i]) * (pred[i] - real[i]);
    return std::sqrt(s / static_cast<double>(pred.size()));
}

/// True when the day's RMSE over units is strictly below mu.
inline bool judge_day(std::span<const double> pred, std::span<const double> real, double mu = kDefaultMu) {
    if (!(mu > 0.0)) throw std::invalid_argument("judge_day: mu must be positive");
    return day_rmse(pred, real) < mu;
}

struct ConfidenceRecord {
    std::size_t issue_time = 0;
    std::size_t d = 0;
    std::size_t m = 0;
    std::size_t n = 0;
    double con = 0.0;
    double lambda = 0.0;
};

inline double confidence_value(std::size_t m, std::size_t n, std::size_t d) {
    if (m + n == 0) return 0.0;
    return static_cast<double>(m) * std::log10(static_cast<double>(d) + 1.0) / static_cast<double>(m + n);
}

/// Judges the snapshot on each realized day issue_time+1 .. t0.
inline ConfidenceRecord score_snapshot(const PredictionSnapshot& snap, const RenewableSeries& realized, std::size_t t0,
                                       double mu = kDefaultMu) {
    if (t0 <= snap.issue_time || t0 - snap.issue_time > kEnsembleSize)
        throw std::invalid_argument("score_snapshot: snapshot age " +
                                    std::to_string(static_cast<long long>(t0) - static_cast<long long>(snap.issue_time)) +
                                    " outside [1, 5]");
    if (t0 >= realized.num_days) throw std::out_of_range("score_snapshot: day " + std::to_string(t0) + " not realized");
    ConfidenceRecord r;
    r.issue_time = snap.issue_time;
    r.d = t0 - snap.issue_time;
    for (std::size_t j = 1; j <= r.d; ++j) {
        const auto pred = snap.values.values().subspan((j - 1) * snap.values.cols(), snap.values.cols());
        if (judge_day(pred, realized.row(snap.issue_time + j), mu))
            ++r.m;
        else
            ++r.n;
    }
    r.con = confidence_value(r.m, r.n, r.d);
    return r;
}

/// Fills lambda on each record. With no positive confidence all weight goes
/// to the last record (the newest snapshot).
inline std::vector<double> normalize(std::vector<ConfidenceRecord>& records) {
    if (records.size() != kEnsembleSize)
        throw std::invalid_argument("normalize: expected 5 records, got " + std::to_string(records.size()));
    double total = 0.0;
    for (const auto& r : records) total += r.con;
    std::vector<double> lambda(records.size(), 0.0);
    if (total > 0.0) {
        for (std::size_t i = 0; i < records.size(); ++i) lambda[i] = records[i].con / total;
    } else {
        lambda.back() = 1.0;
    }
    for (std::size_t i = 0; i < records.size(); ++i) records[i].lambda = lambda[i];
    return lambda;
}

/// Storage pool of snapshots keyed by issue day.
class SnapshotPool {
public:
    explicit SnapshotPool(std::size_t capacity = kEnsembleSize + 1) : capacity_(capacity) {
        if (capacity < kEnsembleSize) throw std::invalid_argument("snapshot pool capacity must be at least 5");
    }

    /// Starts a fresh sequence whose first decision day is `origin`.
    void reset(std::size_t origin) {
        snaps_.clear();
        origin_ = origin;
    }
    std::size_t origin() const noexcept { return origin_; }

    void store(PredictionSnapshot snap) {
        snaps_.insert_or_assign(snap.issue_time, std::move(snap));
        while (snaps_.size() > capacity_) snaps_.erase(snaps_.begin());
    }
    bool contains(std::size_t issue_time) const { return snaps_.count(issue_time) != 0; }
    const PredictionSnapshot& at(std::size_t issue_time) const {
        auto it = snaps_.find(issue_time);
        if (it == snaps_.end()) throw PoolError("snapshot pool: no snapshot issued on day " + std::to_string(issue_time));
        return it->second;
    }
    std::size_t size() const noexcept { return snaps_.size(); }
    std::size_t capacity() const noexcept { return capacity_; }

private:
    std::size_t capacity_;
    std::size_t origin_ = 0;
    std::map<std::size_t, PredictionSnapshot> snaps_;
};

/// sum_i lambda_i * rows [ages_i, ages_i + length) of snapshot i.
inline Tensor blend_snapshots(const std::vector<const Tensor*>& snaps, const std::vector<std::size_t>& ages,
                              const std::vector<double>& lambda, std::size_t length) {
    if (snaps.empty() || snaps.size() != ages.size() || snaps.size() != lambda.size())
        throw std::invalid_argument("blend_snapshots: mismatched inputs");
    const std::size_t units = snaps[0]->cols();
    Tensor out(Shape{length, units});
    for (std::size_t i = 0; i < snaps.size(); ++i) {
        if (ages[i] + length > snaps[i]->dim(0))
            throw std::invalid_argument("blend_snapshots: snapshot too short for age " + std::to_string(ages[i]));
        if (lambda[i] == 0.0) continue;
        for (std::size_t r = 0; r < length; ++r)
            for (std::size_t c = 0; c < units; ++c) out(r, c) += lambda[i] * (*snaps[i])(ages[i] + r, c);
    }
    return out;
}

struct ConformerOptions {
    double mu = kDefaultMu;
    std::size_t length = 10;  // rows of the final forecast
};

struct ConformerResult {
    Tensor forecast;                        // length x n_new
    bool warm = false;                      // false while fewer than five past snapshots exist
    std::vector<ConfidenceRecord> records;  // oldest first; empty when not warm
};

/// Issues the day-t0 snapshot into the pool and returns the final forecast for
/// t0+1 .. t0+length. During the first five days after the pool origin the
/// fresh snapshot is returned directly.
inline ConformerResult conformer_predict(std::size_t t0, SnapshotPool& pool, const ForecastModel& model,
                                         const RenewableSeries& realized, const ConformerOptions& opt = {}) {
    if (opt.length == 0 || opt.length + kEnsembleSize > model.config().horizon)
        throw std::invalid_argument("conformer_predict: final length " + std::to_string(opt.length) +
                                    " needs a forecast horizon of at least length + 5");
    if (t0 < pool.origin()) throw std::invalid_argument("conformer_predict: day precedes the pool origin");
    PredictionSnapshot fresh = issue_snapshot(model, realized, t0);
    ConformerResult res;
    if (t0 - pool.origin() < kEnsembleSize) {
        res.forecast = Tensor(Shape{opt.length, fresh.values.cols()},
                              std::vector<double>(fresh.values.storage().begin(),
                                                  fresh.values.storage().begin() +
                                                      static_cast<std::ptrdiff_t>(opt.length * fresh.values.cols())));
        pool.store(std::move(fresh));
        return res;
    }
    pool.store(std::move(fresh));
    std::vector<const Tensor*> snaps;
    std::vector<std::size_t> ages;
    for (std::size_t d = kEnsembleSize; d >= 1; --d) {
        const auto& s = pool.at(t0 - d);
        res.records.push_back(score_snapshot(s, realized, t0, opt.mu));
        snaps.push_back(&s.values);
        ages.push_back(d);
    }
    const auto lambda = normalize(res.records);
    res.forecast = blend_snapshots(snaps, ages, lambda, opt.length);
    res.warm = true;
    return res;
}

}  // namespace gridpatch
