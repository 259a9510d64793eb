#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "gridpatch/confidence.hpp"
#include "oracles.hpp"

using namespace gridpatch;

namespace {

RenewableSeries flat_series(std::size_t days, std::size_t units, double value) {
    RenewableSeries s;
    s.num_days = days;
    s.num_units = units;
    s.values.assign(days * units, value);
    return s;
}

PredictionSnapshot constant_snapshot(std::size_t issue, std::size_t units, double value) {
    return {issue, Tensor(Shape{15, units}, value)};
}

}  // namespace

TEST(JudgeDay, ExactMatchIsCorrect) {
    const std::vector<double> row{1, 2, 3};
    EXPECT_TRUE(judge_day(row, row));
}

TEST(JudgeDay, ErrorOfExactlyMuIsIncorrect) {
    const std::vector<double> pred(18, 10.0), real(18, 15.0);
    EXPECT_FALSE(judge_day(pred, real, 5.0));
    EXPECT_TRUE(judge_day(pred, real, 5.000001));
}

TEST(JudgeDay, MatchesScalarLoopOracle) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> d(0.0, 60.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> pred(18), real(18);
        for (std::size_t i = 0; i < 18; ++i) {
            pred[i] = d(rng);
            real[i] = pred[i] + (d(rng) - 30.0) / 4.0;
        }
        EXPECT_EQ(judge_day(pred, real, 5.0), oracle::rmse(pred, real) < 5.0);
    }
}

TEST(JudgeDay, RejectsMismatchedRows) {
    EXPECT_THROW(judge_day(std::vector<double>{1, 2}, std::vector<double>{1}), ShapeError);
    EXPECT_THROW(judge_day(std::vector<double>{1}, std::vector<double>{1}, 0.0), std::invalid_argument);
}

TEST(Confidence, DirectValues) {
    EXPECT_NEAR(confidence_value(1, 0, 1), 0.30103, 1e-5);
    EXPECT_NEAR(confidence_value(4, 1, 5), 0.8 * std::log10(6.0), 1e-15);
    EXPECT_NEAR(confidence_value(4, 1, 5), 0.62252, 1e-5);
    EXPECT_EQ(confidence_value(0, 3, 3), 0.0);
}

TEST(Confidence, BoundedAndMonotoneInHits) {
    for (std::size_t d = 1; d <= 5; ++d) {
        double prev = -1.0;
        for (std::size_t m = 0; m <= d; ++m) {
            const double c = confidence_value(m, d - m, d);
            EXPECT_GE(c, prev);
            EXPECT_GE(c, 0.0);
            EXPECT_LE(c, std::log10(6.0) + 1e-15);
            prev = c;
        }
    }
}

TEST(ScoreSnapshot, CountsEveryElapsedDay) {
    RenewableSeries real = flat_series(20, 2, 10.0);
    PredictionSnapshot snap = constant_snapshot(5, 2, 10.0);
    // Miss days 7 and 9 (rows 1 and 3) by 6 MW.
    for (std::size_t c = 0; c < 2; ++c) {
        snap.values(1, c) = 16.0;
        snap.values(3, c) = 4.0;
    }
    const auto r = score_snapshot(snap, real, 10);
    EXPECT_EQ(r.d, 5u);
    EXPECT_EQ(r.m, 3u);
    EXPECT_EQ(r.n, 2u);
    EXPECT_EQ(r.m + r.n, r.d);
    EXPECT_NEAR(r.con, 0.6 * std::log10(6.0), 1e-15);

    const auto r1 = score_snapshot(snap, real, 6);
    EXPECT_EQ(r1.d, 1u);
    EXPECT_EQ(r1.m, 1u);
    EXPECT_NEAR(r1.con, std::log10(2.0), 1e-15);
}

TEST(ScoreSnapshot, RejectsAgeOutsideWindow) {
    const RenewableSeries real = flat_series(20, 2, 10.0);
    const auto snap = constant_snapshot(5, 2, 10.0);
    EXPECT_THROW(score_snapshot(snap, real, 5), std::invalid_argument);
    EXPECT_THROW(score_snapshot(snap, real, 11), std::invalid_argument);
    EXPECT_THROW(score_snapshot(snap, real, 3), std::invalid_argument);
}

TEST(Normalize, Cases) {
    std::vector<ConfidenceRecord> equal(5, ConfidenceRecord{.con = 0.3});
    for (double l : normalize(equal)) EXPECT_DOUBLE_EQ(l, 0.2);

    std::vector<ConfidenceRecord> one(5);
    one[2].con = 0.4;
    EXPECT_EQ(normalize(one), (std::vector<double>{0, 0, 1, 0, 0}));
    EXPECT_EQ(one[2].lambda, 1.0);

    std::vector<ConfidenceRecord> none(5);
    EXPECT_EQ(normalize(none), (std::vector<double>{0, 0, 0, 0, 1}));

    std::vector<ConfidenceRecord> four(4);
    EXPECT_THROW(normalize(four), std::invalid_argument);
}

TEST(Normalize, WeightsFormSimplex) {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<std::size_t> hits(0, 5);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<ConfidenceRecord> recs(5);
        for (std::size_t i = 0; i < 5; ++i) {
            recs[i].d = 5 - i;
            recs[i].m = std::min(hits(rng), recs[i].d);
            recs[i].n = recs[i].d - recs[i].m;
            recs[i].con = confidence_value(recs[i].m, recs[i].n, recs[i].d);
        }
        const auto l = normalize(recs);
        double sum = 0.0;
        for (double x : l) {
            EXPECT_GE(x, 0.0);
            sum += x;
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(Pool, KeepsOneSnapshotPerDayAndEvictsOldest) {
    SnapshotPool pool;
    for (std::size_t t = 0; t < 10; ++t) pool.store(constant_snapshot(t, 1, static_cast<double>(t)));
    pool.store(constant_snapshot(9, 1, 99.0));
    EXPECT_EQ(pool.size(), 6u);
    EXPECT_FALSE(pool.contains(3));
    EXPECT_TRUE(pool.contains(4));
    EXPECT_EQ(pool.at(9).values(0, 0), 99.0);
    EXPECT_THROW(pool.at(2), PoolError);
    EXPECT_THROW(SnapshotPool(4), std::invalid_argument);
}

TEST(Blend, IdenticalSnapshotsIgnoreWeights) {
    std::mt19937_64 rng(3);
    const Tensor base = oracle::random_tensor({15, 3}, rng, 0, 50);
    std::vector<const Tensor*> snaps;
    std::vector<std::size_t> ages{5, 4, 3, 2, 1};
    // Snapshot of age d is shifted so that its rows for the shared days agree.
    std::vector<Tensor> shifted;
    for (std::size_t d : ages) {
        Tensor t(Shape{15, 3});
        for (std::size_t r = 0; r < 10; ++r)
            for (std::size_t c = 0; c < 3; ++c) t(d + r, c) = base(r, c);
        shifted.push_back(t);
    }
    for (const auto& t : shifted) snaps.push_back(&t);
    const Tensor out = blend_snapshots(snaps, ages, {0.1, 0.3, 0.2, 0.15, 0.25}, 10);
    for (std::size_t r = 0; r < 10; ++r)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out(r, c), base(r, c), 1e-12);
}

TEST(Blend, MatchesWeightedSumLoop) {
    std::mt19937_64 rng(4);
    std::vector<Tensor> raw;
    for (int i = 0; i < 5; ++i) raw.push_back(oracle::random_tensor({15, 4}, rng, 0, 50));
    std::vector<const Tensor*> snaps;
    for (const auto& t : raw) snaps.push_back(&t);
    const std::vector<std::size_t> ages{5, 4, 3, 2, 1};
    std::vector<double> lambda{0.05, 0.4, 0.1, 0.25, 0.2};
    const Tensor out = blend_snapshots(snaps, ages, lambda, 10);
    for (std::size_t r = 0; r < 10; ++r)
        for (std::size_t c = 0; c < 4; ++c) {
            double acc = 0.0;
            for (std::size_t i = 0; i < 5; ++i) acc += lambda[i] * raw[i](ages[i] + r, c);
            EXPECT_NEAR(out(r, c), acc, 1e-12);
        }
}

class ConformerTest : public ::testing::Test {
protected:
    void SetUp() override {
        series = synth_series(9, 3, 400);
        ForecastConfig c;
        c.num_units = 3;
        c.d_model = 16;
        c.heads = 1;
        model = ForecastModel(c);
        fit_normalization(model, make_windows(series, WindowConfig{}).train);
    }
    RenewableSeries series;
    ForecastModel model;
};

TEST_F(ConformerTest, ColdStartReturnsFreshSnapshot) {
    SnapshotPool pool;
    pool.reset(100);
    for (std::size_t t0 = 100; t0 < 104; ++t0) conformer_predict(t0, pool, model, series);
    const auto res = conformer_predict(103, pool, model, series);
    EXPECT_FALSE(res.warm);
    const Tensor fresh = issue_snapshot(model, series, 103).values;
    ASSERT_EQ(res.forecast.shape(), (Shape{10, 3}));
    for (std::size_t r = 0; r < 10; ++r)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(res.forecast(r, c), fresh(r, c));
}

TEST_F(ConformerTest, WarmForecastBlendsPastFiveSnapshots) {
    SnapshotPool pool;
    pool.reset(100);
    ConformerResult res;
    for (std::size_t t0 = 100; t0 <= 110; ++t0) res = conformer_predict(t0, pool, model, series);
    ASSERT_TRUE(res.warm);
    ASSERT_EQ(res.records.size(), 5u);
    Tensor expect(Shape{10, 3});
    for (std::size_t i = 0; i < 5; ++i) {
        const std::size_t d = 5 - i;
        EXPECT_EQ(res.records[i].issue_time, 110 - d);
        EXPECT_EQ(res.records[i].m + res.records[i].n, d);
        const Tensor snap = issue_snapshot(model, series, 110 - d).values;
        for (std::size_t r = 0; r < 10; ++r)
            for (std::size_t c = 0; c < 3; ++c) expect(r, c) += res.records[i].lambda * snap(d + r, c);
    }
    EXPECT_LE(max_abs_diff(res.forecast, expect), 1e-12);
}

TEST_F(ConformerTest, MissingSnapshotIsAnError) {
    SnapshotPool pool;
    pool.reset(100);
    for (std::size_t t0 = 100; t0 < 105; ++t0) conformer_predict(t0, pool, model, series);
    EXPECT_THROW(conformer_predict(107, pool, model, series), PoolError);
}

TEST_F(ConformerTest, EnsembleErrorBoundHolds) {
    SnapshotPool pool;
    pool.reset(300);
    for (std::size_t t0 = 300; t0 + 10 < 400; ++t0) {
        const auto res = conformer_predict(t0, pool, model, series);
        if (!res.warm) continue;
        const Tensor real = series.block(t0 + 1, 10);
        double weighted = 0.0, worst = 0.0;
        for (const auto& rec : res.records) {
            const std::size_t d = t0 - rec.issue_time;
            const Tensor& snap = pool.at(rec.issue_time).values;
            Tensor part(Shape{10, 3});
            for (std::size_t r = 0; r < 10; ++r)
                for (std::size_t c = 0; c < 3; ++c) part(r, c) = snap(d + r, c);
            const double e = rmse(part, real);
            weighted += rec.lambda * e;
            worst = std::max(worst, e);
        }
        EXPECT_LE(rmse(res.forecast, real), weighted + 1e-9);
        EXPECT_LE(weighted, worst + 1e-9);
    }
}
