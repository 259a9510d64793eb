#include <cstdio>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "gridpatch/graph.hpp"
#include "gridpatch/params.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace gridpatch;
using namespace fixture;

namespace {






}  // namespace

TEST(Autodiff, MatmulByIdentityIsNoOp) {
    Graph g;
    const Tensor a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    const NodeId out = g.matmul(g.constant(a), g.constant(Tensor::identity(3)));
    EXPECT_EQ(g.value(out), a);
}

TEST(Autodiff, SoftmaxOfZerosIsUniform) {
    Graph g;
    const NodeId out = g.softmax(g.constant(Tensor::vector({0, 0, 0})));
    for (double v : g.value(out).values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Autodiff, SoftmaxRowsAreSimplex) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        Graph g;
        const NodeId out = g.softmax(g.constant(oracle::random_tensor({4, 7}, rng, -30.0, 30.0)));
        const Tensor& y = g.value(out);
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < 7; ++c) {
                EXPECT_GE(y(r, c), 0.0);
                s += y(r, c);
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Autodiff, MaxpoolHalvesWithCeil) {
    Graph g;
    const NodeId out = g.maxpool1d(g.constant(Tensor(Shape{43, 2}, 1.0)));
    EXPECT_EQ(g.value(out).shape(), (Shape{22, 2}));
    Graph h;
    const NodeId out2 = h.maxpool1d(h.constant(Tensor(Shape{56, 3})));
    EXPECT_EQ(h.value(out2).shape(), (Shape{28, 3}));
}

TEST(Autodiff, ShapeMismatchNamesOpAndShapes) {
    Graph g;
    const NodeId a = g.constant(Tensor(Shape{2, 3}));
    const NodeId b = g.constant(Tensor(Shape{4, 3}));
    try {
        g.matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("matmul"), std::string::npos);
        EXPECT_NE(msg.find("[2,3]"), std::string::npos);
        EXPECT_NE(msg.find("[4,3]"), std::string::npos);
    }
    EXPECT_THROW(g.add(a, g.constant(Tensor::vector({1, 2}))), ShapeError);
    EXPECT_THROW(g.conv1d(a, g.constant(Tensor(Shape{3, 2, 2})), g.constant(Tensor::vector({0, 0}))), ShapeError);
}

TEST(Autodiff, SumOfSquaresGradient) {
    Graph g;
    const NodeId x = g.parameter(Tensor::vector({1.0, -2.0}));
    const NodeId loss = g.sum(g.mul(x, x));
    const Tensor grad = g.backward(loss).at(x);
    EXPECT_DOUBLE_EQ(grad[0], 2.0);
    EXPECT_DOUBLE_EQ(grad[1], -4.0);
}

TEST(Autodiff, ConstantLossGivesZeroGradient) {
    Graph g;
    const NodeId x = g.parameter(Tensor::vector({3.0, 4.0}));
    const NodeId c = g.sum(g.constant(Tensor::vector({1.0, 1.0})));
    const Gradients grads = g.backward(c);
    ASSERT_TRUE(grads.contains(x));
    EXPECT_EQ(grads.at(x), Tensor(Shape{2}));
}

TEST(Autodiff, NonScalarLossRejected) {
    Graph g;
    const NodeId x = g.parameter(Tensor::vector({3.0, 4.0}));
    EXPECT_THROW(g.backward(g.mul(x, x)), ShapeError);
}

TEST(Autodiff, EveryOpMatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(seed);
        for (const auto& c : random_cases(rng)) {
            const double err = max_op_gradient_error(c, rng);
            EXPECT_LT(err, 1e-4) << op_name(c.kind) << " seed " << seed;
        }
    }
}

TEST(Autodiff, RandomThreeLayerGraphMatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed + 1000);
        const Tensor x = oracle::random_tensor({4, 5}, rng);
        const Tensor w1 = oracle::random_tensor({5, 6}, rng), b1 = oracle::random_tensor({6}, rng);
        const Tensor w2 = oracle::random_tensor({6, 6}, rng), w3 = oracle::random_tensor({6, 2}, rng);
        const Tensor target = oracle::random_tensor({4, 2}, rng);
        auto loss_of = [&](const Tensor& first) {
            Graph g;
            NodeId h = g.gelu(g.add(g.matmul(g.constant(x), g.constant(first)), g.constant(b1)));
            h = g.tanh(g.matmul(h, g.constant(w2)));
            return g.value(g.mse_loss(g.matmul(h, g.constant(w3)), g.constant(target))).item();
        };
        Graph g;
        const NodeId p = g.parameter(w1);
        NodeId h = g.gelu(g.add(g.matmul(g.constant(x), p), g.constant(b1)));
        h = g.tanh(g.matmul(h, g.constant(w2)));
        const NodeId loss = g.mse_loss(g.matmul(h, g.constant(w3)), g.constant(target));
        EXPECT_LT(oracle::relative_error(g.backward(loss).at(p), oracle::finite_difference(loss_of, w1)), 1e-4);
    }
}

TEST(Autodiff, EvaluationIsDeterministic) {
    auto run = [] {
        std::mt19937_64 rng(42);
        Graph g;
        const NodeId x = g.parameter(oracle::random_tensor({6, 4}, rng));
        const NodeId w = g.parameter(oracle::random_tensor({3, 4, 4}, rng));
        const NodeId b = g.parameter(oracle::random_tensor({4}, rng));
        const NodeId y = g.maxpool1d(g.conv1d(g.softmax(x), w, b));
        const NodeId loss = g.sum(g.mul(y, y));
        return std::make_pair(g.value(y), g.backward(loss).at(w));
    };
    EXPECT_EQ(run(), run());
}

TEST(Sgd, StepAndEdgeCases) {
    std::vector<Tensor> p{Tensor::vector({1.0})};
    sgd_step(p, {Tensor::vector({2.0})}, 0.1);
    EXPECT_DOUBLE_EQ(p[0][0], 0.8);

    std::vector<Tensor> q{Tensor::vector({1.5, -2.0})};
    sgd_step(q, {Tensor::vector({0.0, 0.0})}, 0.3);
    EXPECT_EQ(q[0], Tensor::vector({1.5, -2.0}));

    EXPECT_THROW(sgd_step(q, {Tensor::vector({1.0})}, 0.1), ShapeError);
    EXPECT_THROW(sgd_step(q, {Tensor::vector({1.0, 1.0})}, 0.0), std::invalid_argument);
}

TEST(Sgd, TwoStepsEqualOneSummedStep) {
    std::vector<Tensor> a{Tensor::vector({0.25, -1.0, 3.0})};
    std::vector<Tensor> b = a;
    const Tensor g1 = Tensor::vector({1.0, 2.0, -4.0});
    const Tensor g2 = Tensor::vector({0.5, -1.0, 2.0});
    sgd_step(a, {g1}, 0.25);
    sgd_step(a, {g2}, 0.25);
    sgd_step(b, {Tensor::vector({1.5, 1.0, -2.0})}, 0.25);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a[0][i], b[0][i], 1e-15);
}

TEST(Checkpoint, RoundTripIsExact) {
    std::mt19937_64 rng(5);
    Checkpoint ckpt;
    ckpt.meta["kind"] = "test";
    ckpt.params.add("w", oracle::random_tensor({3, 4}, rng));
    ckpt.params.add("b", oracle::random_tensor({4}, rng, -1e-300, 1e300));
    const auto path = (std::filesystem::temp_directory_path() / "gridpatch_ckpt_test.json").string();
    save_checkpoint(path, ckpt);
    const Checkpoint back = load_checkpoint(path);
    EXPECT_EQ(back.params, ckpt.params);
    EXPECT_EQ(back.meta["kind"], "test");
    std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsWrongHeader) {
    nlohmann::json doc{{"format", "SOMETHING-ELSE"}, {"tensors", nlohmann::json::array()}};
    EXPECT_THROW(checkpoint_from_json(doc), std::runtime_error);
}
