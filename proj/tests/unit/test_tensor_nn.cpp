#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "edglab/error.hpp"
#include "edglab/tensor_nn.hpp"
#include "oracles.hpp"

using namespace edglab;
using nn::Mat;
using nn::MlpParams;

namespace {

Mat random_mat(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Mat m(r, c);
    for (auto& v : m.values()) v = rng.uniform(lo, hi);
    return m;
}

MlpParams random_net(std::initializer_list<std::size_t> dims, std::uint64_t seed) {
    Rng rng(seed);
    auto net = nn::make_mlp(dims, rng);
    for (auto& l : net.layers)
        for (auto& b : l.bias) b = rng.uniform(-0.3, 0.3);
    return net;
}

}  // namespace

// ---------------------------------------------------------------- forward

TEST(MlpForward, IdentityLayerReturnsInput) {
    MlpParams net{{nn::Layer{Mat::identity(3), {0.0, 0.0, 0.0}}}};
    const auto x = Mat::from_rows({{1.5, -2.0, 0.25}, {0.0, 3.0, -1.0}});
    EXPECT_EQ(nn::mlp_forward(net, x).first, x);
}

TEST(MlpForward, NegativePreActivationsGiveZeroHiddenOutput) {
    // hidden layer with all pre-activations negative, identity readout
    MlpParams net{{nn::Layer{Mat::from_rows({{1.0, 1.0}, {2.0, 0.5}}), {-10.0, -10.0}},
                   nn::Layer{Mat::identity(2), {0.0, 0.0}}}};
    const auto [y, cache] = nn::mlp_forward(net, Mat::from_rows({{1.0, 2.0}, {-3.0, 0.5}}));
    for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(MlpForward, MatchesLoopOracle) {
    Rng rng(1);
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto net = random_net({5, 7, 3}, s);
        const auto x = random_mat(9, 5, rng);
        const auto got = nn::mlp_forward(net, x).first;
        const auto want = oracle::forward(net, x);
        for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got.values()[i], want.values()[i], 1e-12);
    }
}

TEST(MlpForward, RejectsWrongWidth) {
    const auto net = random_net({4, 2}, 0);
    EXPECT_THROW(nn::mlp_forward(net, Mat(3, 5)), ShapeError);
}

// ---------------------------------------------------------------- backward

TEST(MlpBackward, ZeroOutputGradGivesZeroGrads) {
    Rng rng(2);
    const auto net = random_net({3, 6, 2}, 4);
    const auto [y, cache] = nn::mlp_forward(net, random_mat(5, 3, rng));
    const auto [g, dx] = nn::mlp_backward(net, cache, Mat(5, 2));
    EXPECT_EQ(g, nn::zeros_like(net));
    for (double v : dx.values()) EXPECT_EQ(v, 0.0);
}

TEST(MlpBackward, LinearSumLossGivesColumnSums) {
    Rng rng(3);
    const auto net = random_net({4, 3}, 8);
    const auto x = random_mat(6, 4, rng);
    const auto [y, cache] = nn::mlp_forward(net, x);
    const auto [g, dx] = nn::mlp_backward(net, cache, Mat(6, 3, 1.0));
    for (std::size_t o = 0; o < 3; ++o) {
        EXPECT_DOUBLE_EQ(g.layers[0].bias[o], 6.0);
        for (std::size_t k = 0; k < 4; ++k) {
            double col = 0.0;
            for (std::size_t i = 0; i < 6; ++i) col += x(i, k);
            EXPECT_NEAR(g.layers[0].weight(o, k), col, 1e-12);
        }
    }
    // d/dx of sum(W x + b) is the column sum of W for every row
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t k = 0; k < 4; ++k) {
            double s = 0.0;
            for (std::size_t o = 0; o < 3; ++o) s += net.layers[0].weight(o, k);
            EXPECT_NEAR(dx(i, k), s, 1e-12);
        }
}

class FiniteDifference : public ::testing::TestWithParam<std::vector<std::size_t>> {};

TEST_P(FiniteDifference, ParameterAndInputGradients) {
    const auto dims = GetParam();
    Rng rng(derive_seed({dims.size(), dims.front(), dims.back()}));
    auto net = nn::make_mlp(dims, rng);
    for (auto& l : net.layers)
        for (auto& b : l.bias) b = rng.uniform(-0.2, 0.2);
    const auto x = random_mat(4, dims.front(), rng);
    const auto w = random_mat(4, dims.back(), rng);  // loss = sum(w .* y)
    auto loss = [&] {
        const auto y = oracle::forward(net, x);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += w.values()[i] * y.values()[i];
        return s;
    };
    const auto [y, cache] = nn::mlp_forward(net, x);
    const auto [g, dx] = nn::mlp_backward(net, cache, w);
    EXPECT_LT(oracle::max_fd_error(net, g, loss), 1e-4);

    auto xx = x;
    auto loss_x = [&] {
        const auto yy = oracle::forward(net, xx);
        double s = 0.0;
        for (std::size_t i = 0; i < yy.size(); ++i) s += w.values()[i] * yy.values()[i];
        return s;
    };
    double worst = 0.0;
    for (std::size_t i = 0; i < xx.size(); ++i) {
        const double keep = xx.values()[i];
        xx.values()[i] = keep + 1e-5;
        const double up = loss_x();
        xx.values()[i] = keep - 1e-5;
        const double down = loss_x();
        xx.values()[i] = keep;
        worst = std::max(worst, oracle::rel_err((up - down) / 2e-5, dx.values()[i]));
    }
    EXPECT_LT(worst, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Architectures, FiniteDifference,
                         ::testing::Values(std::vector<std::size_t>{2, 16}, std::vector<std::size_t>{2, 2},
                                           std::vector<std::size_t>{3, 8, 2}, std::vector<std::size_t>{6, 10, 7, 4},
                                           std::vector<std::size_t>{20, 12, 6, 5}));

TEST(MlpBackward, SkippingInputGradLeavesParameterGradsUnchanged) {
    Rng rng(4);
    const auto net = random_net({8, 5, 3}, 1);
    const auto x = random_mat(7, 8, rng);
    const auto dy = random_mat(7, 3, rng);
    const auto [y, cache] = nn::mlp_forward(net, x);
    const auto full = nn::mlp_backward(net, cache, dy);
    const auto lean = nn::mlp_backward(net, cache, dy, false);
    EXPECT_EQ(full.first, lean.first);
    EXPECT_EQ(lean.second.size(), 0u);
}

// ---------------------------------------------------------------- kernels

TEST(SqEuclidean, KnownValues) {
    const std::vector<double> a{1.0, -2.0, 3.5};
    EXPECT_EQ(nn::sq_euclidean(a, a), 0.0);
    EXPECT_EQ(nn::sq_euclidean(std::vector<double>{0, 0}, std::vector<double>{3, 4}), 25.0);
    EXPECT_THROW(nn::sq_euclidean(std::vector<double>{0}, std::vector<double>{1, 2}), ShapeError);
}

TEST(SqEuclidean, MatchesLoopOracle) {
    Rng rng(5);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> a(9), b(9);
        for (auto& v : a) v = rng.uniform(-5, 5);
        for (auto& v : b) v = rng.uniform(-5, 5);
        long double s = 0;
        for (int j = 0; j < 9; ++j) s += static_cast<long double>(a[j] - b[j]) * (a[j] - b[j]);
        EXPECT_NEAR(nn::sq_euclidean(a, b), static_cast<double>(s), 1e-12);
    }
}

TEST(LogSoftmax, EqualInputsAreUniform) {
    const auto lp = nn::log_softmax_from_neg_dists(std::vector<double>{-2.0, -2.0, -2.0, -2.0});
    for (double v : lp) EXPECT_NEAR(v, std::log(0.25), 1e-15);
}

TEST(LogSoftmax, ExtremeGapStaysFinite) {
    const auto lp = nn::log_softmax_from_neg_dists(std::vector<double>{0.0, -1000.0});
    EXPECT_NEAR(lp[0], 0.0, 1e-300);
    EXPECT_NEAR(lp[1], -1000.0, 1e-9);
    EXPECT_TRUE(std::isfinite(lp[1]));
    EXPECT_NEAR(std::exp(lp[0]), 1.0, 1e-15);
}

TEST(LogSoftmax, MatchesNaiveAndNormalises) {
    Rng rng(6);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> v(5);
        for (auto& x : v) x = rng.uniform(-8, 3);
        const auto lp = nn::log_softmax_from_neg_dists(v);
        const double lse = oracle::log_sum_exp_naive(v);
        double total = 0.0;
        for (std::size_t k = 0; k < 5; ++k) {
            EXPECT_NEAR(lp[k], v[k] - lse, 1e-10);
            EXPECT_GT(std::exp(lp[k]), 0.0);
            EXPECT_LE(std::exp(lp[k]), 1.0);
            total += std::exp(lp[k]);
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(CrossEntropy, MatchesNaiveAndGradient) {
    Rng rng(7);
    const auto logits = random_mat(6, 4, rng, -3, 3);
    const std::vector<std::size_t> y{0, 3, 1, 1, 2, 0};
    const auto [loss, grad] = nn::cross_entropy(logits, y);
    double want = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
        const std::vector<double> row(logits.row(i).begin(), logits.row(i).end());
        want += oracle::log_sum_exp_naive(row) - row[y[i]];
    }
    EXPECT_NEAR(loss, want / 6.0, 1e-12);
    auto l2 = logits;
    for (std::size_t i = 0; i < l2.size(); ++i) {
        const double keep = l2.values()[i];
        l2.values()[i] = keep + 1e-6;
        const double up = nn::cross_entropy(l2, y).first;
        l2.values()[i] = keep - 1e-6;
        const double down = nn::cross_entropy(l2, y).first;
        l2.values()[i] = keep;
        EXPECT_NEAR((up - down) / 2e-6, grad.values()[i], 1e-8);
    }
    EXPECT_THROW(nn::cross_entropy(logits, std::vector<std::size_t>{0, 1}), ShapeError);
}

TEST(Argmax, TiesGoToLowestIndex) {
    EXPECT_EQ(nn::argmax(std::vector<double>{2.0, 1.0}), 0u);
    EXPECT_EQ(nn::argmax(std::vector<double>{1.0, 1.0}), 0u);
    EXPECT_EQ(nn::argmax(std::vector<double>{0.0, 3.0, 3.0}), 1u);
}

// ---------------------------------------------------------------- optimizers

namespace {

MlpParams scalar_param(double p) { return MlpParams{{nn::Layer{Mat(1, 1, p), {0.0}}}}; }

nn::Grads scalar_grad(double g) { return nn::Grads{{nn::Layer{Mat(1, 1, g), {0.0}}}}; }

}  // namespace

TEST(Optimizer, SgdStep) {
    auto p = scalar_param(1.0);
    auto st = nn::make_optim_state({nn::OptimKind::Sgd, 0.1}, p);
    nn::optim_step(st, p, scalar_grad(2.0));
    EXPECT_NEAR(p.layers[0].weight(0, 0), 0.8, 1e-15);
    nn::optim_step(st, p, scalar_grad(0.0));
    EXPECT_NEAR(p.layers[0].weight(0, 0), 0.8, 1e-15);
}

TEST(Optimizer, AdamZeroGradientIsNoOp) {
    auto p = scalar_param(1.0);
    auto st = nn::make_optim_state({nn::OptimKind::Adam, 0.1}, p);
    nn::optim_step(st, p, scalar_grad(0.0));
    EXPECT_EQ(p.layers[0].weight(0, 0), 1.0);
}

TEST(Optimizer, AdamMatchesReferenceRecursionOnQuadratic) {
    const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    auto p = scalar_param(1.0);
    auto st = nn::make_optim_state({nn::OptimKind::Adam, lr, b1, b2, eps}, p);
    double q = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 100; ++t) {
        const double g = 2.0 * q;  // d/dp p^2
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        q -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
        nn::optim_step(st, p, scalar_grad(2.0 * p.layers[0].weight(0, 0)));
        ASSERT_NEAR(p.layers[0].weight(0, 0), q, 1e-14) << "step " << t;
    }
    EXPECT_LT(std::abs(p.layers[0].weight(0, 0)), 0.1);
}

TEST(Optimizer, RejectsBadInputs) {
    auto p = scalar_param(1.0);
    EXPECT_THROW(nn::make_optim_state({nn::OptimKind::Sgd, 0.0}, p), ConfigError);
    auto st = nn::make_optim_state({nn::OptimKind::Adam, 0.1}, p);
    EXPECT_THROW(nn::optim_step(st, p, scalar_grad(std::numeric_limits<double>::quiet_NaN())), OptimizerError);
    EXPECT_THROW(nn::optim_step(st, p, scalar_grad(std::numeric_limits<double>::infinity())), OptimizerError);
    EXPECT_EQ(p.layers[0].weight(0, 0), 1.0);
}

// ---------------------------------------------------------------- init and persistence

TEST(MakeMlp, ShapesBoundsAndDeterminism) {
    Rng a(10), b(10);
    const auto n1 = nn::make_mlp({10, 20, 3}, a);
    const auto n2 = nn::make_mlp({10, 20, 3}, b);
    EXPECT_EQ(n1, n2);
    EXPECT_EQ(n1.dims(), (std::vector<std::size_t>{10, 20, 3}));
    for (double w : n1.layers[0].weight.values()) EXPECT_LE(std::abs(w), std::sqrt(6.0 / 10.0));
    for (double w : n1.layers[1].weight.values()) EXPECT_LE(std::abs(w), std::sqrt(3.0 / 20.0));
    for (double v : n1.layers[0].bias) EXPECT_EQ(v, 0.0);
    Rng c(0);
    EXPECT_THROW(nn::make_mlp({4}, c), ShapeError);
}

TEST(Checkpoint, RoundTripIsExact) {
    const std::vector<MlpParams> nets{random_net({3, 5, 2}, 1), random_net({3, 5, 2}, 2)};
    const auto bytes = nn::encode_checkpoint(nets);
    EXPECT_EQ(nn::decode_checkpoint(bytes), nets);
    const auto path = (std::filesystem::temp_directory_path() / "edglab_ckpt_test.bin").string();
    nn::save_checkpoint(path, nets);
    EXPECT_EQ(nn::load_checkpoint(path), nets);
    std::filesystem::remove(path);
}

TEST(Checkpoint, MalformedInputsReportOffsets) {
    const std::vector<MlpParams> nets{random_net({2, 2}, 3)};
    auto bytes = nn::encode_checkpoint(nets);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    try {
        nn::decode_checkpoint(bad_magic, "m.ckpt");
        FAIL();
    } catch (const IngestionError& e) {
        EXPECT_EQ(e.offset(), 0u);
        EXPECT_EQ(e.path(), "m.ckpt");
    }
    try {
        nn::decode_checkpoint(bytes.substr(0, bytes.size() - 3), "t.ckpt");
        FAIL();
    } catch (const IngestionError& e) {
        EXPECT_GT(e.offset(), 16u);
    }
    EXPECT_THROW(nn::decode_checkpoint(bytes + "z"), IngestionError);
    EXPECT_THROW(nn::load_checkpoint("/nonexistent/edglab.ckpt"), IngestionError);
}

TEST(Fnv1a, KnownVectors) {
    EXPECT_EQ(nn::fnv1a64(""), 0xcbf29ce484222325ULL);
    EXPECT_EQ(nn::fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
    EXPECT_EQ(nn::fnv1a64("foobar"), 0x85944171f73967e8ULL);
}
