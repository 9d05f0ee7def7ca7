#include <gtest/gtest.h>

#include <cmath>

#include "edglab/baselines.hpp"
#include "oracles.hpp"

using namespace edglab;
using namespace edglab::baselines;
using data::DomainData;
using data::Sample;

namespace {

DomainData linear_domain(std::size_t index, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    DomainData d{index, {}, 2};
    for (std::size_t i = 0; i < n; ++i) {
        const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
        // margin of 0.2 around a + b = 0
        if (std::abs(a + b) < 0.2) {
            --i;
            continue;
        }
        d.samples.push_back({{a, b}, a + b > 0 ? 1u : 0u});
    }
    return d;
}

}  // namespace

// ------------------------------------------------------------------ augmentation

TEST(Augment, NoneIsIdentity) {
    const std::vector<double> x{1.5, -2.0};
    EXPECT_EQ(augment_with_index(x, 2, IndexMode::None, 4), x);
}

TEST(Augment, HandExpandedExamples) {
    EXPECT_EQ(augment_with_index(std::vector<double>{5}, 1, IndexMode::OneHotConcat, 3),
              (std::vector<double>{5, 0, 1, 0}));
    const double a = 0.3, b = -7.0;
    EXPECT_EQ(augment_with_index(std::vector<double>{a, b}, 0, IndexMode::OuterProduct, 2),
              (std::vector<double>{a, 0, b, 0}));
    EXPECT_EQ(augment_with_index(std::vector<double>{1, 2}, 2, IndexMode::ScalarConcat, 5),
              (std::vector<double>{1, 2, 0.5}));
    EXPECT_THROW(augment_with_index(std::vector<double>{1}, 3, IndexMode::OneHotConcat, 3), ConfigError);
}

TEST(Augment, OuterProductIsRowMajorKronecker) {
    // x (x) e_i laid out row-major over x: entry (r, j) = x_r * [j == i]
    const std::vector<double> x{2, 3, 4};
    for (std::size_t i = 0; i < 3; ++i) {
        const auto out = augment_with_index(x, i, IndexMode::OuterProduct, 3);
        ASSERT_EQ(out.size(), 9u);
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(out[r * 3 + j], j == i ? x[r] : 0.0);
    }
}

TEST(Augment, TargetIndexPolicy) {
    ErmModel m{nn::MlpParams{}, IndexMode::ScalarConcat, 5, 1, 2};
    EXPECT_EQ(erm_input(m, std::vector<double>{7}, 5), (std::vector<double>{7, 1.25}));
    m.index_mode = IndexMode::OneHotConcat;
    EXPECT_EQ(erm_input(m, std::vector<double>{7}, 5), (std::vector<double>{7, 0, 0, 0, 0, 1}));
    m.index_mode = IndexMode::OuterProduct;
    EXPECT_EQ(erm_input(m, std::vector<double>{7}, 9), (std::vector<double>{0, 0, 0, 0, 7}));
}

// ------------------------------------------------------------------ prediction

TEST(PredictErm, LogitRuleAndTies) {
    // single linear layer on a 1-d input: logits = W x
    ErmModel m{nn::MlpParams{{nn::Layer{nn::Mat::from_rows({{2.0}, {1.0}}), {0.0, 0.0}}}}, IndexMode::None, 1, 1, 2};
    EXPECT_EQ(predict_erm(m, std::vector<double>{1.0}, 0), 0u);
    EXPECT_EQ(predict_erm(m, std::vector<double>{-1.0}, 0), 1u);
    EXPECT_EQ(predict_erm(m, std::vector<double>{0.0}, 0), 0u);
}

TEST(PredictErm, BatchMatchesForwardOracle) {
    Rng rng(1);
    for (auto mode : {IndexMode::None, IndexMode::ScalarConcat, IndexMode::OneHotConcat, IndexMode::OuterProduct}) {
        ErmModel m;
        m.index_mode = mode;
        m.num_domains_seen = 4;
        m.feature_dim = 3;
        m.num_classes = 3;
        m.net = nn::make_mlp({augmented_dim(3, mode, 4), 8, 3}, rng);
        std::vector<Sample> xs;
        for (int i = 0; i < 1000; ++i) xs.push_back({{rng.normal(), rng.normal(), rng.normal()}, 0});
        for (std::size_t dom : {0u, 2u, 4u}) {
            const auto got = predict_erm_batch(m, xs, dom);
            std::size_t agree = 0;
            for (std::size_t i = 0; i < xs.size(); ++i) {
                const auto logits = oracle::forward_row(m.net, erm_input(m, xs[i].x, dom));
                std::size_t best = 0;
                for (std::size_t k = 1; k < logits.size(); ++k)
                    if (logits[k] > logits[best]) best = k;
                agree += got[i] == best && predict_erm(m, xs[i].x, dom) == best;
            }
            EXPECT_EQ(agree, 1000u) << to_string(mode) << " domain " << dom;
        }
    }
}

// ------------------------------------------------------------------ training

TEST(TrainErm, SeparableSingleDomain) {
    const auto train_d = linear_domain(0, 400, 1);
    const auto test_d = linear_domain(0, 400, 2);
    ErmConfig cfg;
    cfg.steps = 500;
    cfg.batch_size = 32;
    cfg.optimizer = {nn::OptimKind::Adam, 5e-2};
    const std::vector<DomainData> src{train_d};
    const auto m = train_erm(src, cfg, IndexMode::None);
    const auto pred = predict_erm_batch(m, test_d.samples, 0);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == test_d.samples[i].y;
    EXPECT_GE(static_cast<double>(ok) / static_cast<double>(pred.size()), 0.99);
}

TEST(TrainErm, CrossEntropyGradientMatchesFiniteDifferences) {
    Rng rng(3);
    auto net = nn::make_mlp({4, 6, 3}, rng);
    for (auto& l : net.layers)
        for (auto& b : l.bias) b = rng.uniform(-0.2, 0.2);
    nn::Mat x(5, 4);
    for (auto& v : x.values()) v = rng.normal();
    const std::vector<std::size_t> y{0, 2, 1, 2, 0};
    const auto [logits, cache] = nn::mlp_forward(net, x);
    const auto [loss, dlogits] = nn::cross_entropy(logits, y);
    const auto g = nn::mlp_backward(net, cache, dlogits).first;
    auto oracle_loss = [&] {
        const auto out = oracle::forward(net, x);
        double s = 0.0;
        for (std::size_t i = 0; i < 5; ++i) {
            const std::vector<double> row(out.row(i).begin(), out.row(i).end());
            s += oracle::log_sum_exp_naive(row) - row[y[i]];
        }
        return s / 5.0;
    };
    EXPECT_NEAR(loss, oracle_loss(), 1e-12);
    EXPECT_LT(oracle::max_fd_error(net, g, oracle_loss), 1e-4);
}

TEST(TrainErm, PoolingIgnoresDomainBoundaries) {
    // same pooled sample sequence carved into different domain lists
    std::vector<Sample> pool;
    for (std::size_t i = 0; i < 3; ++i)
        for (const auto& s : linear_domain(i, 30, 10 + i).samples) pool.push_back(s);
    auto carve = [&](std::vector<std::size_t> sizes, std::vector<std::size_t> ids) {
        std::vector<DomainData> out;
        std::size_t at = 0;
        for (std::size_t j = 0; j < sizes.size(); ++j) {
            DomainData d{ids[j], {pool.begin() + static_cast<long>(at), pool.begin() + static_cast<long>(at + sizes[j])}, 2};
            at += sizes[j];
            out.push_back(std::move(d));
        }
        return out;
    };
    ErmConfig cfg;
    cfg.steps = 40;
    cfg.batch_size = 16;
    cfg.seed = 4;
    const auto a = train_erm_traced(carve({30, 30, 30}, {0, 1, 2}), cfg, IndexMode::None);
    const auto b = train_erm_traced(carve({45, 45}, {7, 3}), cfg, IndexMode::None);
    EXPECT_EQ(a.model.net, b.model.net);
    EXPECT_EQ(a.loss_trace, b.loss_trace);
}

TEST(TrainErm, LastKUsesOnlyRecentDomains) {
    std::vector<DomainData> d;
    for (std::size_t i = 0; i < 5; ++i) d.push_back(linear_domain(i, 20, i));
    ErmConfig cfg;
    cfg.steps = 5;
    const auto m = train_erm(d, cfg, IndexMode::OneHotConcat, 2);
    EXPECT_EQ(m.num_domains_seen, 2u);
    EXPECT_EQ(m.net.in_dim(), 4u);
    const std::vector<DomainData> tail(d.end() - 2, d.end());
    EXPECT_EQ(train_erm(tail, cfg, IndexMode::OneHotConcat).net, m.net);
    EXPECT_EQ(train_erm(d, cfg, IndexMode::None, 99).net, train_erm(d, cfg, IndexMode::None).net);
    EXPECT_THROW(train_erm(d, cfg, IndexMode::None, 0), ConfigError);
}

TEST(TrainErm, Deterministic) {
    std::vector<DomainData> d{linear_domain(0, 50, 1), linear_domain(1, 50, 2)};
    ErmConfig cfg;
    cfg.steps = 30;
    cfg.seed = 8;
    EXPECT_EQ(train_erm(d, cfg, IndexMode::OuterProduct).net, train_erm(d, cfg, IndexMode::OuterProduct).net);
}

TEST(ProtoVanilla, SharedEncoderAndSameDomainEpisodes) {
    std::vector<DomainData> d{linear_domain(0, 60, 1), linear_domain(1, 60, 2)};
    dpnets::TrainConfig cfg;
    cfg.steps = 20;
    cfg.n_b = 4;
    const std::vector<std::size_t> dims{2, 8, 4};
    const auto r = train_proto_vanilla(d, dims, cfg);
    EXPECT_TRUE(r.model.shared_encoder);
    EXPECT_EQ(r.model.f_phi, r.model.f_psi);
    EXPECT_EQ(r.loss_trace.size(), 20u);
}

TEST(ProtoVanilla, SymmetricBatchLossIsLogTwo) {
    const std::vector<std::size_t> dims{2, 3};
    auto m = dpnets::make_shared_model(dims, 2, 0);
    dpnets::EpisodeBatch b;
    // mirrored support around the origin, queries at the origin: equal distances
    b.support = {{{{1, 1}, 0}, {{-1, -1}, 0}}, {{{2, -2}, 1}, {{-2, 2}, 1}}};
    b.query = {{{{0, 0}, 0}}, {{{0, 0}, 1}}};
    m.f_phi.layers[0].bias.assign(3, 0.0);
    m.f_psi = m.f_phi;
    // prototypes are f(0) + 0 for a linear map, so both classes sit on the query
    EXPECT_NEAR(dpnets::episode_loss(m, b).loss, std::log(2.0), 1e-12);
}
