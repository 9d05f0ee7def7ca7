#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "edglab/rng.hpp"

using edglab::derive_seed;
using edglab::Rng;

TEST(Rng, DeriveSeedIsPureAndOrderSensitive) {
    EXPECT_EQ(derive_seed({1, 2, 3}), derive_seed({1, 2, 3}));
    EXPECT_NE(derive_seed({1, 2, 3}), derive_seed({3, 2, 1}));
    EXPECT_NE(derive_seed({1, 2}), derive_seed({1, 2, 0}));
    std::set<std::uint64_t> seen;
    for (std::uint64_t t = 0; t < 50; ++t)
        for (std::uint64_t s = 0; s < 20; ++s) seen.insert(derive_seed({7, t, s}));
    EXPECT_EQ(seen.size(), 1000u);
}

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) {
        EXPECT_EQ(a.next_u64(), b.next_u64());
        EXPECT_EQ(a.normal(), b.normal());
    }
}

TEST(Rng, UniformAndBelowStayInRange) {
    Rng r(3);
    std::vector<int> hits(7, 0);
    for (int i = 0; i < 70000; ++i) {
        const double u = r.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        const auto k = r.below(7);
        ASSERT_LT(k, 7u);
        ++hits[k];
    }
    for (int h : hits) EXPECT_NEAR(h, 10000, 400);
    EXPECT_EQ(r.below(1), 0u);
}

TEST(Rng, NormalMoments) {
    Rng r(11);
    const int n = 200000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        s += z;
        s2 += z * z;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, SampleWithoutReplacementIsDistinctSubset) {
    Rng r(5);
    std::vector<int> pool(30);
    std::iota(pool.begin(), pool.end(), 100);
    for (int rep = 0; rep < 200; ++rep) {
        const auto pick = r.sample_without_replacement(pool, 12);
        ASSERT_EQ(pick.size(), 12u);
        std::set<int> uniq(pick.begin(), pick.end());
        ASSERT_EQ(uniq.size(), 12u);
        for (int v : pick) ASSERT_TRUE(v >= 100 && v < 130);
    }
    EXPECT_EQ(r.sample_without_replacement(pool, 99).size(), 30u);
}

TEST(Rng, ShuffleIsPermutation) {
    Rng r(9);
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    auto w = v;
    r.shuffle(w);
    EXPECT_NE(v, w);
    std::sort(w.begin(), w.end());
    EXPECT_EQ(v, w);
}
