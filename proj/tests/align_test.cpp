#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "cada/align.hpp"
#include "cada/error.hpp"
#include "test_util.hpp"

using namespace cada;
using cada::testing::kind_of;
using cada::testing::TempDir;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && std::memcmp(a.data.data(), b.data.data(), a.size() * sizeof(double)) == 0;
}

Tensor random_map(std::mt19937_64& rng, double scale, std::size_t h = 6, std::size_t w = 5) {
    Tensor t({h, w});
    std::gamma_distribution<double> g(2.0, scale);
    for (auto& v : t.data) v = g(rng);
    return t;
}

}  // namespace

TEST(ClassStats, ClosedForm) {
    const Tensor a({2}, {0, 2}), b({2}, {1, 3});
    const auto s = fit_class_stats({{7, {&a, &b}}});
    ASSERT_EQ(s.size(), 1u);
    EXPECT_EQ(s[0].class_id, 7);
    EXPECT_DOUBLE_EQ(s[0].u, 1.5);
    EXPECT_DOUBLE_EQ(s[0].gamma, 2.5);
    EXPECT_NEAR(s[0].sigma, std::sqrt(1.25), 1e-15);
    EXPECT_EQ(s[0].n_images, 2u);
    EXPECT_EQ(s[0].n_pixels, 4u);
}

TEST(ClassStats, ConstantMap) {
    const Tensor a({2}, {5, 5});
    const auto s = fit_class_stats({{0, {&a}}});
    EXPECT_DOUBLE_EQ(s[0].u, 5.0);
    EXPECT_DOUBLE_EQ(s[0].gamma, 5.0);
    EXPECT_DOUBLE_EQ(s[0].sigma, 0.0);
}

TEST(ClassStats, EmptyGroupRejected) {
    EXPECT_EQ(kind_of([] { fit_class_stats({{0, {}}}); }), ErrorKind::Data);
}

TEST(ClassStats, GammaAtLeastU) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Tensor> maps;
        for (int i = 0; i < 4; ++i) maps.push_back(random_map(rng, 0.1 + trial));
        ClassGroups g;
        for (const auto& m : maps) g[0].push_back(&m);
        const auto s = fit_class_stats(g);
        EXPECT_GE(s[0].gamma, s[0].u);
        EXPECT_GE(s[0].sigma, 0.0);
    }
}

TEST(Normalize, MeanMaxExamples) {
    const auto r = normalize_meanmax(Tensor({3}, {0.2, 0.4, 0.6}), 0.2, 0.6);
    EXPECT_NEAR(r.map[0], 0.0, 1e-15);
    EXPECT_NEAR(r.map[1], 0.5, 1e-15);
    EXPECT_NEAR(r.map[2], 1.0, 1e-15);
    EXPECT_FALSE(r.clamped);

    const Tensor m({2, 2}, {0.3, -1.0, 7.0, 0.0});
    EXPECT_TRUE(bitwise_equal(normalize_meanmax(m, 0.0, 1.0).map, m));
}

TEST(Normalize, ClampPath) {
    const auto r = normalize_meanmax(Tensor({2}, {0.3, 0.3000001}), 0.3, 0.3, 1e-6);
    EXPECT_TRUE(r.clamped);
    EXPECT_DOUBLE_EQ(r.map[0], 0.0);
    EXPECT_NEAR(r.map[1], 0.1, 1e-9);
    EXPECT_TRUE(std::isfinite(r.map[1]));
}

TEST(Normalize, MeanStdExamples) {
    EXPECT_DOUBLE_EQ(normalize_meanstd(Tensor({1}, {2.5}), 1.0, 0.5).map[0], 1.0);
    EXPECT_TRUE(normalize_meanstd(Tensor({1}, {2.5}), 1.0, 0.0).clamped);
    for (double sigma : {0.01, 0.5, 3.0}) EXPECT_EQ(normalize_meanstd(Tensor({1}, {1.25}), 1.25, sigma).map[0], 0.0);
}

TEST(Normalize, MeanStdIsMeanMaxWithThreeSigma) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> ud(-2.0, 2.0), sd(0.0, 3.0);
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor m = random_map(rng, 0.5);
        const double u = ud(rng), sigma = trial % 10 == 0 ? 0.0 : sd(rng);
        const auto a = normalize_meanstd(m, u, sigma);
        const auto b = normalize_meanmax(m, u, u + 3.0 * sigma);
        EXPECT_TRUE(bitwise_equal(a.map, b.map));
        EXPECT_EQ(a.clamped, b.clamped);
    }
}

TEST(Normalize, NegativeSigmaRejected) {
    EXPECT_EQ(kind_of([] { normalize_meanstd(Tensor({1}, {1.0}), 0.0, -1.0); }), ErrorKind::Usage);
}

TEST(OracleAlignment, TrainingMapsBecomeZeroMeanUnitMax) {
    std::mt19937_64 rng(9);
    std::vector<Tensor> maps;
    std::map<std::string, int> class_of;
    MapSet set;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 10; ++i) {
            const std::string id = "c" + std::to_string(c) + "_" + std::to_string(i);
            set[id] = random_map(rng, std::pow(4.0, c));
            class_of[id] = c;
        }
    ClassGroups g;
    for (const auto& [id, t] : set) g[class_of[id]].push_back(&t);
    const auto stats = fit_class_stats(g);
    const auto aligned = apply_oracle_alignment(set, class_of, stats, StatVariant::MeanMax);
    EXPECT_EQ(aligned.clamped, 0u);
    ClassGroups after;
    for (const auto& [id, t] : aligned.maps) after[class_of[id]].push_back(&t);
    for (const auto& s : fit_class_stats(after)) {
        EXPECT_NEAR(s.u, 0.0, 1e-9);
        EXPECT_NEAR(s.gamma, 1.0, 1e-9);
    }
}

TEST(OracleAlignment, AlignedStatsAreTheIdentity) {
    const Tensor m({3}, {-0.5, 0.25, 1.75});
    EXPECT_TRUE(bitwise_equal(normalize_meanmax(m, 0.0, 1.0).map, m));
}

TEST(OracleAlignment, UnknownClassRejected) {
    MapSet set{{"x", Tensor({1}, {1.0})}};
    std::map<std::string, int> class_of{{"x", 99}};
    const Tensor a({1}, {1.0}), b({1}, {2.0});
    const auto stats = fit_class_stats({{0, {&a}}, {1, {&b}}});
    EXPECT_EQ(kind_of([&] { apply_oracle_alignment(set, class_of, stats, StatVariant::MeanMax); }), ErrorKind::Data);
}

TEST(OracleAlignment, RepairsInterleavedClasses) {
    // Class 1 is class 0 scaled by 16. Scaling by a power of two is exact, so
    // after alignment every class-1 map equals its class-0 twin bitwise and
    // the mixed AUROC equals the per-class value exactly.
    std::mt19937_64 rng(13);
    DatasetManifest m;
    MapSet train, test, masks;
    std::map<std::string, int> class_of;
    for (int i = 0; i < 20; ++i) {
        const Tensor t = random_map(rng, 1.0);
        Tensor big = t;
        for (auto& v : big.data) v *= 16.0;
        train["tr0_" + std::to_string(i)] = t;
        train["tr1_" + std::to_string(i)] = big;
        class_of["tr0_" + std::to_string(i)] = 0;
        class_of["tr1_" + std::to_string(i)] = 1;
    }
    for (int i = 0; i < 20; ++i) {
        const bool anomalous = i >= 10;
        Tensor t = random_map(rng, 1.0);
        if (anomalous) t.data[0] += 10.0;
        for (int c = 0; c < 2; ++c) {
            const std::string id = "te" + std::to_string(c) + "_" + std::to_string(i);
            Tensor scaled = t;
            if (c == 1)
                for (auto& v : scaled.data) v *= 16.0;
            test[id] = scaled;
            class_of[id] = c;
            ManifestEntry e;
            e.image_id = id;
            e.split = Split::Test;
            e.label = anomalous ? Label::Anomalous : Label::Normal;
            e.class_id = c;
            m.entries.push_back(e);
        }
    }
    ClassGroups g;
    for (const auto& [id, t] : train) g[class_of[id]].push_back(&t);
    const auto stats = fit_class_stats(g);
    const auto raw = evaluate(m, test, masks, Aggregation::max());
    const auto aligned_maps = apply_oracle_alignment(test, class_of, stats, StatVariant::MeanMax).maps;
    for (int i = 0; i < 20; ++i)
        ASSERT_TRUE(bitwise_equal(aligned_maps.at("te0_" + std::to_string(i)), aligned_maps.at("te1_" + std::to_string(i))));
    const auto aligned = evaluate(m, aligned_maps, masks, Aggregation::max());
    EXPECT_LT(raw[0].i_auroc, raw.back().i_auroc - 0.1);
    EXPECT_EQ(aligned[0].i_auroc, aligned[1].i_auroc);
    EXPECT_EQ(aligned[0].i_auroc, aligned.back().i_auroc);
    // Within-class ranks are untouched.
    EXPECT_EQ(raw[1].i_auroc, aligned[1].i_auroc);
    EXPECT_EQ(raw[2].i_auroc, aligned[2].i_auroc);
}

TEST(StatVariant, Parse) {
    EXPECT_EQ(parse_variant("meanmax"), StatVariant::MeanMax);
    EXPECT_EQ(parse_variant("meanstd"), StatVariant::MeanStd);
    EXPECT_EQ(to_string(StatVariant::MeanStd), "meanstd");
    EXPECT_EQ(kind_of([] { parse_variant("median"); }), ErrorKind::Usage);
}

TEST(ClassStatsCsv, RoundTripIsExact) {
    TempDir dir("align");
    std::vector<ClassStats> s = {{0, 0.1, 1.0 / 3.0, 0.07, 10, 2560}, {5, 12.5, 40.0, 2.0, 3, 768}};
    write_class_stats_csv((dir / "s.csv").string(), s);
    const auto back = read_class_stats_csv((dir / "s.csv").string());
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].gamma, 1.0 / 3.0);
    EXPECT_EQ(back[1].class_id, 5);
    EXPECT_EQ(back[1].n_pixels, 768u);
    EXPECT_EQ(&find_stats(back, 5), &back[1]);
    EXPECT_EQ(kind_of([&] { find_stats(back, 2); }), ErrorKind::Data);
}
