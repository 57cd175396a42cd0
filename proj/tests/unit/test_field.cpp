#include <gtest/gtest.h>

#include <cmath>

#include "dynaguide/field.hpp"
#include "dynaguide/rng.hpp"

using namespace dynaguide;

namespace {

TrajectoryDataset scalar_dataset(std::initializer_list<float> values) {
    TrajectoryDataset ds;
    for (float v : values) ds.frames.emplace_back(1, 1, 1, std::vector<float>{v});
    return ds;
}

TrajectoryDataset random_dataset(Rng& rng, std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    TrajectoryDataset ds;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<float> v(c * h * w);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < h * w; ++p)
                v[ch * h * w + p] = static_cast<float>(3.0 * ch - 1.0 + (1.0 + ch) * rng.normal());
        ds.frames.emplace_back(c, h, w, std::move(v));
    }
    return ds;
}

}  // namespace

TEST(Field, RejectsNonFiniteAndWrongSize) {
    EXPECT_THROW(Field(1, 2, 2, std::vector<float>{1, 2, 3}), ShapeError);
    EXPECT_THROW(Field(1, 1, 2, std::vector<float>{1, NAN}), DomainError);
    EXPECT_THROW(Field(1, 1, 1, std::vector<float>{INFINITY}), DomainError);
}

TEST(Standardize, TwoFrameHandComputation) {
    auto ds = standardize(scalar_dataset({0.0f, 2.0f}));
    ASSERT_TRUE(ds.norm_stats.has_value());
    EXPECT_DOUBLE_EQ((*ds.norm_stats)[0].mean, 1.0);
    EXPECT_DOUBLE_EQ((*ds.norm_stats)[0].std, 1.0);
    EXPECT_EQ(ds.frames[0].values()[0], -1.0f);
    EXPECT_EQ(ds.frames[1].values()[0], 1.0f);
}

TEST(Standardize, ConstantFieldIsDegenerate) {
    try {
        standardize(scalar_dataset({3.0f, 3.0f, 3.0f}));
        FAIL() << "expected an error";
    } catch (const DomainError& e) {
        EXPECT_NE(std::string(e.what()).find("degenerate channel"), std::string::npos);
    }
}

TEST(Standardize, UnitMomentsOnRandomData) {
    Rng rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        auto ds = standardize(random_dataset(rng, 20, 2, 6, 5));
        for (std::size_t c = 0; c < 2; ++c) {
            double s = 0, ss = 0, n = 0;
            for (const auto& f : ds.frames)
                for (std::size_t p = 0; p < 30; ++p) {
                    const double v = f.values()[c * 30 + p];
                    s += v;
                    ss += v * v;
                    n += 1;
                }
            const double mean = s / n;
            EXPECT_LT(std::abs(mean), 1e-6);
            EXPECT_LT(std::abs(std::sqrt(ss / n - mean * mean) - 1.0), 1e-6);
        }
    }
}

TEST(Standardize, ValAndTestUseTrainStatistics) {
    Rng rng(3);
    auto full = random_dataset(rng, 30, 1, 4, 4);
    auto parts = split_dataset(full, 20, 5);
    EXPECT_EQ(parts.train.size(), 20u);
    EXPECT_EQ(parts.val.size(), 5u);
    EXPECT_EQ(parts.test.size(), 5u);
    auto train = standardize(parts.train);
    EXPECT_THROW(standardize(parts.val), DomainError);
    auto val = standardize(parts.val, *train.norm_stats);
    auto test = standardize(parts.test, *train.norm_stats);
    EXPECT_EQ(*val.norm_stats, *train.norm_stats);
    EXPECT_EQ(*test.norm_stats, *train.norm_stats);
    EXPECT_EQ(val.split, Split::val);
}

TEST(Standardize, DestandardizeInverts) {
    Rng rng(5);
    auto raw = random_dataset(rng, 10, 2, 3, 3);
    auto st = standardize(raw);
    for (std::size_t n = 0; n < raw.size(); ++n) {
        auto back = destandardize(st.frames[n], *st.norm_stats);
        for (std::size_t i = 0; i < back.size(); ++i)
            EXPECT_NEAR(back.values()[i], raw.frames[n].values()[i], 1e-5 * (1 + std::abs(raw.frames[n].values()[i])));
    }
}

TEST(LogTransform, ZeroMapsToZero) {
    Field x(1, 2, 3);
    auto y = log_transform(x, 1e-4);
    for (float v : y.values()) EXPECT_EQ(v, 0.0f);
}

TEST(LogTransform, EpsilonMapsToLogTwo) {
    const double eps = 1e-4;
    Field x(1, 1, 1, std::vector<float>{static_cast<float>(eps)});
    auto y = log_transform(x, eps);
    EXPECT_NEAR(y.values()[0], std::log(2.0), 1e-6);
}

TEST(LogTransform, RejectsNegativeAndBadEpsilon) {
    Field x(1, 1, 2, std::vector<float>{1.0f, -0.5f});
    EXPECT_THROW(log_transform(x, 1e-4), DomainError);
    EXPECT_THROW(log_transform(Field(1, 1, 1), 0.0), DomainError);
}

TEST(LogTransform, RoundTripProperty) {
    Rng rng(17);
    const double eps = 1e-4;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<float> v(64);
        for (auto& x : v) {
            // mixture of exact zeros, drizzle and heavy rain
            const double u = rng.uniform();
            x = u < 0.2 ? 0.0f : static_cast<float>(u < 0.6 ? 1e-3 * rng.uniform() : 50.0 * rng.uniform());
        }
        Field f(1, 8, 8, v);
        auto back = inverse_log_transform(log_transform(f, eps), eps);
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double ref = v[i];
            const double err = std::abs(back.values()[i] - ref);
            if (ref == 0.0)
                EXPECT_LT(err, 1e-10);
            else
                EXPECT_LT(err / ref, 1e-6) << "value " << ref;
        }
    }
}

TEST(PercentileScale, ScalesByTrainPercentile) {
    TrajectoryDataset ds;
    std::vector<float> v(1000);
    for (int i = 0; i < 1000; ++i) v[i] = static_cast<float>(i);
    ds.frames.emplace_back(1, 10, 100, v);
    auto stats = percentile_scale(ds, 99.9);
    EXPECT_NEAR(stats[0].std, 998.001, 1e-9);
    EXPECT_EQ(stats[0].mean, 0.0);
}

TEST(AreaWeights, EquatorIsUniform) {
    std::vector<double> lat(7, 0.0);
    auto w = latitude_weights(lat);
    for (double x : w.w) EXPECT_DOUBLE_EQ(x, 1.0);
    auto u = AreaWeights::uniform(5);
    for (double x : u.w) EXPECT_EQ(x, 1.0);
}

TEST(AreaWeights, ThirtyDegreeRows) {
    std::vector<double> lat{-30.0, 0.0, 30.0};
    auto w = latitude_weights(lat);
    const double c30 = std::sqrt(3.0) / 2.0;
    const double scale = 3.0 / (1.0 + 2.0 * c30);
    EXPECT_NEAR(w[0], c30 * scale, 1e-15);
    EXPECT_NEAR(w[1], scale, 1e-15);
    EXPECT_NEAR(w[2], c30 * scale, 1e-15);
}

TEST(AreaWeights, MeanIsOneForRandomGrids) {
    Rng rng(23);
    for (int trial = 0; trial < 200; ++trial) {
        const auto K = static_cast<std::size_t>(rng.uniform_int(1, 200));
        std::vector<double> lat(K);
        for (auto& l : lat) l = -89.9 + 179.8 * rng.uniform();
        auto w = latitude_weights(lat);
        double s = 0;
        for (double x : w.w) s += x;
        EXPECT_NEAR(s / static_cast<double>(K), 1.0, 1e-12);
    }
}

TEST(AreaWeights, PolesRejected) {
    std::vector<double> lat{0.0, 90.0};
    EXPECT_THROW(latitude_weights(lat), DomainError);
    std::vector<double> lat2{-90.0};
    EXPECT_THROW(latitude_weights(lat2), DomainError);
}

TEST(Rng, ReproducibleAndSeedSensitive) {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) {
        const double x = a.normal();
        EXPECT_EQ(x, b.normal());
        (void)c;
    }
    EXPECT_NE(Rng(1).next_u64(), Rng(2).next_u64());
    EXPECT_NE(derive_seed(7, {0, 1}), derive_seed(7, {1, 0}));
    EXPECT_EQ(derive_seed(7, {3, 4}), derive_seed(7, {3, 4}));
}

TEST(Rng, NormalMoments) {
    Rng rng(99);
    const int n = 200000;
    double s = 0, ss = 0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        s += x;
        ss += x * x;
    }
    EXPECT_LT(std::abs(s / n), 5.0 / std::sqrt(n));
    EXPECT_LT(std::abs(ss / n - 1.0), 0.02);
}
