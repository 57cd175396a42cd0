#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numbers>
#include <utility>

#include "dynaguide/sampler.hpp"

using namespace dynaguide;

namespace {

UNetSpec tiny_unet(std::size_t in) {
    UNetSpec s;
    s.in_channels = in;
    s.widths = {4, 8};
    s.blocks = 1;
    s.emb_features = 4;
    s.emb_hidden = 8;
    s.groups = 2;
    return s;
}

EncoderSpec tiny_encoder() {
    EncoderSpec s;
    s.widths = {4, 8};
    s.blocks = 1;
    s.emb_features = 4;
    s.emb_hidden = 8;
    s.groups = 2;
    s.head_hidden = 16;
    return s;
}

TrajectoryDataset smooth_dataset(std::size_t frames, std::size_t H) {
    TrajectoryDataset ds;
    ds.dt_physical = 0.5;
    ds.split = Split::test;
    std::vector<float> v(H * H);
    for (std::size_t n = 0; n < frames; ++n) {
        for (std::size_t i = 0; i < v.size(); ++i)
            v[i] = static_cast<float>(std::sin(0.2 * static_cast<double>(n) + 0.5 * static_cast<double>(i)));
        ds.frames.emplace_back(1, H, H, v);
    }
    return ds;
}

SamplerConfig short_config(bool guided, double lambda) {
    SamplerConfig c;
    c.schedule = make_schedule(0.002, 80, 7, 6);
    c.s_churn = 3;
    c.lambda = lambda;
    c.guided = guided;
    c.seed = 11;
    return c;
}

/// Discriminator with a non-trivial head so guidance is non-zero.
Discriminator<float> perturbed_disc() {
    Discriminator<float> d(tiny_encoder(), 3);
    Rng rng(12);
    for (auto& v : d.net().params().values()) v += static_cast<float>(0.2 * rng.normal());
    return d;
}

bool bit_identical(const std::vector<Field>& a, const std::vector<Field>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto x = a[i].values(), y = b[i].values();
        if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) != 0) return false;
    }
    return true;
}

}  // namespace

TEST(SamplerConfig, GammaFormula) {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        SamplerConfig c;
        const auto N = static_cast<std::size_t>(rng.uniform_int(2, 120));
        c.schedule = make_schedule(0.002, 80, 7, N);
        c.s_churn = 100 * rng.uniform();
        c.s_tmin = 0.5 * rng.uniform();
        c.s_tmax = c.s_tmin + 60 * rng.uniform();
        for (std::size_t i = 0; i < N; ++i) {
            const double t = c.schedule.sigmas[i];
            const double expect = (t >= c.s_tmin && t <= c.s_tmax)
                                      ? std::min(c.s_churn / static_cast<double>(N), std::numbers::sqrt2 - 1)
                                      : 0.0;
            EXPECT_EQ(c.gamma(i), expect);
        }
    }
}

TEST(Sampler, LambdaZeroIsBitIdenticalToUnguided) {
    Denoiser<float> score(ScoreMode::unconditional, tiny_unet(1), 5);
    const auto disc = perturbed_disc();
    const auto ds = smooth_dataset(6, 8);
    const TrajectorySampler guided(score, &disc, short_config(true, 0.0));
    const TrajectorySampler plain(score, nullptr, short_config(false, 0.0));
    const auto a = rollout(guided, state_from(ds, 2), 2, ds);
    const auto b = rollout(plain, state_from(ds, 2), 2, ds);
    EXPECT_TRUE(bit_identical(a.frames, b.frames));
    const TrajectorySampler strong(score, &disc, short_config(true, 5.0));
    EXPECT_FALSE(bit_identical(rollout(strong, state_from(ds, 2), 2, ds).frames, b.frames));
}

TEST(Sampler, GuidanceEvaluatedInBothStages) {
    Denoiser<float> score(ScoreMode::unconditional, tiny_unet(1), 5);
    const auto disc = perturbed_disc();
    const auto ds = smooth_dataset(6, 8);
    const TrajectorySampler s(score, &disc, short_config(true, 2.0));
    std::vector<Rng> rngs{Rng(1), Rng(2)};
    SamplerTrace trace;
    s.sample_next({state_from(ds, 2), state_from(ds, 3)}, rngs, &trace);
    ASSERT_EQ(trace.guidance_calls.size(), 6u);
    for (std::size_t i = 0; i + 1 < 6; ++i) EXPECT_EQ(trace.guidance_calls[i], 2u);
    EXPECT_EQ(trace.guidance_calls.back(), 1u);
    EXPECT_EQ(trace.denoise_calls, 11u);
    for (double q : trace.mean_q) EXPECT_TRUE(q > 0 && q < 1);
}

TEST(Sampler, UnguidedMonitorMakesNoGradientCalls) {
    Denoiser<float> score(ScoreMode::unconditional, tiny_unet(1), 5);
    const auto disc = perturbed_disc();
    const auto ds = smooth_dataset(6, 8);
    const TrajectorySampler s(score, &disc, short_config(false, 2.0));
    std::vector<Rng> rngs{Rng(1)};
    SamplerTrace trace;
    s.sample_next({state_from(ds, 2)}, rngs, &trace);
    for (auto c : trace.guidance_calls) EXPECT_EQ(c, 0u);
    for (double q : trace.mean_q) EXPECT_TRUE(q > 0 && q < 1);
}

TEST(Sampler, GuidedWithoutDiscriminatorIsRejected) {
    Denoiser<float> score(ScoreMode::unconditional, tiny_unet(1), 5);
    EXPECT_THROW(TrajectorySampler(score, nullptr, short_config(true, 1.0)), ConfigError);
}

TEST(Sampler, NoChurnReducesToDeterministicHeun) {
    // Analytic denoiser of N(0.3, 0.8²) data; the oracle is a plain Heun integration from the same x_T.
    const double mu = 0.3, s2 = 0.64;
    SamplerModels<double> m;
    m.denoise = [&](const Tensor<double>& x, std::span<const double> sig) {
        Tensor<double> d(x.shape);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double v = sig[i / x.sample_size()] * sig[i / x.sample_size()];
            d.data[i] = (s2 * x.data[i] + v * mu) / (s2 + v);
        }
        return d;
    };
    SamplerConfig c;
    c.schedule = make_schedule(0.002, 80, 7, 18);
    c.s_churn = 0;
    c.guided = false;
    for (std::uint64_t seed : {1u, 2u}) {
        std::vector<Rng> rngs{Rng(seed)};
        const auto out = edm_sample<double>({1, 1, 1, 1}, m, c, rngs);
        Rng replay(seed);
        const auto& t = c.schedule.sigmas;
        double x = t[0] * replay.normal();
        auto f = [&](double xv, double tv) { return (xv - (s2 * xv + tv * tv * mu) / (s2 + tv * tv)) / tv; };
        for (std::size_t i = 0; i < 18; ++i) {
            const double d1 = f(x, t[i]);
            double xn = x + (t[i + 1] - t[i]) * d1;
            if (t[i + 1] != 0) xn = x + (t[i + 1] - t[i]) * 0.5 * (d1 + f(xn, t[i + 1]));
            x = xn;
        }
        EXPECT_NEAR(out.data[0], x, 1e-12 * std::max(1.0, std::abs(x)));
    }
}

TEST(Sampler, GaussianTargetMomentsRecovered) {
    const double mu = -0.4, sd = 0.7;
    SamplerModels<double> m;
    m.denoise = [&](const Tensor<double>& x, std::span<const double> sig) {
        Tensor<double> d(x.shape);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double v = sig[i] * sig[i];
            d.data[i] = (sd * sd * x.data[i] + v * mu) / (sd * sd + v);
        }
        return d;
    };
    // churn at the maximal rate, with enough steps that discretization bias is below the sampling error
    for (const auto& [steps, churn] : {std::pair<std::size_t, double>{50, 0.0}, {200, 200.0}}) {
        SamplerConfig c;
        c.schedule = make_schedule(0.002, 80, 7, steps);
        c.s_churn = churn;
        c.s_noise = 1.0;
        c.guided = false;
        const std::size_t n = 10000;
        std::vector<Rng> rngs;
        for (std::size_t i = 0; i < n; ++i) rngs.emplace_back(derive_seed(3, {i}));
        const auto out = edm_sample<double>({n, 1, 1, 1}, m, c, rngs);
        double mean = 0, var = 0;
        for (double v : out.data) mean += v;
        mean /= n;
        for (double v : out.data) var += (v - mean) * (v - mean);
        var /= (n - 1);
        EXPECT_NEAR(mean, mu, 4 * sd / std::sqrt(n)) << steps;
        // sd of the sample variance ≈ σ²·sqrt(2/(n−1))
        EXPECT_NEAR(var, sd * sd, 4 * sd * sd * std::sqrt(2.0 / (n - 1))) << steps;
    }
}

TEST(Sampler, NonFiniteStateReportsStage) {
    SamplerModels<double> m;
    m.denoise = [](const Tensor<double>& x, std::span<const double>) {
        Tensor<double> d(x.shape, std::numeric_limits<double>::quiet_NaN());
        return d;
    };
    SamplerConfig c;
    c.guided = false;
    std::vector<Rng> rngs{Rng(1)};
    try {
        edm_sample<double>({1, 1, 2, 2}, m, c, rngs);
        FAIL();
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("first stage, diffusion step 0"), std::string::npos) << e.what();
    }
}

TEST(Rollout, ZeroStepsAndMetadata) {
    Denoiser<float> score(ScoreMode::conditional, tiny_unet(3), 5);
    const auto ds = smooth_dataset(6, 8);
    const TrajectorySampler s(score, nullptr, short_config(false, 0));
    const auto empty = rollout(s, state_from(ds, 2), 0, ds);
    EXPECT_TRUE(empty.empty());
    const auto two = rollout(s, state_from(ds, 2), 2, ds);
    EXPECT_EQ(two.size(), 2u);
    EXPECT_EQ(two.dt_physical, 0.5);
    EXPECT_EQ(two.split, Split::test);
    for (const auto& f : two.frames) EXPECT_TRUE(f.all_finite());
    EXPECT_THROW(state_from(ds, 0), ConfigError);
}

TEST(Ensemble, LayoutDeterminismAndSingleMember) {
    Denoiser<float> score(ScoreMode::conditional, tiny_unet(3), 5);
    const auto ds = smooth_dataset(10, 8);
    const TrajectorySampler s(score, nullptr, short_config(false, 0));
    const auto a = ensemble_forecast(s, ds, {2, 4}, 3, 2);
    const auto b = ensemble_forecast(s, ds, {2, 4}, 3, 2);
    a.validate();
    EXPECT_EQ(a.values.size(), 12u);
    EXPECT_TRUE(bit_identical(a.values, b.values));
    EXPECT_TRUE(bit_identical({a.truth_at(1, 0)}, {ds[5]}));
    EXPECT_FALSE(bit_identical({a.value(0, 0, 0)}, {a.value(0, 1, 0)}));
    const auto t2 = ensemble_forecast(s, ds, {2, 4}, 3, 2, 2);
    EXPECT_TRUE(bit_identical(t2.values, ensemble_forecast(s, ds, {2, 4}, 3, 2, 2).values));

    const auto one = ensemble_forecast(s, ds, {2}, 1, 2);
    std::vector<Rng> rng{Rng(derive_seed(s.config().seed, {0xF0C, 0, 0}))};
    const auto single = s.rollout({state_from(ds, 2)}, 2, rng).front();
    EXPECT_TRUE(bit_identical(one.values, single));
    EXPECT_THROW(ensemble_forecast(s, ds, {8}, 2, 2), ConfigError);
}
