#pragma once

/// Stochastic second-order sampler with churn and discriminator guidance in
/// both solver stages, plus autoregressive rollout and ensemble drivers.

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <thread>
#include <vector>

#include "dynaguide/diffusion.hpp"
#include "dynaguide/discriminator.hpp"
#include "dynaguide/ensemble.hpp"

namespace dynaguide {

struct SamplerConfig {
    NoiseSchedule schedule = make_schedule(0.002, 80.0, 7.0, 50);
    double s_churn = 55.0;
    double s_noise = 1.005;
    double s_tmin = 0.0;
    double s_tmax = 1000.0;
    double lambda = 14.0;
    bool guided = true;
    std::uint64_t seed = 0;

    std::size_t steps() const noexcept { return schedule.steps; }

    double gamma(std::size_t i) const {
        const double t = schedule.sigmas.at(i);
        if (t < s_tmin || t > s_tmax) return 0.0;
        return std::min(s_churn / static_cast<double>(schedule.steps), std::numbers::sqrt2 - 1.0);
    }

    void validate() const {
        if (schedule.sigmas.size() != schedule.steps + 1 || schedule.steps < 2)
            throw ConfigError("sampler schedule is malformed");
        if (!(s_churn >= 0.0) || !(s_noise >= 0.0)) throw ConfigError("churn parameters must be non-negative");
        if (!std::isfinite(lambda)) throw ConfigError("guidance strength must be finite");
    }
};

/// Per-step instrumentation of one sampling call.
struct SamplerTrace {
    std::vector<double> sigma;
    /// Discriminator gradient evaluations per step.
    std::vector<std::size_t> guidance_calls;
    /// Batch-mean discriminator probability at the first stage (NaN without a discriminator).
    std::vector<double> mean_q;
    std::size_t denoise_calls = 0;

    void clear() { *this = SamplerTrace{}; }
};

/// Model hooks used by the core solver; all act on a whole batch.
template <class T>
struct SamplerModels {
    std::function<Tensor<T>(const Tensor<T>&, std::span<const double>)> denoise;
    /// Optional: input gradient of the discriminator logit plus the logits.
    std::function<GuidanceResult<T>(const Tensor<T>&, std::span<const double>)> guidance;
    /// Optional: discriminator logits without gradients, for unguided monitoring.
    std::function<std::vector<double>(const Tensor<T>&, std::span<const double>)> monitor;
};

namespace detail {

template <class T>
void require_finite(const Tensor<T>& x, const char* stage, std::size_t step) {
    for (T v : x.data)
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericalError(std::string("non-finite sampler state at ") + stage + ", diffusion step " +
                                 std::to_string(step));
}

inline double mean_probability(const std::vector<double>& logits) {
    double s = 0.0;
    for (double z : logits) s += sigmoid(z);
    return s / static_cast<double>(logits.size());
}

}  // namespace detail

/// Draw one batch of samples of shape `shape`; rngs[i] drives sample i.
template <class T>
Tensor<T> edm_sample(typename Tensor<T>::Shape shape, const SamplerModels<T>& models, const SamplerConfig& cfg,
                     std::vector<Rng>& rngs, SamplerTrace* trace = nullptr) {
    cfg.validate();
    if (rngs.size() != shape[0]) throw ShapeError("one random stream per sample required");
    const bool guided = cfg.guided;
    if (guided && !models.guidance) throw ConfigError("guided sampling requires a discriminator");
    const auto& t = cfg.schedule.sigmas;
    const std::size_t B = shape[0], P = shape[1] * shape[2] * shape[3], N = cfg.steps();
    if (trace) trace->clear();

    Tensor<T> x(shape);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < P; ++j) x.sample(b)[j] = static_cast<T>(t[0] * rngs[b].normal());

    Tensor<T> x_hat(shape), x_next(shape);
    std::vector<double> sig(B);
    auto slope = [&](const Tensor<T>& at, double tc, Tensor<T>& out) {
        std::fill(sig.begin(), sig.end(), tc);
        const Tensor<T> d = models.denoise(at, sig);
        if (trace) ++trace->denoise_calls;
        for (std::size_t i = 0; i < at.size(); ++i)
            out.data[i] = static_cast<T>((static_cast<double>(at.data[i]) - static_cast<double>(d.data[i])) / tc);
    };
    // d = −scale · ∇ logit; returns false when guidance is off
    auto guide = [&](const Tensor<T>& at, double tc, double scale, Tensor<T>& out, double* q) {
        std::fill(sig.begin(), sig.end(), tc);
        if (guided) {
            auto g = models.guidance(at, sig);
            if (trace) ++trace->guidance_calls.back();
            for (std::size_t i = 0; i < at.size(); ++i) out.data[i] = static_cast<T>(-scale * g.gradient.data[i]);
            if (q) *q = detail::mean_probability(g.logits);
            return true;
        }
        if (q && models.monitor) *q = detail::mean_probability(models.monitor(at, sig));
        return false;
    };

    Tensor<T> s(shape), d(shape), s2(shape), d2(shape);
    for (std::size_t i = 0; i < N; ++i) {
        const double ti = t[i], tn = t[i + 1];
        const double gamma = cfg.gamma(i);
        const double th = ti + gamma * ti;
        const double churn = std::sqrt(std::max(th * th - ti * ti, 0.0));
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < P; ++j) {
                const double eps = cfg.s_noise * rngs[b].normal();
                x_hat.sample(b)[j] = static_cast<T>(static_cast<double>(x.sample(b)[j]) + churn * eps);
            }
        if (trace) {
            trace->sigma.push_back(th);
            trace->guidance_calls.push_back(0);
            trace->mean_q.push_back(std::numeric_limits<double>::quiet_NaN());
        }
        detail::require_finite(x_hat, "churn", i);
        slope(x_hat, th, s);
        const bool g1 = guide(x_hat, th, ti, d, trace ? &trace->mean_q.back() : nullptr);
        const double h = tn - th;
        for (std::size_t k = 0; k < x.size(); ++k) {
            const double dir = static_cast<double>(s.data[k]) + (g1 ? cfg.lambda * static_cast<double>(d.data[k]) : 0.0);
            x_next.data[k] = static_cast<T>(static_cast<double>(x_hat.data[k]) + h * dir);
        }
        detail::require_finite(x_next, "first stage", i);
        if (tn != 0.0) {
            slope(x_next, tn, s2);
            const bool g2 = guide(x_next, tn, tn, d2, nullptr);
            for (std::size_t k = 0; k < x.size(); ++k) {
                double dir1 = static_cast<double>(s.data[k]), dir2 = static_cast<double>(s2.data[k]);
                if (g1) dir1 += cfg.lambda * static_cast<double>(d.data[k]);
                if (g2) dir2 += cfg.lambda * static_cast<double>(d2.data[k]);
                x_next.data[k] = static_cast<T>(static_cast<double>(x_hat.data[k]) + h * (0.5 * dir1 + 0.5 * dir2));
            }
            detail::require_finite(x_next, "second stage", i);
        }
        std::swap(x, x_next);
    }
    return x;
}

/// Clean conditioning window for autoregressive generation.
struct RolloutState {
    Field current;
    Field previous;
    std::size_t n = 0;
};

/// Score model plus optional discriminator; the discriminator guides when
/// `cfg.guided` is set and is only monitored otherwise.
class TrajectorySampler {
public:
    TrajectorySampler(const Denoiser<float>& score, const Discriminator<float>* disc, SamplerConfig cfg)
        : score_(score), disc_(disc), cfg_(std::move(cfg)) {
        cfg_.validate();
        if (cfg_.guided && !disc_) throw ConfigError("guided sampling requires a discriminator checkpoint");
    }

    const SamplerConfig& config() const noexcept { return cfg_; }

    /// Next clean frame for every state; rngs[i] belongs to states[i].
    std::vector<Field> sample_next(const std::vector<RolloutState>& states, std::vector<Rng>& rngs,
                                   SamplerTrace* trace = nullptr) const {
        if (states.empty()) return {};
        const auto& f0 = states.front().current;
        if (f0.channels() != 1) throw ShapeError("sampler expects single-channel frames");
        std::vector<const Field*> cur, prev;
        for (const auto& s : states) {
            if (!s.current.same_shape(f0) || !s.previous.same_shape(f0))
                throw ShapeError("rollout states disagree in shape: " + f0.shape_string());
            cur.push_back(&s.current);
            prev.push_back(&s.previous);
        }
        const Tensor<float> history = concat(stack_frames(cur), stack_frames(prev));
        const bool cond = score_.mode() == ScoreMode::conditional;
        SamplerModels<float> m;
        m.denoise = [&](const Tensor<float>& x, std::span<const double> sg) {
            return score_.denoise(x, sg, cond ? &history : nullptr);
        };
        if (disc_) {
            m.guidance = [&](const Tensor<float>& x, std::span<const double> sg) {
                return disc_->guidance(x, sg, history);
            };
            m.monitor = [&](const Tensor<float>& x, std::span<const double> sg) {
                return disc_->logits(x, sg, history);
            };
        }
        const Tensor<float> out = edm_sample<float>({states.size(), 1, f0.height(), f0.width()}, m, cfg_, rngs, trace);
        std::vector<Field> frames;
        for (std::size_t i = 0; i < states.size(); ++i) frames.push_back(tensor_sample_to_field(out, i, f0.geometry()));
        return frames;
    }

    /// `steps` autoregressive frames for each initial state, advancing the windows in place.
    std::vector<std::vector<Field>> rollout(std::vector<RolloutState> states, std::size_t steps, std::vector<Rng>& rngs,
                                            const std::function<void(std::size_t)>& on_step = {}) const {
        std::vector<std::vector<Field>> out(states.size());
        for (std::size_t k = 0; k < steps; ++k) {
            std::vector<Field> next;
            try {
                next = sample_next(states, rngs);
            } catch (const NumericalError& e) {
                throw NumericalError(std::string(e.what()) + " (rollout step " + std::to_string(k) + ")");
            }
            for (std::size_t i = 0; i < states.size(); ++i) {
                if (!next[i].all_finite())
                    throw NumericalError("rollout produced a non-finite frame at step " + std::to_string(k));
                states[i].previous = std::move(states[i].current);
                states[i].current = next[i];
                ++states[i].n;
                out[i].push_back(std::move(next[i]));
            }
            if (on_step) on_step(k + 1);
        }
        return out;
    }

private:
    const Denoiser<float>& score_;
    const Discriminator<float>* disc_;
    SamplerConfig cfg_;
};

/// Initial state from frames n−1 and n of a dataset.
inline RolloutState state_from(const TrajectoryDataset& ds, std::size_t n) {
    if (n < 1 || n >= ds.size()) throw ConfigError("initial index " + std::to_string(n) + " needs a previous frame");
    return {ds[n], ds[n - 1], n};
}

/// Single free-running rollout from `init`; metadata copied from `like`.
inline TrajectoryDataset rollout(const TrajectorySampler& sampler, const RolloutState& init, std::size_t steps,
                                 const TrajectoryDataset& like,
                                 const std::function<void(std::size_t)>& on_step = {}) {
    std::vector<Rng> rng{Rng(derive_seed(sampler.config().seed, {0x701, 0}))};
    TrajectoryDataset ds = like.empty_like();
    ds.months.clear();
    ds.frames = std::move(sampler.rollout({init}, steps, rng, on_step).front());
    return ds;
}

/// For each init index in `truth`, `members` rollouts of `leads` steps each,
/// aligned with truth frames init+1 .. init+leads.
inline EnsembleForecast ensemble_forecast(const TrajectorySampler& sampler, const TrajectoryDataset& truth,
                                          const std::vector<std::size_t>& inits, std::size_t members,
                                          std::size_t leads, std::size_t threads = 1) {
    if (members == 0 || leads == 0) throw ConfigError("ensemble needs at least one member and one lead");
    for (auto n : inits)
        if (n < 1 || n + leads >= truth.size())
            throw ConfigError("forecast init " + std::to_string(n) + " leaves no room for " + std::to_string(leads) +
                              " leads");
    EnsembleForecast ens;
    ens.forecasts = inits.size();
    ens.members = members;
    ens.leads = leads;
    ens.weights = area_weights(truth);
    ens.values.resize(inits.size() * members * leads);
    for (std::size_t f = 0; f < inits.size(); ++f)
        for (std::size_t j = 0; j < leads; ++j) ens.truth.push_back(truth[inits[f] + 1 + j]);

    threads = std::max<std::size_t>(1, std::min(threads, members));
    const std::uint64_t root = sampler.config().seed;
    for (std::size_t f = 0; f < inits.size(); ++f) {
        auto run_chunk = [&, f](std::size_t b0, std::size_t b1) {
            std::vector<RolloutState> states(b1 - b0, state_from(truth, inits[f]));
            std::vector<Rng> rngs;
            for (std::size_t b = b0; b < b1; ++b) rngs.emplace_back(derive_seed(root, {0xF0C, f, b}));
            auto traj = sampler.rollout(std::move(states), leads, rngs);
            for (std::size_t b = b0; b < b1; ++b)
                for (std::size_t j = 0; j < leads; ++j)
                    ens.values[(f * members + b) * leads + j] = std::move(traj[b - b0][j]);
        };
        if (threads == 1) {
            run_chunk(0, members);
            continue;
        }
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(threads);
        for (std::size_t w = 0; w < threads; ++w) {
            const std::size_t b0 = members * w / threads, b1 = members * (w + 1) / threads;
            pool.emplace_back([&, w, b0, b1] {
                try {
                    run_chunk(b0, b1);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    return ens;
}

}  // namespace dynaguide
