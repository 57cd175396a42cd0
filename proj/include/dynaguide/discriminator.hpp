#pragma once

/// Time-consistency discriminator: classifies whether a noisy candidate frame
/// is the true successor of a clean two-frame history.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "dynaguide/diffusion.hpp"

namespace dynaguide {

/// Offsets l = round(N(mu, sigma_step²)) with l ≠ 1, resampled until n + l is in range.
struct NegativeSampler {
    double mu = 1.0;
    double sigma_step = 2.0;

    std::int64_t draw(std::int64_t n, std::int64_t lo, std::int64_t hi, Rng& rng) const {
        if (hi - lo < 1) throw ConfigError("negative sampler needs at least two candidate frames");
        for (;;) {
            const auto l = static_cast<std::int64_t>(std::llround(mu + sigma_step * rng.normal()));
            if (l == 1) continue;
            if (n + l < lo || n + l > hi) continue;
            return l;
        }
    }
};

/// A square window [y0, y0+side) × [x0, x0+side), wrapping where the geometry allows.
struct CropWindow {
    std::size_t y0 = 0, x0 = 0, side = 0;
    friend bool operator==(const CropWindow&, const CropWindow&) = default;
};

inline CropWindow draw_crop(std::size_t H, std::size_t W, std::size_t multiple, Geometry g, Rng& rng) {
    const std::size_t lo = std::max<std::size_t>(multiple, ((H / 2 + multiple - 1) / multiple) * multiple);
    const std::size_t hi = (std::min(H, W) / multiple) * multiple;
    const std::size_t side =
        lo >= hi ? hi
                 : lo + multiple * static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>((hi - lo) / multiple)));
    CropWindow c;
    c.side = side;
    c.y0 = g == Geometry::periodic_both ? static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(H) - 1))
                                        : static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(H - side)));
    c.x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(W) - 1));
    return c;
}

/// Copy a window of one (C, H, W) sample into `out` (C, side, side).
template <class T>
void crop_into(const T* in, std::size_t C, std::size_t H, std::size_t W, const CropWindow& c, T* out) {
    for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t y = 0; y < c.side; ++y) {
            const std::size_t sy = (c.y0 + y) % H;
            for (std::size_t x = 0; x < c.side; ++x)
                out[(ch * c.side + y) * c.side + x] = in[(ch * H + sy) * W + (c.x0 + x) % W];
        }
}

template <class T>
struct GuidanceResult {
    /// ∂ logit / ∂ candidate, same shape as the candidate batch.
    Tensor<T> gradient;
    std::vector<double> logits;
};

inline double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

/// log(1 + e^z) without overflow.
inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

template <class T>
class Discriminator {
public:
    /// Noise labels are computed from max(σ, sigma_floor) so clean inputs are accepted.
    static constexpr double sigma_floor = 1e-4;

    Discriminator(const EncoderSpec& spec, std::uint64_t seed, Preconditioner pre = {})
        : pre_(pre), net_(checked(spec), seed) {}

    const Preconditioner& preconditioner() const noexcept { return pre_; }
    EncoderClassifier<T>& net() noexcept { return net_; }
    const EncoderClassifier<T>& net() const noexcept { return net_; }

    /// Raw logits on the tape for candidate var x (B, 1, h, w) and constant history (B, 2, h, w).
    ad::Var logits(nn::Forward<T>& f, ad::Var x, std::span<const double> sigma, const Tensor<T>& history) const {
        auto& tp = f.tape();
        const auto& X = tp.value(x);
        if (X.c() != 1) throw ShapeError("discriminator candidate must have one channel, got " + X.shape_string());
        if (history.n() != X.n() || history.c() + 1 != net_.spec().in_channels || history.h() != X.h() ||
            history.w() != X.w())
            throw ShapeError("history " + history.shape_string() + " does not match candidate " + X.shape_string());
        if (sigma.size() != X.n()) throw ShapeError("one sigma per sample required");
        std::vector<T> scale(X.n()), labels(X.n());
        for (std::size_t i = 0; i < X.n(); ++i) {
            if (!(sigma[i] >= 0.0) || !std::isfinite(sigma[i]))
                throw DomainError("sigma must be non-negative, got " + format_double(sigma[i]));
            const double s = std::max(sigma[i], sigma_floor);
            scale[i] = static_cast<T>(pre_.c_in(sigma[i]));
            labels[i] = static_cast<T>(pre_.c_noise(s));
        }
        const ad::Var in = ad::concat_channels(tp, ad::scale_per_sample(tp, x, std::move(scale)), tp.constant(history));
        return net_.forward(f, in, labels);
    }

    std::vector<double> logits(const Tensor<T>& x, std::span<const double> sigma, const Tensor<T>& history) const {
        ad::Tape<T> tape;
        nn::Forward<T> f(tape, net_.params(), false);
        const auto& z = tape.value(logits(f, tape.constant(x), sigma, history));
        return std::vector<double>(z.data.begin(), z.data.end());
    }

    /// Probability that each candidate is the true successor.
    std::vector<double> predict(const Tensor<T>& x, std::span<const double> sigma, const Tensor<T>& history) const {
        auto z = logits(x, sigma, history);
        for (auto& v : z) v = sigmoid(v);
        return z;
    }

    /// Input gradient of the logit, i.e. of log(D / (1 − D)).
    GuidanceResult<T> guidance(const Tensor<T>& x, std::span<const double> sigma, const Tensor<T>& history) const {
        ad::Tape<T> tape;
        nn::Forward<T> f(tape, net_.params(), false);
        const ad::Var xv = tape.variable(x);
        const ad::Var z = logits(f, xv, sigma, history);
        GuidanceResult<T> r;
        const auto& zv = tape.value(z);
        r.logits.assign(zv.data.begin(), zv.data.end());
        tape.backward(z, Tensor<T>(zv.shape, T(1)));
        r.gradient = tape.grad(xv);
        for (std::size_t i = 0; i < x.n(); ++i) {
            double norm = 0.0;
            bool finite = std::isfinite(r.logits[i]);
            for (std::size_t j = 0; j < x.sample_size(); ++j) {
                const double g = static_cast<double>(r.gradient.sample(i)[j]);
                finite = finite && std::isfinite(g);
                norm += g * g;
            }
            if (!finite || !std::isfinite(norm))
                throw NumericalError("non-finite discriminator guidance at sigma " + format_double(sigma[i]) +
                                     " (gradient norm " + format_double(std::sqrt(norm)) + ")");
        }
        return r;
    }

private:
    static EncoderSpec checked(const EncoderSpec& s) {
        if (s.in_channels < 2) throw ConfigError("discriminator needs a candidate plus at least one history frame");
        return s;
    }

    Preconditioner pre_;
    EncoderClassifier<T> net_;
};

/// Reported probabilities are clamped away from 0 and 1.
inline double clamp_probability(double q) { return std::clamp(q, 1e-6, 1.0 - 1e-6); }

struct DiscTrainConfig {
    EncoderSpec net;
    Preconditioner pre;
    SigmaDistribution sigma;
    NegativeSampler negatives;
    /// Positive/negative pairs per step.
    std::size_t batch = 8;
    std::size_t epochs = 20;
    std::size_t max_steps = 0;
    double lr = 1e-4;
    double weight_decay = 1e-4;
    double ema_rate = 0.999;
    bool crop = true;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch == 0) throw ConfigError("batch size must be positive");
        if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
        if (!(ema_rate >= 0.0 && ema_rate < 1.0)) throw ConfigError("ema rate must lie in [0, 1)");
        if (!(negatives.sigma_step > 0.0)) throw ConfigError("negative offset spread must be positive");
        net.validate();
    }

    Metadata snapshot() const {
        Metadata m;
        m.set("batch", static_cast<std::uint64_t>(batch));
        m.set("epochs", static_cast<std::uint64_t>(epochs));
        m.set("max_steps", static_cast<std::uint64_t>(max_steps));
        m.set("lr", lr);
        m.set("weight_decay", weight_decay);
        m.set("ema_rate", ema_rate);
        m.set("p_mean", sigma.p_mean);
        m.set("p_std", sigma.p_std);
        m.set("neg.mu", negatives.mu);
        m.set("neg.sigma", negatives.sigma_step);
        m.set("crop", crop ? "on" : "off");
        m.set("seed", static_cast<std::uint64_t>(seed));
        return m;
    }
};

/// One training example as seen by instrumentation.
struct DiscExampleEvent {
    std::uint64_t step = 0;
    std::size_t n = 0;
    std::int64_t offset = 0;
    bool positive = false;
    double sigma = 0.0;
    CropWindow window;
};

/// Number of clean history frames (m + 1) the discriminator consumes.
inline std::size_t disc_history(const EncoderSpec& s) { return s.in_channels - 1; }

/// History tensor for conditioning index n: channels [n, n−1, ..., n−m].
inline Tensor<float> history_at(const TrajectoryDataset& ds, const std::vector<std::size_t>& n, std::size_t frames) {
    const std::size_t P = ds.height() * ds.width();
    Tensor<float> h({n.size(), frames, ds.height(), ds.width()});
    for (std::size_t i = 0; i < n.size(); ++i)
        for (std::size_t k = 0; k < frames; ++k) {
            const auto v = ds[n[i] - k].values();
            std::copy(v.begin(), v.end(), h.sample(i) + k * P);
        }
    return h;
}

inline Metadata disc_arch(const EncoderSpec& spec, const Preconditioner& pre) {
    Metadata m;
    m.set("sigma_data", pre.sigma_data);
    spec.write(m, "net.");
    return m;
}

inline Discriminator<float> discriminator_from_checkpoint(const ModelCheckpoint& c, bool use_ema = true) {
    if (c.kind != "discriminator")
        throw FormatError("checkpoint holds a '" + c.kind + "' model, expected a discriminator");
    Discriminator<float> d(EncoderSpec::read(c.arch, "net."), 0, Preconditioner{c.arch.get_double("sigma_data")});
    const auto& src = use_ema ? c.ema : c.params;
    if (src.size() != d.net().params().size()) throw FormatError("checkpoint parameter count does not match architecture");
    d.net().params().values() = src;
    return d;
}

struct DiscLossResult {
    double loss = 0.0;
    double accuracy = 0.0;
    std::vector<float> gradient;
};

/// Binary cross-entropy on logits for candidates x with labels y ∈ {0, 1}.
inline DiscLossResult disc_loss(const Discriminator<float>& d, const Tensor<float>& x, std::span<const double> sigma,
                                const Tensor<float>& history, const std::vector<int>& labels) {
    ad::Tape<float> tape;
    nn::Forward<float> f(tape, d.net().params(), true);
    const ad::Var z = d.logits(f, tape.constant(x), sigma, history);
    const auto zv = tape.value(z);
    DiscLossResult r;
    Tensor<float> seed(zv.shape);
    const double inv = 1.0 / static_cast<double>(x.n());
    std::size_t correct = 0;
    for (std::size_t i = 0; i < x.n(); ++i) {
        const double zi = zv.data[i];
        r.loss += (labels[i] ? softplus(-zi) : softplus(zi)) * inv;
        seed.data[i] = static_cast<float>((sigmoid(zi) - labels[i]) * inv);
        correct += ((zi > 0) == (labels[i] == 1));
    }
    if (!std::isfinite(r.loss)) throw NumericalError("non-finite discriminator loss");
    r.accuracy = static_cast<double>(correct) * inv;
    tape.backward(z, seed);
    r.gradient = f.param_gradients();
    return r;
}

inline ModelCheckpoint train_discriminator(const DiscTrainConfig& cfg, const TrajectoryDataset& ds,
                                           const std::function<void(const TrainProgress&)>& on_step = {},
                                           const std::function<void(const DiscExampleEvent&)>& on_example = {}) {
    cfg.validate();
    ds.validate();
    if (ds.channels() != 1) throw ShapeError("discriminator training expects single-channel frames");
    EncoderSpec spec = cfg.net;
    spec.geometry = ds.geometry();
    const std::size_t hist = disc_history(spec);
    if (ds.size() < hist + 2) throw ConfigError("dataset too short for discriminator training");
    if (ds.height() % spec.divisor() || ds.width() % spec.divisor())
        throw ShapeError("grid " + ds[0].shape_string() + " not divisible by " + std::to_string(spec.divisor()));
    Discriminator<float> d(spec, derive_seed(cfg.seed, {1}), cfg.pre);

    ModelCheckpoint ck;
    ck.kind = "discriminator";
    ck.arch = disc_arch(spec, cfg.pre);
    ck.config = cfg.snapshot();
    ck.params = d.net().params().values();
    ck.ema = ck.params;
    ck.ema_rate = cfg.ema_rate;
    ck.optimizer.lr = cfg.lr;
    ck.optimizer.weight_decay = cfg.weight_decay;

    Rng rng(derive_seed(cfg.seed, {2}));
    const auto N = static_cast<std::int64_t>(ds.size());
    const auto first = static_cast<std::int64_t>(hist - 1);
    const std::size_t total = planned_steps(cfg.max_steps, cfg.epochs, ds.size() - hist, cfg.batch);
    const std::size_t H = ds.height(), W = ds.width(), P = H * W;
    for (std::size_t step = 0; step < total; ++step) {
        const CropWindow win = cfg.crop ? draw_crop(H, W, spec.divisor(), spec.geometry, rng) : CropWindow{0, 0, H};
        if (!cfg.crop && H != W) throw ConfigError("uncropped training requires a square grid");
        const std::size_t s = win.side, B = 2 * cfg.batch;
        Tensor<float> x({B, 1, s, s}), h({B, hist, s, s});
        std::vector<double> sig(B);
        std::vector<int> labels(B);
        std::vector<float> full(hist * P);
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const auto n = rng.uniform_int(first, N - 2);
            const auto l = cfg.negatives.draw(n, 0, N - 1, rng);
            const double sigma = cfg.sigma.draw(rng);
            for (std::size_t k = 0; k < hist; ++k) {
                const auto v = ds[static_cast<std::size_t>(n) - k].values();
                std::copy(v.begin(), v.end(), full.begin() + static_cast<std::ptrdiff_t>(k * P));
            }
            for (int role = 0; role < 2; ++role) {
                const std::size_t i = 2 * b + static_cast<std::size_t>(role);
                const auto idx = static_cast<std::size_t>(n + (role == 0 ? 1 : l));
                std::vector<float> cand(ds[idx].values().begin(), ds[idx].values().end());
                for (auto& v : cand) v += static_cast<float>(sigma * rng.normal());
                crop_into(cand.data(), 1, H, W, win, x.sample(i));
                crop_into(full.data(), hist, H, W, win, h.sample(i));
                sig[i] = sigma;
                labels[i] = role == 0;
                if (on_example)
                    on_example({step, static_cast<std::size_t>(n), role == 0 ? 1 : l, role == 0, sigma, win});
            }
        }
        DiscLossResult r;
        try {
            r = disc_loss(d, x, sig, h, labels);
        } catch (const NumericalError& e) {
            throw TrainingDiverged(std::string(e.what()) + " (step " + std::to_string(step) + ")", ck);
        }
        ck.optimizer.step(d.net().params().values(), r.gradient);
        ema_update(ck.ema, d.net().params().values(), cfg.ema_rate);
        ck.step = step + 1;
        ck.last_loss = r.loss;
        if (on_step) on_step({ck.step, r.loss});
    }
    ck.params = d.net().params().values();
    return ck;
}

/// Area under the ROC curve via the Mann-Whitney statistic (ties count half).
inline double roc_auc(std::vector<double> positive, std::vector<double> negative) {
    if (positive.empty() || negative.empty()) throw DomainError("AUC needs both classes");
    std::sort(negative.begin(), negative.end());
    double acc = 0.0;
    for (double p : positive) {
        const auto lo = std::lower_bound(negative.begin(), negative.end(), p);
        const auto hi = std::upper_bound(negative.begin(), negative.end(), p);
        acc += static_cast<double>(lo - negative.begin()) + 0.5 * static_cast<double>(hi - lo);
    }
    return acc / (static_cast<double>(positive.size()) * static_cast<double>(negative.size()));
}

/// Exact two-sided binomial test p-value for k successes in n trials at p = 1/2.
inline double binomial_two_sided_p(std::size_t k, std::size_t n) {
    if (k > n) throw DomainError("successes exceed trials");
    auto log_pmf = [n](std::size_t i) {
        return std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(i) + 1) -
               std::lgamma(static_cast<double>(n - i) + 1) - static_cast<double>(n) * std::log(2.0);
    };
    const double observed = log_pmf(k);
    double p = 0.0;
    for (std::size_t i = 0; i <= n; ++i)
        if (log_pmf(i) <= observed + 1e-9) p += std::exp(log_pmf(i));
    return std::min(1.0, p);
}

}  // namespace dynaguide
