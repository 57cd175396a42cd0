#pragma once

/// Preconditioned denoising diffusion: noise schedule, denoiser wrapper,
/// weighted denoising loss, AdamW, EMA, training loop and checkpoints.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dynaguide/field.hpp"
#include "dynaguide/networks.hpp"
#include "dynaguide/stdg.hpp"

namespace dynaguide {

struct NoiseSchedule {
    double sigma_min = 0.002;
    double sigma_max = 80.0;
    double rho = 7.0;
    std::size_t steps = 50;
    /// steps + 1 entries; the last one is 0.
    std::vector<double> sigmas;
};

inline NoiseSchedule make_schedule(double sigma_min, double sigma_max, double rho, std::size_t steps) {
    if (!(sigma_min > 0.0) || !(sigma_max > sigma_min))
        throw ConfigError("schedule requires 0 < sigma_min < sigma_max");
    if (!(rho > 0.0)) throw ConfigError("schedule requires rho > 0");
    if (steps < 2) throw ConfigError("schedule requires at least 2 steps");
    NoiseSchedule s{sigma_min, sigma_max, rho, steps, {}};
    const double a = std::pow(sigma_max, 1.0 / rho), b = std::pow(sigma_min, 1.0 / rho);
    s.sigmas.resize(steps + 1);
    for (std::size_t i = 0; i < steps; ++i)
        s.sigmas[i] = std::pow(a + static_cast<double>(i) / static_cast<double>(steps - 1) * (b - a), rho);
    s.sigmas.front() = sigma_max;
    s.sigmas[steps - 1] = sigma_min;
    s.sigmas[steps] = 0.0;
    return s;
}

struct Preconditioner {
    double sigma_data = 0.5;

    double c_skip(double s) const { return sigma_data * sigma_data / (s * s + sigma_data * sigma_data); }
    double c_out(double s) const { return s * sigma_data / std::sqrt(s * s + sigma_data * sigma_data); }
    double c_in(double s) const { return 1.0 / std::sqrt(s * s + sigma_data * sigma_data); }
    double c_noise(double s) const { return std::log(s) / 4.0; }
    double loss_weight(double s) const {
        return (s * s + sigma_data * sigma_data) / (s * sigma_data * s * sigma_data);
    }
};

enum class ScoreMode { unconditional, conditional };

inline std::string to_string(ScoreMode m) { return m == ScoreMode::unconditional ? "uncond" : "cond"; }
inline ScoreMode score_mode_from_string(const std::string& s) {
    if (s == "uncond" || s == "unconditional") return ScoreMode::unconditional;
    if (s == "cond" || s == "conditional") return ScoreMode::conditional;
    throw ConfigError("unknown score mode '" + s + "' (expected uncond|cond)");
}

/// Number of clean history frames stacked behind the noisy candidate.
inline std::size_t history_channels(ScoreMode m) { return m == ScoreMode::conditional ? 2 : 0; }

/// Stack frames into an (N, 1, H, W) tensor.
inline Tensor<float> stack_frames(const std::vector<const Field*>& frames) {
    if (frames.empty()) throw ShapeError("cannot stack zero frames");
    const auto& f0 = *frames.front();
    Tensor<float> t({frames.size(), f0.channels(), f0.height(), f0.width()});
    for (std::size_t i = 0; i < frames.size(); ++i) {
        if (!frames[i]->same_shape(f0)) throw ShapeError("frames disagree in shape");
        std::copy(frames[i]->values().begin(), frames[i]->values().end(), t.sample(i));
    }
    return t;
}

inline Field tensor_sample_to_field(const Tensor<float>& t, std::size_t i, Geometry g) {
    const float* p = t.sample(i);
    return Field(t.c(), t.h(), t.w(), std::vector<float>(p, p + t.sample_size()), g);
}

/// Channel-concatenate (N, C1, H, W) and (N, C2, H, W) without a tape.
template <class T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
        throw ShapeError("cannot concatenate " + a.shape_string() + " and " + b.shape_string());
    Tensor<T> out({a.n(), a.c() + b.c(), a.h(), a.w()});
    for (std::size_t i = 0; i < a.n(); ++i) {
        std::copy(a.sample(i), a.sample(i) + a.sample_size(), out.sample(i));
        std::copy(b.sample(i), b.sample(i) + b.sample_size(), out.sample(i) + a.sample_size());
    }
    return out;
}

/// Preconditioned denoiser D(x; σ) = c_skip x + c_out F(c_in x; c_noise), with
/// optional clean history channels appended to the network input.
template <class T>
class Denoiser {
public:
    Denoiser(ScoreMode mode, const UNetSpec& spec, std::uint64_t seed, Preconditioner pre = {})
        : mode_(mode), pre_(pre), net_(checked(mode, spec), seed) {}

    ScoreMode mode() const noexcept { return mode_; }
    const Preconditioner& preconditioner() const noexcept { return pre_; }
    UNet<T>& net() noexcept { return net_; }
    const UNet<T>& net() const noexcept { return net_; }

    /// Network input [c_in x, history] and noise labels for a batch.
    std::pair<Tensor<T>, std::vector<T>> network_input(const Tensor<T>& x, std::span<const double> sigma,
                                                       const Tensor<T>* history) const {
        check_inputs(x, sigma, history);
        Tensor<T> scaled = x;
        std::vector<T> labels(x.n());
        for (std::size_t i = 0; i < x.n(); ++i) {
            const T c = static_cast<T>(pre_.c_in(sigma[i]));
            T* p = scaled.sample(i);
            for (std::size_t j = 0; j < x.sample_size(); ++j) p[j] *= c;
            labels[i] = static_cast<T>(pre_.c_noise(sigma[i]));
        }
        if (history) scaled = concat(scaled, *history);
        return {std::move(scaled), std::move(labels)};
    }

    /// Raw network output F on the tape.
    ad::Var raw(nn::Forward<T>& f, const Tensor<T>& x, std::span<const double> sigma, const Tensor<T>* history) const {
        auto [in, labels] = network_input(x, sigma, history);
        return net_.forward(f, f.tape().constant(std::move(in)), labels);
    }

    /// D(x; σ) for a batch (one σ per sample).
    Tensor<T> denoise(const Tensor<T>& x, std::span<const double> sigma, const Tensor<T>* history = nullptr) const {
        ad::Tape<T> tape;
        nn::Forward<T> f(tape, net_.params(), false);
        const Tensor<T> F = tape.value(raw(f, x, sigma, history));
        return combine(x, F, sigma);
    }

    /// (D(x; σ) − x) / σ².
    Tensor<T> score(const Tensor<T>& x, std::span<const double> sigma, const Tensor<T>* history = nullptr) const {
        Tensor<T> d = denoise(x, sigma, history);
        for (std::size_t i = 0; i < x.n(); ++i) {
            const double s2 = sigma[i] * sigma[i];
            for (std::size_t j = 0; j < x.sample_size(); ++j) {
                auto& v = d.sample(i)[j];
                v = static_cast<T>((static_cast<double>(v) - static_cast<double>(x.sample(i)[j])) / s2);
            }
        }
        return d;
    }

    Tensor<T> combine(const Tensor<T>& x, const Tensor<T>& F, std::span<const double> sigma) const {
        Tensor<T> d(x.shape);
        for (std::size_t i = 0; i < x.n(); ++i) {
            const T cs = static_cast<T>(pre_.c_skip(sigma[i])), co = static_cast<T>(pre_.c_out(sigma[i]));
            for (std::size_t j = 0; j < x.sample_size(); ++j) d.sample(i)[j] = cs * x.sample(i)[j] + co * F.sample(i)[j];
        }
        return d;
    }

private:
    static UNetSpec checked(ScoreMode mode, UNetSpec spec) {
        if (spec.in_channels != 1 + history_channels(mode) || spec.out_channels != 1)
            throw ConfigError("score network for mode " + to_string(mode) + " needs " +
                              std::to_string(1 + history_channels(mode)) + " input channels and 1 output");
        return spec;
    }

    void check_inputs(const Tensor<T>& x, std::span<const double> sigma, const Tensor<T>* history) const {
        if (x.c() != 1) throw ShapeError("denoiser candidate must have one channel, got " + x.shape_string());
        if (sigma.size() != x.n()) throw ShapeError("one sigma per sample required");
        for (double s : sigma)
            if (!(s > 0.0) || !std::isfinite(s)) throw DomainError("sigma must be positive, got " + format_double(s));
        if ((history != nullptr) != (mode_ == ScoreMode::conditional))
            throw ShapeError(mode_ == ScoreMode::conditional ? "conditional denoiser requires two history frames"
                                                              : "unconditional denoiser takes no history frames");
        if (history && (history->c() != 2 || history->n() != x.n() || history->h() != x.h() || history->w() != x.w()))
            throw ShapeError("history " + history->shape_string() + " does not match candidate " + x.shape_string());
    }

    ScoreMode mode_;
    Preconditioner pre_;
    UNet<T> net_;
};

/// Log-normal noise level distribution used for training.
struct SigmaDistribution {
    double p_mean = -1.2;
    double p_std = 1.2;
    double draw(Rng& rng) const { return std::exp(p_mean + p_std * rng.normal()); }
};

template <class T>
struct LossResult {
    double loss = 0.0;
    std::vector<T> gradient;
    std::vector<double> sigmas;
};

/// Weighted denoising loss (1/N) Σ_i w(σ_i) mean_px (D(x0_i + σ_i ε) − x0_i)² and its parameter gradient.
template <class T>
LossResult<T> training_loss(const Denoiser<T>& model, const Tensor<T>& clean, const Tensor<T>* history,
                            std::span<const double> sigmas, Rng& rng) {
    if (sigmas.size() != clean.n()) throw ShapeError("one sigma per sample required");
    const auto& pre = model.preconditioner();
    Tensor<T> noisy = clean;
    for (std::size_t i = 0; i < clean.n(); ++i)
        for (std::size_t j = 0; j < clean.sample_size(); ++j)
            noisy.sample(i)[j] = clean.sample(i)[j] + static_cast<T>(sigmas[i] * rng.normal());

    ad::Tape<T> tape;
    nn::Forward<T> f(tape, model.net().params(), true);
    const ad::Var F = model.raw(f, noisy, sigmas, history);
    const Tensor<T> D = model.combine(noisy, tape.value(F), sigmas);

    LossResult<T> r;
    r.sigmas.assign(sigmas.begin(), sigmas.end());
    Tensor<T> seed(D.shape);
    const double per_sample = static_cast<double>(clean.sample_size());
    const double norm = 1.0 / (static_cast<double>(clean.n()) * per_sample);
    for (std::size_t i = 0; i < clean.n(); ++i) {
        const double w = pre.loss_weight(sigmas[i]), co = pre.c_out(sigmas[i]);
        double acc = 0.0;
        for (std::size_t j = 0; j < clean.sample_size(); ++j) {
            const double e = static_cast<double>(D.sample(i)[j]) - static_cast<double>(clean.sample(i)[j]);
            acc += e * e;
            seed.sample(i)[j] = static_cast<T>(2.0 * w * co * e * norm);
        }
        const double li = w * acc * norm;
        if (!std::isfinite(li)) throw NumericalError("non-finite training loss at sigma " + format_double(sigmas[i]));
        r.loss += li;
    }
    tape.backward(F, seed);
    r.gradient = f.param_gradients();
    return r;
}

/// Adam with decoupled weight decay.
struct AdamW {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-4;
    double eps = 1e-8;
    std::uint64_t t = 0;
    std::vector<float> m, v;

    template <class T>
    void step(std::vector<T>& params, const std::vector<T>& grad) {
        if (grad.size() != params.size()) throw ShapeError("gradient size does not match parameters");
        if (m.empty()) {
            m.assign(params.size(), 0.0f);
            v.assign(params.size(), 0.0f);
        }
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = static_cast<double>(grad[i]);
            const double mi = beta1 * m[i] + (1.0 - beta1) * g;
            const double vi = beta2 * v[i] + (1.0 - beta2) * g * g;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            double p = static_cast<double>(params[i]);
            p -= lr * (weight_decay * p + (mi / bc1) / (std::sqrt(vi / bc2) + eps));
            params[i] = static_cast<T>(p);
        }
    }
};

/// ema ← r·ema + (1−r)·param.
template <class T>
void ema_update(std::vector<T>& ema, const std::vector<T>& params, double rate) {
    if (ema.size() != params.size()) throw ShapeError("EMA size does not match parameters");
    for (std::size_t i = 0; i < ema.size(); ++i)
        ema[i] = static_cast<T>(rate * static_cast<double>(ema[i]) + (1.0 - rate) * static_cast<double>(params[i]));
}

/// Trained weights plus everything needed to resume or reproduce the run.
struct ModelCheckpoint {
    std::string kind;
    Metadata arch;
    Metadata config;
    std::vector<float> params;
    std::vector<float> ema;
    double ema_rate = 0.9999;
    AdamW optimizer;
    std::uint64_t step = 0;
    double last_loss = 0.0;
};

inline Container checkpoint_to_container(const ModelCheckpoint& c) {
    const std::size_t P = c.params.size();
    if (c.ema.size() != P) throw ShapeError("checkpoint EMA size does not match parameters");
    Metadata head;
    head.set("kind", "checkpoint");
    head.set("model", c.kind);
    head.set("step", static_cast<std::uint64_t>(c.step));
    head.set("ema_rate", c.ema_rate);
    head.set("last_loss", c.last_loss);
    head.set("adam.t", static_cast<std::uint64_t>(c.optimizer.t));
    head.set("adam.lr", c.optimizer.lr);
    head.set("adam.beta1", c.optimizer.beta1);
    head.set("adam.beta2", c.optimizer.beta2);
    head.set("adam.weight_decay", c.optimizer.weight_decay);
    head.set("adam.eps", c.optimizer.eps);
    Container out;
    out.dims = {4, P};
    out.blocks = {head, c.arch, c.config};
    out.payload.reserve(4 * P);
    const std::vector<float> zeros(P, 0.0f);
    for (const auto* v : {&c.params, &c.ema, c.optimizer.m.empty() ? &zeros : &c.optimizer.m,
                          c.optimizer.v.empty() ? &zeros : &c.optimizer.v})
        out.payload.insert(out.payload.end(), v->begin(), v->end());
    return out;
}

inline ModelCheckpoint checkpoint_from_container(const Container& in, const std::string& path = "<memory>") {
    if (in.blocks.size() < 3 || in.blocks[0].get_or("kind", "") != "checkpoint")
        throw FormatError(path + ": not a model checkpoint");
    if (in.dims.size() != 2 || in.dims[0] != 4) throw FormatError(path + ": malformed checkpoint payload");
    const auto& head = in.blocks[0];
    ModelCheckpoint c;
    c.kind = head.get("model");
    c.arch = in.blocks[1];
    c.config = in.blocks[2];
    c.step = static_cast<std::uint64_t>(head.get_int("step"));
    c.ema_rate = head.get_double("ema_rate");
    c.last_loss = head.get_double("last_loss");
    c.optimizer.t = static_cast<std::uint64_t>(head.get_int("adam.t"));
    c.optimizer.lr = head.get_double("adam.lr");
    c.optimizer.beta1 = head.get_double("adam.beta1");
    c.optimizer.beta2 = head.get_double("adam.beta2");
    c.optimizer.weight_decay = head.get_double("adam.weight_decay");
    c.optimizer.eps = head.get_double("adam.eps");
    const auto P = static_cast<std::ptrdiff_t>(in.dims[1]);
    const auto* p = in.payload.data();
    c.params.assign(p, p + P);
    c.ema.assign(p + P, p + 2 * P);
    if (c.optimizer.t > 0) {
        c.optimizer.m.assign(p + 2 * P, p + 3 * P);
        c.optimizer.v.assign(p + 3 * P, p + 4 * P);
    }
    return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& c) {
    write_container(path, checkpoint_to_container(c));
}

inline ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
    return checkpoint_from_container(read_container(path), path.string());
}

struct ScoreTrainConfig {
    ScoreMode mode = ScoreMode::unconditional;
    UNetSpec net;
    Preconditioner pre;
    SigmaDistribution sigma;
    std::size_t batch = 16;
    std::size_t epochs = 20;
    /// Overrides epochs when non-zero.
    std::size_t max_steps = 0;
    double lr = 1e-4;
    double weight_decay = 1e-4;
    double ema_rate = 0.9999;
    std::uint64_t seed = 0;
    std::size_t checkpoint_every = 0;
    std::filesystem::path checkpoint_path;

    void validate() const {
        if (batch == 0) throw ConfigError("batch size must be positive");
        if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
        if (!(ema_rate >= 0.0 && ema_rate < 1.0)) throw ConfigError("ema rate must lie in [0, 1)");
        if (!(sigma.p_std > 0.0)) throw ConfigError("sigma p_std must be positive");
        if (!(pre.sigma_data > 0.0)) throw ConfigError("sigma_data must be positive");
        net.validate();
    }

    Metadata snapshot() const {
        Metadata m;
        m.set("mode", to_string(mode));
        m.set("batch", static_cast<std::uint64_t>(batch));
        m.set("epochs", static_cast<std::uint64_t>(epochs));
        m.set("max_steps", static_cast<std::uint64_t>(max_steps));
        m.set("lr", lr);
        m.set("weight_decay", weight_decay);
        m.set("ema_rate", ema_rate);
        m.set("p_mean", sigma.p_mean);
        m.set("p_std", sigma.p_std);
        m.set("seed", static_cast<std::uint64_t>(seed));
        return m;
    }
};

inline Metadata score_arch(ScoreMode mode, const UNetSpec& spec, const Preconditioner& pre) {
    Metadata m;
    m.set("mode", to_string(mode));
    m.set("sigma_data", pre.sigma_data);
    spec.write(m, "net.");
    return m;
}

/// Build an inference denoiser from a checkpoint (EMA weights unless `use_ema` is false).
inline Denoiser<float> denoiser_from_checkpoint(const ModelCheckpoint& c, bool use_ema = true) {
    if (c.kind != "score") throw FormatError("checkpoint holds a '" + c.kind + "' model, expected a score model");
    const auto mode = score_mode_from_string(c.arch.get("mode"));
    Preconditioner pre{c.arch.get_double("sigma_data")};
    Denoiser<float> d(mode, UNetSpec::read(c.arch, "net."), 0, pre);
    const auto& src = use_ema ? c.ema : c.params;
    if (src.size() != d.net().params().size()) throw FormatError("checkpoint parameter count does not match architecture");
    d.net().params().values() = src;
    return d;
}

/// Thrown when the loss turns non-finite; carries the last finite state.
class TrainingDiverged : public NumericalError {
public:
    TrainingDiverged(const std::string& what, ModelCheckpoint last_good)
        : NumericalError(what), last_good_(std::move(last_good)) {}
    const ModelCheckpoint& last_good() const noexcept { return last_good_; }

private:
    ModelCheckpoint last_good_;
};

/// Index of the candidate frame for each training example: uniform over
/// frames that have the required history.
inline std::size_t draw_candidate(std::size_t n_frames, std::size_t history, Rng& rng) {
    return static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(history), static_cast<std::int64_t>(n_frames) - 1));
}

/// Gather history frames [n−1, n−2] for candidates n as (B, 2, H, W): channel 0 is the
/// most recent clean frame, channel 1 the one before it.
inline Tensor<float> gather_history(const TrajectoryDataset& ds, const std::vector<std::size_t>& candidates) {
    const std::size_t H = ds.height(), W = ds.width(), P = H * W;
    Tensor<float> h({candidates.size(), 2, H, W});
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto& a = ds[candidates[i] - 1].values();
        const auto& b = ds[candidates[i] - 2].values();
        std::copy(a.begin(), a.end(), h.sample(i));
        std::copy(b.begin(), b.end(), h.sample(i) + P);
    }
    return h;
}

struct TrainProgress {
    std::uint64_t step = 0;
    double loss = 0.0;
};

/// Steps implied by a configuration for a dataset of `n_examples` usable examples.
inline std::size_t planned_steps(std::size_t max_steps, std::size_t epochs, std::size_t n_examples, std::size_t batch) {
    if (max_steps) return max_steps;
    return epochs * ((n_examples + batch - 1) / batch);
}

inline ModelCheckpoint train_score(const ScoreTrainConfig& cfg, const TrajectoryDataset& ds,
                                   const std::function<void(const TrainProgress&)>& on_step = {}) {
    cfg.validate();
    ds.validate();
    if (ds.split != Split::train) throw ConfigError("score training requires the train split");
    if (ds.channels() != 1) throw ShapeError("score training expects single-channel frames");
    const std::size_t hist = history_channels(cfg.mode);
    if (ds.size() < hist + 1) throw ConfigError("dataset too short for score training");
    UNetSpec spec = cfg.net;
    spec.in_channels = 1 + hist;
    spec.out_channels = 1;
    spec.geometry = ds.geometry();
    Denoiser<float> model(cfg.mode, spec, derive_seed(cfg.seed, {1}), cfg.pre);
    if (ds.height() % spec.divisor() || ds.width() % spec.divisor())
        throw ShapeError("grid " + ds[0].shape_string() + " not divisible by " + std::to_string(spec.divisor()));

    ModelCheckpoint ck;
    ck.kind = "score";
    ck.arch = score_arch(cfg.mode, spec, cfg.pre);
    ck.config = cfg.snapshot();
    ck.params = model.net().params().values();
    ck.ema = ck.params;
    ck.ema_rate = cfg.ema_rate;
    ck.optimizer.lr = cfg.lr;
    ck.optimizer.weight_decay = cfg.weight_decay;

    Rng rng(derive_seed(cfg.seed, {2}));
    const std::size_t total = planned_steps(cfg.max_steps, cfg.epochs, ds.size() - hist, cfg.batch);
    ModelCheckpoint last_good = ck;
    for (std::size_t step = 0; step < total; ++step) {
        std::vector<std::size_t> idx(cfg.batch);
        std::vector<const Field*> frames(cfg.batch);
        std::vector<double> sig(cfg.batch);
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            idx[b] = draw_candidate(ds.size(), hist, rng);
            frames[b] = &ds[idx[b]];
            sig[b] = cfg.sigma.draw(rng);
        }
        const Tensor<float> clean = stack_frames(frames);
        std::optional<Tensor<float>> history;
        if (hist) history = gather_history(ds, idx);
        LossResult<float> r;
        try {
            r = training_loss(model, clean, history ? &*history : nullptr, sig, rng);
        } catch (const NumericalError& e) {
            throw TrainingDiverged(std::string(e.what()) + " (step " + std::to_string(step) + ")", last_good);
        }
        for (float g : r.gradient)
            if (!std::isfinite(g))
                throw TrainingDiverged("non-finite gradient at step " + std::to_string(step), last_good);
        ck.optimizer.step(model.net().params().values(), r.gradient);
        ema_update(ck.ema, model.net().params().values(), cfg.ema_rate);
        ck.step = step + 1;
        ck.last_loss = r.loss;
        if (on_step) on_step({ck.step, r.loss});
        if (cfg.checkpoint_every && ck.step % cfg.checkpoint_every == 0) {
            ck.params = model.net().params().values();
            last_good = ck;
            if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, ck);
        }
    }
    ck.params = model.net().params().values();
    return ck;
}

}  // namespace dynaguide
