#pragma once

/// End-to-end experiment pipeline: simulate, train, evaluate, report.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dynaguide/config.hpp"
#include "dynaguide/metrics.hpp"
#include "dynaguide/report.hpp"
#include "dynaguide/sampler.hpp"

namespace dynaguide {

enum class Stage { simulate, train, evaluate, all };

inline Stage stage_from_string(const std::string& s) {
    if (s == "simulate") return Stage::simulate;
    if (s == "train") return Stage::train;
    if (s == "evaluate") return Stage::evaluate;
    if (s == "all") return Stage::all;
    throw ConfigError("unknown stage '" + s + "' (expected simulate|train|evaluate|all)");
}

struct PipelineOptions {
    std::filesystem::path out = "out";
    /// Optional shared directory for datasets, checkpoints and samples.
    std::optional<std::filesystem::path> cache;
    std::size_t threads = 1;
    std::function<void(const std::string&)> log;
};

/// Identity of an artifact: the hash of the settings that produced it plus its inputs.
struct ArtifactKey {
    std::string config_hash;
    std::vector<std::pair<std::string, std::string>> inputs;

    std::string digest() const {
        std::string s = config_hash + "\n";
        for (const auto& [k, v] : inputs) s += k + "=" + v + "\n";
        return sha1_hex(s);
    }

    bool matches(const Container& c) const {
        const Metadata* p = find_provenance(c);
        if (!p || p->get_or("config_hash", "") != config_hash) return false;
        for (const auto& [k, v] : inputs)
            if (p->get_or("input." + k, "") != v) return false;
        return true;
    }
};

/// Artifacts live in the output directory; a cache directory, when set, is consulted and filled too.
class ArtifactStore {
public:
    explicit ArtifactStore(const PipelineOptions& opts) : opts_(opts) {
        std::filesystem::create_directories(opts_.out);
        if (opts_.cache) std::filesystem::create_directories(*opts_.cache);
    }

    std::filesystem::path path(const std::string& name) const { return opts_.out / name; }

    /// A stored artifact built from `key`, copied into the output directory when found in the cache.
    std::optional<Container> find(const std::string& name, const ArtifactKey& key) const {
        if (auto c = try_read(path(name)); c && key.matches(*c)) return c;
        if (opts_.cache) {
            const auto cached = cache_path(name, key);
            if (auto c = try_read(cached); c && key.matches(*c)) {
                write_container(path(name), *c);
                return c;
            }
        }
        return std::nullopt;
    }

    /// Stamp `c` with provenance and write it.
    Container put(const std::string& name, Container c, const ArtifactKey& key,
                  const std::vector<std::pair<std::string, std::string>>& extra = {}) const {
        add_provenance(c, key.config_hash, key.inputs);
        for (const auto& [k, v] : extra) c.blocks.back().set(k, v);
        write_container(path(name), c);
        if (opts_.cache) write_container(cache_path(name, key), c);
        return c;
    }

private:
    std::filesystem::path cache_path(const std::string& name, const ArtifactKey& key) const {
        return *opts_.cache / (key.digest().substr(0, 16) + "-" + name);
    }

    static std::optional<Container> try_read(const std::filesystem::path& p) {
        if (!std::filesystem::exists(p)) return std::nullopt;
        try {
            return read_container(p);
        } catch (const Error&) {
            return std::nullopt;
        }
    }

    PipelineOptions opts_;
};

/// Mean of `v` and a moving-block bootstrap confidence interval for it.
struct BootstrapInterval {
    double mean = 0.0, lo = 0.0, hi = 0.0;
};

inline BootstrapInterval block_bootstrap_mean(const std::vector<double>& v, std::size_t resamples, std::size_t block,
                                              std::uint64_t seed, double level = 0.95) {
    if (v.empty()) throw DomainError("bootstrap of an empty series");
    const std::size_t T = v.size();
    block = std::clamp<std::size_t>(block, 1, T);
    BootstrapInterval r;
    r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(T);
    Rng rng(seed);
    std::vector<double> means(resamples);
    for (auto& m : means) {
        double acc = 0.0;
        std::size_t taken = 0;
        while (taken < T) {
            const auto start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(T - block)));
            for (std::size_t i = 0; i < block && taken < T; ++i, ++taken) acc += v[start + i];
        }
        m = acc / static_cast<double>(T);
    }
    const double tail = 50.0 * (1.0 - level);
    r.lo = percentile(means, tail);
    r.hi = percentile(means, 100.0 - tail);
    return r;
}

/// Area-weighted spatial mean of one frame.
inline double weighted_mean(const Field& f, const AreaWeights& w) {
    double acc = 0.0;
    for (std::size_t c = 0; c < f.channels(); ++c)
        for (std::size_t k = 0; k < f.height(); ++k)
            for (std::size_t l = 0; l < f.width(); ++l) acc += w[k] * f.at(c, k, l);
    return acc / static_cast<double>(f.size());
}

/// Spatial standard deviation of one frame.
inline double frame_std(const Field& f) {
    const auto v = f.values();
    double mean = 0.0;
    for (float x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (float x : v) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(v.size()));
}

inline double mean_frame_std(const std::vector<Field>& frames) {
    if (frames.empty()) throw DomainError("no frames");
    double acc = 0.0;
    for (const auto& f : frames) acc += frame_std(f);
    return acc / static_cast<double>(frames.size());
}

/// Statistics of one trajectory on its own; `reference` supplies the scale and extreme thresholds.
inline MetricReport sequence_metrics(const std::vector<Field>& traj, const std::vector<Field>& reference,
                                     const EvalProtocol& eval, const AreaWeights& w) {
    MetricReport r;
    bool finite = true;
    for (const auto& f : traj) finite = finite && f.all_finite();
    r.set("frames", traj.size());
    r.set("finite", finite);
    if (!finite) return r;
    const double ref_std = mean_frame_std(reference);
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (const auto& f : traj) {
        const double s = frame_std(f) / ref_std;
        lo = std::min(lo, s);
        hi = std::max(hi, s);
    }
    r.set("std_ratio_min", lo);
    r.set("std_ratio_max", hi);
    const auto a = acf(traj, w, eval.acf_lags);
    r.set("acf", a.values);
    r.set("acf_lag1", a.values.at(1));
    const auto h = hovmoeller(traj, Band::center_columns(traj.front().width(), eval.hovmoeller_columns));
    const auto w1 = w1_consecutive(h);
    r.set("hovmoeller_w1_mean", std::accumulate(w1.begin(), w1.end(), 0.0) / static_cast<double>(w1.size()));
    const auto wt = waiting_times(traj, reference, eval.waiting_pct);
    r.set("waiting_mean_gap", wt.mean_gap());
    r.set("waiting_events", wt.gaps.size());
    const auto e = eof(traj, w, std::min(eval.eof_modes, traj.size()));
    r.set("eof_explained_variance", e.explained_variance);
    return r;
}

/// Comparison of a generated trajectory with the truth over their common length.
inline MetricReport comparison_metrics(const std::vector<Field>& truth, const std::vector<Field>& gen,
                                       const EvalProtocol& eval, const AreaWeights& w, std::uint64_t seed) {
    if (truth.empty() || gen.empty()) throw ShapeError("cannot compare empty trajectories");
    if (!truth.front().same_shape(gen.front()))
        throw ShapeError("truth frames are " + truth.front().shape_string() + " but generated frames are " +
                         gen.front().shape_string());
    const std::size_t T = std::min(truth.size(), gen.size());
    const std::vector<Field> x(truth.begin(), truth.begin() + static_cast<std::ptrdiff_t>(T));
    const std::vector<Field> y(gen.begin(), gen.begin() + static_cast<std::ptrdiff_t>(T));
    MetricReport r;
    r.set("compared_frames", T);
    r.set("rmse", rmse(x, y, w));
    const auto b = bias_map(x, y, w);
    r.set("bias_mean_abs", b.mean_abs);
    std::vector<double> series(T);
    for (std::size_t n = 0; n < T; ++n) series[n] = weighted_mean(y[n], w) - weighted_mean(x[n], w);
    const auto ci = block_bootstrap_mean(series, eval.bootstrap, eval.bootstrap_block, seed);
    r.set("bias_global_mean", ci.mean);
    r.set("bias_ci_lo", ci.lo);
    r.set("bias_ci_hi", ci.hi);
    const std::size_t modes = std::min({eval.eof_modes, T});
    if (T >= 2) {
        const auto et = eof(x, w, modes), eg = eof(y, w, modes);
        std::vector<double> corr;
        for (std::size_t m = 0; m < modes; ++m) corr.push_back(std::abs(pattern_correlation(et.modes[m], eg.modes[m])));
        r.set("eof_pattern_correlation", corr);
    }
    return r;
}

/// Sequence statistics plus the comparison with the truth.
inline MetricReport trajectory_metrics(const std::vector<Field>& truth, const std::vector<Field>& gen,
                                       const std::vector<Field>& reference, const EvalProtocol& eval,
                                       const AreaWeights& w, std::uint64_t seed) {
    auto r = comparison_metrics(truth, gen, eval, w, seed);
    r.merge(sequence_metrics(gen, reference, eval, w));
    return r;
}

/// Held-out discrimination between true successors and offset frames at one noise level.
struct PairScore {
    double auc = 0.0;
    /// Pairs whose true successor scored strictly higher than its negative.
    std::size_t wins = 0;
    std::size_t pairs = 0;
    double mean_q_positive = 0.0, mean_q_negative = 0.0;
};

inline PairScore score_pairs(const Discriminator<float>& d, const TrajectoryDataset& ds, double sigma,
                             std::size_t pairs, const NegativeSampler& neg, bool exclude_copies, std::uint64_t seed) {
    const std::size_t hist = disc_history(d.net().spec());
    const auto N = static_cast<std::int64_t>(ds.size());
    if (ds.size() < hist + 2) throw ConfigError("dataset too short for discriminator evaluation");
    Rng rng(seed);
    const std::size_t H = ds.height(), W = ds.width(), P = H * W, chunk = 32;
    std::vector<double> pos, neg_q;
    PairScore s;
    s.pairs = pairs;
    for (std::size_t done = 0; done < pairs; done += chunk) {
        const std::size_t B = std::min(chunk, pairs - done);
        std::vector<std::size_t> ns;
        Tensor<float> x({2 * B, 1, H, W});
        for (std::size_t b = 0; b < B; ++b) {
            const auto n = rng.uniform_int(static_cast<std::int64_t>(hist) - 1, N - 2);
            std::int64_t l = neg.draw(n, 0, N - 1, rng);
            while (exclude_copies && (l == 0 || l == -1)) l = neg.draw(n, 0, N - 1, rng);
            for (int role = 0; role < 2; ++role) {
                const auto& src = ds[static_cast<std::size_t>(n + (role == 0 ? 1 : l))].values();
                float* dst = x.sample(2 * b + static_cast<std::size_t>(role));
                for (std::size_t i = 0; i < P; ++i) dst[i] = static_cast<float>(src[i] + sigma * rng.normal());
                ns.push_back(static_cast<std::size_t>(n));
            }
        }
        const std::vector<double> sig(2 * B, sigma);
        const auto q = d.predict(x, sig, history_at(ds, ns, hist));
        for (std::size_t b = 0; b < B; ++b) {
            pos.push_back(q[2 * b]);
            neg_q.push_back(q[2 * b + 1]);
            s.wins += q[2 * b] > q[2 * b + 1];
        }
    }
    s.mean_q_positive = std::accumulate(pos.begin(), pos.end(), 0.0) / static_cast<double>(pos.size());
    s.mean_q_negative = std::accumulate(neg_q.begin(), neg_q.end(), 0.0) / static_cast<double>(neg_q.size());
    s.auc = roc_auc(pos, neg_q);
    return s;
}

/// Mean L2 norm of the logit input gradient on noisy true successors.
inline double mean_guidance_norm(const Discriminator<float>& d, const TrajectoryDataset& ds, double sigma,
                                 std::size_t count, std::uint64_t seed) {
    const std::size_t hist = disc_history(d.net().spec());
    Rng rng(seed);
    const std::size_t H = ds.height(), W = ds.width(), P = H * W;
    Tensor<float> x({count, 1, H, W});
    std::vector<std::size_t> ns;
    for (std::size_t b = 0; b < count; ++b) {
        const auto n = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(hist) - 1, static_cast<std::int64_t>(ds.size()) - 2));
        const auto& src = ds[n + 1].values();
        for (std::size_t i = 0; i < P; ++i) x.sample(b)[i] = static_cast<float>(src[i] + sigma * rng.normal());
        ns.push_back(n);
    }
    const std::vector<double> sig(count, sigma);
    const auto g = d.guidance(x, sig, history_at(ds, ns, hist));
    double acc = 0.0;
    for (std::size_t b = 0; b < count; ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < P; ++i) s += static_cast<double>(g.gradient.sample(b)[i]) * g.gradient.sample(b)[i];
        acc += std::sqrt(s);
    }
    return acc / static_cast<double>(count);
}

/// Batch-mean discriminator probability per diffusion step over `count` single-step samples.
inline std::vector<double> consistency_trace(const TrajectorySampler& sampler, const TrajectoryDataset& ds,
                                             std::size_t count, std::uint64_t seed) {
    const std::size_t chunk = 10;
    std::vector<double> acc;
    for (std::size_t done = 0; done < count; done += chunk) {
        const std::size_t B = std::min(chunk, count - done);
        std::vector<RolloutState> states;
        std::vector<Rng> rngs;
        for (std::size_t b = 0; b < B; ++b) {
            const std::size_t i = done + b;
            states.push_back(state_from(ds, 1 + i * (ds.size() - 2) / count));
            rngs.emplace_back(derive_seed(seed, {i}));
        }
        SamplerTrace trace;
        sampler.sample_next(states, rngs, &trace);
        acc.resize(trace.mean_q.size(), 0.0);
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += trace.mean_q[k] * static_cast<double>(B);
    }
    for (auto& v : acc) v /= static_cast<double>(count);
    return acc;
}

/// Mean over the last ceil(fraction · N) entries.
inline double terminal_mean(const std::vector<double>& v, double fraction = 0.1) {
    if (v.empty()) throw DomainError("empty trace");
    const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(v.size()))));
    return std::accumulate(v.end() - static_cast<std::ptrdiff_t>(k), v.end(), 0.0) / static_cast<double>(k);
}

/// Forecast initial indices spread evenly through a trajectory.
inline std::vector<std::size_t> forecast_inits(std::size_t frames, std::size_t forecasts, std::size_t leads) {
    if (frames < leads + 3) throw ConfigError("trajectory too short for the forecast protocol");
    const std::size_t span = frames - leads - 2;
    std::vector<std::size_t> out;
    for (std::size_t f = 0; f < forecasts; ++f)
        out.push_back(1 + (forecasts > 1 ? f * span / (forecasts - 1) : 0));
    return out;
}

inline bool non_decreasing(const std::vector<double>& v) {
    for (std::size_t i = 0; i + 1 < v.size(); ++i)
        if (!(v[i + 1] >= v[i])) return false;
    return true;
}

/// Frames in a random order: a control with the dynamics destroyed.
inline TrajectoryDataset shuffled(const TrajectoryDataset& ds, std::uint64_t seed) {
    TrajectoryDataset out = ds;
    Rng rng(seed);
    for (std::size_t i = out.size(); i > 1; --i)
        std::swap(out.frames[i - 1], out.frames[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    return out;
}

struct PipelineResult {
    MetricReport report;
    std::string report_hash;
    /// False when the requested stage stops before evaluation.
    bool evaluated = false;
};

/// One seeded run of a preset, with every artifact written under the output directory.
class Pipeline {
public:
    Pipeline(ExperimentPreset preset, std::uint64_t seed, PipelineOptions opts)
        : preset_(std::move(preset)), seed_(seed), opts_(std::move(opts)), store_(opts_) {
        preset_.validate();
        config_ = preset_.to_config();
    }

    PipelineResult run(Stage stage) {
        log_file_.open(opts_.out / "log.txt", std::ios::app);
        log("preset " + preset_.name + " seed " + std::to_string(seed_) + " config " + config_.hash());
        std::ofstream(opts_.out / "config.txt", std::ios::trunc) << config_.serialize();
        allow_compute_ = stage != Stage::evaluate;
        data();
        PipelineResult res;
        if (stage == Stage::simulate) return res;
        models();
        if (stage == Stage::train) return res;
        allow_compute_ = true;
        res.report = evaluate();
        res.report.save(store_.path("report.json"));
        res.report_hash = res.report.hash();
        res.evaluated = true;
        log("report " + res.report_hash);
        return res;
    }

private:
    std::uint64_t seed(std::uint64_t tag) const { return derive_seed(seed_, {tag}); }

    void log(const std::string& msg) {
        const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        char stamp[32];
        std::snprintf(stamp, sizeof stamp, "[%9.1fs] ", t);
        if (log_file_) log_file_ << stamp << msg << std::endl;
        if (opts_.log) opts_.log(stamp + msg);
    }

    std::string section_hash(std::initializer_list<const char*> prefixes) const {
        Config c;
        for (const char* p : prefixes) {
            const Config part = config_.section(p);
            for (const auto& [k, v] : part.values()) c.set(k, v);
        }
        return c.hash();
    }

    ArtifactKey key(std::initializer_list<const char*> prefixes,
                    std::vector<std::pair<std::string, std::string>> inputs) const {
        inputs.emplace_back("seed", std::to_string(seed_));
        return {section_hash(prefixes), std::move(inputs)};
    }

    Container require(const std::string& name, const ArtifactKey& k, const std::function<Container()>& build,
                      const std::function<std::vector<std::pair<std::string, std::string>>()>& extra = {}) {
        if (auto c = store_.find(name, k)) {
            log("reuse " + name);
            hashes_[name] = container_hash(*c);
            return *c;
        }
        if (!allow_compute_)
            throw IoError("missing artifact " + store_.path(name).string() + "; run the earlier stages first");
        log("build " + name);
        auto built = build();
        auto c = store_.put(name, std::move(built), k,
                            extra ? extra() : std::vector<std::pair<std::string, std::string>>{});
        hashes_[name] = container_hash(c);
        log("wrote " + name);
        return c;
    }

    void data() {
        const auto k = key({"sim.", "data."}, {});
        SplitDatasets raw;
        bool built = false;
        auto make = [&] {
            if (!built) {
                SimConfig sc = preset_.sim;
                sc.seed = seed(0x51);
                SimDiagnostics diag;
                auto full = simulate(sc, &diag);
                raw = split_dataset(full, preset_.n_train, preset_.n_val);
                const auto stats = channel_statistics(raw.train);
                raw.train = standardize(raw.train, stats);
                raw.val = standardize(raw.val, stats);
                raw.test = standardize(raw.test, stats);
                built = true;
            }
        };
        train_ = dataset_from_container(require("train.stdg", k, [&] { make(); return dataset_to_container(raw.train); }));
        val_ = dataset_from_container(require("val.stdg", k, [&] { make(); return dataset_to_container(raw.val); }));
        test_ = dataset_from_container(require("test.stdg", k, [&] { make(); return dataset_to_container(raw.test); }));
    }

    static std::vector<std::pair<std::string, std::string>> loss_summary(const std::vector<double>& losses) {
        if (losses.empty()) return {};
        const std::size_t k = std::max<std::size_t>(1, losses.size() / 20);
        const double first = std::accumulate(losses.begin(), losses.begin() + static_cast<std::ptrdiff_t>(k), 0.0) / static_cast<double>(k);
        const double last = std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(k), losses.end(), 0.0) / static_cast<double>(k);
        return {{"loss.first", format_double(first)}, {"loss.last", format_double(last)}};
    }

    ModelCheckpoint score_model(const std::string& name, ScoreMode mode, std::uint64_t tag) {
        const auto k = key({"score."}, {{"train", hashes_.at("train.stdg")}, {"mode", to_string(mode)}});
        std::vector<double> losses;
        const auto c = require(
            name, k,
            [&] {
                ScoreTrainConfig cfg = preset_.score;
                cfg.mode = mode;
                cfg.seed = seed(tag);
                return checkpoint_to_container(train_score(cfg, train_, progress(name, losses)));
            },
            [&] { return loss_summary(losses); });
        record_losses(name, c);
        return checkpoint_from_container(c);
    }

    ModelCheckpoint disc_model(const std::string& name, const TrajectoryDataset& ds, const std::string& input,
                               std::uint64_t tag) {
        const auto k = key({"disc."}, {{"train", input}});
        std::vector<double> losses;
        const auto c = require(
            name, k,
            [&] {
                DiscTrainConfig cfg = preset_.disc;
                cfg.seed = seed(tag);
                return checkpoint_to_container(train_discriminator(cfg, ds, progress(name, losses)));
            },
            [&] { return loss_summary(losses); });
        record_losses(name, c);
        return checkpoint_from_container(c);
    }

    std::function<void(const TrainProgress&)> progress(const std::string& name, std::vector<double>& losses) {
        return [this, name, &losses](const TrainProgress& p) {
            losses.push_back(p.loss);
            if (p.step % 500 == 0) {
                const std::size_t k = std::min<std::size_t>(losses.size(), 100);
                const double avg = std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(k), losses.end(), 0.0) / static_cast<double>(k);
                log(name + " step " + std::to_string(p.step) + " loss " + format_double(avg));
            }
        };
    }

    void record_losses(const std::string& name, const Container& c) {
        const Metadata* p = find_provenance(c);
        if (!p || !p->has("loss.first")) return;
        losses_[name] = {p->get_double("loss.first"), p->get_double("loss.last")};
    }

    void models() {
        score_uncond_ = score_model("score_uncond.ckpt", ScoreMode::unconditional, 0x5C0);
        score_cond_ = score_model("score_cond.ckpt", ScoreMode::conditional, 0x5C1);
        disc_ = disc_model("disc.ckpt", train_, hashes_.at("train.stdg"), 0xD15);
        train_shuffled_ = shuffled(train_, seed(0x5F0));
        disc_shuffled_ = disc_model("disc_shuffled.ckpt", train_shuffled_, hashes_.at("train.stdg") + ":shuffled", 0xD16);
    }

    TrajectoryDataset cached_frames(const std::string& name, const ArtifactKey& k,
                                    const std::function<TrajectoryDataset()>& build) {
        return dataset_from_container(require(name, k, [&] { return dataset_to_container(build()); }));
    }

    std::vector<std::pair<std::string, std::string>> model_inputs() const {
        return {{"test", hashes_.at("test.stdg")},
                {"score_uncond", hashes_.at("score_uncond.ckpt")},
                {"score_cond", hashes_.at("score_cond.ckpt")},
                {"disc", hashes_.at("disc.ckpt")}};
    }

    SamplerConfig sampler_config(bool guided, std::uint64_t tag) const {
        SamplerConfig c = preset_.sampler;
        c.guided = guided;
        c.seed = seed(tag);
        return c;
    }

    std::function<void(std::size_t)> rollout_progress(const std::string& name) {
        return [this, name](std::size_t k) {
            if (k % 100 == 0) log(name + " frame " + std::to_string(k));
        };
    }

    MetricReport evaluate() {
        const auto& eval = preset_.eval;
        const auto w = area_weights(test_);
        const auto uncond = denoiser_from_checkpoint(score_uncond_);
        const auto cond = denoiser_from_checkpoint(score_cond_);
        const auto disc = discriminator_from_checkpoint(disc_);
        const auto disc_shuffled = discriminator_from_checkpoint(disc_shuffled_);
        if (!test_.norm_stats) throw FormatError("test split is not standardized");

        MetricReport r;
        r.set("preset", preset_.name);
        r.set("seed", static_cast<std::size_t>(seed_));
        r.set("config_hash", config_.hash());
        for (const auto& [name, h] : hashes_) r.set("provenance." + name, h);
        r.set("data.train_frames", train_.size());
        r.set("data.test_frames", test_.size());
        r.set("data.frame_std", mean_frame_std(train_.frames));
        r.set("data.physical_std", test_.norm_stats->front().std);
        for (const auto& [name, l] : losses_) {
            const auto stem = name.substr(0, name.find('.'));
            r.set("train." + stem + ".loss_first", l.first);
            r.set("train." + stem + ".loss_last", l.second);
        }

        log("discriminator evaluation");
        const NegativeSampler neg = preset_.disc.negatives;
        std::vector<double> aucs;
        for (std::size_t i = 0; i < eval.auc_sigmas.size(); ++i) {
            const double s = eval.auc_sigmas[i];
            const auto ps = score_pairs(disc, test_, s, eval.auc_pairs, neg, false, derive_seed(seed_, {0xA0C, i}));
            aucs.push_back(ps.auc);
            r.set("disc.auc.sigma_" + format_double(s), ps.auc);
        }
        r.set("disc.auc_sigmas", eval.auc_sigmas);
        r.set("disc.auc", aucs);
        r.set("disc.auc_min", *std::min_element(aucs.begin(), aucs.end()));
        const double s_lo = *std::min_element(eval.auc_sigmas.begin(), eval.auc_sigmas.end());
        {
            const auto ps = score_pairs(disc, test_, s_lo, eval.auc_pairs, neg, true, seed(0xA0D));
            r.set("disc.no_copy.auc", ps.auc);
            r.set("disc.no_copy.mean_q_true", ps.mean_q_positive);
            r.set("disc.no_copy.mean_q_offset", ps.mean_q_negative);
        }
        {
            const auto test_shuffled = shuffled(test_, seed(0x5F1));
            const auto ps = score_pairs(disc_shuffled, test_shuffled, s_lo, eval.auc_pairs, neg, true, seed(0xA0E));
            r.set("disc.shuffled.auc", ps.auc);
            r.set("disc.shuffled.wins", ps.wins);
            r.set("disc.shuffled.pairs", ps.pairs);
            r.set("disc.shuffled.p_value", binomial_two_sided_p(ps.wins, ps.pairs));
        }
        r.set("disc.guidance_norm.sigma_max", mean_guidance_norm(disc, test_, preset_.sampler.schedule.sigma_max, 8, seed(0x6A0)));
        r.set("disc.guidance_norm.sigma_min", mean_guidance_norm(disc, test_, preset_.sampler.schedule.sigma_min, 8, seed(0x6A0)));

        log("consistency traces");
        {
            const TrajectorySampler guided(uncond, &disc, sampler_config(true, 0x7A0));
            const TrajectorySampler plain(uncond, &disc, sampler_config(false, 0x7A0));
            const auto qg = consistency_trace(guided, test_, eval.trace_samples, seed(0x7A1));
            const auto qu = consistency_trace(plain, test_, eval.trace_samples, seed(0x7A1));
            r.set("trace.sigma", std::vector<double>(preset_.sampler.schedule.sigmas.begin(),
                                                     preset_.sampler.schedule.sigmas.end() - 1));
            r.set("trace.guided.mean_q", qg);
            r.set("trace.unguided.mean_q", qu);
            r.set("trace.guided.terminal_q", terminal_mean(qg));
            r.set("trace.unguided.terminal_q", terminal_mean(qu));
        }

        const std::size_t R = eval.rollout_steps;
        const std::vector<Field> truth(test_.frames.begin() + 2, test_.frames.begin() + 2 + static_cast<std::ptrdiff_t>(R));
        const auto inputs = model_inputs();
        const auto roll_key = key({"sampler.", "eval."}, inputs);
        const auto guided_roll = cached_frames("rollout_guided.stdg", roll_key, [&] {
            const TrajectorySampler s(uncond, &disc, sampler_config(true, 0x801));
            return rollout(s, state_from(test_, 1), R, test_, rollout_progress("guided rollout"));
        });
        const auto cond_roll = cached_frames("rollout_cond.stdg", roll_key, [&] {
            const TrajectorySampler s(cond, nullptr, sampler_config(false, 0x802));
            return rollout(s, state_from(test_, 1), R, test_, rollout_progress("conditional rollout"));
        });
        const auto uncond_samples = cached_frames("samples_uncond.stdg", roll_key, [&] {
            const TrajectorySampler s(uncond, nullptr, sampler_config(false, 0x803));
            TrajectoryDataset ds = test_.empty_like();
            const std::size_t chunk = 25;
            for (std::size_t done = 0; done < eval.uncond_samples; done += chunk) {
                const std::size_t B = std::min(chunk, eval.uncond_samples - done);
                std::vector<RolloutState> states(B, state_from(test_, 1));
                std::vector<Rng> rngs;
                for (std::size_t b = 0; b < B; ++b) rngs.emplace_back(derive_seed(seed(0x804), {done + b}));
                for (auto& f : s.sample_next(states, rngs)) ds.frames.push_back(std::move(f));
            }
            return ds;
        });

        log("trajectory metrics");
        r.merge(sequence_metrics(truth, train_.frames, eval, w), "truth.");
        r.merge(trajectory_metrics(truth, guided_roll.frames, train_.frames, eval, w, seed(0xB00)), "guided.");
        r.merge(trajectory_metrics(truth, cond_roll.frames, train_.frames, eval, w, seed(0xB01)), "cond.");
        r.merge(sequence_metrics(uncond_samples.frames, train_.frames, eval, w), "uncond.");
        const double gb = r.number("guided.bias_global_mean"), cb = r.number("cond.bias_global_mean");
        r.set("bias.guided_abs", std::abs(gb));
        r.set("bias.cond_abs", std::abs(cb));
        r.set("bias.ordering_holds", std::abs(gb) <= std::abs(cb));

        log("forecasts");
        const auto inits = forecast_inits(test_.size(), eval.forecasts, eval.leads);
        auto forecast = [&](const std::string& name, const TrajectorySampler& s) {
            const auto frames = cached_frames("forecast_" + name + ".stdg", roll_key, [&] {
                TrajectoryDataset ds = test_.empty_like();
                ds.frames = ensemble_forecast(s, test_, inits, eval.members, eval.leads, opts_.threads).values;
                return ds;
            });
            EnsembleForecast e;
            e.forecasts = inits.size();
            e.members = eval.members;
            e.leads = eval.leads;
            e.weights = w;
            e.values = frames.frames;
            for (auto n : inits)
                for (std::size_t j = 0; j < eval.leads; ++j) e.truth.push_back(test_[n + 1 + j]);
            e.validate();
            std::vector<double> c, ssr, spread, skill;
            for (std::size_t j = 0; j < eval.leads; ++j) {
                c.push_back(crps(e, j));
                const auto sk = spread_skill_ratio(e, j);
                ssr.push_back(sk.ratio);
                spread.push_back(sk.spread);
                skill.push_back(sk.skill);
            }
            r.set("forecast." + name + ".crps", c);
            r.set("forecast." + name + ".ssr", ssr);
            r.set("forecast." + name + ".spread", spread);
            r.set("forecast." + name + ".skill", skill);
            r.set("forecast." + name + ".crps_non_decreasing", non_decreasing(c));
        };
        forecast("guided", TrajectorySampler(uncond, &disc, sampler_config(true, 0xF01)));
        forecast("cond", TrajectorySampler(cond, nullptr, sampler_config(false, 0xF02)));

        for (const auto& [name, h] : hashes_) r.set("provenance." + name, h);
        save_maps(truth, guided_roll.frames, cond_roll.frames, w);
        return r;
    }

    void save_maps(const std::vector<Field>& truth, const std::vector<Field>& guided, const std::vector<Field>& cond,
                   const AreaWeights& w) {
        const auto band = Band::center_columns(truth.front().width(), preset_.eval.hovmoeller_columns);
        TrajectoryDataset hov = test_.empty_like();
        hov.norm_stats.reset();
        for (const auto* t : {&truth, &guided, &cond}) {
            const auto h = hovmoeller(*t, band);
            hov.frames.emplace_back(1, h.times, h.positions, std::vector<float>(h.values.begin(), h.values.end()),
                                    Geometry::periodic_width_only);
        }
        TrajectoryDataset bias = test_.empty_like();
        bias.norm_stats.reset();
        for (const auto* g : {&guided, &cond}) bias.frames.push_back(bias_field(bias_map(truth, *g, w), truth.front().geometry()));
        auto with_hash = [&](Container c) {
            add_provenance(c, config_.hash(), {{"test", hashes_.at("test.stdg")}});
            return c;
        };
        write_container(store_.path("hovmoeller.stdg"), with_hash(dataset_to_container(hov)));
        write_container(store_.path("bias.stdg"), with_hash(dataset_to_container(bias)));
    }

    ExperimentPreset preset_;
    std::uint64_t seed_;
    PipelineOptions opts_;
    ArtifactStore store_;
    Config config_;
    bool allow_compute_ = true;
    std::ofstream log_file_;
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
    std::map<std::string, std::string> hashes_;
    std::map<std::string, std::pair<double, double>> losses_;
    TrajectoryDataset train_, val_, test_, train_shuffled_;
    ModelCheckpoint score_uncond_, score_cond_, disc_, disc_shuffled_;
};

}  // namespace dynaguide
