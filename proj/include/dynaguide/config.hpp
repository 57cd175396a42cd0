#pragma once

/// Flat key=value configuration and experiment presets.

#include <charconv>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dynaguide/diffusion.hpp"
#include "dynaguide/discriminator.hpp"
#include "dynaguide/report.hpp"
#include "dynaguide/sampler.hpp"
#include "dynaguide/spectral.hpp"

namespace dynaguide {

/// Sorted key=value store. Lines are `key = value`; `#` starts a comment.
class Config {
public:
    static Config parse(std::string_view text, const std::string& source = "<config>") {
        Config c;
        std::size_t pos = 0, line_no = 0;
        while (pos <= text.size()) {
            auto nl = text.find('\n', pos);
            if (nl == std::string_view::npos) nl = text.size();
            std::string line(text.substr(pos, nl - pos));
            pos = nl + 1;
            ++line_no;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(source + ":" + std::to_string(line_no) + ": expected key=value");
            const auto key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
            if (key.empty()) throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key");
            if (c.values_.count(key))
                throw ConfigError(source + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
            c.values_[key] = value;
        }
        return c;
    }

    static Config load(const std::filesystem::path& path) {
        return parse(read_file_bytes(path), path.string());
    }

    /// Apply a `key=value` override.
    void set_override(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
        values_[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    void set(const std::string& key, double v) { values_[key] = format_double(v); }
    void set(const std::string& key, std::size_t v) { values_[key] = std::to_string(v); }
    void set(const std::string& key, int v) { values_[key] = std::to_string(v); }
    void set(const std::string& key, bool v) { values_[key] = v ? "on" : "off"; }
    void set(const std::string& key, const char* v) { values_[key] = v; }

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    const std::map<std::string, std::string>& values() const noexcept { return values_; }

    const std::string& get(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
        return it->second;
    }

    double get_double(const std::string& key) const {
        try {
            return parse_double(get(key));
        } catch (const FormatError&) {
            throw ConfigError("config key '" + key + "' expects a number, got '" + get(key) + "'");
        }
    }

    std::uint64_t get_u64(const std::string& key) const {
        const auto& s = get(key);
        std::uint64_t v = 0;
        const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
            throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + s + "'");
        return v;
    }

    std::size_t get_size(const std::string& key) const { return static_cast<std::size_t>(get_u64(key)); }
    int get_int(const std::string& key) const { return static_cast<int>(get_u64(key)); }

    bool get_bool(const std::string& key) const {
        const auto& s = get(key);
        if (s == "on" || s == "true" || s == "1") return true;
        if (s == "off" || s == "false" || s == "0") return false;
        throw ConfigError("config key '" + key + "' expects on/off, got '" + s + "'");
    }

    std::vector<std::size_t> get_sizes(const std::string& key) const {
        try {
            return parse_sizes(get(key));
        } catch (const Error&) {
            throw ConfigError("config key '" + key + "' expects a comma-separated list of counts");
        }
    }

    std::vector<double> get_doubles(const std::string& key) const {
        std::vector<double> out;
        try {
            for (const auto& s : split_commas(get(key))) out.push_back(parse_double(trim(s)));
        } catch (const FormatError&) {
            throw ConfigError("config key '" + key + "' expects a comma-separated list of numbers");
        }
        return out;
    }

    /// Canonical text: sorted `key=value` lines.
    std::string serialize() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
        return out;
    }

    std::string hash() const { return git_blob_hash(serialize()); }

    /// Sub-configuration with the keys under `prefix` (prefix kept).
    Config section(const std::string& prefix) const {
        Config c;
        for (const auto& [k, v] : values_)
            if (k.rfind(prefix, 0) == 0) c.values_[k] = v;
        return c;
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> values_;
};

/// Evaluation protocol of a preset run.
struct EvalProtocol {
    std::size_t forecasts = 20;
    std::size_t members = 8;
    std::size_t leads = 10;
    std::size_t rollout_steps = 1000;
    /// Guided and unguided samples for the consistency trace.
    std::size_t trace_samples = 50;
    /// Independent unconditional samples for the ACF comparison.
    std::size_t uncond_samples = 200;
    std::size_t acf_lags = 10;
    /// Positive/negative pairs per noise level for the held-out AUC.
    std::size_t auc_pairs = 400;
    std::vector<double> auc_sigmas{0.002, 0.01, 0.05, 0.1};
    std::size_t bootstrap = 1000;
    std::size_t bootstrap_block = 50;
    std::size_t hovmoeller_columns = 10;
    double waiting_pct = 95.0;
    std::size_t eof_modes = 3;

    void validate() const {
        if (forecasts == 0 || members < 2 || leads == 0) throw ConfigError("eval needs forecasts, >= 2 members and leads");
        if (rollout_steps <= acf_lags + 1) throw ConfigError("eval.rollout_steps must exceed eval.acf_lags + 1");
        if (uncond_samples <= acf_lags + 1) throw ConfigError("eval.uncond_samples must exceed eval.acf_lags + 1");
        if (trace_samples == 0 || auc_pairs == 0 || auc_sigmas.empty()) throw ConfigError("eval sample counts must be positive");
        if (bootstrap == 0 || bootstrap_block == 0) throw ConfigError("eval bootstrap settings must be positive");
        if (!(waiting_pct > 0 && waiting_pct < 100)) throw ConfigError("eval.waiting_pct must lie in (0, 100)");
    }
};

/// Every setting of one end-to-end experiment.
struct ExperimentPreset {
    std::string name = "custom";
    SimConfig sim;
    std::size_t n_train = 0, n_val = 0;
    ScoreTrainConfig score;
    DiscTrainConfig disc;
    SamplerConfig sampler;
    EvalProtocol eval;
    /// Descriptive settings with no effect on computation.
    std::map<std::string, std::string> inert;

    std::size_t n_test() const { return sim.frames - n_train - n_val; }

    void validate() const {
        sim.validate();
        if (n_train + n_val >= sim.frames) throw ConfigError("data.train + data.val must leave test frames");
        score.validate();
        disc.validate();
        sampler.validate();
        eval.validate();
        if (n_test() < eval.rollout_steps + 2)
            throw ConfigError("test split (" + std::to_string(n_test()) + " frames) is shorter than eval.rollout_steps + 2");
        if (n_test() < eval.forecasts + eval.leads + 2)
            throw ConfigError("test split too short for the forecast protocol");
        for (auto d : {score.net.divisor(), disc.net.divisor()})
            if (sim.L % d) throw ConfigError("sim.L must be divisible by the network divisor " + std::to_string(d));
    }

    Config to_config() const {
        Config c;
        c.set("preset.name", name);
        c.set("sim.L", sim.L);
        c.set("sim.dt", sim.dt);
        c.set("sim.nu", sim.nu);
        c.set("sim.hyper_order", sim.hyper_order);
        c.set("sim.mu", sim.mu);
        c.set("sim.k_f", sim.k_f);
        c.set("sim.delta_f", sim.delta_f);
        c.set("sim.eps_inject", sim.eps_inject);
        c.set("sim.subsample", sim.subsample);
        c.set("sim.spinup_steps", sim.spinup_steps);
        c.set("sim.frames", sim.frames);
        c.set("data.train", n_train);
        c.set("data.val", n_val);

        c.set("score.widths", join_sizes(score.net.widths));
        c.set("score.blocks", score.net.blocks);
        c.set("score.emb_features", score.net.emb_features);
        c.set("score.emb_hidden", score.net.emb_hidden);
        c.set("score.groups", score.net.groups);
        c.set("score.sigma_data", score.pre.sigma_data);
        c.set("score.p_mean", score.sigma.p_mean);
        c.set("score.p_std", score.sigma.p_std);
        c.set("score.batch", score.batch);
        c.set("score.epochs", score.epochs);
        c.set("score.max_steps", score.max_steps);
        c.set("score.lr", score.lr);
        c.set("score.weight_decay", score.weight_decay);
        c.set("score.ema_rate", score.ema_rate);

        c.set("disc.widths", join_sizes(disc.net.widths));
        c.set("disc.blocks", disc.net.blocks);
        c.set("disc.emb_features", disc.net.emb_features);
        c.set("disc.emb_hidden", disc.net.emb_hidden);
        c.set("disc.groups", disc.net.groups);
        c.set("disc.head_hidden", disc.net.head_hidden);
        c.set("disc.head_layers", disc.net.head_layers);
        c.set("disc.history", disc.net.in_channels - 1);
        c.set("disc.p_mean", disc.sigma.p_mean);
        c.set("disc.p_std", disc.sigma.p_std);
        c.set("disc.neg_mu", disc.negatives.mu);
        c.set("disc.neg_sigma", disc.negatives.sigma_step);
        c.set("disc.batch", disc.batch);
        c.set("disc.epochs", disc.epochs);
        c.set("disc.max_steps", disc.max_steps);
        c.set("disc.lr", disc.lr);
        c.set("disc.weight_decay", disc.weight_decay);
        c.set("disc.ema_rate", disc.ema_rate);
        c.set("disc.crop", disc.crop);

        c.set("sampler.sigma_min", sampler.schedule.sigma_min);
        c.set("sampler.sigma_max", sampler.schedule.sigma_max);
        c.set("sampler.rho", sampler.schedule.rho);
        c.set("sampler.steps", sampler.schedule.steps);
        c.set("sampler.s_churn", sampler.s_churn);
        c.set("sampler.s_noise", sampler.s_noise);
        c.set("sampler.s_tmin", sampler.s_tmin);
        c.set("sampler.s_tmax", sampler.s_tmax);
        c.set("sampler.lambda", sampler.lambda);

        c.set("eval.forecasts", eval.forecasts);
        c.set("eval.members", eval.members);
        c.set("eval.leads", eval.leads);
        c.set("eval.rollout_steps", eval.rollout_steps);
        c.set("eval.trace_samples", eval.trace_samples);
        c.set("eval.uncond_samples", eval.uncond_samples);
        c.set("eval.acf_lags", eval.acf_lags);
        c.set("eval.auc_pairs", eval.auc_pairs);
        std::string sig;
        for (double s : eval.auc_sigmas) sig += (sig.empty() ? "" : ",") + format_double(s);
        c.set("eval.auc_sigmas", sig);
        c.set("eval.bootstrap", eval.bootstrap);
        c.set("eval.bootstrap_block", eval.bootstrap_block);
        c.set("eval.hovmoeller_columns", eval.hovmoeller_columns);
        c.set("eval.waiting_pct", eval.waiting_pct);
        c.set("eval.eof_modes", eval.eof_modes);
        for (const auto& [k, v] : inert) c.set("meta." + k, v);
        return c;
    }

    /// Override fields from `c`; every key must be known.
    void apply(const Config& c) {
        for (const auto& [key, value] : c.values()) {
            if (key.rfind("meta.", 0) == 0) {
                inert[key.substr(5)] = value;
                continue;
            }
            if (!apply_one(c, key)) throw ConfigError("unknown config key '" + key + "'");
        }
    }

    std::string hash() const { return to_config().hash(); }

private:
    bool apply_one(const Config& c, const std::string& k) {
        if (k == "preset.name") name = c.get(k);
        else if (k == "sim.L") sim.L = c.get_size(k);
        else if (k == "sim.dt") sim.dt = c.get_double(k);
        else if (k == "sim.nu") sim.nu = c.get_double(k);
        else if (k == "sim.hyper_order") sim.hyper_order = c.get_int(k);
        else if (k == "sim.mu") sim.mu = c.get_double(k);
        else if (k == "sim.k_f") sim.k_f = c.get_double(k);
        else if (k == "sim.delta_f") sim.delta_f = c.get_double(k);
        else if (k == "sim.eps_inject") sim.eps_inject = c.get_double(k);
        else if (k == "sim.subsample") sim.subsample = c.get_size(k);
        else if (k == "sim.spinup_steps") sim.spinup_steps = c.get_size(k);
        else if (k == "sim.frames") sim.frames = c.get_size(k);
        else if (k == "data.train") n_train = c.get_size(k);
        else if (k == "data.val") n_val = c.get_size(k);
        else if (k == "score.widths") score.net.widths = c.get_sizes(k);
        else if (k == "score.blocks") score.net.blocks = c.get_size(k);
        else if (k == "score.emb_features") score.net.emb_features = c.get_size(k);
        else if (k == "score.emb_hidden") score.net.emb_hidden = c.get_size(k);
        else if (k == "score.groups") score.net.groups = c.get_size(k);
        else if (k == "score.sigma_data") score.pre.sigma_data = disc.pre.sigma_data = c.get_double(k);
        else if (k == "score.p_mean") score.sigma.p_mean = c.get_double(k);
        else if (k == "score.p_std") score.sigma.p_std = c.get_double(k);
        else if (k == "score.batch") score.batch = c.get_size(k);
        else if (k == "score.epochs") score.epochs = c.get_size(k);
        else if (k == "score.max_steps") score.max_steps = c.get_size(k);
        else if (k == "score.lr") score.lr = c.get_double(k);
        else if (k == "score.weight_decay") score.weight_decay = c.get_double(k);
        else if (k == "score.ema_rate") score.ema_rate = c.get_double(k);
        else if (k == "disc.widths") disc.net.widths = c.get_sizes(k);
        else if (k == "disc.blocks") disc.net.blocks = c.get_size(k);
        else if (k == "disc.emb_features") disc.net.emb_features = c.get_size(k);
        else if (k == "disc.emb_hidden") disc.net.emb_hidden = c.get_size(k);
        else if (k == "disc.groups") disc.net.groups = c.get_size(k);
        else if (k == "disc.head_hidden") disc.net.head_hidden = c.get_size(k);
        else if (k == "disc.head_layers") disc.net.head_layers = c.get_size(k);
        else if (k == "disc.history") disc.net.in_channels = 1 + c.get_size(k);
        else if (k == "disc.p_mean") disc.sigma.p_mean = c.get_double(k);
        else if (k == "disc.p_std") disc.sigma.p_std = c.get_double(k);
        else if (k == "disc.neg_mu") disc.negatives.mu = c.get_double(k);
        else if (k == "disc.neg_sigma") disc.negatives.sigma_step = c.get_double(k);
        else if (k == "disc.batch") disc.batch = c.get_size(k);
        else if (k == "disc.epochs") disc.epochs = c.get_size(k);
        else if (k == "disc.max_steps") disc.max_steps = c.get_size(k);
        else if (k == "disc.lr") disc.lr = c.get_double(k);
        else if (k == "disc.weight_decay") disc.weight_decay = c.get_double(k);
        else if (k == "disc.ema_rate") disc.ema_rate = c.get_double(k);
        else if (k == "disc.crop") disc.crop = c.get_bool(k);
        else if (k == "sampler.sigma_min") rebuild_schedule(c.get_double(k), sampler.schedule.sigma_max, sampler.schedule.rho, sampler.schedule.steps);
        else if (k == "sampler.sigma_max") rebuild_schedule(sampler.schedule.sigma_min, c.get_double(k), sampler.schedule.rho, sampler.schedule.steps);
        else if (k == "sampler.rho") rebuild_schedule(sampler.schedule.sigma_min, sampler.schedule.sigma_max, c.get_double(k), sampler.schedule.steps);
        else if (k == "sampler.steps") rebuild_schedule(sampler.schedule.sigma_min, sampler.schedule.sigma_max, sampler.schedule.rho, c.get_size(k));
        else if (k == "sampler.s_churn") sampler.s_churn = c.get_double(k);
        else if (k == "sampler.s_noise") sampler.s_noise = c.get_double(k);
        else if (k == "sampler.s_tmin") sampler.s_tmin = c.get_double(k);
        else if (k == "sampler.s_tmax") sampler.s_tmax = c.get_double(k);
        else if (k == "sampler.lambda") sampler.lambda = c.get_double(k);
        else if (k == "eval.forecasts") eval.forecasts = c.get_size(k);
        else if (k == "eval.members") eval.members = c.get_size(k);
        else if (k == "eval.leads") eval.leads = c.get_size(k);
        else if (k == "eval.rollout_steps") eval.rollout_steps = c.get_size(k);
        else if (k == "eval.trace_samples") eval.trace_samples = c.get_size(k);
        else if (k == "eval.uncond_samples") eval.uncond_samples = c.get_size(k);
        else if (k == "eval.acf_lags") eval.acf_lags = c.get_size(k);
        else if (k == "eval.auc_pairs") eval.auc_pairs = c.get_size(k);
        else if (k == "eval.auc_sigmas") eval.auc_sigmas = c.get_doubles(k);
        else if (k == "eval.bootstrap") eval.bootstrap = c.get_size(k);
        else if (k == "eval.bootstrap_block") eval.bootstrap_block = c.get_size(k);
        else if (k == "eval.hovmoeller_columns") eval.hovmoeller_columns = c.get_size(k);
        else if (k == "eval.waiting_pct") eval.waiting_pct = c.get_double(k);
        else if (k == "eval.eof_modes") eval.eof_modes = c.get_size(k);
        else return false;
        return true;
    }

    void rebuild_schedule(double lo, double hi, double rho, std::size_t steps) {
        sampler.schedule = make_schedule(lo, hi, rho, steps);
    }
};

/// Sampler settings shared by every vorticity preset.
inline SamplerConfig vorticity_sampler() {
    SamplerConfig s;
    s.schedule = make_schedule(0.002, 80.0, 7.0, 50);
    s.s_churn = 55.0;
    s.s_noise = 1.005;
    s.s_tmin = 0.0;
    s.s_tmax = 1000.0;
    s.lambda = 14.0;
    return s;
}

/// Full-scale settings for 256×256 vorticity. Not run automatically.
inline ExperimentPreset vorticity_paper_preset() {
    ExperimentPreset p;
    p.name = "vorticity-paper";
    p.sim.L = 256;
    p.sim.dt = 0.005;
    p.sim.nu = 2e-7;
    p.sim.hyper_order = 2;
    p.sim.mu = 0.1;
    p.sim.k_f = 6.0;
    p.sim.delta_f = 1.5;
    p.sim.eps_inject = 0.1;
    p.sim.subsample = 4;
    p.sim.spinup_steps = 500;
    p.sim.frames = 73000;
    p.n_train = 47000;
    p.n_val = 13000;
    p.score.net.widths = {128, 256, 256};
    p.score.net.blocks = 3;
    p.score.batch = 2;
    p.score.epochs = 350;
    p.score.lr = 1e-4;
    p.score.ema_rate = 0.9999;
    p.disc.net.widths = {128, 256, 256};
    p.disc.net.blocks = 2;
    p.disc.net.head_hidden = 1024;
    p.disc.net.head_layers = 2;
    p.disc.batch = 8;
    p.disc.epochs = 500;
    p.disc.lr = 1e-4;
    p.sampler = vorticity_sampler();
    p.eval.forecasts = 100;
    p.eval.members = 50;
    p.eval.leads = 10;
    p.eval.rollout_steps = 4000;
    p.eval.uncond_samples = 4000;
    p.inert = {{"attention_blocks.score", "3"},     {"attention_blocks.disc", "2"},
               {"attention_resolutions", "8,4"},    {"channel_mult", "1,2,2"},
               {"channel_base", "128"},             {"optimizer", "AdamW"},
               {"parameters.score", "33.8M"}};
    return p;
}

/// Desk-scale 64×64 vorticity protocol.
inline ExperimentPreset vorticity_desk_preset() {
    ExperimentPreset p;
    p.name = "vorticity-desk";
    p.sim.L = 64;
    p.sim.nu = 5.12e-5;
    p.sim.spinup_steps = 5000;
    p.sim.frames = 7500;
    p.n_train = 5000;
    p.n_val = 1000;
    p.score.net.widths = {32, 64, 64};
    p.score.net.blocks = 2;
    p.score.batch = 16;
    p.score.epochs = 20;
    p.score.ema_rate = 0.999;
    p.disc.net.widths = {32, 64};
    p.disc.net.blocks = 2;
    p.disc.net.head_hidden = 1024;
    p.disc.batch = 8;
    p.disc.epochs = 20;
    p.sampler = vorticity_sampler();
    p.inert = {{"attention", "none"}, {"optimizer", "AdamW"}};
    return p;
}

/// Reduced 32×32 protocol sized for a single CPU core.
inline ExperimentPreset vorticity_ci_preset() {
    ExperimentPreset p = vorticity_desk_preset();
    p.name = "vorticity-ci";
    p.sim.L = 32;
    p.sim.nu = 1e-4;
    p.sim.frames = 4000;
    p.n_train = 2500;
    p.n_val = 250;
    p.score.net.widths = {16, 32, 32};
    p.score.net.blocks = 1;
    p.score.net.emb_hidden = 64;
    p.score.max_steps = 4000;
    p.score.lr = 5e-4;
    p.disc.net.widths = {16, 32};
    p.disc.net.blocks = 1;
    p.disc.net.emb_hidden = 64;
    p.disc.net.head_hidden = 256;
    p.disc.max_steps = 4000;
    p.disc.lr = 5e-4;
    return p;
}

/// Tiny end-to-end run for determinism and interface checks.
inline ExperimentPreset vorticity_smoke_preset() {
    ExperimentPreset p = vorticity_ci_preset();
    p.name = "vorticity-smoke";
    p.sim.L = 16;
    p.sim.k_f = 3.0;
    p.sim.delta_f = 1.0;
    p.sim.nu = 1e-3;
    p.sim.spinup_steps = 200;
    p.sim.frames = 120;
    p.n_train = 70;
    p.n_val = 10;
    p.score.net.widths = {4, 8};
    p.score.net.emb_features = 4;
    p.score.net.emb_hidden = 8;
    p.score.net.groups = 2;
    p.score.max_steps = 3;
    p.score.batch = 4;
    p.disc.net.widths = {4, 8};
    p.disc.net.emb_features = 4;
    p.disc.net.emb_hidden = 8;
    p.disc.net.groups = 2;
    p.disc.net.head_hidden = 8;
    p.disc.max_steps = 3;
    p.disc.batch = 2;
    p.sampler.schedule = make_schedule(0.002, 80.0, 7.0, 4);
    p.eval.forecasts = 2;
    p.eval.members = 2;
    p.eval.leads = 2;
    p.eval.rollout_steps = 12;
    p.eval.trace_samples = 2;
    p.eval.uncond_samples = 12;
    p.eval.acf_lags = 3;
    p.eval.auc_pairs = 4;
    p.eval.bootstrap = 20;
    p.eval.bootstrap_block = 4;
    p.eval.hovmoeller_columns = 4;
    p.eval.eof_modes = 2;
    return p;
}

inline std::vector<std::string> preset_names() {
    return {"vorticity-desk", "vorticity-paper", "vorticity-ci", "vorticity-smoke"};
}

inline ExperimentPreset preset_by_name(const std::string& name) {
    if (name == "vorticity-desk") return vorticity_desk_preset();
    if (name == "vorticity-paper") return vorticity_paper_preset();
    if (name == "vorticity-ci") return vorticity_ci_preset();
    if (name == "vorticity-smoke") return vorticity_smoke_preset();
    throw ConfigError("unknown preset '" + name + "'");
}

/// Preset named by `preset.name` in `c` (default vorticity-desk) with `c` applied on top.
inline ExperimentPreset preset_from_config(const Config& c) {
    auto p = preset_by_name(c.has("preset.name") ? c.get("preset.name") : "vorticity-desk");
    p.apply(c);
    return p;
}

}  // namespace dynaguide
