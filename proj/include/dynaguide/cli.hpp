#pragma once

/// Command-line front end: subcommands over the pipeline modules.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dynaguide/pipeline.hpp"

namespace dynaguide {

/// Process exit codes.
enum ExitCode : int {
    exit_ok = 0,
    /// Numerical failure or any other runtime error.
    exit_runtime = 1,
    /// Unknown flag, bad flag value or missing argument.
    exit_usage = 2,
    /// A referenced input file does not exist or cannot be read.
    exit_missing_file = 3,
    /// Config, shape or validation failure.
    exit_invalid = 4,
};

namespace cli {

struct CommonOptions {
    std::string config;
    std::vector<std::string> sets;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::string out = "out";
};

inline void add_common(CLI::App& app, CommonOptions& o) {
    app.add_option("--config", o.config, "Config file of key=value lines");
    app.add_option("--set", o.sets, "Override one config key (key=value); repeatable");
    app.add_option("--seed", o.seed, "Root random seed")->capture_default_str();
    app.add_option("--threads", o.threads, "Worker thread cap")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--out", o.out, "Output directory")->capture_default_str();
}

/// Preset from the config file and overrides; `name` (if set) selects the base preset.
inline ExperimentPreset resolve_preset(const CommonOptions& o, const std::string& name = "") {
    Config c;
    if (!o.config.empty()) c = Config::load(o.config);
    if (!name.empty()) c.set("preset.name", name);
    for (const auto& s : o.sets) c.set_override(s);
    auto p = preset_from_config(c);
    p.validate();
    return p;
}

inline std::optional<std::filesystem::path> cache_from_env() {
    if (const char* c = std::getenv("DYNAGUIDE_CACHE"); c && *c) return std::filesystem::path(c);
    return std::nullopt;
}

inline std::filesystem::path out_dir(const CommonOptions& o) {
    std::filesystem::create_directories(o.out);
    return o.out;
}

inline void write_with_provenance(const std::filesystem::path& path, Container c, const ExperimentPreset& p,
                                  const std::vector<std::pair<std::string, std::string>>& inputs) {
    add_provenance(c, p.hash(), inputs);
    write_container(path, c);
}

inline SamplerConfig sampler_from(const ExperimentPreset& p, bool guided, std::optional<double> lambda,
                                  std::uint64_t seed) {
    SamplerConfig s = p.sampler;
    s.guided = guided;
    if (lambda) s.lambda = *lambda;
    s.seed = seed;
    return s;
}

}  // namespace cli

/// Run the CLI; returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    using namespace cli;
    CLI::App app{"Discriminator-guided diffusion for dynamical systems", "dynaguide"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    CommonOptions common;
    std::string data, score, disc, init, truth, gen, reference, mode = "uncond", guided = "on", stage = "all",
                                                                  preset_name;
    std::optional<double> lambda;
    std::optional<std::size_t> steps, forecasts, members, lead;
    std::size_t init_index = 1;
    bool list = false;

    auto* simulate_cmd = app.add_subcommand("simulate", "Simulate the vorticity corpus and write standardized splits");
    add_common(*simulate_cmd, common);

    auto* train_score_cmd = app.add_subcommand("train-score", "Train a score model on a train split");
    add_common(*train_score_cmd, common);
    train_score_cmd->add_option("--data", data, "Train split (.stdg)")->required();
    train_score_cmd->add_option("--mode", mode, "uncond or cond")->capture_default_str()->check(CLI::IsMember({"uncond", "cond"}));

    auto* train_disc_cmd = app.add_subcommand("train-disc", "Train the time-consistency discriminator");
    add_common(*train_disc_cmd, common);
    train_disc_cmd->add_option("--data", data, "Train split (.stdg)")->required();

    auto add_sampling = [&](CLI::App& sc) {
        sc.add_option("--score", score, "Score model checkpoint")->required();
        sc.add_option("--disc", disc, "Discriminator checkpoint");
        sc.add_option("--guided", guided, "Discriminator guidance on|off")->capture_default_str()->check(CLI::IsMember({"on", "off"}));
        sc.add_option("--lambda", lambda, "Guidance strength");
    };

    auto* sample_cmd = app.add_subcommand("sample", "Autoregressive rollout from a dataset frame");
    add_common(*sample_cmd, common);
    add_sampling(*sample_cmd);
    sample_cmd->add_option("--init", init, "Dataset holding the initial frames (.stdg)")->required();
    sample_cmd->add_option("--init-index", init_index, "Index n of the initial frame; frame n-1 is the history")->capture_default_str();
    sample_cmd->add_option("--steps", steps, "Rollout length in frames");

    auto* forecast_cmd = app.add_subcommand("forecast", "Ensemble forecasts scored with CRPS and spread-skill");
    add_common(*forecast_cmd, common);
    add_sampling(*forecast_cmd);
    forecast_cmd->add_option("--truth", truth, "Verifying trajectory (.stdg)")->required();
    forecast_cmd->add_option("--forecasts", forecasts, "Number of initial times");
    forecast_cmd->add_option("--members", members, "Ensemble members per forecast");
    forecast_cmd->add_option("--lead", lead, "Number of lead times");

    auto* evaluate_cmd = app.add_subcommand("evaluate", "Compare a generated trajectory with the truth");
    add_common(*evaluate_cmd, common);
    evaluate_cmd->add_option("--truth", truth, "Reference trajectory (.stdg)")->required();
    evaluate_cmd->add_option("--gen", gen, "Generated trajectory (.stdg)")->required();
    evaluate_cmd->add_option("--reference", reference, "Climatology for scale and extremes (.stdg); defaults to --truth");

    auto* preset_cmd = app.add_subcommand("preset", "Run a named experiment preset end to end");
    add_common(*preset_cmd, common);
    preset_cmd->add_option("name", preset_name, "Preset name");
    preset_cmd->add_option("--stage", stage, "simulate, train, evaluate or all")->capture_default_str()->check(CLI::IsMember({"simulate", "train", "evaluate", "all"}));
    preset_cmd->add_flag("--list", list, "List the available presets");

    app.footer("Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 missing input file, "
               "4 invalid config, shape or value.\nEnvironment: DYNAGUIDE_CACHE names a directory "
               "for reusable datasets, checkpoints and samples.");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e, out, err);
        return exit_ok;
    } catch (const CLI::CallForAllHelp& e) {
        app.exit(e, out, err);
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return exit_usage;
    }

    auto fail = [&](int code, const std::string& kind, const std::exception& e) {
        err << "dynaguide: " << kind << ": " << e.what() << "\n";
        return code;
    };
    auto log_to_err = [&](const std::string& s) { err << s << "\n"; };

    try {
        if (*simulate_cmd) {
            const auto p = resolve_preset(common);
            PipelineOptions o{out_dir(common), cache_from_env(), common.threads, log_to_err};
            Pipeline(p, common.seed, o).run(Stage::simulate);
            out << "wrote " << (o.out / "train.stdg").string() << ", val.stdg, test.stdg\n";
        } else if (*train_score_cmd) {
            const auto p = resolve_preset(common);
            const auto ds = load_dataset(data);
            ScoreTrainConfig cfg = p.score;
            cfg.mode = score_mode_from_string(mode);
            cfg.seed = derive_seed(common.seed, {cfg.mode == ScoreMode::conditional ? 0x5C1u : 0x5C0u});
            const auto ck = train_score(cfg, ds, [&](const TrainProgress& t) {
                if (t.step % 500 == 0) err << "step " << t.step << " loss " << format_double(t.loss) << "\n";
            });
            const auto path = out_dir(common) / ("score_" + mode + ".ckpt");
            write_with_provenance(path, checkpoint_to_container(ck), p, {{"data", file_hash(data)}});
            out << "wrote " << path.string() << "\n";
        } else if (*train_disc_cmd) {
            const auto p = resolve_preset(common);
            const auto ds = load_dataset(data);
            DiscTrainConfig cfg = p.disc;
            cfg.seed = derive_seed(common.seed, {0xD15u});
            const auto ck = train_discriminator(cfg, ds, [&](const TrainProgress& t) {
                if (t.step % 500 == 0) err << "step " << t.step << " loss " << format_double(t.loss) << "\n";
            });
            const auto path = out_dir(common) / "disc.ckpt";
            write_with_provenance(path, checkpoint_to_container(ck), p, {{"data", file_hash(data)}});
            out << "wrote " << path.string() << "\n";
        } else if (*sample_cmd || *forecast_cmd) {
            const auto p = resolve_preset(common);
            const auto score_model = denoiser_from_checkpoint(load_checkpoint(score));
            std::optional<Discriminator<float>> d;
            std::vector<std::pair<std::string, std::string>> inputs{{"score", file_hash(score)}};
            if (!disc.empty()) {
                d = discriminator_from_checkpoint(load_checkpoint(disc));
                inputs.emplace_back("disc", file_hash(disc));
            }
            const bool g = guided == "on";
            if (*sample_cmd) {
                const auto ds = load_dataset(init);
                inputs.emplace_back("init", file_hash(init));
                const TrajectorySampler s(score_model, d ? &*d : nullptr,
                                          sampler_from(p, g, lambda, derive_seed(common.seed, {0x801u})));
                const auto traj = rollout(s, state_from(ds, init_index), steps.value_or(p.eval.rollout_steps), ds);
                const auto path = out_dir(common) / "rollout.stdg";
                write_with_provenance(path, dataset_to_container(traj), p, inputs);
                out << "wrote " << path.string() << " (" << traj.size() << " frames)\n";
            } else {
                const auto ds = load_dataset(truth);
                inputs.emplace_back("truth", file_hash(truth));
                const TrajectorySampler s(score_model, d ? &*d : nullptr,
                                          sampler_from(p, g, lambda, derive_seed(common.seed, {0xF01u})));
                const std::size_t L = lead.value_or(p.eval.leads);
                const auto inits = forecast_inits(ds.size(), forecasts.value_or(p.eval.forecasts), L);
                const auto e = ensemble_forecast(s, ds, inits, members.value_or(p.eval.members), L, common.threads);
                TrajectoryDataset values = ds.empty_like();
                values.frames = e.values;
                const auto dir = out_dir(common);
                write_with_provenance(dir / "forecast.stdg", dataset_to_container(values), p, inputs);
                MetricReport r;
                r.set("config_hash", p.hash());
                for (const auto& [k, v] : inputs) r.set("provenance." + k, v);
                r.set("forecasts", e.forecasts);
                r.set("members", e.members);
                r.set("leads", e.leads);
                std::vector<double> c, ssr;
                for (std::size_t j = 0; j < L; ++j) {
                    c.push_back(crps(e, j));
                    ssr.push_back(e.members > 1 ? spread_skill_ratio(e, j).ratio : std::nan(""));
                }
                r.set("crps", c);
                r.set("ssr", ssr);
                r.set("crps_non_decreasing", non_decreasing(c));
                r.save(dir / "forecast.json");
                out << "wrote " << (dir / "forecast.json").string() << " " << r.hash() << "\n";
            }
        } else if (*evaluate_cmd) {
            const auto p = resolve_preset(common);
            const auto t = load_dataset(truth);
            const auto g = load_dataset(gen);
            const auto ref = reference.empty() ? t : load_dataset(reference);
            if (t.empty() || g.empty()) throw ShapeError("cannot evaluate an empty trajectory");
            if (!t[0].same_shape(g[0]))
                throw ShapeError("truth frames are " + t[0].shape_string() + " but generated frames are " +
                                 g[0].shape_string());
            if (!ref[0].same_shape(t[0]))
                throw ShapeError("reference frames are " + ref[0].shape_string() + " but truth frames are " +
                                 t[0].shape_string());
            auto r = trajectory_metrics(t.frames, g.frames, ref.frames, p.eval, area_weights(t), derive_seed(common.seed, {0xB00u}));
            MetricReport full;
            full.set("config_hash", p.hash());
            full.set("provenance.truth", file_hash(truth));
            full.set("provenance.gen", file_hash(gen));
            if (!reference.empty()) full.set("provenance.reference", file_hash(reference));
            full.merge(r);
            const auto path = out_dir(common) / "report.json";
            full.save(path);
            out << "wrote " << path.string() << " " << full.hash() << "\n";
        } else if (*preset_cmd) {
            if (list) {
                for (const auto& n : preset_names()) out << n << "\n";
                return exit_ok;
            }
            if (preset_name.empty()) throw ConfigError("preset name required (see --list)");
            const auto p = resolve_preset(common, preset_name);
            PipelineOptions o{out_dir(common), cache_from_env(), common.threads, log_to_err};
            const auto res = Pipeline(p, common.seed, o).run(stage_from_string(stage));
            if (res.evaluated) out << "report " << res.report_hash << "\n";
            else out << "stage " << stage << " complete\n";
        }
    } catch (const IoError& e) {
        return fail(exit_missing_file, "missing file", e);
    } catch (const ConfigError& e) {
        return fail(exit_invalid, "invalid config", e);
    } catch (const ShapeError& e) {
        return fail(exit_invalid, "shape mismatch", e);
    } catch (const DomainError& e) {
        return fail(exit_invalid, "invalid value", e);
    } catch (const FormatError& e) {
        return fail(exit_invalid, "malformed input", e);
    } catch (const std::exception& e) {
        return fail(exit_runtime, "error", e);
    }
    return exit_ok;
}

}  // namespace dynaguide
