#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <sstream>

#include "dynaguide/cli.hpp"

using namespace dynaguide;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code;
    std::string out, err;
};

Outcome run(std::vector<std::string> args) {
    args.insert(args.begin(), "dynaguide");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("dynaguide_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::set<fs::path> tree(const fs::path& root) {
    std::set<fs::path> s;
    for (const auto& e : fs::recursive_directory_iterator(root)) s.insert(e.path());
    return s;
}

}  // namespace

TEST(Cli, HelpMatchesGolden) {
    for (const auto& [flag, file] : {std::pair<std::string, std::string>{"--help", "help.txt"}, {"--help-all", "help_all.txt"}}) {
        const auto r = run({flag});
        EXPECT_EQ(r.code, exit_ok);
        EXPECT_EQ(r.out, read_file_bytes(fs::path(DYNAGUIDE_GOLDEN_DIR) / file)) << flag;
    }
}

TEST(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run({}).code, exit_usage);
    EXPECT_EQ(run({"simulate", "--bogus"}).code, exit_usage);
    EXPECT_EQ(run({"frobnicate"}).code, exit_usage);
    EXPECT_EQ(run({"sample", "--score", "a", "--init", "b", "--guided", "maybe"}).code, exit_usage);
    EXPECT_EQ(run({"train-score", "--data", "x", "--mode", "video"}).code, exit_usage);
    EXPECT_EQ(run({"evaluate", "--truth", "x"}).code, exit_usage);
    EXPECT_EQ(run({"simulate", "--threads", "0"}).code, exit_usage);
}

TEST(Cli, MissingFilesExitThree) {
    const auto dir = fresh_dir("missing");
    const auto r = run({"evaluate", "--truth", "/nonexistent/a.stdg", "--gen", "/nonexistent/b.stdg", "--out", dir.string()});
    EXPECT_EQ(r.code, exit_missing_file);
    EXPECT_NE(r.err.find("/nonexistent/a.stdg"), std::string::npos);
    EXPECT_EQ(run({"simulate", "--config", "/nonexistent/c.cfg", "--out", dir.string()}).code, exit_missing_file);
    EXPECT_EQ(run({"preset", "vorticity-smoke", "--stage", "evaluate", "--out", dir.string()}).code, exit_missing_file);
}

TEST(Cli, InvalidConfigExitsFour) {
    const auto dir = fresh_dir("invalid");
    EXPECT_EQ(run({"simulate", "--set", "sim.bogus=1", "--out", dir.string()}).code, exit_invalid);
    EXPECT_EQ(run({"simulate", "--set", "sim.dt=fast", "--out", dir.string()}).code, exit_invalid);
    EXPECT_EQ(run({"preset", "no-such-preset", "--out", dir.string()}).code, exit_invalid);
    EXPECT_EQ(run({"preset", "vorticity-smoke", "--set", "eval.rollout_steps=5000", "--out", dir.string()}).code,
              exit_invalid);
}

TEST(Cli, EvaluateShapeMismatchNamesBothShapes) {
    const auto dir = fresh_dir("shapes");
    TrajectoryDataset a, b;
    for (int i = 0; i < 20; ++i) {
        a.frames.emplace_back(1, 8, 8, std::vector<float>(64, static_cast<float>(i % 3)));
        b.frames.emplace_back(1, 16, 16, std::vector<float>(256, static_cast<float>(i % 5)));
    }
    save_dataset(dir / "a.stdg", a);
    save_dataset(dir / "b.stdg", b);
    const auto r = run({"evaluate", "--truth", (dir / "a.stdg").string(), "--gen", (dir / "b.stdg").string(), "--set",
                        "preset.name=vorticity-smoke", "--out", (dir / "o").string()});
    EXPECT_EQ(r.code, exit_invalid);
    EXPECT_NE(r.err.find(a[0].shape_string()), std::string::npos) << r.err;
    EXPECT_NE(r.err.find(b[0].shape_string()), std::string::npos) << r.err;
}

TEST(Cli, SubcommandChainWritesOnlyUnderOut) {
    const auto root = fresh_dir("chain");
    const auto data = root / "data", models = root / "models", roll = root / "roll", fc = root / "fc", ev = root / "ev";
    const std::vector<std::string> smoke{"--set", "preset.name=vorticity-smoke", "--seed", "5"};
    auto with = [&](std::vector<std::string> a, const fs::path& out) {
        a.insert(a.end(), smoke.begin(), smoke.end());
        a.push_back("--out");
        a.push_back(out.string());
        return run(a);
    };
    ASSERT_EQ(with({"simulate"}, data).code, exit_ok);
    const auto train = (data / "train.stdg").string(), test = (data / "test.stdg").string();
    ASSERT_EQ(with({"train-score", "--data", train, "--mode", "uncond"}, models).code, exit_ok);
    ASSERT_EQ(with({"train-disc", "--data", train}, models).code, exit_ok);
    const auto score = (models / "score_uncond.ckpt").string(), disc = (models / "disc.ckpt").string();

    const auto before = tree(root);
    const auto s = with({"sample", "--score", score, "--disc", disc, "--init", test, "--steps", "6", "--lambda", "2"}, roll);
    ASSERT_EQ(s.code, exit_ok) << s.err;
    const auto after = tree(root);
    for (const auto& p : after)
        if (!before.count(p)) {
            EXPECT_EQ(p.string().rfind(roll.string(), 0), 0u) << p;
        }

    const auto rollout_ds = load_dataset(roll / "rollout.stdg");
    EXPECT_EQ(rollout_ds.size(), 6u);
    const auto roll_container = read_container(roll / "rollout.stdg");
    const auto* prov = find_provenance(roll_container);
    ASSERT_NE(prov, nullptr);
    EXPECT_EQ(prov->get("input.score"), file_hash(score));
    EXPECT_EQ(prov->get("input.disc"), file_hash(disc));
    EXPECT_EQ(prov->get("input.init"), file_hash(test));
    EXPECT_EQ(prov->get("config_hash"), preset_by_name("vorticity-smoke").hash());

    const auto f = with({"forecast", "--score", score, "--disc", disc, "--truth", test, "--forecasts", "2", "--members",
                         "3", "--lead", "2"}, fc);
    ASSERT_EQ(f.code, exit_ok) << f.err;
    const auto fr = MetricReport::load(fc / "forecast.json");
    EXPECT_EQ(fr.array("crps").size(), 2u);
    EXPECT_EQ(load_dataset(fc / "forecast.stdg").size(), 2u * 3u * 2u);

    const auto e = with({"evaluate", "--truth", test, "--gen", (roll / "rollout.stdg").string(), "--reference", train}, ev);
    ASSERT_EQ(e.code, exit_ok) << e.err;
    const auto er = MetricReport::load(ev / "report.json");
    EXPECT_TRUE(er.has("rmse"));
    EXPECT_EQ(er.text("provenance.gen"), file_hash(roll / "rollout.stdg"));

    // Guided sampling needs a discriminator.
    EXPECT_EQ(with({"sample", "--score", score, "--init", test, "--steps", "2"}, roll).code, exit_invalid);
}

TEST(Cli, PresetRunTwiceGivesIdenticalReportHash) {
    const auto a = fresh_dir("preset_a"), b = fresh_dir("preset_b");
    const auto r1 = run({"preset", "vorticity-smoke", "--seed", "7", "--threads", "2", "--out", a.string()});
    const auto r2 = run({"preset", "vorticity-smoke", "--seed", "7", "--threads", "2", "--out", b.string()});
    ASSERT_EQ(r1.code, exit_ok) << r1.err;
    ASSERT_EQ(r2.code, exit_ok) << r2.err;
    EXPECT_EQ(r1.out.rfind("report ", 0), 0u);
    EXPECT_EQ(r1.out, r2.out);
    EXPECT_EQ(read_file_bytes(a / "report.json"), read_file_bytes(b / "report.json"));
}
