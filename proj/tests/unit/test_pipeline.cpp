#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dynaguide/pipeline.hpp"

using namespace dynaguide;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("dynaguide_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST(Hashing, GitBlobKnownValues) {
    // `git hash-object` of an empty file and of "hello\n".
    EXPECT_EQ(git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    EXPECT_EQ(git_blob_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
    EXPECT_EQ(sha1_hex("abc"), "a9993e364706816aba3e25717850c26c9cd0d89d");
}

TEST(Config, ParseCommentsAndErrors) {
    const auto c = Config::parse("# header\nsim.dt = 0.01  # step\n\n  data.train=5\n");
    EXPECT_EQ(c.get_double("sim.dt"), 0.01);
    EXPECT_EQ(c.get_size("data.train"), 5u);
    EXPECT_EQ(c.values().size(), 2u);
    EXPECT_THROW(Config::parse("a=1\na=2"), ConfigError);
    EXPECT_THROW(Config::parse("novalue"), ConfigError);
    EXPECT_THROW(Config::parse("=3"), ConfigError);
    try {
        Config::parse("a=1\nbroken", "x.cfg");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("x.cfg:2"), std::string::npos);
    }
    EXPECT_THROW(c.get("missing"), ConfigError);
    EXPECT_THROW(Config::parse("k=abc").get_double("k"), ConfigError);
    EXPECT_THROW(Config::parse("k=-1").get_size("k"), ConfigError);
    EXPECT_THROW(Config::parse("k=maybe").get_bool("k"), ConfigError);
    EXPECT_TRUE(Config::parse("k=on").get_bool("k"));
    EXPECT_EQ(Config::parse("k=1, 2,3").get_doubles("k"), (std::vector<double>{1, 2, 3}));
}

TEST(Config, HashIgnoresOrderAndComments) {
    const auto a = Config::parse("b=2\na=1\n");
    const auto b = Config::parse("# x\na = 1\nb= 2");
    EXPECT_EQ(a.hash(), b.hash());
    EXPECT_EQ(a.serialize(), "a=1\nb=2\n");
    EXPECT_NE(a.hash(), Config::parse("a=1\nb=3").hash());
}

TEST(Presets, AllValidateAndRoundTrip) {
    for (const auto& name : preset_names()) {
        const auto p = preset_by_name(name);
        p.validate();
        const auto text = p.to_config().serialize();
        const auto q = preset_from_config(Config::parse(text));
        EXPECT_EQ(q.to_config().serialize(), text) << name;
        EXPECT_EQ(q.hash(), p.hash()) << name;
    }
    EXPECT_THROW(preset_by_name("nope"), ConfigError);
}

TEST(Presets, PaperValuesStoredVerbatim) {
    const auto p = preset_by_name("vorticity-paper");
    EXPECT_EQ(p.sim.L, 256u);
    EXPECT_EQ(p.score.batch, 2u);
    EXPECT_EQ(p.score.epochs, 350u);
    EXPECT_EQ(p.disc.epochs, 500u);
    EXPECT_EQ(p.sampler.schedule.steps, 50u);
    EXPECT_EQ(p.sampler.lambda, 14.0);
    EXPECT_EQ(p.sampler.s_churn, 55.0);
    EXPECT_EQ(p.sampler.s_noise, 1.005);
    EXPECT_EQ(p.inert.at("attention_resolutions"), "8,4");
    const auto d = preset_by_name("vorticity-desk");
    EXPECT_EQ(d.sim.L, 64u);
    EXPECT_EQ(d.eval.forecasts, 20u);
    EXPECT_EQ(d.eval.members, 8u);
    EXPECT_EQ(d.eval.leads, 10u);
    EXPECT_EQ(d.eval.rollout_steps, 1000u);
}

TEST(Presets, OverridesAndUnknownKeys) {
    Config c;
    c.set("preset.name", "vorticity-smoke");
    c.set("sampler.steps", std::size_t{7});
    c.set("sampler.lambda", 3.5);
    c.set("meta.note", "x");
    const auto p = preset_from_config(c);
    EXPECT_EQ(p.sampler.schedule.steps, 7u);
    EXPECT_EQ(p.sampler.schedule.sigmas.size(), 8u);
    EXPECT_EQ(p.sampler.lambda, 3.5);
    EXPECT_EQ(p.inert.at("note"), "x");
    c.set("sim.bogus", "1");
    EXPECT_THROW(preset_from_config(c), ConfigError);
    Config bad;
    bad.set("preset.name", "vorticity-smoke");
    bad.set("eval.rollout_steps", std::size_t{1000});
    EXPECT_THROW(preset_from_config(bad).validate(), ConfigError);
}

TEST(Report, RoundTripNullsAndHash) {
    MetricReport r;
    r.set("a", 1.5);
    r.set("nan", std::nan(""));
    r.set("flag", true);
    r.set("arr", std::vector<double>{1, std::numeric_limits<double>::infinity(), 3});
    r.set("name", "x");
    const auto text = r.serialize();
    EXPECT_NE(text.find("\"nan\": null"), std::string::npos);
    const auto back = MetricReport::parse(text);
    EXPECT_TRUE(back == r);
    EXPECT_EQ(back.hash(), r.hash());
    EXPECT_EQ(r.hash(), git_blob_hash(text));
    EXPECT_TRUE(std::isnan(back.number("nan")));
    EXPECT_TRUE(std::isnan(back.array("arr")[1]));
    EXPECT_TRUE(back.flag("flag"));
    EXPECT_EQ(back.text("name"), "x");
    EXPECT_THROW(back.number("missing"), FormatError);
    EXPECT_THROW(back.flag("a"), FormatError);
    EXPECT_THROW(MetricReport::parse("[1]"), FormatError);
    EXPECT_THROW(MetricReport::parse("{"), FormatError);
}

TEST(Provenance, BlockSurvivesCheckpointAndDatasetRoundTrip) {
    TrajectoryDataset ds;
    ds.frames.emplace_back(1, 2, 2, std::vector<float>{1, 2, 3, 4});
    auto c = dataset_to_container(ds);
    add_provenance(c, "cfg", {{"train", "abc"}});
    const auto back = decode_container(encode_container(c));
    const auto* p = find_provenance(back);
    ASSERT_NE(p, nullptr);
    EXPECT_EQ(p->get("config_hash"), "cfg");
    EXPECT_EQ(p->get("input.train"), "abc");
    EXPECT_EQ(dataset_from_container(back).size(), 1u);
    EXPECT_EQ(container_hash(back), container_hash(c));
}

TEST(Bootstrap, IntervalCoversMeanAndIsDeterministic) {
    Rng rng(5);
    std::vector<double> v(500);
    for (auto& x : v) x = 2.0 + rng.normal();
    const auto a = block_bootstrap_mean(v, 400, 10, 9), b = block_bootstrap_mean(v, 400, 10, 9);
    EXPECT_EQ(a.lo, b.lo);
    EXPECT_EQ(a.hi, b.hi);
    EXPECT_LT(a.lo, a.mean);
    EXPECT_GT(a.hi, a.mean);
    // iid data: half-width ≈ 1.96 / sqrt(500) ≈ 0.088
    EXPECT_NEAR(a.hi - a.lo, 2 * 1.96 / std::sqrt(500.0), 0.05);
    const auto c = block_bootstrap_mean(std::vector<double>(10, 3.0), 50, 4, 1);
    EXPECT_EQ(c.lo, 3.0);
    EXPECT_EQ(c.hi, 3.0);
}

TEST(Helpers, ForecastInitsTerminalMeanShuffle) {
    const auto inits = forecast_inits(40, 3, 5);
    EXPECT_EQ(inits, (std::vector<std::size_t>{1, 17, 34}));
    for (auto n : inits) EXPECT_LT(n + 5, 40u);
    EXPECT_THROW(forecast_inits(7, 2, 5), ConfigError);
    std::vector<double> q(50, 0.0);
    for (std::size_t i = 45; i < 50; ++i) q[i] = 1.0;
    EXPECT_EQ(terminal_mean(q), 1.0);
    EXPECT_TRUE(non_decreasing({1, 1, 2}));
    EXPECT_FALSE(non_decreasing({1, 0.5}));
    TrajectoryDataset ds;
    for (int i = 0; i < 20; ++i) ds.frames.emplace_back(1, 1, 1, std::vector<float>{static_cast<float>(i)});
    const auto s = shuffled(ds, 3);
    std::vector<float> vals;
    for (const auto& f : s.frames) vals.push_back(f.values()[0]);
    std::vector<float> sorted = vals;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 20; ++i) EXPECT_EQ(sorted[i], static_cast<float>(i));
    EXPECT_NE(vals, sorted);
}

TEST(Metrics, ComparisonNamesBothShapes) {
    const std::vector<Field> a{Field(1, 4, 4, std::vector<float>(16, 1.0f))};
    const std::vector<Field> b{Field(1, 8, 8, std::vector<float>(64, 1.0f))};
    try {
        comparison_metrics(a, b, EvalProtocol{}, AreaWeights::uniform(4), 1);
        FAIL();
    } catch (const ShapeError& e) {
        const std::string m = e.what();
        EXPECT_NE(m.find(a[0].shape_string()), std::string::npos) << m;
        EXPECT_NE(m.find(b[0].shape_string()), std::string::npos) << m;
    }
}

TEST(Pipeline, SmokeRunIsDeterministicAndReusesArtifacts) {
    const auto preset = preset_by_name("vorticity-smoke");
    PipelineOptions o1, o2;
    o1.out = fresh_dir("smoke_a");
    o2.out = fresh_dir("smoke_b");
    o2.threads = 2;
    const auto r1 = Pipeline(preset, 7, o1).run(Stage::all);
    const auto r2 = Pipeline(preset, 7, o2).run(Stage::all);
    ASSERT_TRUE(r1.evaluated);
    EXPECT_EQ(r1.report_hash, r2.report_hash);
    EXPECT_EQ(r1.report_hash, file_hash(o1.out / "report.json"));
    for (const char* key : {"disc.auc_min", "trace.guided.terminal_q", "guided.acf_lag1", "truth.acf_lag1",
                            "uncond.acf_lag1", "guided.std_ratio_min", "bias.guided_abs", "disc.shuffled.p_value"})
        EXPECT_TRUE(r1.report.has(key)) << key;
    EXPECT_EQ(r1.report.array("forecast.guided.crps").size(), preset.eval.leads);
    for (const char* f : {"train.stdg", "test.stdg", "score_uncond.ckpt", "score_cond.ckpt", "disc.ckpt",
                          "rollout_guided.stdg", "forecast_cond.stdg", "hovmoeller.stdg", "bias.stdg", "log.txt"})
        EXPECT_TRUE(fs::exists(o1.out / f)) << f;

    // Every checkpoint carries the config and input hashes.
    const auto ck = read_container(o1.out / "disc.ckpt");
    const auto* prov = find_provenance(ck);
    ASSERT_NE(prov, nullptr);
    EXPECT_EQ(prov->get("input.train"), file_hash(o1.out / "train.stdg"));

    // Re-running evaluate alone reuses every artifact and reproduces the report.
    const auto stamp = fs::last_write_time(o1.out / "score_cond.ckpt");
    const auto r3 = Pipeline(preset, 7, o1).run(Stage::evaluate);
    EXPECT_EQ(r3.report_hash, r1.report_hash);
    EXPECT_EQ(fs::last_write_time(o1.out / "score_cond.ckpt"), stamp);

    auto other = preset;
    other.sampler.lambda = 2.0;
    const auto r4 = Pipeline(other, 7, o1).run(Stage::all);
    EXPECT_NE(r4.report_hash, r1.report_hash);
    EXPECT_EQ(fs::last_write_time(o1.out / "score_cond.ckpt"), stamp);
    EXPECT_NE(Pipeline(preset, 8, o1).run(Stage::all).report_hash, r1.report_hash);
}

TEST(Pipeline, EvaluateWithoutArtifactsFails) {
    PipelineOptions o;
    o.out = fresh_dir("smoke_missing");
    EXPECT_THROW(Pipeline(preset_by_name("vorticity-smoke"), 7, o).run(Stage::evaluate), IoError);
}

TEST(Pipeline, CacheIsFilledAndConsulted) {
    const auto preset = preset_by_name("vorticity-smoke");
    const auto cache = fresh_dir("smoke_cache");
    PipelineOptions a, b;
    a.out = fresh_dir("smoke_c1");
    b.out = fresh_dir("smoke_c2");
    a.cache = b.cache = cache;
    Pipeline(preset, 3, a).run(Stage::train);
    EXPECT_FALSE(fs::is_empty(cache));
    std::vector<std::string> lines;
    b.log = [&](const std::string& s) { lines.push_back(s); };
    Pipeline(preset, 3, b).run(Stage::train);
    std::size_t reused = 0;
    for (const auto& l : lines) reused += l.find("reuse ") != std::string::npos;
    EXPECT_EQ(reused, 7u);
    EXPECT_EQ(file_hash(a.out / "disc.ckpt"), file_hash(b.out / "disc.ckpt"));
}
