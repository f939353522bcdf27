#include <gtest/gtest.h>

#include <cstdlib>

#include "dfeval/pipeline.hpp"
#include "oracles.hpp"

using namespace dfeval;
using namespace dfeval::pipeline;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error raised";
    return ErrorKind::IoError;
}

std::string what_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.what();
    }
    return "";
}

synth::CorpusSpec corpus() {
    synth::CorpusSpec s;
    s.n_identities = 8;
    s.videos_per_identity = 2;
    s.frames_per_video = 2;
    s.canvas = {32, 32};
    s.artifact_strength = 0.8;
    return s;
}

RunConfig run_config(const oracle::TempDir& dir, const std::string& run = "run") {
    RunConfig c;
    c.run_dir = dir / run;
    c.manifest = dir / "corpus/manifest.jsonl";
    c.regions = {RegionKind::Mouth, RegionKind::Eyes};
    c.input_size = 16;
    c.schedule.stage1_epochs = 1;
    c.schedule.stage2_epochs = 1;
    c.schedule.batch_size = 4;
    c.schedule.train_fraction = 0.75;
    return c;
}

void through_segment(RunConfig& c) {
    cmd_ingest(c);
    cmd_split(c);
    cmd_segment(c);
}

int run_cli(const std::string& args, const std::filesystem::path& out, const std::filesystem::path& err) {
    const std::string cmd = std::string(DFEVAL_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

} // namespace

TEST(Pipeline, EndToEndProducesReportAndArtifacts) {
    oracle::TempDir dir;
    cmd_synth(corpus(), dir / "corpus");
    auto c = run_config(dir);
    through_segment(c);
    cmd_train(c);
    const auto ev = cmd_eval(c);
    ASSERT_EQ(ev.at("results").size(), 2u);
    for (const auto& r : ev.at("results")) {
        EXPECT_GE(r.at("eer").get<double>(), 0.0);
        EXPECT_LE(r.at("eer").get<double>(), 1.0);
        EXPECT_FALSE(r.at("identity_leaked").get<bool>());
        EXPECT_EQ(r.at("level"), "frame");
    }
    const auto md = cmd_report(c, metrics::ReportFormat::Markdown);
    EXPECT_NE(md.find("| synthbench |"), std::string::npos);
    EXPECT_NE(md.find("Mouth EER (%)"), std::string::npos);
    EXPECT_NE(md.find("Eyes EER (%)"), std::string::npos);
    for (const char* stage : {"ingest", "split", "segment", "train", "eval", "report"})
        EXPECT_TRUE(std::filesystem::exists(c.run_dir / "config" / (std::string(stage) + ".json"))) << stage;
    EXPECT_TRUE(std::filesystem::exists(c.run_dir / "scores/Mouth_tiny_cnn.csv"));
    EXPECT_TRUE(std::filesystem::exists(c.run_dir / "models/Mouth_tiny_cnn.dfck"));
    EXPECT_TRUE(std::filesystem::exists(c.run_dir / "registry/synthbench/Eyes/tiny_cnn/checkpoint.dfck"));

    const auto hm = cmd_heatmap(c, {}, Label::Fake, 0.5);
    EXPECT_FALSE(hm.at("heatmaps").empty());
    EXPECT_TRUE(std::filesystem::exists(c.run_dir / "heatmaps/index.json"));
}

TEST(Pipeline, VideoLevelAggregation) {
    oracle::TempDir dir;
    cmd_synth(corpus(), dir / "corpus");
    auto c = run_config(dir);
    c.regions = {RegionKind::Mouth};
    c.level = metrics::ScoreLevel::Video;
    c.aggregation = metrics::Aggregation::Max;
    through_segment(c);
    cmd_train(c);
    const auto ev = cmd_eval(c);
    const auto split = load_split(c);
    std::size_t eval_videos = 0;
    for (const auto& [vid, side] : split.plan.assignment) eval_videos += side == dataset::Side::Eval;
    EXPECT_EQ(ev.at("results")[0].at("units").get<std::size_t>(), eval_videos);
    EXPECT_EQ(ev.at("results")[0].at("level"), "video");
}

TEST(Pipeline, StagesNameMissingPrerequisites) {
    oracle::TempDir dir;
    cmd_synth(corpus(), dir / "corpus");
    auto c = run_config(dir);
    EXPECT_EQ(kind_of([&] { cmd_split(c); }), ErrorKind::MissingPrerequisite);
    EXPECT_EQ(kind_of([&] { cmd_segment(c); }), ErrorKind::MissingPrerequisite);
    cmd_ingest(c);
    EXPECT_EQ(kind_of([&] { cmd_train(c); }), ErrorKind::MissingPrerequisite);
    cmd_split(c);
    EXPECT_EQ(kind_of([&] { cmd_train(c); }), ErrorKind::MissingPrerequisite);
    cmd_segment(c);
    const auto msg = what_of([&] { cmd_eval(c); });
    EXPECT_NE(msg.find("MissingPrerequisite"), std::string::npos);
    EXPECT_NE(msg.find("synthbench/Mouth/tiny_cnn"), std::string::npos);
    EXPECT_EQ(kind_of([&] { cmd_report(c, metrics::ReportFormat::Markdown); }), ErrorKind::MissingPrerequisite);
}

TEST(Pipeline, SameIdentitySplitIsStampedLeaked) {
    oracle::TempDir dir;
    cmd_synth(corpus(), dir / "corpus");
    auto c = run_config(dir);
    c.regions = {RegionKind::Mouth};
    c.split_mode = "same-identity";
    through_segment(c);
    EXPECT_TRUE(load_split(c).identity_leaked);
    cmd_train(c);
    cmd_eval(c);
    const auto md = cmd_report(c, metrics::ReportFormat::Markdown);
    EXPECT_NE(md.find("(identity-leaked)"), std::string::npos);
    EXPECT_NE(md.find("WARNING"), std::string::npos);
}

TEST(Pipeline, RetrainIsIdempotentUnlessConfigChanges) {
    oracle::TempDir dir;
    cmd_synth(corpus(), dir / "corpus");
    auto c = run_config(dir);
    c.regions = {RegionKind::Mouth};
    through_segment(c);
    cmd_train(c);
    const auto first = oracle::slurp(c.run_dir / "registry/synthbench/Mouth/tiny_cnn/checkpoint.dfck");
    EXPECT_NO_THROW(cmd_train(c));
    EXPECT_EQ(oracle::slurp(c.run_dir / "registry/synthbench/Mouth/tiny_cnn/checkpoint.dfck"), first);
    c.schedule.stage2_epochs = 2;
    EXPECT_EQ(kind_of([&] { cmd_train(c); }), ErrorKind::RegistryConflict);
    c.overwrite = true;
    cmd_train(c);
    EXPECT_NE(oracle::slurp(c.run_dir / "registry/synthbench/Mouth/tiny_cnn/checkpoint.dfck"), first);
}

TEST(Pipeline, ReportCombinesRunsAndRejectsDifferentRegionSets) {
    oracle::TempDir dir;
    cmd_synth(corpus(), dir / "corpus");
    auto a = run_config(dir, "a");
    a.regions = {RegionKind::Mouth};
    through_segment(a);
    cmd_train(a);
    cmd_eval(a);
    auto b = run_config(dir, "b");
    b.regions = {RegionKind::Mouth};
    b.split_mode = "same-identity";
    through_segment(b);
    cmd_train(b);
    cmd_eval(b);
    const auto md = cmd_report(a, metrics::ReportFormat::Markdown, {b.run_dir});
    EXPECT_NE(md.find("| synthbench |"), std::string::npos);
    EXPECT_NE(md.find("| synthbench (identity-leaked) |"), std::string::npos);
    const auto js = nlohmann::json::parse(cmd_report(a, metrics::ReportFormat::Json, {b.run_dir}));
    EXPECT_EQ(js.at("reports").size(), 2u);

    // a clean Eyes-only run merges into run a's row; the leaked row then lacks Eyes
    auto e = run_config(dir, "eyes");
    e.regions = {RegionKind::Eyes};
    through_segment(e);
    cmd_train(e);
    cmd_eval(e);
    EXPECT_EQ(kind_of([&] { cmd_report(a, metrics::ReportFormat::Markdown, {b.run_dir, e.run_dir}); }),
              ErrorKind::InconsistentRegions);
}

TEST(Cli, ConfigFileWithFlagOverrideAndErrors) {
    oracle::TempDir dir;
    const auto out = dir / "out.txt", err = dir / "err.txt";
    ASSERT_EQ(run_cli("synth --out " + (dir / "corpus").string() +
                          " --identities 6 --videos 2 --frames 1 --height 32 --width 32",
                      out, err),
              0)
        << oracle::slurp(err);
    {
        std::ofstream ini(dir / "run.ini");
        ini << "run = " << (dir / "run").string() << "\n"
            << "manifest = " << (dir / "corpus/manifest.jsonl").string() << "\n"
            << "region = Eyes\n"
            << "input-size = 16\n"
            << "stage1-epochs = 1\n"
            << "stage2-epochs = 1\n"
            << "batch-size = 4\n";
    }
    const std::string cfg = " --config " + (dir / "run.ini").string();
    ASSERT_EQ(run_cli("ingest" + cfg, out, err), 0) << oracle::slurp(err);
    ASSERT_EQ(run_cli("split" + cfg, out, err), 0) << oracle::slurp(err);
    ASSERT_EQ(run_cli("segment" + cfg + " --region Mouth", out, err), 0) << oracle::slurp(err);
    const auto seg = nlohmann::json::parse(oracle::slurp(dir / "run/segment.json"));
    EXPECT_EQ(seg.at("regions"), nlohmann::json::array({"Mouth"}));
    const auto recorded = nlohmann::json::parse(oracle::slurp(dir / "run/config/segment.json"));
    EXPECT_EQ(recorded.at("input_size"), 16);

    EXPECT_EQ(run_cli("eval" + cfg + " --region Mouth", out, err), 2);
    const auto msg = oracle::slurp(err);
    EXPECT_NE(msg.find("MissingPrerequisite"), std::string::npos) << msg;
    EXPECT_NE(msg.find("synthbench/Mouth/tiny_cnn"), std::string::npos) << msg;

    EXPECT_NE(run_cli("split" + cfg + " --split-mode sideways", out, err), 0);
    EXPECT_NE(oracle::slurp(err).find("ConfigError"), std::string::npos) << oracle::slurp(err);
    EXPECT_NE(run_cli("frobnicate", out, err), 0);
}
