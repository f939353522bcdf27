// dfeval: command-line front end for the evaluation pipeline.
//
//   dfeval synth   --out corpus
//   dfeval ingest  --run run --manifest corpus/manifest.jsonl
//   dfeval split   --run run --split-mode identity-disjoint
//   dfeval segment --run run
//   dfeval train   --run run --region Mouth --architecture tiny_cnn
//   dfeval eval    --run run --region Mouth --architecture tiny_cnn
//   dfeval heatmap --run run --region Mouth --architecture tiny_cnn
//   dfeval report  --run run
//
// Options may also come from a TOML/INI file given with --config; flags on
// the command line take precedence.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dfeval/pipeline.hpp"

namespace {

using namespace dfeval;
using pipeline::RunConfig;

struct CliState {
    RunConfig cfg;
    std::vector<std::string> regions;
    std::string architecture = "tiny_cnn";
    std::string level = "frame";
    std::string aggregation = "mean";
    double dev_fraction = -1.0;

    synth::CorpusSpec corpus;
    std::string artifact_region = "Mouth";
    std::string synth_out = "corpus";

    std::string format = "markdown";
    std::vector<std::string> extra_runs;

    std::vector<std::string> heatmap_videos;
    std::string heatmap_target = "fake";
    double heatmap_alpha = 0.5;
};

void finalize(CliState& s) {
    if (!s.regions.empty()) s.cfg.regions = pipeline::parse_regions(s.regions);
    s.cfg.architecture = detectors::parse_architecture(s.architecture);
    s.cfg.level = metrics::parse_level(s.level);
    s.cfg.aggregation = metrics::parse_aggregation(s.aggregation);
    if (s.dev_fraction >= 0.0) s.cfg.dev_fraction = s.dev_fraction;
}

void add_run_options(CLI::App& app, CliState& s) {
    auto& c = s.cfg;
    app.add_option("--run", c.run_dir, "Run directory")->capture_default_str();
    app.add_option("--manifest", c.manifest, "JSON Lines video manifest (ingest)");
    app.add_option("--region", s.regions, "Region(s): Face Eyes Nose Mouth Rest, or all");
    app.add_option("--architecture", s.architecture, "transfer_cnn | capsule | tiny_cnn")->capture_default_str();
    app.add_option("--registry", c.registry, "Model registry root (default: $DFEVAL_REGISTRY or <run>/registry)");
    app.add_option("--weights", c.weights, "Backbone weights: random-init or a checkpoint path")->capture_default_str();
    app.add_option("--input-size", c.input_size, "Detector input side in pixels")->capture_default_str();
    app.add_option("--split-mode,--mode", c.split_mode, "identity-disjoint | same-identity | fixed")->capture_default_str();
    app.add_option("--split-seed", c.split_seed)->capture_default_str();
    app.add_option("--dev-fraction", s.dev_fraction, "Development share (default: per database)");
    app.add_option("--dev-list", c.dev_list, "Development video ids (fixed split)");
    app.add_option("--eval-list", c.eval_list, "Evaluation video ids (fixed split)");
    app.add_option("--train-seed", c.train_seed)->capture_default_str();
    app.add_option("--stage1-epochs", c.schedule.stage1_epochs)->capture_default_str();
    app.add_option("--stage2-epochs", c.schedule.stage2_epochs)->capture_default_str();
    app.add_option("--stage1-lr", c.schedule.stage1_lr)->capture_default_str();
    app.add_option("--stage2-lr", c.schedule.stage2_lr)->capture_default_str();
    app.add_option("--batch-size", c.schedule.batch_size)->capture_default_str();
    app.add_option("--train-fraction", c.schedule.train_fraction, "Internal train/validation share")
        ->capture_default_str();
    app.add_option("--level", s.level, "frame | video")->capture_default_str();
    app.add_option("--aggregation", s.aggregation, "mean | median | max")->capture_default_str();
    app.add_option("--sample-rate", c.sample_rate, "Frames per second sampled by segment")->capture_default_str();
    app.add_option("--frame-limit", c.frame_limit, "Maximum frames per video")->capture_default_str();
    app.add_option("--landmarks", c.landmarks_dir, "Landmark CSV directory (default: <manifest dir>/landmarks)");
    app.add_option("--landmark-backend", c.landmark_backend, "Detector for frames without landmarks")
        ->capture_default_str();
    app.add_option("--recipes", c.recipes, "Region recipe file");
    app.add_flag("--overwrite", c.overwrite, "Replace differing registry entries");
}

int run(int argc, char** argv) {
    CliState s;
    CLI::App app{"Region-based deepfake detector evaluation"};
    app.set_config("--config", "", "TOML/INI config file; command-line flags win");
    app.require_subcommand(1, 1);
    app.fallthrough();
    add_run_options(app, s);

    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic corpus with a planted regional artifact");
    synth_cmd->add_option("--out", s.synth_out, "Output directory")->capture_default_str();
    synth_cmd->add_option("--identities", s.corpus.n_identities)->capture_default_str();
    synth_cmd->add_option("--videos", s.corpus.videos_per_identity, "Videos per identity")->capture_default_str();
    synth_cmd->add_option("--frames", s.corpus.frames_per_video, "Frames per video")->capture_default_str();
    synth_cmd->add_option("--fake-fraction", s.corpus.fake_fraction)->capture_default_str();
    synth_cmd->add_option("--artifact-region", s.artifact_region)->capture_default_str();
    synth_cmd->add_option("--artifact-strength", s.corpus.artifact_strength)->capture_default_str();
    synth_cmd->add_option("--noise", s.corpus.noise_level)->capture_default_str();
    synth_cmd->add_option("--seed", s.corpus.seed)->capture_default_str();
    synth_cmd->add_option("--database", s.corpus.database)->capture_default_str();
    synth_cmd->add_option("--height", s.corpus.canvas.height)->capture_default_str();
    synth_cmd->add_option("--width", s.corpus.canvas.width)->capture_default_str();
    synth_cmd->add_flag("--identity-correlated", s.corpus.identity_correlated_labels,
                        "Make whole identities fake");

    auto* ingest_cmd = app.add_subcommand("ingest", "Validate a manifest and record database profiles");
    auto* split_cmd = app.add_subcommand("split", "Partition videos into development and evaluation");
    auto* segment_cmd = app.add_subcommand("segment", "Sample frames and cut region crops");
    auto* train_cmd = app.add_subcommand("train", "Train one detector per region and register it");
    auto* eval_cmd = app.add_subcommand("eval", "Score evaluation crops and compute EER / AUC");
    auto* heatmap_cmd = app.add_subcommand("heatmap", "Grad-CAM heatmaps for evaluation crops");
    heatmap_cmd->add_option("--video", s.heatmap_videos, "Video ids (default: first frame of each eval video)");
    heatmap_cmd->add_option("--target", s.heatmap_target, "real | fake")->capture_default_str();
    heatmap_cmd->add_option("--alpha", s.heatmap_alpha, "Overlay opacity")->capture_default_str();
    auto* report_cmd = app.add_subcommand("report", "Render the per-region comparison table");
    report_cmd->add_option("--format", s.format, "markdown | json")->capture_default_str();
    report_cmd->add_option("--also", s.extra_runs, "Further run directories to include");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    finalize(s);
    auto& cfg = s.cfg;
    if (synth_cmd->parsed()) {
        s.corpus.artifact_region = parse_region(s.artifact_region);
        const auto j = pipeline::cmd_synth(s.corpus, s.synth_out);
        std::cout << "synth: " << j.at("videos") << " videos (" << j.at("fake_videos") << " fake) -> "
                  << j.at("manifest").get<std::string>() << '\n';
    } else if (ingest_cmd->parsed()) {
        const auto j = pipeline::cmd_ingest(cfg);
        std::cout << "ingest: " << j.at("videos") << " videos, " << j.at("identities") << " identities ("
                  << j.at("database").get<std::string>() << ")\n";
    } else if (split_cmd->parsed()) {
        const auto j = pipeline::cmd_split(cfg);
        const auto& l = j.at("leakage");
        std::cout << "split: dev " << l.at("dev").at("real") << " real / " << l.at("dev").at("fake") << " fake, eval "
                  << l.at("eval").at("real") << " real / " << l.at("eval").at("fake") << " fake"
                  << (j.at("identity_leaked").get<bool>() ? " [identity-leaked]" : "") << '\n';
    } else if (segment_cmd->parsed()) {
        const auto j = pipeline::cmd_segment(cfg);
        std::cout << "segment: " << j.at("frames").size() << " frames, " << j.at("skipped").size() << " skipped\n";
    } else if (train_cmd->parsed()) {
        const auto j = pipeline::cmd_train(cfg);
        for (const auto& m : j.at("models"))
            std::cout << "train: " << m.at("model_key").get<std::string>() << " epoch " << m.at("selected_epoch")
                      << " validation accuracy " << m.at("validation_accuracy") << '\n';
    } else if (eval_cmd->parsed()) {
        const auto j = pipeline::cmd_eval(cfg);
        for (const auto& r : j.at("results"))
            std::cout << "eval: " << r.at("model_key").get<std::string>() << " EER " << r.at("eer") << " AUC "
                      << r.at("auc") << (r.at("identity_leaked").get<bool>() ? " [identity-leaked]" : "") << '\n';
    } else if (heatmap_cmd->parsed()) {
        const auto j = pipeline::cmd_heatmap(cfg, s.heatmap_videos, parse_label(s.heatmap_target), s.heatmap_alpha);
        std::cout << "heatmap: " << j.at("heatmaps").size() << " maps\n";
    } else if (report_cmd->parsed()) {
        metrics::ReportFormat fmt;
        if (s.format == "markdown") fmt = metrics::ReportFormat::Markdown;
        else if (s.format == "json") fmt = metrics::ReportFormat::Json;
        else throw Error(ErrorKind::ConfigError, "report format must be markdown or json");
        std::vector<std::filesystem::path> extra(s.extra_runs.begin(), s.extra_runs.end());
        std::cout << pipeline::cmd_report(cfg, fmt, extra);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const dfeval::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: Internal: " << e.what() << '\n';
        return 3;
    }
}
