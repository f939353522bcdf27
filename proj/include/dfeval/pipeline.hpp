#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfeval/checkpoint.hpp"
#include "dfeval/dataset.hpp"
#include "dfeval/detectors.hpp"
#include "dfeval/error.hpp"
#include "dfeval/explain.hpp"
#include "dfeval/landmarks.hpp"
#include "dfeval/log.hpp"
#include "dfeval/metrics.hpp"
#include "dfeval/regions.hpp"
#include "dfeval/report.hpp"
#include "dfeval/synth.hpp"

// End-to-end stages. Each stage reads the outputs of earlier stages from the
// run directory, records its effective configuration under `config/`, and
// writes its outputs plus a JSON summary. Layout of a run directory:
//
//   config/<stage>.json          effective RunConfig of each stage
//   ingest.json                  manifest location and database profiles
//   split.json                   split plan and leakage report
//   segment.json                 frame index; crops/<Region>/<video>/<frame>.ppm
//   train/<Region>_<arch>.json   training summary (checkpoint in the registry
//   models/<Region>_<arch>.dfck  and a copy here)
//   scores/<Region>_<arch>.csv   eval scores
//   eval/<Region>_<arch>.json    EER / AUC
//   report.md | report.json
//   heatmaps/<Region>_<arch>/    Grad-CAM maps, sidecars and overlays
namespace dfeval::pipeline {

using detectors::Architecture;
using nlohmann::json;
namespace fs = std::filesystem;

struct RunConfig {
    fs::path run_dir = "run";
    fs::path manifest;
    std::string database;  ///< filled from the manifest
    std::vector<RegionKind> regions{kAllRegions.begin(), kAllRegions.end()};
    Architecture architecture = Architecture::TinyCnn;
    detectors::TrainSchedule schedule;
    int input_size = 32;
    std::uint64_t split_seed = 1;
    std::uint64_t train_seed = 1;
    std::string split_mode = "identity-disjoint";
    std::optional<double> dev_fraction;  ///< unset: database default
    std::vector<std::string> dev_list, eval_list;  ///< fixed mode only
    metrics::ScoreLevel level = metrics::ScoreLevel::Frame;
    metrics::Aggregation aggregation = metrics::Aggregation::Mean;
    double sample_rate = 1.0;
    int frame_limit = 100;
    fs::path landmarks_dir;  ///< empty: <manifest dir>/landmarks
    std::string landmark_backend = "foreground-fit";
    fs::path recipes;  ///< empty: default recipes
    fs::path registry;  ///< empty: $DFEVAL_REGISTRY, else <run>/registry
    std::string weights = "random-init";
    bool overwrite = false;
};

inline std::string aggregation_name(metrics::Aggregation a) {
    switch (a) {
    case metrics::Aggregation::Mean: return "mean";
    case metrics::Aggregation::Median: return "median";
    case metrics::Aggregation::Max: return "max";
    }
    return "mean";
}

inline json to_json(const RunConfig& c) {
    json regions = json::array();
    for (auto r : c.regions) regions.push_back(std::string(region_name(r)));
    return {{"run_dir", c.run_dir.generic_string()},
            {"manifest", c.manifest.generic_string()},
            {"database", c.database},
            {"regions", regions},
            {"architecture", std::string(detectors::architecture_name(c.architecture))},
            {"schedule", detectors::to_json(c.schedule)},
            {"input_size", c.input_size},
            {"split_seed", c.split_seed},
            {"train_seed", c.train_seed},
            {"split_mode", c.split_mode},
            {"dev_fraction", c.dev_fraction ? json(*c.dev_fraction) : json(nullptr)},
            {"dev_list", c.dev_list},
            {"eval_list", c.eval_list},
            {"level", std::string(metrics::level_name(c.level))},
            {"aggregation", aggregation_name(c.aggregation)},
            {"sample_rate", c.sample_rate},
            {"frame_limit", c.frame_limit},
            {"landmarks_dir", c.landmarks_dir.generic_string()},
            {"landmark_backend", c.landmark_backend},
            {"recipes", c.recipes.generic_string()},
            {"registry", c.registry.generic_string()},
            {"weights", c.weights},
            {"overwrite", c.overwrite}};
}

inline std::vector<RegionKind> parse_regions(const std::vector<std::string>& names) {
    std::vector<RegionKind> out;
    for (const auto& n : names) {
        if (n == "all") {
            out.assign(kAllRegions.begin(), kAllRegions.end());
            continue;
        }
        const auto k = parse_region(n);
        if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
    }
    if (out.empty()) throw Error(ErrorKind::ConfigError, "no regions selected");
    return out;
}

// ---------------------------------------------------------------------------
// Small file helpers

inline void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
    out << text;
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline json read_json(const fs::path& path, const std::string& stage) {
    std::ifstream in(path);
    if (!in)
        throw Error(ErrorKind::MissingPrerequisite, "missing output of stage '" + stage + "': " + path.string() +
                                                        " (run `" + stage + "` first)");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::MalformedRecord, path.string() + ": " + e.what());
    }
}

inline void record_config(const RunConfig& cfg, const std::string& stage, const json& extra = json::object()) {
    json j = to_json(cfg);
    j["stage"] = stage;
    if (!extra.empty()) j["options"] = extra;
    write_json(cfg.run_dir / "config" / (stage + ".json"), j);
}

inline std::string model_tag(RegionKind r, Architecture a) {
    return std::string(region_name(r)) + "_" + std::string(detectors::architecture_name(a));
}

inline detectors::ModelRegistry registry_of(const RunConfig& cfg) {
    if (!cfg.registry.empty()) return detectors::ModelRegistry(cfg.registry);
    return detectors::ModelRegistry::from_env(cfg.run_dir / "registry");
}

// ---------------------------------------------------------------------------
// synth

inline json cmd_synth(const synth::CorpusSpec& spec, const fs::path& out_dir) {
    const auto records = synth::generate_manifest(spec, out_dir);
    std::size_t fakes = 0;
    for (const auto& r : records) fakes += r.label == Label::Fake;
    json summary{{"spec", synth::to_json(spec)},
                 {"manifest", (out_dir / "manifest.jsonl").generic_string()},
                 {"videos", records.size()},
                 {"fake_videos", fakes}};
    write_json(out_dir / "synth.json", summary);
    return summary;
}

// ---------------------------------------------------------------------------
// ingest

inline json cmd_ingest(RunConfig& cfg) {
    if (cfg.manifest.empty()) throw Error(ErrorKind::ConfigError, "ingest needs --manifest");
    const auto manifest = dataset::ingest_manifest(cfg.manifest);
    cfg.database = manifest.profile().name;
    record_config(cfg, "ingest");
    json profiles = json::array();
    for (const auto& p : manifest.profiles) profiles.push_back(dataset::to_json(p));
    const json summary{{"manifest", fs::absolute(cfg.manifest).lexically_normal().generic_string()},
                       {"database", cfg.database},
                       {"videos", manifest.records.size()},
                       {"identities", dataset::identities_of(manifest.records).size()},
                       {"profiles", profiles}};
    write_json(cfg.run_dir / "ingest.json", summary);
    return summary;
}

/// The manifest recorded by `ingest`.
inline dataset::Manifest load_ingested(RunConfig& cfg) {
    const auto j = read_json(cfg.run_dir / "ingest.json", "ingest");
    cfg.manifest = j.at("manifest").get<std::string>();
    auto m = dataset::ingest_manifest(cfg.manifest);
    cfg.database = m.profile().name;
    return m;
}

// ---------------------------------------------------------------------------
// split

inline json cmd_split(RunConfig& cfg) {
    const auto manifest = load_ingested(cfg);
    record_config(cfg, "split");
    const double frac = cfg.dev_fraction.value_or(dataset::default_dev_fraction(cfg.database));
    dataset::SplitPlan plan;
    if (cfg.split_mode == "identity-disjoint")
        plan = dataset::make_identity_disjoint_split(manifest.records, frac, cfg.split_seed);
    else if (cfg.split_mode == "same-identity")
        plan = dataset::make_same_identity_split(manifest.records, frac, cfg.split_seed);
    else if (cfg.split_mode == "fixed")
        plan = dataset::make_fixed_split(manifest.records, cfg.dev_list, cfg.eval_list);
    else
        throw Error(ErrorKind::ConfigError, "split mode must be identity-disjoint, same-identity or fixed");
    const auto leakage = dataset::validate_split(plan, manifest.records);
    const bool leaked = !leakage.leaked_identities.empty();
    if (leaked)
        warn("split shares " + std::to_string(leakage.leaked_identities.size()) +
             " identities between dev and eval; results will be stamped identity-leaked");
    const json summary{{"plan", dataset::to_json(plan)},
                       {"leakage", dataset::to_json(leakage)},
                       {"identity_leaked", leaked},
                       {"dev_fraction", frac}};
    write_json(cfg.run_dir / "split.json", summary);
    return summary;
}

struct LoadedSplit {
    dataset::SplitPlan plan;
    bool identity_leaked = false;
};

inline LoadedSplit load_split(const RunConfig& cfg) {
    const auto j = read_json(cfg.run_dir / "split.json", "split");
    return {dataset::split_from_json(j.at("plan")), j.at("identity_leaked").get<bool>()};
}

// ---------------------------------------------------------------------------
// segment

struct FrameEntry {
    std::string video_id;
    std::string identity_id;
    std::string frame_ref;
    Label label = Label::Real;

    std::string unit_id() const { return video_id + "/" + frame_ref; }
};

inline fs::path crop_path(const fs::path& run_dir, RegionKind r, const FrameEntry& f) {
    return run_dir / "crops" / std::string(region_name(r)) / f.video_id / (f.frame_ref + ".ppm");
}

inline json cmd_segment(RunConfig& cfg) {
    const auto manifest = load_ingested(cfg);
    const fs::path lm_dir = cfg.landmarks_dir.empty() ? cfg.manifest.parent_path() / "landmarks" : cfg.landmarks_dir;
    record_config(cfg, "segment", {{"resolved_landmarks_dir", lm_dir.generic_string()}});
    const auto recipes = cfg.recipes.empty() ? default_recipes() : recipe_file::load(cfg.recipes);
    auto records = manifest.records;
    std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.video_id < b.video_id; });

    json frames = json::array(), skipped = json::array();
    std::size_t detected = 0;
    for (const auto& rec : records) {
        const auto sampled = dataset::sample_frames(rec, cfg.sample_rate, cfg.frame_limit);
        std::map<std::string, LandmarkSet> by_ref;
        const fs::path lm_file = lm_dir / (rec.video_id + ".csv");
        if (!sampled.empty() && fs::exists(lm_file))
            for (auto& lm : load_landmarks(lm_file, sampled.front().image.canvas())) by_ref.emplace(lm.frame_ref(), lm);
        for (const auto& fr : sampled) {
            FrameEntry e{rec.video_id, rec.identity_id, fr.frame_ref, rec.label};
            try {
                auto it = by_ref.find(fr.frame_ref);
                std::optional<LandmarkSet> lm;
                if (it != by_ref.end()) {
                    lm = it->second;
                } else {
                    lm = detect_landmarks(fr.image, cfg.landmark_backend, fr.frame_ref);
                    ++detected;
                }
                const auto crops = segment_face({fr.image, RegionKind::Face, e.unit_id()}, *lm, recipes);
                for (auto r : cfg.regions) pnm::write(crop_path(cfg.run_dir, r, e), crops.at(r).pixels);
                frames.push_back({{"video_id", e.video_id},
                                  {"identity_id", e.identity_id},
                                  {"frame_ref", e.frame_ref},
                                  {"label", std::string(label_name(e.label))}});
            } catch (const Error& err) {
                if (err.kind() != ErrorKind::NoFaceFound && err.kind() != ErrorKind::DegenerateGeometry) throw;
                warn("skipping " + e.unit_id() + ": " + err.what());
                skipped.push_back({{"unit_id", e.unit_id()}, {"error", std::string(to_string(err.kind()))}});
            }
        }
    }
    json regions = json::array();
    for (auto r : cfg.regions) regions.push_back(std::string(region_name(r)));
    const json summary{{"regions", regions},
                       {"frames", frames},
                       {"skipped", skipped},
                       {"landmarks_detected", detected}};
    write_json(cfg.run_dir / "segment.json", summary);
    return summary;
}

inline std::vector<FrameEntry> load_frames(const RunConfig& cfg, RegionKind region) {
    const auto j = read_json(cfg.run_dir / "segment.json", "segment");
    bool has_region = false;
    for (const auto& r : j.at("regions"))
        if (parse_region(r.get<std::string>()) == region) has_region = true;
    if (!has_region)
        throw Error(ErrorKind::MissingPrerequisite,
                    "segment outputs have no " + std::string(region_name(region)) + " crops (rerun `segment`)");
    std::vector<FrameEntry> out;
    for (const auto& f : j.at("frames"))
        out.push_back({f.at("video_id").get<std::string>(), f.at("identity_id").get<std::string>(),
                       f.at("frame_ref").get<std::string>(), parse_label(f.at("label").get<std::string>())});
    return out;
}

inline FaceCrop load_crop(const RunConfig& cfg, RegionKind region, const FrameEntry& f) {
    return {pnm::read(crop_path(cfg.run_dir, region, f)), region, f.unit_id()};
}

// ---------------------------------------------------------------------------
// train

inline detectors::DetectorConfig detector_config(const RunConfig& cfg, RegionKind region) {
    detectors::DetectorConfig d;
    d.architecture = cfg.architecture;
    d.database = cfg.database;
    d.region = region;
    d.input_height = d.input_width = cfg.input_size;
    d.seed = cfg.train_seed;
    return d;
}

inline json cmd_train(RunConfig& cfg) {
    load_ingested(cfg);
    const auto split = load_split(cfg);
    record_config(cfg, "train");
    cfg.schedule.validate();
    const auto registry = registry_of(cfg);
    const auto source = detectors::load_weight_source(cfg.weights);
    json summaries = json::array();
    for (auto region : cfg.regions) {
        const auto dcfg = detector_config(cfg, region);
        const detectors::ModelKey key = detectors::ModelKey::of(dcfg);
        auto model = cfg.architecture == Architecture::Capsule ? detectors::build_capsule_detector(dcfg, source)
                                                               : detectors::build_transfer_detector(dcfg, source);
        std::vector<detectors::TrainingSample> dev;
        for (const auto& f : load_frames(cfg, region)) {
            auto side = split.plan.assignment.find(f.video_id);
            if (side == split.plan.assignment.end() || side->second != dataset::Side::Dev) continue;
            dev.push_back(detectors::make_training_sample(*model, load_crop(cfg, region, f), f.label, f.identity_id,
                                                          f.unit_id()));
        }
        const auto ck = detectors::train(*model, dev, cfg.schedule);
        registry.store(key, ck, cfg.overwrite);
        const auto tag = model_tag(region, cfg.architecture);
        detectors::save_checkpoint(cfg.run_dir / "models" / (tag + ".dfck"), ck);
        json trace = json::array();
        for (const auto& r : ck.trace)
            trace.push_back({{"epoch", r.epoch},
                             {"stage", r.stage},
                             {"train_loss", r.train_loss},
                             {"validation_accuracy", r.validation_accuracy}});
        json s{{"model_key", key.str()},
               {"samples", dev.size()},
               {"selected_epoch", ck.epoch},
               {"validation_accuracy", ck.validation_accuracy},
               {"data_hash", ck.data_hash},
               {"trace", trace}};
        write_json(cfg.run_dir / "train" / (tag + ".json"), s);
        summaries.push_back(s);
    }
    return {{"models", summaries}};
}

// ---------------------------------------------------------------------------
// eval

inline json cmd_eval(RunConfig& cfg) {
    load_ingested(cfg);
    const auto split = load_split(cfg);
    record_config(cfg, "eval");
    const auto registry = registry_of(cfg);
    json results = json::array();
    for (auto region : cfg.regions) {
        const auto key = detectors::ModelKey::of(detector_config(cfg, region));
        const auto model = detectors::model_from_checkpoint(registry.load(key));
        metrics::ScoreSet scores;
        for (const auto& f : load_frames(cfg, region)) {
            auto side = split.plan.assignment.find(f.video_id);
            if (side == split.plan.assignment.end() || side->second != dataset::Side::Eval) continue;
            scores.entries.push_back({f.unit_id(), detectors::predict(*model, load_crop(cfg, region, f)), f.label});
        }
        if (cfg.level == metrics::ScoreLevel::Video) scores = metrics::aggregate_to_video(scores, cfg.aggregation);
        const auto tag = model_tag(region, cfg.architecture);
        metrics::score_csv::save(cfg.run_dir / "scores" / (tag + ".csv"), scores);
        const auto res = metrics::evaluate(scores);
        json r{{"model_key", key.str()},
               {"database", cfg.database},
               {"architecture", std::string(detectors::architecture_name(cfg.architecture))},
               {"region", std::string(region_name(region))},
               {"level", std::string(metrics::level_name(scores.level))},
               {"units", scores.entries.size()},
               {"eer", res.eer},
               {"eer_threshold", metrics::eer(scores).threshold},
               {"auc", res.auc},
               {"identity_leaked", split.identity_leaked}};
        write_json(cfg.run_dir / "eval" / (tag + ".json"), r);
        results.push_back(r);
    }
    return {{"results", results}};
}

// ---------------------------------------------------------------------------
// report

/// Collects every eval result of the given run directories into one report
/// per (database, architecture, leaked) combination.
inline std::vector<metrics::EvalReport> collect_reports(const std::vector<fs::path>& run_dirs) {
    std::vector<metrics::EvalReport> reports;
    for (const auto& dir : run_dirs) {
        const fs::path eval_dir = dir / "eval";
        if (!fs::is_directory(eval_dir))
            throw Error(ErrorKind::MissingPrerequisite, "no eval results in " + dir.string() + " (run `eval` first)");
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(eval_dir))
            if (e.path().extension() == ".json") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            const auto j = read_json(f, "eval");
            metrics::EvalReport key;
            key.database = j.at("database").get<std::string>();
            key.architecture = j.at("architecture").get<std::string>();
            key.level = metrics::parse_level(j.at("level").get<std::string>());
            key.identity_leaked = j.at("identity_leaked").get<bool>();
            auto it = std::find_if(reports.begin(), reports.end(), [&](const metrics::EvalReport& r) {
                return r.database == key.database && r.architecture == key.architecture &&
                       r.identity_leaked == key.identity_leaked && r.level == key.level;
            });
            if (it == reports.end()) {
                reports.push_back(key);
                it = std::prev(reports.end());
            }
            it->regions[parse_region(j.at("region").get<std::string>())] = {j.at("eer").get<double>(),
                                                                            j.at("auc").get<double>()};
        }
    }
    if (reports.empty()) throw Error(ErrorKind::MissingPrerequisite, "no eval results found (run `eval` first)");
    return reports;
}

inline std::string cmd_report(RunConfig& cfg, metrics::ReportFormat format, std::vector<fs::path> extra_runs = {}) {
    record_config(cfg, "report", {{"format", format == metrics::ReportFormat::Json ? "json" : "markdown"}});
    std::vector<fs::path> dirs{cfg.run_dir};
    for (auto& d : extra_runs) dirs.push_back(d);
    const auto text = metrics::render_report(collect_reports(dirs), format);
    write_text(cfg.run_dir / (format == metrics::ReportFormat::Json ? "report.json" : "report.md"), text);
    return text;
}

// ---------------------------------------------------------------------------
// heatmap

/// Grad-CAM for the given videos' frames (default: the first frame of every
/// eval video), for each configured region.
inline json cmd_heatmap(RunConfig& cfg, const std::vector<std::string>& videos, Label target, double alpha) {
    load_ingested(cfg);
    const auto split = load_split(cfg);
    record_config(cfg, "heatmap", {{"videos", videos}, {"target", std::string(label_name(target))}, {"alpha", alpha}});
    const auto registry = registry_of(cfg);
    json out = json::array();
    for (auto region : cfg.regions) {
        const auto key = detectors::ModelKey::of(detector_config(cfg, region));
        const auto model = detectors::model_from_checkpoint(registry.load(key));
        const auto tag = model_tag(region, cfg.architecture);
        std::set<std::string> done_videos;
        for (const auto& f : load_frames(cfg, region)) {
            if (videos.empty()) {
                auto side = split.plan.assignment.find(f.video_id);
                if (side == split.plan.assignment.end() || side->second != dataset::Side::Eval) continue;
                if (!done_videos.insert(f.video_id).second) continue;
            } else if (std::find(videos.begin(), videos.end(), f.video_id) == videos.end()) {
                continue;
            }
            const auto crop = load_crop(cfg, region, f);
            const auto hm = explain::grad_cam(*model, crop, target);
            const fs::path stem = cfg.run_dir / "heatmaps" / tag / (f.video_id + "_" + f.frame_ref);
            fs::create_directories(stem.parent_path());
            explain::save_heatmap(stem, hm, key.str());
            pnm::write(stem.string() + "_overlay.ppm", explain::overlay(hm, crop, alpha));
            out.push_back({{"unit_id", f.unit_id()}, {"model_key", key.str()}, {"heatmap", stem.generic_string() + ".pgm"}});
        }
    }
    write_json(cfg.run_dir / "heatmaps" / "index.json", out);
    return {{"heatmaps", out}};
}

} // namespace dfeval::pipeline
