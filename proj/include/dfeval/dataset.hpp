#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfeval/error.hpp"
#include "dfeval/image.hpp"
#include "dfeval/rng.hpp"
#include "dfeval/types.hpp"

namespace dfeval::dataset {

enum class Generation { First, Second };

inline std::string_view generation_name(Generation g) { return g == Generation::First ? "first" : "second"; }

inline Generation parse_generation(std::string_view s) {
    if (s == "first") return Generation::First;
    if (s == "second") return Generation::Second;
    throw Error(ErrorKind::MalformedRecord, "generation must be 'first' or 'second', got '" + std::string(s) + "'");
}

/// One manifest line. For face-swap fakes, identity_id is the identity the
/// split must keep together (the source video's identity), not the pasted
/// face.
struct VideoRecord {
    std::string video_id;
    std::string identity_id;
    Label label = Label::Real;
    std::string database;
    std::filesystem::path path;
    Generation generation = Generation::First;

    friend bool operator==(const VideoRecord&, const VideoRecord&) = default;
};

struct DatabaseProfile {
    std::string name;
    long long real_count = 0;
    long long fake_count = 0;
    Generation generation = Generation::First;
    std::string source_notes;

    friend bool operator==(const DatabaseProfile&, const DatabaseProfile&) = default;
};

/// Published metadata of the four identity-swap databases and how each is
/// split into development and evaluation.
struct KnownDatabase {
    DatabaseProfile profile;
    std::optional<int> identity_count;
    std::optional<int> dev_identities;  ///< fixed identity count for development
    std::string protocol;
};

inline const std::vector<KnownDatabase>& known_databases() {
    static const std::vector<KnownDatabase> dbs = {
        {{"UADFV", 49, 49, Generation::First, "real: Youtube; fake: FakeApp"},
         std::nullopt,
         std::nullopt,
         "identity-disjoint ~80/20; fakes keyed by source identity"},
        {{"FaceForensics++", 1000, 1000, Generation::First, "real: Youtube; fake: FaceSwap"},
         std::nullopt,
         std::nullopt,
         "fixed lists: 860 development / 140 evaluation videos per class"},
        {{"Celeb-DF", 408, 795, Generation::Second, "real: Youtube; fake: DeepFake"},
         59,
         40,
         "identity-disjoint: 40 development / 19 evaluation identities"},
        {{"DFDC Preview", 1131, 4119, Generation::Second, "real: paid actors; fake: two unknown methods"},
         66,
         std::nullopt,
         "fixed lists distributed with the database"},
    };
    return dbs;
}

inline const KnownDatabase* find_known_database(const std::string& name) {
    for (const auto& db : known_databases())
        if (db.profile.name == name) return &db;
    return nullptr;
}

/// Development identity fraction for a database: the published identity
/// counts when known, otherwise 0.8.
inline double default_dev_fraction(const std::string& database) {
    if (const auto* db = find_known_database(database); db && db->identity_count && db->dev_identities)
        return static_cast<double>(*db->dev_identities) / *db->identity_count;
    return 0.8;
}

struct Manifest {
    std::vector<VideoRecord> records;
    std::vector<DatabaseProfile> profiles;  ///< one per database, in first-seen order

    const DatabaseProfile& profile() const {
        if (profiles.size() != 1)
            throw Error(ErrorKind::ConfigError, "manifest spans " + std::to_string(profiles.size()) + " databases");
        return profiles.front();
    }
};

inline nlohmann::json to_json(const VideoRecord& r) {
    return {{"video_id", r.video_id},
            {"identity_id", r.identity_id},
            {"label", std::string(label_name(r.label))},
            {"database", r.database},
            {"path", r.path.generic_string()},
            {"generation", std::string(generation_name(r.generation))}};
}

inline std::vector<DatabaseProfile> compute_profiles(const std::vector<VideoRecord>& records) {
    std::vector<DatabaseProfile> out;
    for (const auto& r : records) {
        auto it = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.name == r.database; });
        if (it == out.end()) {
            DatabaseProfile p;
            p.name = r.database;
            p.generation = r.generation;
            if (const auto* known = find_known_database(r.database)) p.source_notes = known->profile.source_notes;
            out.push_back(p);
            it = std::prev(out.end());
        }
        (r.label == Label::Real ? it->real_count : it->fake_count)++;
    }
    return out;
}

/// Parses JSONL, one video per line. Relative paths are resolved against
/// `base_dir`.
inline Manifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir = {}) {
    Manifest m;
    std::set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = "manifest line " + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw Error(ErrorKind::MalformedRecord, where + ": " + e.what());
        }
        if (!j.is_object()) throw Error(ErrorKind::MalformedRecord, where + ": not a JSON object");
        auto field = [&](const char* name) {
            if (!j.contains(name)) throw Error(ErrorKind::MissingField, where + ": missing '" + name + "'");
            if (!j[name].is_string()) throw Error(ErrorKind::MalformedRecord, where + ": '" + name + "' must be a string");
            auto v = j[name].get<std::string>();
            if (v.empty()) throw Error(ErrorKind::MissingField, where + ": '" + name + "' is empty");
            return v;
        };
        VideoRecord r;
        r.video_id = field("video_id");
        r.identity_id = field("identity_id");
        r.label = parse_label(field("label"));
        r.database = field("database");
        r.path = field("path");
        r.generation = parse_generation(field("generation"));
        if (r.path.is_relative() && !base_dir.empty()) r.path = (base_dir / r.path).lexically_normal();
        if (!seen.insert(r.video_id).second)
            throw Error(ErrorKind::DuplicateVideoId, where + ": video_id '" + r.video_id + "' already used");
        m.records.push_back(std::move(r));
    }
    if (m.records.empty()) throw Error(ErrorKind::EmptyManifest, "manifest has no records");
    m.profiles = compute_profiles(m.records);
    return m;
}

inline Manifest ingest_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::MissingPrerequisite, "manifest " + path.string() + " not found");
    return parse_manifest(in, path.parent_path());
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<VideoRecord>& records) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
    for (const auto& r : records) out << to_json(r).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Splits

enum class Side { Dev, Eval };

inline std::string_view side_name(Side s) { return s == Side::Dev ? "dev" : "eval"; }

struct SplitPlan {
    std::map<std::string, Side> assignment;  ///< video_id -> side
    std::set<std::string> dev_identities;
    std::set<std::string> eval_identities;
    std::uint64_t seed = 0;
    std::string mode = "identity-disjoint";

    friend bool operator==(const SplitPlan&, const SplitPlan&) = default;
};

inline std::set<std::string> identities_of(const std::vector<VideoRecord>& records) {
    std::set<std::string> ids;
    for (const auto& r : records) ids.insert(r.identity_id);
    return ids;
}

inline void fill_identity_sets(SplitPlan& plan, const std::vector<VideoRecord>& records) {
    plan.dev_identities.clear();
    plan.eval_identities.clear();
    for (const auto& r : records) {
        auto it = plan.assignment.find(r.video_id);
        if (it == plan.assignment.end()) continue;
        (it->second == Side::Dev ? plan.dev_identities : plan.eval_identities).insert(r.identity_id);
    }
}

/// Number of development identities for n identities: the closest integer
/// to fraction * n, kept within [1, n-1].
inline std::size_t dev_identity_count(std::size_t n, double fraction) {
    const auto k = static_cast<long long>(std::llround(fraction * static_cast<double>(n)));
    return static_cast<std::size_t>(std::clamp<long long>(k, 1, static_cast<long long>(n) - 1));
}

/// Identities (sorted, then shuffled by seed) are cut into development and
/// evaluation; every video follows its identity.
inline SplitPlan make_identity_disjoint_split(const std::vector<VideoRecord>& records, double dev_fraction = 0.8,
                                              std::uint64_t seed = 0) {
    const auto id_set = identities_of(records);
    if (id_set.size() < 2)
        throw Error(ErrorKind::TooFewIdentities, "need at least 2 identities, got " + std::to_string(id_set.size()));
    if (!(dev_fraction > 0.0 && dev_fraction < 1.0))
        throw Error(ErrorKind::ConfigError, "dev fraction must lie in (0,1)");
    std::vector<std::string> ids(id_set.begin(), id_set.end());
    Rng rng(seed);
    rng.shuffle(std::span<std::string>(ids));
    const std::size_t n_dev = dev_identity_count(ids.size(), dev_fraction);
    SplitPlan plan;
    plan.seed = seed;
    plan.mode = "identity-disjoint";
    std::set<std::string> dev(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_dev));
    for (const auto& r : records) plan.assignment[r.video_id] = dev.count(r.identity_id) ? Side::Dev : Side::Eval;
    fill_identity_sets(plan, records);
    return plan;
}

/// Video-level split that deliberately reuses identities on both sides:
/// each identity's videos are shuffled and about (1 - dev_fraction) of them
/// (at least one, when it has two or more) go to evaluation.
inline SplitPlan make_same_identity_split(const std::vector<VideoRecord>& records, double dev_fraction = 0.8,
                                          std::uint64_t seed = 0) {
    if (!(dev_fraction > 0.0 && dev_fraction < 1.0))
        throw Error(ErrorKind::ConfigError, "dev fraction must lie in (0,1)");
    std::map<std::string, std::vector<std::string>> by_identity;
    for (const auto& r : records) by_identity[r.identity_id].push_back(r.video_id);
    SplitPlan plan;
    plan.seed = seed;
    plan.mode = "same-identity";
    Rng rng(seed);
    for (auto& [id, vids] : by_identity) {
        std::sort(vids.begin(), vids.end());
        rng.shuffle(std::span<std::string>(vids));
        const std::size_t n_dev = vids.size() < 2 ? vids.size() : dev_identity_count(vids.size(), dev_fraction);
        for (std::size_t i = 0; i < vids.size(); ++i) plan.assignment[vids[i]] = i < n_dev ? Side::Dev : Side::Eval;
    }
    fill_identity_sets(plan, records);
    return plan;
}

/// Split mirroring externally published video lists.
inline SplitPlan make_fixed_split(const std::vector<VideoRecord>& records, const std::vector<std::string>& dev_ids,
                                  const std::vector<std::string>& eval_ids) {
    std::set<std::string> dev(dev_ids.begin(), dev_ids.end());
    std::set<std::string> eval(eval_ids.begin(), eval_ids.end());
    std::vector<std::string> both;
    std::set_intersection(dev.begin(), dev.end(), eval.begin(), eval.end(), std::back_inserter(both));
    if (!both.empty())
        throw Error(ErrorKind::OverlappingLists, "video '" + both.front() + "' is in both lists (" +
                                                     std::to_string(both.size()) + " overlapping)");
    std::set<std::string> known;
    SplitPlan plan;
    plan.mode = "fixed";
    for (const auto& r : records) {
        known.insert(r.video_id);
        if (dev.count(r.video_id)) plan.assignment[r.video_id] = Side::Dev;
        else if (eval.count(r.video_id)) plan.assignment[r.video_id] = Side::Eval;
        else throw Error(ErrorKind::UnassignedVideo, "video '" + r.video_id + "' is in neither list");
    }
    for (const auto* list : {&dev, &eval})
        for (const auto& id : *list)
            if (!known.count(id)) throw Error(ErrorKind::ConfigError, "listed video '" + id + "' is not in the manifest");
    fill_identity_sets(plan, records);
    return plan;
}

struct SideCounts {
    long long real = 0;
    long long fake = 0;
    friend bool operator==(const SideCounts&, const SideCounts&) = default;
};

struct LeakageReport {
    std::vector<std::string> leaked_identities;  ///< sorted
    SideCounts dev;
    SideCounts eval;
    std::vector<std::string> unassigned_videos;

    bool clean() const { return leaked_identities.empty(); }
};

/// Recomputes identity sides from the assignment (the plan's own identity
/// sets are not trusted) and reports identities seen on both sides.
inline LeakageReport validate_split(const SplitPlan& plan, const std::vector<VideoRecord>& records) {
    LeakageReport rep;
    std::map<std::string, std::pair<bool, bool>> sides;
    for (const auto& r : records) {
        auto it = plan.assignment.find(r.video_id);
        if (it == plan.assignment.end()) {
            rep.unassigned_videos.push_back(r.video_id);
            continue;
        }
        auto& s = sides[r.identity_id];
        auto& counts = it->second == Side::Dev ? rep.dev : rep.eval;
        (r.label == Label::Real ? counts.real : counts.fake)++;
        (it->second == Side::Dev ? s.first : s.second) = true;
    }
    for (const auto& [id, s] : sides)
        if (s.first && s.second) rep.leaked_identities.push_back(id);
    return rep;
}

inline nlohmann::json to_json(const SplitPlan& p) {
    nlohmann::json assignment = nlohmann::json::object();
    for (const auto& [vid, side] : p.assignment) assignment[vid] = std::string(side_name(side));
    return {{"seed", p.seed},
            {"mode", p.mode},
            {"dev_identities", p.dev_identities},
            {"eval_identities", p.eval_identities},
            {"assignment", assignment}};
}

inline SplitPlan split_from_json(const nlohmann::json& j) {
    SplitPlan p;
    try {
        p.seed = j.at("seed").get<std::uint64_t>();
        p.mode = j.value("mode", std::string("identity-disjoint"));
        p.dev_identities = j.at("dev_identities").get<std::set<std::string>>();
        p.eval_identities = j.at("eval_identities").get<std::set<std::string>>();
        for (const auto& [vid, side] : j.at("assignment").items()) {
            const auto s = side.get<std::string>();
            if (s != "dev" && s != "eval") throw Error(ErrorKind::MalformedRecord, "bad side '" + s + "'");
            p.assignment[vid] = s == "dev" ? Side::Dev : Side::Eval;
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedRecord, std::string("split plan: ") + e.what());
    }
    return p;
}

inline nlohmann::json to_json(const LeakageReport& r) {
    return {{"leaked_identities", r.leaked_identities},
            {"clean", r.clean()},
            {"dev", {{"real", r.dev.real}, {"fake", r.dev.fake}}},
            {"eval", {{"real", r.eval.real}, {"fake", r.eval.fake}}},
            {"unassigned_videos", r.unassigned_videos}};
}

inline nlohmann::json to_json(const DatabaseProfile& p) {
    return {{"name", p.name},
            {"real_count", p.real_count},
            {"fake_count", p.fake_count},
            {"generation", std::string(generation_name(p.generation))},
            {"source_notes", p.source_notes}};
}

// ---------------------------------------------------------------------------
// Frame sampling. A video is a directory of frames `frame_NNNNNN.ppm`
// (0-based, six digits) plus `meta.json` {"fps": <number>, "frames": <count>}.

struct VideoMeta {
    double fps = 0.0;
    int frames = 0;
};

inline std::string frame_ref(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%06d", index);
    return buf;
}

inline VideoMeta read_video_meta(const std::filesystem::path& dir) {
    std::ifstream in(dir / "meta.json");
    if (!in) throw Error(ErrorKind::UndecodableSource, "no meta.json in " + dir.string());
    try {
        const auto j = nlohmann::json::parse(in);
        VideoMeta m{j.at("fps").get<double>(), j.at("frames").get<int>()};
        if (!(m.fps > 0.0) || m.frames < 0) throw Error(ErrorKind::UndecodableSource, "bad meta.json in " + dir.string());
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::UndecodableSource, dir.string() + "/meta.json: " + e.what());
    }
}

inline void write_video_meta(const std::filesystem::path& dir, const VideoMeta& m) {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "meta.json", std::ios::binary);
    out << nlohmann::json{{"fps", m.fps}, {"frames", m.frames}}.dump() << '\n';
}

struct FrameSample {
    int index = 0;
    double timestamp = 0.0;  ///< seconds
};

/// Frame indices sampled uniformly at `rate` frames per second, from t=0,
/// truncated to `limit`.
inline std::vector<FrameSample> plan_frame_samples(const VideoMeta& meta, double rate, int limit) {
    if (!(rate > 0.0)) throw Error(ErrorKind::ConfigError, "sampling rate must be positive");
    std::vector<FrameSample> out;
    const double duration = meta.frames / meta.fps;
    for (int k = 0; static_cast<int>(out.size()) < limit; ++k) {
        const double t = k / rate;
        if (t >= duration - 1e-12) break;
        const int idx = static_cast<int>(std::floor(t * meta.fps + 1e-9));
        if (idx >= meta.frames) break;
        out.push_back({idx, t});
    }
    return out;
}

struct SampledFrame {
    std::string video_id;
    std::string frame_ref;
    double timestamp = 0.0;
    Image image;
};

inline std::vector<SampledFrame> sample_frames(const VideoRecord& record, double rate = 1.0, int limit = 100) {
    if (!std::filesystem::is_directory(record.path))
        throw Error(ErrorKind::UndecodableSource, "video '" + record.video_id + "': " + record.path.string() +
                                                      " is not a frame directory");
    const auto meta = read_video_meta(record.path);
    std::vector<SampledFrame> out;
    for (const auto& s : plan_frame_samples(meta, rate, limit)) {
        const auto ref = frame_ref(s.index);
        Image img;
        try {
            img = pnm::read(record.path / (ref + ".ppm"));
        } catch (const Error& e) {
            throw Error(ErrorKind::UndecodableSource, "video '" + record.video_id + "': " + e.what());
        }
        out.push_back({record.video_id, ref, s.timestamp, std::move(img)});
    }
    return out;
}

} // namespace dfeval::dataset
