#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dfeval/error.hpp"
#include "dfeval/types.hpp"

namespace dfeval::metrics {

enum class ScoreLevel { Frame, Video };

inline std::string_view level_name(ScoreLevel l) { return l == ScoreLevel::Video ? "video" : "frame"; }

inline ScoreLevel parse_level(std::string_view s) {
    if (s == "frame") return ScoreLevel::Frame;
    if (s == "video") return ScoreLevel::Video;
    throw Error(ErrorKind::ConfigError, "score level must be 'frame' or 'video', got '" + std::string(s) + "'");
}

/// Higher score = more likely fake.
struct ScoreEntry {
    std::string unit_id;
    double score = 0.0;
    Label label = Label::Real;

    friend bool operator==(const ScoreEntry&, const ScoreEntry&) = default;
};

/// Frame-level unit ids are `<video_id>/<frame_ref>`; the video id is
/// everything before the last '/'.
struct ScoreSet {
    std::vector<ScoreEntry> entries;
    ScoreLevel level = ScoreLevel::Frame;

    std::size_t count(Label l) const {
        return static_cast<std::size_t>(
            std::count_if(entries.begin(), entries.end(), [l](const ScoreEntry& e) { return e.label == l; }));
    }

    friend bool operator==(const ScoreSet&, const ScoreSet&) = default;
};

struct RocPoint {
    double threshold;  ///< decision: fake iff score > threshold
    double far;        ///< fraction of reals scored above threshold
    double frr;        ///< fraction of fakes scored at or below threshold
};

struct RocCurve {
    std::vector<RocPoint> points;  ///< ascending threshold
};

inline void require_both_classes(const ScoreSet& s) {
    if (s.count(Label::Real) == 0 || s.count(Label::Fake) == 0)
        throw Error(ErrorKind::SingleClass, "score set needs both real and fake entries (" +
                                                std::to_string(s.count(Label::Real)) + " real, " +
                                                std::to_string(s.count(Label::Fake)) + " fake)");
}

/// One point at -infinity (everything accepted as fake) plus one per
/// distinct score.
inline RocCurve roc(const ScoreSet& s) {
    require_both_classes(s);
    std::vector<std::pair<double, Label>> v;
    v.reserve(s.entries.size());
    for (const auto& e : s.entries) v.emplace_back(e.score, e.label);
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    const double n_real = static_cast<double>(s.count(Label::Real));
    const double n_fake = static_cast<double>(s.count(Label::Fake));
    RocCurve c;
    c.points.push_back({-std::numeric_limits<double>::infinity(), 1.0, 0.0});
    std::size_t reals_at_or_below = 0, fakes_at_or_below = 0;
    for (std::size_t i = 0; i < v.size();) {
        const double t = v[i].first;
        for (; i < v.size() && v[i].first == t; ++i) (v[i].second == Label::Real ? reals_at_or_below : fakes_at_or_below)++;
        c.points.push_back({t, (n_real - static_cast<double>(reals_at_or_below)) / n_real,
                            static_cast<double>(fakes_at_or_below) / n_fake});
    }
    return c;
}

/// Probability that a random fake outscores a random real, ties counted
/// one half (Mann-Whitney with mid-ranks).
inline double auc(const ScoreSet& s) {
    require_both_classes(s);
    std::vector<std::pair<double, Label>> v;
    v.reserve(s.entries.size());
    for (const auto& e : s.entries) v.emplace_back(e.score, e.label);
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    double fake_rank_sum = 0.0;
    for (std::size_t i = 0; i < v.size();) {
        std::size_t j = i;
        while (j < v.size() && v[j].first == v[i].first) ++j;
        const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
        for (std::size_t k = i; k < j; ++k)
            if (v[k].second == Label::Fake) fake_rank_sum += mid_rank;
        i = j;
    }
    const double nf = static_cast<double>(s.count(Label::Fake));
    const double nr = static_cast<double>(s.count(Label::Real));
    return (fake_rank_sum - nf * (nf + 1) / 2.0) / (nf * nr);
}

/// Area under (FAR, 1-FRR) by the trapezoid rule.
inline double auc_trapezoid(const RocCurve& c) {
    double area = 0.0;
    for (std::size_t k = 1; k < c.points.size(); ++k) {
        const auto& a = c.points[k - 1];
        const auto& b = c.points[k];
        area += (a.far - b.far) * ((1.0 - a.frr) + (1.0 - b.frr)) / 2.0;
    }
    return area;
}

struct EerResult {
    double eer = 0.0;
    double threshold = 0.0;
};

/// FAR = FRR crossing, linearly interpolated between adjacent ROC points.
inline EerResult eer(const ScoreSet& s) {
    const auto c = roc(s);
    const auto& p = c.points;
    for (std::size_t k = 1; k < p.size(); ++k) {
        const double dk = p[k].far - p[k].frr;
        if (dk > 0.0) continue;
        if (dk == 0.0) return {p[k].far, p[k].threshold};
        const double dprev = p[k - 1].far - p[k - 1].frr;
        const double alpha = dprev / (dprev - dk);
        const double rate = p[k - 1].far + alpha * (p[k].far - p[k - 1].far);
        const double thr = std::isfinite(p[k - 1].threshold)
                               ? p[k - 1].threshold + alpha * (p[k].threshold - p[k - 1].threshold)
                               : p[k].threshold;
        return {rate, thr};
    }
    return {p.back().far, p.back().threshold};  // unreachable: last point has FAR 0, FRR 1
}

enum class Aggregation { Mean, Median, Max };

inline Aggregation parse_aggregation(std::string_view s) {
    if (s == "mean") return Aggregation::Mean;
    if (s == "median") return Aggregation::Median;
    if (s == "max") return Aggregation::Max;
    throw Error(ErrorKind::ConfigError, "aggregation must be mean, median or max");
}

inline std::string video_of(const std::string& unit_id) {
    const auto slash = unit_id.rfind('/');
    return slash == std::string::npos ? unit_id : unit_id.substr(0, slash);
}

/// One entry per video (sorted by video id), label inherited from its frames.
inline ScoreSet aggregate_to_video(const ScoreSet& frames, Aggregation method) {
    struct Acc {
        std::vector<double> scores;
        Label label;
    };
    std::map<std::string, Acc> by_video;
    for (const auto& e : frames.entries) {
        const auto vid = video_of(e.unit_id);
        auto [it, inserted] = by_video.try_emplace(vid, Acc{{}, e.label});
        if (!inserted && it->second.label != e.label)
            throw Error(ErrorKind::MixedLabelsWithinVideo, "video '" + vid + "' has both real and fake frames");
        it->second.scores.push_back(e.score);
    }
    ScoreSet out;
    out.level = ScoreLevel::Video;
    for (auto& [vid, acc] : by_video) {
        auto& v = acc.scores;
        double agg = 0.0;
        switch (method) {
        case Aggregation::Mean:
            for (double x : v) agg += x;
            agg /= static_cast<double>(v.size());
            break;
        case Aggregation::Median: {
            std::sort(v.begin(), v.end());
            const std::size_t n = v.size();
            agg = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
            break;
        }
        case Aggregation::Max: agg = *std::max_element(v.begin(), v.end()); break;
        }
        out.entries.push_back({vid, agg, acc.label});
    }
    return out;
}

// Score file: CSV `unit_id,score,label,level`.
namespace score_csv {

inline std::string format_double(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, r.ptr);
}

inline std::string serialize(const ScoreSet& s) {
    std::string out = "unit_id,score,label,level\n";
    for (const auto& e : s.entries)
        out += e.unit_id + "," + format_double(e.score) + "," + std::string(label_name(e.label)) + "," +
               std::string(level_name(s.level)) + "\n";
    return out;
}

inline ScoreSet parse(std::istream& in) {
    ScoreSet s;
    std::string line;
    std::size_t line_no = 0;
    bool level_seen = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || (line_no == 1 && line.rfind("unit_id,", 0) == 0)) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string item;
        while (std::getline(ss, item, ',')) f.push_back(item);
        const auto where = "score line " + std::to_string(line_no);
        if (f.size() != 4) throw Error(ErrorKind::MalformedRecord, where + ": expected 4 fields");
        double v = 0.0;
        auto r = std::from_chars(f[1].data(), f[1].data() + f[1].size(), v);
        if (r.ec != std::errc() || r.ptr != f[1].data() + f[1].size() || !(v >= 0.0 && v <= 1.0))
            throw Error(ErrorKind::MalformedRecord, where + ": score must be a number in [0,1]");
        const auto lvl = parse_level(f[3]);
        if (level_seen && lvl != s.level) throw Error(ErrorKind::MalformedRecord, where + ": mixed score levels");
        s.level = lvl;
        level_seen = true;
        s.entries.push_back({f[0], v, parse_label(f[2])});
    }
    return s;
}

inline void save(const std::filesystem::path& path, const ScoreSet& s) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
    out << serialize(s);
}

inline ScoreSet load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::MissingPrerequisite, "score file " + path.string() + " not found");
    return parse(in);
}

} // namespace score_csv

} // namespace dfeval::metrics
