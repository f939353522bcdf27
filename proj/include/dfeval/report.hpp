#pragma once

#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfeval/error.hpp"
#include "dfeval/metrics.hpp"
#include "dfeval/regions.hpp"

namespace dfeval::metrics {

struct RegionResult {
    double eer = 0.0;  ///< fraction
    double auc = 0.0;  ///< fraction

    friend bool operator==(const RegionResult&, const RegionResult&) = default;
};

struct EvalReport {
    std::string database;
    std::string architecture;
    std::map<RegionKind, RegionResult> regions;
    ScoreLevel level = ScoreLevel::Frame;
    bool identity_leaked = false;

    /// Best and worst are picked by EER among the facial regions present
    /// (Eyes, Nose, Mouth, Rest); a report without facial regions falls back
    /// to whatever it has. Ties go to the earlier region.
    RegionKind best_region() const { return pick(true); }
    RegionKind worst_region() const { return pick(false); }

    friend bool operator==(const EvalReport&, const EvalReport&) = default;

private:
    RegionKind pick(bool best) const {
        if (regions.empty()) throw Error(ErrorKind::InconsistentRegions, "report has no regions");
        std::optional<RegionKind> chosen;
        auto consider = [&](RegionKind k) {
            auto it = regions.find(k);
            if (it == regions.end()) return;
            if (!chosen) {
                chosen = k;
                return;
            }
            const double cur = regions.at(*chosen).eer;
            if (best ? it->second.eer < cur : it->second.eer > cur) chosen = k;
        };
        for (auto k : kFacialRegions) consider(k);
        if (!chosen)
            for (auto k : kAllRegions) consider(k);
        return *chosen;
    }
};

inline RegionResult evaluate(const ScoreSet& s) { return {eer(s).eer, auc(s)}; }

enum class ReportFormat { Markdown, Json };

namespace detail {

inline std::string pct(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", fraction * 100.0);
    return buf;
}

inline std::vector<RegionKind> shared_regions(const std::vector<EvalReport>& reports) {
    if (reports.empty()) throw Error(ErrorKind::InconsistentRegions, "no reports to render");
    std::set<RegionKind> first;
    for (const auto& [k, r] : reports.front().regions) first.insert(k);
    for (const auto& rep : reports) {
        std::set<RegionKind> these;
        for (const auto& [k, r] : rep.regions) these.insert(k);
        if (these != first)
            throw Error(ErrorKind::InconsistentRegions,
                        "report " + rep.database + "/" + rep.architecture + " has a different region set");
    }
    std::vector<RegionKind> ordered;
    for (auto k : kAllRegions)
        if (first.count(k)) ordered.push_back(k);
    return ordered;
}

} // namespace detail

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json regions = nlohmann::json::object();
    for (const auto& [k, v] : r.regions)
        regions[std::string(region_name(k))] = {{"eer", v.eer}, {"auc", v.auc}};
    return {{"database", r.database},
            {"architecture", r.architecture},
            {"level", std::string(level_name(r.level))},
            {"identity_leaked", r.identity_leaked},
            {"regions", regions},
            {"best_region", std::string(region_name(r.best_region()))},
            {"worst_region", std::string(region_name(r.worst_region()))}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    try {
        r.database = j.at("database").get<std::string>();
        r.architecture = j.at("architecture").get<std::string>();
        r.level = parse_level(j.at("level").get<std::string>());
        r.identity_leaked = j.value("identity_leaked", false);
        for (const auto& [name, v] : j.at("regions").items())
            r.regions[parse_region(name)] = {v.at("eer").get<double>(), v.at("auc").get<double>()};
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedRecord, std::string("eval report: ") + e.what());
    }
    return r;
}

/// Markdown: one table per architecture with (EER, AUC) per region in
/// percent, the best EER cell and its AUC in bold, the best and worst facial
/// regions tagged, followed by an AUC comparison across databases.
/// JSON: the same content, machine-readable.
inline std::string render_report(const std::vector<EvalReport>& reports, ReportFormat format) {
    const auto regions = detail::shared_regions(reports);
    if (format == ReportFormat::Json) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& r : reports) arr.push_back(to_json(r));
        return nlohmann::json{{"reports", arr}}.dump(2) + "\n";
    }

    std::vector<std::string> architectures;
    for (const auto& r : reports)
        if (std::find(architectures.begin(), architectures.end(), r.architecture) == architectures.end())
            architectures.push_back(r.architecture);

    std::string md;
    const std::string level(level_name(reports.front().level));
    for (const auto& arch : architectures) {
        md += "### " + arch + ": EER (%) and AUC (%), " + level + " level\n\n| Database |";
        for (auto k : regions) md += " " + std::string(region_name(k)) + " EER (%) | " + std::string(region_name(k)) + " AUC (%) |";
        md += "\n|---|";
        for (std::size_t i = 0; i < regions.size(); ++i) md += "---:|---:|";
        md += "\n";
        for (const auto& r : reports) {
            if (r.architecture != arch) continue;
            RegionKind best_overall = regions.front();
            for (auto k : regions)
                if (r.regions.at(k).eer < r.regions.at(best_overall).eer) best_overall = k;
            const auto best = r.best_region();
            const auto worst = r.worst_region();
            md += "| " + r.database + (r.identity_leaked ? " (identity-leaked)" : "") + " |";
            for (auto k : regions) {
                std::string e = detail::pct(r.regions.at(k).eer);
                std::string a = detail::pct(r.regions.at(k).auc);
                if (k == best_overall) {
                    e = "**" + e + "**";
                    a = "**" + a + "**";
                }
                std::string tag;
                if (k == best) tag += " [best]";
                if (k == worst) tag += " [worst]";
                md += " " + e + tag + " | " + a + " |";
            }
            md += "\n";
        }
        md += "\n";
    }
    md += "Bold: best EER per database. [best]/[worst]: facial regions (Eyes, Nose, Mouth, Rest) with the "
          "lowest/highest EER.\n";
    bool leaked = false;
    for (const auto& r : reports) leaked = leaked || r.identity_leaked;
    if (leaked)
        md += "\nWARNING: identity-leaked rows were evaluated on identities also used for development; their "
              "numbers overstate generalisation to unseen identities.\n";

    // AUC comparison: rows = architectures, columns = databases, using the
    // entire-face input when present.
    const RegionKind cmp_region = std::find(regions.begin(), regions.end(), RegionKind::Face) != regions.end()
                                      ? RegionKind::Face
                                      : regions.front();
    std::vector<std::string> databases;
    for (const auto& r : reports)
        if (std::find(databases.begin(), databases.end(), r.database) == databases.end()) databases.push_back(r.database);
    md += "\n### Comparison in terms of AUC (%), " + std::string(region_name(cmp_region)) + " input\n\n| Classifier |";
    for (const auto& db : databases) md += " " + db + " |";
    md += "\n|---|";
    for (std::size_t i = 0; i < databases.size(); ++i) md += "---:|";
    md += "\n";
    std::map<std::string, double> best_auc;
    for (const auto& r : reports) {
        const double a = r.regions.at(cmp_region).auc;
        auto [it, ins] = best_auc.try_emplace(r.database, a);
        if (!ins) it->second = std::max(it->second, a);
    }
    for (const auto& arch : architectures) {
        md += "| " + arch + " |";
        for (const auto& db : databases) {
            const EvalReport* found = nullptr;
            for (const auto& r : reports)
                if (r.architecture == arch && r.database == db) found = &r;
            if (!found) {
                md += " - |";
                continue;
            }
            const double a = found->regions.at(cmp_region).auc;
            const std::string cell = detail::pct(a);
            md += " " + (a == best_auc.at(db) ? "**" + cell + "**" : cell) + " |";
        }
        md += "\n";
    }
    return md;
}

} // namespace dfeval::metrics
