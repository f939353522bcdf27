#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dfeval/error.hpp"
#include "dfeval/image.hpp"
#include "dfeval/log.hpp"

namespace dfeval {

struct Point2 {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const Point2&, const Point2&) = default;
};

inline constexpr int kLandmarkCount = 68;

using LandmarkPoints = std::array<Point2, kLandmarkCount>;

/// 68 facial points in face-crop pixel coordinates (x right, y down).
///
/// Indexing is 1-based everywhere in the public surface: point(1) is the
/// first jaw point, point(68) the last inner-lip point.
class LandmarkSet {
public:
    LandmarkSet(const LandmarkPoints& points, std::string frame_ref, Canvas canvas)
        : points_(points), frame_ref_(std::move(frame_ref)), canvas_(canvas) {
        for (int i = 0; i < kLandmarkCount; ++i) {
            if (!std::isfinite(points_[i].x) || !std::isfinite(points_[i].y))
                throw Error(ErrorKind::MalformedRecord,
                            "landmark " + std::to_string(i + 1) + " of frame '" + frame_ref_ + "' is not finite");
        }
        if (canvas_.height <= 0 || canvas_.width <= 0)
            throw Error(ErrorKind::MalformedRecord, "landmark canvas must be non-empty");
    }

    const Point2& point(int index) const {
        if (index < 1 || index > kLandmarkCount)
            throw std::out_of_range("landmark index " + std::to_string(index) + " outside [1,68]");
        return points_[static_cast<std::size_t>(index - 1)];
    }

    const LandmarkPoints& points() const { return points_; }
    const std::string& frame_ref() const { return frame_ref_; }
    Canvas canvas() const { return canvas_; }

    /// Number of points lying outside [0,width]x[0,height].
    int outside_canvas_count() const {
        int n = 0;
        for (const auto& p : points_)
            if (p.x < 0 || p.y < 0 || p.x > canvas_.width || p.y > canvas_.height) ++n;
        return n;
    }

    LandmarkSet translated(double dx, double dy) const {
        LandmarkPoints moved = points_;
        for (auto& p : moved) {
            p.x += dx;
            p.y += dy;
        }
        return LandmarkSet(moved, frame_ref_, canvas_);
    }

    friend bool operator==(const LandmarkSet&, const LandmarkSet&) = default;

private:
    LandmarkPoints points_;
    std::string frame_ref_;
    Canvas canvas_;
};

/// Canonical frontal 68-point layout in unit-square coordinates of the face
/// box, following the usual jaw / brows / nose / eyes / lips topology.
inline LandmarkPoints canonical_unit_template() {
    LandmarkPoints t{};
    constexpr double pi = 3.14159265358979323846;
    for (int k = 0; k < 17; ++k) {
        const double theta = pi - k * pi / 16.0;
        t[k] = {0.5 + 0.42 * std::cos(theta), 0.40 + 0.50 * std::sin(theta)};
    }
    const double brow_x[10] = {0.16, 0.22, 0.29, 0.36, 0.43, 0.57, 0.64, 0.71, 0.78, 0.84};
    const double brow_y[10] = {0.31, 0.28, 0.27, 0.28, 0.30, 0.30, 0.28, 0.27, 0.28, 0.31};
    for (int k = 0; k < 10; ++k) t[17 + k] = {brow_x[k], brow_y[k]};
    for (int k = 0; k < 4; ++k) t[27 + k] = {0.5, 0.40 + 0.06 * k};
    const double base_x[5] = {0.42, 0.46, 0.50, 0.54, 0.58};
    const double base_y[5] = {0.63, 0.645, 0.655, 0.645, 0.63};
    for (int k = 0; k < 5; ++k) t[31 + k] = {base_x[k], base_y[k]};
    const Point2 eyes[12] = {{0.22, 0.40},  {0.27, 0.38}, {0.33, 0.38}, {0.38, 0.405}, {0.33, 0.42}, {0.27, 0.42},
                             {0.62, 0.405}, {0.67, 0.38}, {0.73, 0.38}, {0.78, 0.40},  {0.73, 0.42}, {0.67, 0.42}};
    for (int k = 0; k < 12; ++k) t[36 + k] = eyes[k];
    const double deg = pi / 180.0;
    const double outer[12] = {180, 150, 120, 90, 60, 30, 0, -30, -60, -90, -120, -150};
    for (int k = 0; k < 12; ++k)
        t[48 + k] = {0.5 + 0.15 * std::cos(outer[k] * deg), 0.76 - 0.065 * std::sin(outer[k] * deg)};
    const double inner[8] = {180, 120, 90, 60, 0, -60, -90, -120};
    for (int k = 0; k < 8; ++k)
        t[60 + k] = {0.5 + 0.10 * std::cos(inner[k] * deg), 0.76 - 0.025 * std::sin(inner[k] * deg)};
    return t;
}

/// Canonical template mapped into the box [x0, x0+w] x [y0, y0+h].
inline LandmarkPoints place_template(double x0, double y0, double w, double h) {
    LandmarkPoints t = canonical_unit_template();
    for (auto& p : t) p = {x0 + p.x * w, y0 + p.y * h};
    return t;
}

/// Canonical template filling a canvas.
inline LandmarkSet canonical_template(Canvas canvas, std::string frame_ref = "template") {
    return LandmarkSet(place_template(0.0, 0.0, canvas.width, canvas.height), std::move(frame_ref), canvas);
}

// ---------------------------------------------------------------------------
// CSV file format: header `frame,x1..x68,y1..y68`, one line per frame.

namespace landmark_csv {

inline std::string header() {
    std::string h = "frame";
    for (int i = 1; i <= kLandmarkCount; ++i) h += ",x" + std::to_string(i);
    for (int i = 1; i <= kLandmarkCount; ++i) h += ",y" + std::to_string(i);
    return h;
}

/// Shortest representation that parses back to the same double.
inline std::string format_number(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string format_record(const LandmarkSet& lm) {
    std::string line = lm.frame_ref();
    for (const auto& p : lm.points()) line += "," + format_number(p.x);
    for (const auto& p : lm.points()) line += "," + format_number(p.y);
    return line;
}

inline std::string serialize(const std::vector<LandmarkSet>& sets) {
    std::string out = header() + "\n";
    for (const auto& lm : sets) out += format_record(lm) + "\n";
    return out;
}

inline LandmarkSet parse_record(std::string_view line, Canvas canvas, std::size_t line_no) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        fields.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    const auto where = "line " + std::to_string(line_no);
    if (fields.size() != 1 + 2 * kLandmarkCount)
        throw Error(ErrorKind::MalformedRecord, where + ": expected 136 coordinates, got " +
                                                    std::to_string(fields.size() - 1));
    if (fields[0].empty()) throw Error(ErrorKind::MalformedRecord, where + ": empty frame id");
    LandmarkPoints pts{};
    for (std::size_t i = 1; i < fields.size(); ++i) {
        double v = 0.0;
        const auto f = fields[i];
        auto res = std::from_chars(f.data(), f.data() + f.size(), v);
        if (res.ec != std::errc() || res.ptr != f.data() + f.size() || !std::isfinite(v))
            throw Error(ErrorKind::MalformedRecord, where + ": field " + std::to_string(i) + " ('" +
                                                        std::string(f) + "') is not a finite number");
        const std::size_t k = (i - 1) % kLandmarkCount;
        if (i <= static_cast<std::size_t>(kLandmarkCount)) pts[k].x = v;
        else pts[k].y = v;
    }
    return LandmarkSet(pts, std::string(fields[0]), canvas);
}

inline std::vector<LandmarkSet> parse(std::istream& in, Canvas canvas) {
    std::vector<LandmarkSet> out;
    std::string line;
    std::size_t line_no = 0;
    bool seen_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (!seen_header) {
            seen_header = true;
            if (line.rfind("frame,", 0) == 0) {
                if (line != header()) throw Error(ErrorKind::MalformedRecord, "unexpected landmark CSV header");
                continue;
            }
        }
        out.push_back(parse_record(line, canvas, line_no));
    }
    if (out.empty()) throw Error(ErrorKind::EmptyFile, "no landmark records");
    return out;
}

} // namespace landmark_csv

/// Load every frame of a landmark CSV. Points outside the canvas are kept
/// (masks clip later) and reported through warn().
inline std::vector<LandmarkSet> load_landmarks(const std::filesystem::path& path, Canvas canvas) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::IoError, "cannot open landmark file " + path.string());
    std::vector<LandmarkSet> sets;
    try {
        sets = landmark_csv::parse(in, canvas);
    } catch (const Error& e) {
        throw Error(e.kind(), path.string() + ": " + e.what());
    }
    for (const auto& lm : sets) {
        if (const int n = lm.outside_canvas_count(); n > 0)
            warn(path.string() + ": frame '" + lm.frame_ref() + "' has " + std::to_string(n) +
                 " landmark(s) outside the canvas");
    }
    return sets;
}

inline void save_landmarks(const std::filesystem::path& path, const std::vector<LandmarkSet>& sets) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
    out << landmark_csv::serialize(sets);
}

// ---------------------------------------------------------------------------
// Detector adapters. A backend maps a face-crop raster to 68 points or
// reports that no face was found.

class LandmarkBackend {
public:
    virtual ~LandmarkBackend() = default;
    virtual std::optional<LandmarkPoints> detect(const Image& image) const = 0;
};

/// Returns a fixed template regardless of content. Used for tests and for
/// pipelines whose crops are already aligned.
class FixedTemplateBackend final : public LandmarkBackend {
public:
    explicit FixedTemplateBackend(std::optional<LandmarkPoints> points = std::nullopt) : points_(points) {}

    std::optional<LandmarkPoints> detect(const Image& image) const override {
        if (points_) return points_;
        return place_template(0.0, 0.0, image.width, image.height);
    }

private:
    std::optional<LandmarkPoints> points_;
};

/// Locates the foreground as every pixel differing from the corner colour by
/// more than `threshold` in some channel, and fits the canonical template to
/// its bounding box. Enough for uncluttered crops such as synthetic faces.
class ForegroundFitBackend final : public LandmarkBackend {
public:
    explicit ForegroundFitBackend(int threshold = 40, int min_pixels = 16)
        : threshold_(threshold), min_pixels_(min_pixels) {}

    std::optional<LandmarkPoints> detect(const Image& image) const override {
        int x0 = image.width, y0 = image.height, x1 = -1, y1 = -1, count = 0;
        for (int y = 0; y < image.height; ++y) {
            for (int x = 0; x < image.width; ++x) {
                bool fg = false;
                for (int c = 0; c < image.channels && !fg; ++c)
                    fg = std::abs(int(image.at(y, x, c)) - int(image.at(0, 0, c))) > threshold_;
                if (!fg) continue;
                ++count;
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
        }
        if (count < min_pixels_) return std::nullopt;
        return place_template(x0, y0, x1 + 1 - x0, y1 + 1 - y0);
    }

private:
    int threshold_;
    int min_pixels_;
};

class BackendRegistry {
public:
    using Factory = std::function<std::unique_ptr<LandmarkBackend>()>;

    void add(std::string name, Factory factory) { factories_[std::move(name)] = std::move(factory); }

    bool contains(const std::string& name) const { return factories_.count(name) > 0; }

    std::unique_ptr<LandmarkBackend> create(const std::string& name) const {
        auto it = factories_.find(name);
        if (it == factories_.end()) throw Error(ErrorKind::BackendUnavailable, "no landmark backend named '" + name + "'");
        return it->second();
    }

    static BackendRegistry& global() {
        static BackendRegistry reg = [] {
            BackendRegistry r;
            r.add("template", [] { return std::make_unique<FixedTemplateBackend>(); });
            r.add("foreground-fit", [] { return std::make_unique<ForegroundFitBackend>(); });
            return r;
        }();
        return reg;
    }

private:
    std::map<std::string, Factory> factories_;
};

inline LandmarkSet detect_landmarks(const Image& image, const LandmarkBackend& backend,
                                    std::string frame_ref = "frame") {
    if (image.empty()) throw Error(ErrorKind::NoFaceFound, "empty image");
    auto pts = backend.detect(image);
    if (!pts) throw Error(ErrorKind::NoFaceFound, "backend found no face in '" + frame_ref + "'");
    return LandmarkSet(*pts, std::move(frame_ref), image.canvas());
}

inline LandmarkSet detect_landmarks(const Image& image, const std::string& backend_name,
                                    std::string frame_ref = "frame",
                                    const BackendRegistry& registry = BackendRegistry::global()) {
    const auto backend = registry.create(backend_name);
    return detect_landmarks(image, *backend, std::move(frame_ref));
}

} // namespace dfeval
