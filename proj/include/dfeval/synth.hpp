#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dfeval/dataset.hpp"
#include "dfeval/error.hpp"
#include "dfeval/geometry.hpp"
#include "dfeval/image.hpp"
#include "dfeval/landmarks.hpp"
#include "dfeval/regions.hpp"
#include "dfeval/rng.hpp"

namespace dfeval::synth {

struct SynthSpec {
    std::uint64_t identity_seed = 0;
    std::optional<RegionKind> artifact_region;  ///< none = real face
    double artifact_strength = 0.5;
    Canvas canvas{64, 64};
    double noise_level = 0.02;  ///< noise standard deviation as a fraction of full scale

    void validate() const {
        if (!(artifact_strength >= 0.0 && artifact_strength <= 1.0))
            throw Error(ErrorKind::ConfigError, "artifact strength must be in [0,1]");
        if (artifact_region == RegionKind::Face)
            throw Error(ErrorKind::ConfigError, "artifact region must be a facial region, not Face");
        if (!(noise_level >= 0.0 && noise_level <= 1.0)) throw Error(ErrorKind::ConfigError, "noise level must be in [0,1]");
        if (canvas.height < 16 || canvas.width < 16) throw Error(ErrorKind::ConfigError, "canvas must be at least 16x16");
    }
};

struct SynthFace {
    FaceCrop crop;
    LandmarkSet landmarks;
    Label label;
};

/// Side of the square pixel blocks that make up the artifact texture.
inline constexpr int kArtifactBlock = 4;
/// Per-block offset magnitude at strength 1, in 8-bit levels; each block and
/// channel gets a random sign.
inline constexpr double kArtifactAmplitude = 96.0;

namespace detail {

using Rgb = std::array<double, 3>;

struct Appearance {
    LandmarkPoints points;
    Rgb background, background_shift, skin, brow, iris, lip;
    double head_cx, head_cy, head_rx, head_ry;
};

inline Rgb random_rgb(Rng& r, double lo, double hi) { return {r.uniform(lo, hi), r.uniform(lo, hi), r.uniform(lo, hi)}; }

/// Everything that depends on the identity alone.
inline Appearance appearance(const SynthSpec& s) {
    Rng r(mix_seed(s.identity_seed, 0x1d));
    const double W = s.canvas.width, H = s.canvas.height;
    const double w = W * r.uniform(0.60, 0.70), h = H * r.uniform(0.72, 0.80);
    const double x0 = (W - w) / 2 + W * r.uniform(-0.04, 0.04);
    const double y0 = (H - h) / 2 + H * r.uniform(-0.03, 0.03);
    Appearance a;
    a.points = place_template(x0, y0, w, h);
    for (auto& p : a.points) {
        p.x += 0.006 * w * r.normal();
        p.y += 0.006 * h * r.normal();
    }
    a.background = random_rgb(r, 20, 235);
    a.background_shift = random_rgb(r, -30, 30);
    const double tone = r.uniform(90, 225);
    a.skin = {tone, tone * r.uniform(0.72, 0.88), tone * r.uniform(0.55, 0.75)};
    a.brow = random_rgb(r, 20, 90);
    a.iris = random_rgb(r, 30, 140);
    a.lip = {r.uniform(130, 200), r.uniform(40, 90), r.uniform(50, 100)};
    a.head_cx = x0 + 0.5 * w;
    a.head_cy = y0 + 0.48 * h;
    a.head_rx = 0.46 * w;
    a.head_ry = 0.50 * h;
    return a;
}

inline void paint(std::vector<double>& px, const geometry::Bitmap& mask, const Rgb& c) {
    for (std::size_t i = 0; i < mask.bits.size(); ++i)
        if (mask.bits[i])
            for (int k = 0; k < 3; ++k) px[i * 3 + k] = c[static_cast<std::size_t>(k)];
}

inline geometry::Bitmap polygon(const LandmarkPoints& pts, std::initializer_list<int> idx, Canvas cv) {
    std::vector<Point2> poly;
    for (int i : idx) poly.push_back(pts[static_cast<std::size_t>(i - 1)]);
    return geometry::rasterize_polygon(poly, cv);
}

/// Pixels whose centre lies within `radius` of the polyline through `idx`.
inline geometry::Bitmap stroke(const LandmarkPoints& pts, const std::vector<int>& idx, double radius, Canvas cv) {
    geometry::Bitmap b(cv);
    for (int y = 0; y < cv.height; ++y)
        for (int x = 0; x < cv.width; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            for (std::size_t k = 0; k + 1 < idx.size(); ++k) {
                const auto& a = pts[static_cast<std::size_t>(idx[k] - 1)];
                const auto& c = pts[static_cast<std::size_t>(idx[k + 1] - 1)];
                const double dx = c.x - a.x, dy = c.y - a.y;
                const double len2 = dx * dx + dy * dy;
                const double t = len2 > 0 ? std::clamp(((px - a.x) * dx + (py - a.y) * dy) / len2, 0.0, 1.0) : 0.0;
                const double ex = a.x + t * dx - px, ey = a.y + t * dy - py;
                if (ex * ex + ey * ey <= radius * radius) {
                    b.at(y, x) = 1;
                    break;
                }
            }
        }
    return b;
}

inline geometry::Bitmap disc(Point2 c, double rx, double ry, Canvas cv) {
    geometry::Ellipse e{c, 1.0 / (rx * rx), 0.0, 1.0 / (ry * ry)};
    return geometry::rasterize_ellipse(e, cv);
}

inline Point2 centroid(const LandmarkPoints& pts, int from, int to) {
    Point2 c;
    for (int i = from; i <= to; ++i) {
        c.x += pts[static_cast<std::size_t>(i - 1)].x;
        c.y += pts[static_cast<std::size_t>(i - 1)].y;
    }
    const double n = to - from + 1;
    return {c.x / n, c.y / n};
}

/// Noise-free render of an identity, as doubles in [0,255], interleaved RGB.
inline std::vector<double> render_clean(const SynthSpec& s, const Appearance& a) {
    const Canvas cv = s.canvas;
    std::vector<double> px(static_cast<std::size_t>(cv.pixels()) * 3);
    for (int y = 0; y < cv.height; ++y)
        for (int x = 0; x < cv.width; ++x) {
            const double t = (y + 0.5) / cv.height - 0.5;
            for (int k = 0; k < 3; ++k)
                px[(static_cast<std::size_t>(y) * cv.width + x) * 3 + k] =
                    a.background[static_cast<std::size_t>(k)] + t * a.background_shift[static_cast<std::size_t>(k)];
        }
    const auto& p = a.points;
    const double unit = a.head_rx / 0.46;  // face box width
    paint(px, disc({a.head_cx, a.head_cy}, a.head_rx, a.head_ry, cv), a.skin);
    const Rgb shade{a.skin[0] * 0.75, a.skin[1] * 0.75, a.skin[2] * 0.75};
    paint(px, stroke(p, {28, 29, 30, 31}, 0.02 * unit, cv), shade);
    paint(px, stroke(p, {32, 33, 34, 35, 36}, 0.02 * unit, cv), shade);
    paint(px, stroke(p, {18, 19, 20, 21, 22}, 0.025 * unit, cv), a.brow);
    paint(px, stroke(p, {23, 24, 25, 26, 27}, 0.025 * unit, cv), a.brow);
    const Rgb white{235, 235, 230};
    paint(px, polygon(p, {37, 38, 39, 40, 41, 42}, cv), white);
    paint(px, polygon(p, {43, 44, 45, 46, 47, 48}, cv), white);
    paint(px, disc(centroid(p, 37, 42), 0.03 * unit, 0.025 * unit, cv), a.iris);
    paint(px, disc(centroid(p, 43, 48), 0.03 * unit, 0.025 * unit, cv), a.iris);
    paint(px, polygon(p, {49, 50, 51, 52, 53, 54, 55, 56, 57, 58, 59, 60}, cv), a.lip);
    const Rgb mouth_inside{a.lip[0] * 0.45, a.lip[1] * 0.45, a.lip[2] * 0.45};
    paint(px, polygon(p, {61, 62, 63, 64, 65, 66, 67, 68}, cv), mouth_inside);
    return px;
}

inline geometry::Bitmap artifact_mask(RegionKind region, const LandmarkSet& lm) {
    if (region == RegionKind::Rest) return build_all_masks(lm).rest.bits;
    return build_region_mask(lm, region).bits;
}

inline std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

} // namespace detail

/// Deterministic in (spec, frame_seed). The frame seed only drives noise and
/// the artifact texture; geometry and colours come from the identity seed.
/// The artifact is added after noise and only to pixels inside the region
/// mask, so a fake differs from its clean twin (same identity and frame
/// seed, no artifact) only inside that mask.
inline SynthFace generate_face(const SynthSpec& spec, std::uint64_t frame_seed) {
    spec.validate();
    const auto a = detail::appearance(spec);
    const Canvas cv = spec.canvas;
    LandmarkSet lm(a.points, "synth", cv);
    auto px = detail::render_clean(spec, a);

    Rng noise(mix_seed(mix_seed(spec.identity_seed, frame_seed), 0x4e));
    const double sd = spec.noise_level * 255.0;
    if (sd > 0.0)
        for (auto& v : px) v += sd * noise.normal();
    for (auto& v : px) v = std::clamp(std::round(v), 0.0, 255.0);

    if (spec.artifact_region) {
        const auto mask = detail::artifact_mask(*spec.artifact_region, lm);
        Rng art(mix_seed(mix_seed(spec.identity_seed, frame_seed), 0xa7));
        const int bw = (cv.width + kArtifactBlock - 1) / kArtifactBlock;
        const int bh = (cv.height + kArtifactBlock - 1) / kArtifactBlock;
        std::vector<double> offsets(static_cast<std::size_t>(bw) * bh * 3);
        for (auto& o : offsets) o = (art.below(2) ? 1.0 : -1.0) * spec.artifact_strength * kArtifactAmplitude;
        for (int y = 0; y < cv.height; ++y)
            for (int x = 0; x < cv.width; ++x) {
                if (!mask.at(y, x)) continue;
                const std::size_t b = (static_cast<std::size_t>(y / kArtifactBlock) * bw + x / kArtifactBlock) * 3;
                for (int k = 0; k < 3; ++k) {
                    auto& v = px[(static_cast<std::size_t>(y) * cv.width + x) * 3 + k];
                    v = std::clamp(std::round(v + offsets[b + k]), 0.0, 255.0);
                }
            }
    }

    Image img(cv.height, cv.width, 3);
    for (std::size_t i = 0; i < px.size(); ++i) img.data[i] = detail::to_u8(px[i]);
    const Label label = spec.artifact_region ? Label::Fake : Label::Real;
    return {FaceCrop{std::move(img), RegionKind::Face, "synth"}, std::move(lm), label};
}

struct CorpusSpec {
    int n_identities = 20;
    int videos_per_identity = 2;
    int frames_per_video = 5;
    double fake_fraction = 0.5;
    RegionKind artifact_region = RegionKind::Mouth;
    std::uint64_t seed = 7;
    double artifact_strength = 0.5;
    double noise_level = 0.02;
    Canvas canvas{64, 64};
    std::string database = "synthbench";
    /// false: fakes spread evenly over identities (each identity contributes
    /// real and fake videos where counts allow). true: whole identities are
    /// fake, so identity predicts the label.
    bool identity_correlated_labels = false;
};

inline nlohmann::json to_json(const CorpusSpec& s) {
    return {{"n_identities", s.n_identities},
            {"videos_per_identity", s.videos_per_identity},
            {"frames_per_video", s.frames_per_video},
            {"fake_fraction", s.fake_fraction},
            {"artifact_region", std::string(region_name(s.artifact_region))},
            {"seed", s.seed},
            {"artifact_strength", s.artifact_strength},
            {"noise_level", s.noise_level},
            {"canvas", {s.canvas.height, s.canvas.width}},
            {"database", s.database},
            {"identity_correlated_labels", s.identity_correlated_labels}};
}

inline std::string identity_id(int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "id%03d", i);
    return buf;
}

inline std::string video_id(int identity, int video) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "id%03d_v%02d", identity, video);
    return buf;
}

inline std::uint64_t identity_seed(const CorpusSpec& s, int identity) {
    return mix_seed(s.seed, 0x10000 + static_cast<std::uint64_t>(identity));
}

inline std::uint64_t frame_seed(const CorpusSpec& s, int identity, int video, int frame) {
    return mix_seed(identity_seed(s, identity),
                    (static_cast<std::uint64_t>(video) << 32) | static_cast<std::uint64_t>(frame));
}

/// Which (identity, video) pairs are fake, indexed [identity][video].
inline std::vector<std::vector<bool>> assign_labels(const CorpusSpec& s) {
    std::vector<std::vector<bool>> fake(static_cast<std::size_t>(s.n_identities),
                                        std::vector<bool>(static_cast<std::size_t>(s.videos_per_identity), false));
    if (s.identity_correlated_labels) {
        std::vector<int> order(static_cast<std::size_t>(s.n_identities));
        std::iota(order.begin(), order.end(), 0);
        Rng r(mix_seed(s.seed, 0x1abe1));
        r.shuffle(std::span<int>(order));
        const int n_fake = static_cast<int>(std::lround(s.fake_fraction * s.n_identities));
        for (int k = 0; k < n_fake; ++k) fake[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])].assign(
            static_cast<std::size_t>(s.videos_per_identity), true);
        return fake;
    }
    const int total = s.n_identities * s.videos_per_identity;
    const int n_fake = static_cast<int>(std::lround(s.fake_fraction * total));
    int assigned = 0;
    for (int v = 0; v < s.videos_per_identity && assigned < n_fake; ++v)
        for (int i = 0; i < s.n_identities && assigned < n_fake; ++i, ++assigned)
            fake[static_cast<std::size_t>(i)][static_cast<std::size_t>(v)] = true;
    return fake;
}

/// Writes `<out>/manifest.jsonl`, `<out>/videos/<video_id>/` frame
/// directories and `<out>/landmarks/<video_id>.csv`. Returns the records as
/// ingestion would read them back.
inline std::vector<dataset::VideoRecord> generate_manifest(const CorpusSpec& s, const std::filesystem::path& out) {
    if (s.n_identities < 2)
        throw Error(ErrorKind::TooFewIdentities, "a synthetic corpus needs at least 2 identities");
    if (s.videos_per_identity < 1 || s.frames_per_video < 1)
        throw Error(ErrorKind::ConfigError, "videos per identity and frames per video must be positive");
    if (!(s.fake_fraction >= 0.0 && s.fake_fraction <= 1.0))
        throw Error(ErrorKind::ConfigError, "fake fraction must be in [0,1]");
    if (s.artifact_region == RegionKind::Face)
        throw Error(ErrorKind::ConfigError, "artifact region must be a facial region, not Face");

    const auto fake = assign_labels(s);
    std::vector<dataset::VideoRecord> records;
    for (int i = 0; i < s.n_identities; ++i) {
        for (int v = 0; v < s.videos_per_identity; ++v) {
            const bool is_fake = fake[static_cast<std::size_t>(i)][static_cast<std::size_t>(v)];
            SynthSpec spec{identity_seed(s, i), std::nullopt, s.artifact_strength, s.canvas, s.noise_level};
            if (is_fake) spec.artifact_region = s.artifact_region;
            const auto vid = video_id(i, v);
            const auto dir = out / "videos" / vid;
            std::filesystem::create_directories(dir);
            std::vector<LandmarkSet> lms;
            for (int f = 0; f < s.frames_per_video; ++f) {
                auto face = generate_face(spec, frame_seed(s, i, v, f));
                const auto ref = dataset::frame_ref(f);
                pnm::write(dir / (ref + ".ppm"), face.crop.pixels);
                lms.emplace_back(face.landmarks.points(), ref, s.canvas);
            }
            dataset::write_video_meta(dir, {1.0, s.frames_per_video});
            save_landmarks(out / "landmarks" / (vid + ".csv"), lms);
            records.push_back({vid, identity_id(i), is_fake ? Label::Fake : Label::Real, s.database,
                               std::filesystem::path("videos") / vid, dataset::Generation::First});
        }
    }
    dataset::write_manifest(out / "manifest.jsonl", records);
    for (auto& r : records) r.path = (out / r.path).lexically_normal();
    return records;
}

} // namespace dfeval::synth
