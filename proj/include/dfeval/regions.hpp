#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dfeval/error.hpp"
#include "dfeval/geometry.hpp"
#include "dfeval/image.hpp"
#include "dfeval/landmarks.hpp"

namespace dfeval {

enum class RegionKind { Face, Eyes, Nose, Mouth, Rest };

inline constexpr std::array<RegionKind, 5> kAllRegions = {RegionKind::Face, RegionKind::Eyes, RegionKind::Nose,
                                                          RegionKind::Mouth, RegionKind::Rest};
inline constexpr std::array<RegionKind, 4> kFacialRegions = {RegionKind::Eyes, RegionKind::Nose, RegionKind::Mouth,
                                                             RegionKind::Rest};

inline std::string_view region_name(RegionKind k) {
    switch (k) {
    case RegionKind::Face: return "Face";
    case RegionKind::Eyes: return "Eyes";
    case RegionKind::Nose: return "Nose";
    case RegionKind::Mouth: return "Mouth";
    case RegionKind::Rest: return "Rest";
    }
    return "?";
}

/// Case-insensitive parse of a region name.
inline RegionKind parse_region(std::string_view name) {
    std::string lower(name);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    for (auto k : kAllRegions) {
        std::string n(region_name(k));
        std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
        if (n == lower) return k;
    }
    throw Error(ErrorKind::ConfigError, "unknown region '" + std::string(name) + "'");
}

/// Landmark indices (1-based) grouped by the role they play in a region
/// outline, in the order the roles are listed.
struct RegionRecipe {
    RegionKind kind = RegionKind::Eyes;
    std::vector<std::pair<std::string, std::vector<int>>> roles;

    std::vector<int> all_indices() const {
        std::vector<int> out;
        for (const auto& [role, idx] : roles) out.insert(out.end(), idx.begin(), idx.end());
        return out;
    }

    friend bool operator==(const RegionRecipe&, const RegionRecipe&) = default;
};

/// The three landmark-defined regions. Rest is derived from these.
struct RegionRecipes {
    RegionRecipe eyes;
    RegionRecipe nose;
    RegionRecipe mouth;

    const RegionRecipe& get(RegionKind k) const {
        switch (k) {
        case RegionKind::Eyes: return eyes;
        case RegionKind::Nose: return nose;
        case RegionKind::Mouth: return mouth;
        default: throw std::invalid_argument("region " + std::string(region_name(k)) + " has no landmark recipe");
        }
    }
    RegionRecipe& get(RegionKind k) { return const_cast<RegionRecipe&>(std::as_const(*this).get(k)); }

    friend bool operator==(const RegionRecipes&, const RegionRecipes&) = default;
};

inline std::vector<int> index_range(int from, int to) {
    std::vector<int> v;
    const int step = from <= to ? 1 : -1;
    for (int i = from;; i += step) {
        v.push_back(i);
        if (i == to) break;
    }
    return v;
}

/// Eyes: brow arc 18..27 closed through 17, 16, 2, 1.
/// Nose: brow inner ends 22, 23; ridge 28..31; base 32..36; eye inner
/// corners 40, 43 give the width.
/// Mouth: ellipse through 49, 51-53, 55, 57-59.
inline RegionRecipes default_recipes() {
    RegionRecipes r;
    r.eyes = {RegionKind::Eyes, {{"top", index_range(18, 27)}, {"bottom", {17, 16, 2, 1}}}};
    r.nose = {RegionKind::Nose,
              {{"top", {22, 23}}, {"ridge", index_range(28, 31)}, {"base", index_range(32, 36)}, {"width", {40, 43}}}};
    r.mouth = {RegionKind::Mouth, {{"ellipse", {49, 51, 52, 53, 55, 57, 58, 59}}}};
    return r;
}

namespace recipe_file {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<int> parse_index_list(std::string_view text, const std::string& where) {
    std::vector<int> out;
    std::stringstream ss{std::string(text)};
    std::string item;
    auto to_int = [&](const std::string& s) {
        try {
            std::size_t used = 0;
            const int v = std::stoi(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
            if (v < 1 || v > kLandmarkCount)
                throw Error(ErrorKind::ConfigError, where + ": landmark " + s + " outside [1,68]");
            return v;
        } catch (const std::logic_error&) {
            throw Error(ErrorKind::ConfigError, where + ": '" + s + "' is not a landmark index");
        }
    };
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        const auto dash = item.find('-', 1);
        if (dash == std::string::npos) {
            out.push_back(to_int(item));
        } else {
            const auto r = index_range(to_int(trim(item.substr(0, dash))), to_int(trim(item.substr(dash + 1))));
            out.insert(out.end(), r.begin(), r.end());
        }
    }
    if (out.empty()) throw Error(ErrorKind::ConfigError, where + ": empty index list");
    return out;
}

/// Text override format, one `region.role = list` per line, e.g.
///   eyes.top = 18-27
///   eyes.bottom = 17,16,2,1
/// A region mentioned in the file replaces that region's default roles
/// entirely; regions not mentioned keep their defaults.
inline RegionRecipes parse(std::istream& in) {
    RegionRecipes base = default_recipes();
    std::map<RegionKind, RegionRecipe> overrides;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = "recipe line " + std::to_string(line_no);
        const auto eq = line.find('=');
        const auto dot = line.find('.');
        if (eq == std::string::npos || dot == std::string::npos || dot > eq)
            throw Error(ErrorKind::ConfigError, where + ": expected 'region.role = indices'");
        const RegionKind kind = parse_region(trim(line.substr(0, dot)));
        if (kind == RegionKind::Face || kind == RegionKind::Rest)
            throw Error(ErrorKind::ConfigError, where + ": " + std::string(region_name(kind)) + " has no recipe");
        const std::string role = trim(line.substr(dot + 1, eq - dot - 1));
        if (role.empty()) throw Error(ErrorKind::ConfigError, where + ": empty role name");
        auto& rec = overrides[kind];
        rec.kind = kind;
        rec.roles.emplace_back(role, parse_index_list(line.substr(eq + 1), where));
    }
    for (auto& [kind, rec] : overrides) base.get(kind) = rec;
    return base;
}

inline std::string serialize(const RegionRecipes& r) {
    std::string out;
    for (auto k : {RegionKind::Eyes, RegionKind::Nose, RegionKind::Mouth}) {
        std::string name(region_name(k));
        std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
        for (const auto& [role, idx] : r.get(k).roles) {
            out += name + "." + role + " = ";
            for (std::size_t i = 0; i < idx.size(); ++i) out += (i ? "," : "") + std::to_string(idx[i]);
            out += "\n";
        }
    }
    return out;
}

inline RegionRecipes load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::IoError, "cannot open recipe file " + path.string());
    return parse(in);
}

} // namespace recipe_file

struct RegionMask {
    geometry::Bitmap bits;
    RegionKind kind = RegionKind::Eyes;

    Canvas canvas() const { return bits.canvas; }
    friend bool operator==(const RegionMask&, const RegionMask&) = default;
};

struct FaceCrop {
    Image pixels;
    RegionKind region = RegionKind::Face;
    std::string source_ref;

    friend bool operator==(const FaceCrop&, const FaceCrop&) = default;
};

inline std::vector<Point2> recipe_points(const LandmarkSet& lm, const RegionRecipe& recipe) {
    std::vector<Point2> pts;
    for (int idx : recipe.all_indices()) pts.push_back(lm.point(idx));
    return pts;
}

/// Outline polygon for polygon-shaped regions. Eyes keep the listed vertex
/// order; the nose outline is the convex hull of its recipe points, which
/// keeps the ridge points interior and the outline simple.
inline std::vector<Point2> region_outline(const LandmarkSet& lm, const RegionRecipe& recipe) {
    auto pts = recipe_points(lm, recipe);
    if (recipe.kind == RegionKind::Nose) return geometry::convex_hull(std::move(pts));
    return pts;
}

/// Ellipse used for the mouth: direct conic fit, falling back to the
/// minimum enclosing ellipse when the fit is not an ellipse.
inline geometry::Ellipse mouth_ellipse(const LandmarkSet& lm, const RegionRecipe& recipe) {
    const auto pts = recipe_points(lm, recipe);
    if (auto e = geometry::fit_ellipse_direct(pts)) return *e;
    if (auto e = geometry::min_enclosing_ellipse(pts)) return *e;
    throw Error(ErrorKind::DegenerateGeometry, "mouth points of frame '" + lm.frame_ref() + "' admit no ellipse");
}

inline RegionMask build_region_mask(const LandmarkSet& lm, RegionKind kind,
                                    const RegionRecipes& recipes = default_recipes()) {
    if (kind == RegionKind::Face || kind == RegionKind::Rest)
        throw std::invalid_argument("build_region_mask: " + std::string(region_name(kind)) +
                                    " is not landmark-defined");
    const auto& recipe = recipes.get(kind);
    const std::string what = std::string(region_name(kind)) + " of frame '" + lm.frame_ref() + "'";
    if (kind == RegionKind::Mouth) {
        const auto e = mouth_ellipse(lm, recipe);
        if (!(e.area() >= 1.0)) throw Error(ErrorKind::DegenerateGeometry, what + ": ellipse area below one pixel");
        return {geometry::rasterize_ellipse(e, lm.canvas()), kind};
    }
    const auto outline = region_outline(lm, recipe);
    if (outline.size() < 3 || std::abs(geometry::signed_area(outline)) < 1.0)
        throw Error(ErrorKind::DegenerateGeometry, what + ": polygon area below one pixel");
    return {geometry::rasterize_polygon(outline, lm.canvas()), kind};
}

/// Rest = canvas minus the union of the three landmark regions.
inline RegionMask compose_rest_mask(const RegionMask& eyes, const RegionMask& nose, const RegionMask& mouth) {
    if (!(eyes.canvas() == nose.canvas() && eyes.canvas() == mouth.canvas()))
        throw Error(ErrorKind::CanvasMismatch, "region masks have different canvases");
    RegionMask rest{geometry::Bitmap(eyes.canvas()), RegionKind::Rest};
    for (std::size_t i = 0; i < rest.bits.bits.size(); ++i)
        rest.bits.bits[i] = !(eyes.bits.bits[i] | nose.bits.bits[i] | mouth.bits.bits[i]);
    return rest;
}

/// Keeps pixels under the mask and blacks out everything else, at the
/// crop's own resolution.
inline FaceCrop apply_mask(const FaceCrop& crop, const RegionMask& mask) {
    if (!(crop.pixels.canvas() == mask.canvas()))
        throw Error(ErrorKind::CanvasMismatch, "crop and mask sizes differ");
    FaceCrop out{Image(crop.pixels.height, crop.pixels.width, crop.pixels.channels), mask.kind, crop.source_ref};
    const int ch = crop.pixels.channels;
    for (std::size_t p = 0; p < mask.bits.bits.size(); ++p) {
        if (!mask.bits.bits[p]) continue;
        for (int c = 0; c < ch; ++c) out.pixels.data[p * ch + c] = crop.pixels.data[p * ch + c];
    }
    return out;
}

struct RegionMasks {
    RegionMask eyes, nose, mouth, rest;

    const RegionMask& get(RegionKind k) const {
        switch (k) {
        case RegionKind::Eyes: return eyes;
        case RegionKind::Nose: return nose;
        case RegionKind::Mouth: return mouth;
        case RegionKind::Rest: return rest;
        default: throw std::invalid_argument("Face has no mask");
        }
    }
};

inline RegionMasks build_all_masks(const LandmarkSet& lm, const RegionRecipes& recipes = default_recipes()) {
    RegionMasks m;
    m.eyes = build_region_mask(lm, RegionKind::Eyes, recipes);
    m.nose = build_region_mask(lm, RegionKind::Nose, recipes);
    m.mouth = build_region_mask(lm, RegionKind::Mouth, recipes);
    m.rest = compose_rest_mask(m.eyes, m.nose, m.mouth);
    return m;
}

/// All five inputs of the evaluation framework for one crop: the untouched
/// face plus one masked copy per facial region.
inline std::map<RegionKind, FaceCrop> segment_face(const FaceCrop& crop, const LandmarkSet& lm,
                                                   const RegionRecipes& recipes = default_recipes()) {
    if (!(crop.pixels.canvas() == lm.canvas()))
        throw Error(ErrorKind::CanvasMismatch, "crop is " + std::to_string(crop.pixels.height) + "x" +
                                                   std::to_string(crop.pixels.width) + " but landmarks are for " +
                                                   std::to_string(lm.canvas().height) + "x" +
                                                   std::to_string(lm.canvas().width));
    const auto masks = build_all_masks(lm, recipes);
    std::map<RegionKind, FaceCrop> out;
    FaceCrop face = crop;
    face.region = RegionKind::Face;
    out.emplace(RegionKind::Face, std::move(face));
    for (auto k : kFacialRegions) out.emplace(k, apply_mask(crop, masks.get(k)));
    return out;
}

inline void save_mask(const std::filesystem::path& path, const RegionMask& mask) {
    pnm::write_bitmap(path, mask.canvas(), mask.bits.bits);
}

inline RegionMask load_mask(const std::filesystem::path& path, RegionKind kind) {
    RegionMask m;
    m.kind = kind;
    m.bits.bits = pnm::read_bitmap(path, m.bits.canvas);
    return m;
}

} // namespace dfeval
