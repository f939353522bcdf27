#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfeval/detectors.hpp"
#include "dfeval/error.hpp"
#include "dfeval/image.hpp"
#include "dfeval/nn/autograd.hpp"
#include "dfeval/regions.hpp"
#include "dfeval/types.hpp"

namespace dfeval::explain {

/// Nonnegative map in [0,1] with the crop's dimensions.
struct Heatmap {
    int height = 0;
    int width = 0;
    std::vector<double> values;  ///< row-major
    Label target = Label::Fake;
    std::string layer;

    double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
    friend bool operator==(const Heatmap&, const Heatmap&) = default;
};

/// What Grad-CAM needs from a model: eval-mode flag, input preparation, a
/// forward pass exposing a convolutional feature layer, and a scalar target
/// score. DetectorModel satisfies it; so can small analytic test models.
template <typename M>
concept CamModel = requires(const M& m, const Image& img, const nn::Var& v, Label t) {
    { m.is_eval() } -> std::convertible_to<bool>;
    { m.prepare_input(img) } -> std::same_as<nn::Var>;
    { m.forward(v) } -> std::same_as<detectors::ForwardResult>;
    { m.target_score(v, t) } -> std::same_as<nn::Var>;
    { m.feature_layer() } -> std::convertible_to<std::string>;
};

/// Bilinear upsampling of a single-channel map (half-pixel centres).
inline std::vector<double> upsample_bilinear(const std::vector<double>& src, int sh, int sw, int oh, int ow) {
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    const double sy = static_cast<double>(sh) / oh, sx = static_cast<double>(sw) / ow;
    for (int y = 0; y < oh; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, sh - 1.0);
        const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, sh - 1);
        const double wy = fy - y0;
        for (int x = 0; x < ow; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, sw - 1.0);
            const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, sw - 1);
            const double wx = fx - x0;
            auto s = [&](int yy, int xx) { return src[static_cast<std::size_t>(yy) * sw + xx]; };
            out[static_cast<std::size_t>(y) * ow + x] =
                (1 - wy) * ((1 - wx) * s(y0, x0) + wx * s(y0, x1)) + wy * ((1 - wx) * s(y1, x0) + wx * s(y1, x1));
        }
    }
    return out;
}

/// Gradient-weighted class activation map of `target` at the model's
/// designated feature layer: channel weights are spatially averaged
/// gradients of the target score, the weighted channel sum is rectified,
/// upsampled to the crop size and divided by its maximum. The model's
/// parameters are not modified.
template <CamModel M>
Heatmap grad_cam(const M& model, const FaceCrop& crop, Label target) {
    if (!model.is_eval()) throw Error(ErrorKind::ModeError, "grad_cam needs a model in eval mode");
    nn::ForceGradScope force;
    nn::DetachParamsScope detach;
    const auto fr = model.forward(model.prepare_input(crop.pixels));
    if (!fr.features || fr.features->shape.size() != 3)
        throw Error(ErrorKind::NoConvLayer, "model exposes no convolutional feature layer");
    const nn::Var score = model.target_score(fr.output, target);
    nn::backward(score);

    const auto& A = *fr.features;
    const int K = A.shape[0], h = A.shape[1], w = A.shape[2];
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    std::vector<double> cam(hw, 0.0);
    if (!A.grad.empty()) {
        for (int k = 0; k < K; ++k) {
            double alpha = 0.0;
            for (std::size_t i = 0; i < hw; ++i) alpha += A.grad[k * hw + i];
            alpha /= static_cast<double>(hw);
            if (alpha == 0.0) continue;
            for (std::size_t i = 0; i < hw; ++i) cam[i] += alpha * A.value[k * hw + i];
        }
    }
    for (auto& v : cam) v = std::max(0.0, v);

    Heatmap hm;
    hm.height = crop.pixels.height;
    hm.width = crop.pixels.width;
    hm.target = target;
    hm.layer = model.feature_layer();
    hm.values = upsample_bilinear(cam, h, w, hm.height, hm.width);
    const double mx = *std::max_element(hm.values.begin(), hm.values.end());
    for (auto& v : hm.values) v = mx > 0.0 ? std::clamp(v / mx, 0.0, 1.0) : 0.0;
    return hm;
}

/// Perceptually uniform colour map (viridis), 9 anchors interpolated linearly.
inline std::array<std::uint8_t, 3> viridis(double t) {
    static constexpr std::array<std::array<double, 3>, 9> lut = {{{68, 1, 84},
                                                                  {71, 44, 122},
                                                                  {59, 81, 139},
                                                                  {44, 113, 142},
                                                                  {33, 144, 141},
                                                                  {39, 173, 129},
                                                                  {92, 200, 99},
                                                                  {170, 220, 50},
                                                                  {253, 231, 37}}};
    t = std::clamp(t, 0.0, 1.0) * (lut.size() - 1);
    const std::size_t i = std::min(static_cast<std::size_t>(t), lut.size() - 2);
    const double f = t - static_cast<double>(i);
    std::array<std::uint8_t, 3> out{};
    for (int c = 0; c < 3; ++c)
        out[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(
            std::lround((1 - f) * lut[i][static_cast<std::size_t>(c)] + f * lut[i + 1][static_cast<std::size_t>(c)]));
    return out;
}

inline Image colorize(const Heatmap& hm) {
    Image out(hm.height, hm.width, 3);
    for (int y = 0; y < hm.height; ++y)
        for (int x = 0; x < hm.width; ++x) {
            const auto c = viridis(hm.at(y, x));
            for (int k = 0; k < 3; ++k) out.at(y, x, k) = c[static_cast<std::size_t>(k)];
        }
    return out;
}

/// (1 - alpha) * crop + alpha * colour-mapped heatmap. Grayscale crops are
/// expanded to RGB.
inline Image overlay(const Heatmap& hm, const FaceCrop& crop, double alpha = 0.5) {
    const Image& img = crop.pixels;
    if (img.height != hm.height || img.width != hm.width)
        throw Error(ErrorKind::CanvasMismatch, "heatmap is " + std::to_string(hm.height) + "x" +
                                                   std::to_string(hm.width) + " but crop is " +
                                                   std::to_string(img.height) + "x" + std::to_string(img.width));
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorKind::ConfigError, "overlay alpha must be in [0,1]");
    if (img.channels != 1 && img.channels != 3)
        throw Error(ErrorKind::ShapeError, "overlay needs a 1- or 3-channel crop");
    const Image colour = colorize(hm);
    Image out(img.height, img.width, 3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int k = 0; k < 3; ++k) {
                const double base = img.at(y, x, img.channels == 3 ? k : 0);
                const double v = (1.0 - alpha) * base + alpha * colour.at(y, x, k);
                out.at(y, x, k) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
    return out;
}

/// Share of heatmap mass inside a mask (0 for an all-zero heatmap).
inline double mass_inside(const Heatmap& hm, const geometry::Bitmap& mask) {
    if (mask.canvas.height != hm.height || mask.canvas.width != hm.width)
        throw Error(ErrorKind::CanvasMismatch, "mask and heatmap sizes differ");
    double in = 0.0, total = 0.0;
    for (std::size_t i = 0; i < hm.values.size(); ++i) {
        total += hm.values[i];
        if (mask.bits[i]) in += hm.values[i];
    }
    return total > 0.0 ? in / total : 0.0;
}

/// Writes `<stem>.pgm` (16-bit) and `<stem>.json` {model, target, layer}.
inline void save_heatmap(const std::filesystem::path& stem, const Heatmap& hm, const std::string& model_key) {
    pnm::write_gray16(stem.string() + ".pgm", {hm.height, hm.width}, hm.values);
    std::ofstream side(stem.string() + ".json", std::ios::binary);
    if (!side) throw Error(ErrorKind::IoError, "cannot write " + stem.string() + ".json");
    side << nlohmann::json{{"model", model_key}, {"target", std::string(label_name(hm.target))}, {"layer", hm.layer}}
                .dump(2)
         << '\n';
}

} // namespace dfeval::explain
