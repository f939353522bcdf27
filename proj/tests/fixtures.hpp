#pragma once

// Small synthetic inputs and numeric checks shared by the detector,
// explainability and acceptance tests.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dfeval/detectors.hpp"
#include "dfeval/explain.hpp"

namespace fixture {

using namespace dfeval;

/// Noise crop; fakes carry a bright square in the lower-centre quarter.
inline Image toy_crop(Rng& rng, int h, int w, bool fake) {
    Image img(h, w, 3);
    for (auto& v : img.data) v = static_cast<std::uint8_t>(60 + rng.below(60));
    if (fake)
        for (int y = h / 2; y < h * 3 / 4; ++y)
            for (int x = w * 3 / 8; x < w * 5 / 8; ++x)
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = 230;
    return img;
}

/// `ids` identities with `per_id` crops each, labels alternating.
inline std::vector<detectors::TrainingSample> toy_samples(const detectors::DetectorModel& model, int ids, int per_id,
                                                          std::uint64_t seed) {
    Rng rng(seed);
    std::vector<detectors::TrainingSample> out;
    const auto& c = model.config();
    for (int i = 0; i < ids; ++i)
        for (int k = 0; k < per_id; ++k) {
            const Label l = k % 2 ? Label::Fake : Label::Real;
            const FaceCrop crop{toy_crop(rng, c.input_height, c.input_width, l == Label::Fake), c.region, ""};
            out.push_back(detectors::make_training_sample(model, crop, l, "id" + std::to_string(i),
                                                          "id" + std::to_string(i) + "/f" + std::to_string(k)));
        }
    return out;
}

struct GradCheckResult {
    double worst_relative = 0.0;
    int checked = 0;
};

/// Central differences of the training loss with respect to `per_tensor`
/// scalars drawn from each of the first `tensors` parameter tensors, on every
/// sample in `inputs`. Relative error is |a-n| / max(|a|, |n|, floor).
inline GradCheckResult parameter_gradcheck(detectors::DetectorModel& model,
                                           const std::vector<detectors::TrainingSample>& inputs, int tensors,
                                           int per_tensor, std::uint64_t seed, double floor = 1e-4) {
    Rng rng(seed);
    const auto& c = model.config();
    auto loss_of = [&](const detectors::TrainingSample& s) {
        return model.loss(model.forward(nn::leaf(s.input, {3, c.input_height, c.input_width})).output, s.label, 1.0);
    };
    GradCheckResult r;
    auto& params = model.parameters();
    for (auto& p : params) p.var->requires_grad = true;
    for (const auto& s : inputs) {
        for (auto& p : params) p.var->grad.clear();
        nn::backward(loss_of(s));
        const int n = std::min<int>(tensors, static_cast<int>(params.size()));
        for (int t = 0; t < n; ++t) {
            auto& node = *params[static_cast<std::size_t>(t)].var;
            for (int k = 0; k < per_tensor; ++k) {
                const std::size_t idx = rng.below(node.numel());
                const double analytic = node.grad.empty() ? 0.0 : node.grad[idx];
                const double orig = node.value[idx];
                const double h = 1e-6 * std::max(1.0, std::abs(orig));
                double up, down;
                {
                    nn::NoGradScope ng;
                    node.value[idx] = orig + h;
                    up = loss_of(s)->value[0];
                    node.value[idx] = orig - h;
                    down = loss_of(s)->value[0];
                    node.value[idx] = orig;
                }
                const double numeric = (up - down) / (2 * h);
                const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
                r.worst_relative = std::max(r.worst_relative, std::abs(analytic - numeric) / denom);
                ++r.checked;
            }
        }
    }
    for (auto& p : params) p.var->grad.clear();
    return r;
}

/// Feature map = 1x1 convolution of the red channel with weight `gain`;
/// logits = (0, mean of the feature map). The fake-class gradient is uniform,
/// so the CAM is the rectified feature map scaled by its maximum.
struct ToyCam {
    double gain = 1.0;
    bool eval = true;
    bool expose_features = true;

    bool is_eval() const { return eval; }
    std::string feature_layer() const { return "toy.conv"; }
    nn::Var prepare_input(const Image& img) const {
        std::vector<double> v(static_cast<std::size_t>(img.height) * img.width);
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) v[static_cast<std::size_t>(y) * img.width + x] = img.at(y, x, 0) / 255.0;
        return nn::leaf(std::move(v), {1, img.height, img.width});
    }
    detectors::ForwardResult forward(const nn::Var& x) const {
        const auto a = nn::conv2d(x, nn::leaf({gain}, {1, 1, 1, 1}), nullptr);
        const auto out = nn::concat({nn::leaf({0.0}, {1}), nn::global_avg_pool(a)});
        return {expose_features ? a : nullptr, out};
    }
    nn::Var target_score(const nn::Var& out, Label t) const { return nn::select(out, static_cast<int>(t)); }
};

inline double max_abs_diff(const std::vector<detectors::NamedTensor>& a, const std::vector<detectors::NamedTensor>& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t k = 0; k < a[i].values.size(); ++k) d = std::max(d, std::abs(a[i].values[k] - b[i].values[k]));
    return d;
}

} // namespace fixture
