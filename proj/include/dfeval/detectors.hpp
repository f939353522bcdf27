#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfeval/dataset.hpp"
#include "dfeval/error.hpp"
#include "dfeval/image.hpp"
#include "dfeval/log.hpp"
#include "dfeval/nn/autograd.hpp"
#include "dfeval/nn/optim.hpp"
#include "dfeval/regions.hpp"
#include "dfeval/rng.hpp"
#include "dfeval/types.hpp"

namespace dfeval::detectors {

using nn::ParamGroup;
using nn::Var;

enum class Architecture { TransferCnn, Capsule, TinyCnn };

inline std::string_view architecture_name(Architecture a) {
    switch (a) {
    case Architecture::TransferCnn: return "transfer_cnn";
    case Architecture::Capsule: return "capsule";
    case Architecture::TinyCnn: return "tiny_cnn";
    }
    return "?";
}

inline Architecture parse_architecture(std::string_view s) {
    if (s == "transfer_cnn") return Architecture::TransferCnn;
    if (s == "capsule") return Architecture::Capsule;
    if (s == "tiny_cnn") return Architecture::TinyCnn;
    throw Error(ErrorKind::ConfigError, "unknown architecture '" + std::string(s) +
                                            "' (expected transfer_cnn, capsule or tiny_cnn)");
}

enum class Mode { Train, Eval };

struct DetectorConfig {
    Architecture architecture = Architecture::TinyCnn;
    std::string database;
    RegionKind region = RegionKind::Face;
    int input_height = 32;
    int input_width = 32;
    std::uint64_t seed = 0;
    /// Loss weights for (real, fake). Unset: balanced from training counts.
    std::optional<std::array<double, 2>> class_weights;
    /// Channel widths; empty picks the architecture default.
    std::vector<int> widths;
    int routing_iterations = 2;

    friend bool operator==(const DetectorConfig&, const DetectorConfig&) = default;
};

inline nlohmann::json to_json(const DetectorConfig& c) {
    nlohmann::json j{{"architecture", std::string(architecture_name(c.architecture))},
                     {"database", c.database},
                     {"region", std::string(region_name(c.region))},
                     {"input_size", {c.input_height, c.input_width}},
                     {"seed", c.seed},
                     {"widths", c.widths},
                     {"routing_iterations", c.routing_iterations}};
    j["class_weights"] = c.class_weights ? nlohmann::json(*c.class_weights) : nlohmann::json("balanced");
    return j;
}

inline DetectorConfig config_from_json(const nlohmann::json& j) {
    DetectorConfig c;
    try {
        c.architecture = parse_architecture(j.at("architecture").get<std::string>());
        c.database = j.at("database").get<std::string>();
        c.region = parse_region(j.at("region").get<std::string>());
        c.input_height = j.at("input_size").at(0).get<int>();
        c.input_width = j.at("input_size").at(1).get<int>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.widths = j.value("widths", std::vector<int>{});
        c.routing_iterations = j.value("routing_iterations", 2);
        if (j.contains("class_weights") && j["class_weights"].is_array())
            c.class_weights = j["class_weights"].get<std::array<double, 2>>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::ConfigError, std::string("detector config: ") + e.what());
    }
    return c;
}

struct TrainSchedule {
    int stage1_epochs = 3;   ///< head only
    int stage2_epochs = 20;  ///< whole network
    double stage1_lr = 1e-3;
    double stage2_lr = 1e-4;
    int batch_size = 16;
    double train_fraction = 0.9;  ///< identity share of dev data used for fitting; rest validates

    friend bool operator==(const TrainSchedule&, const TrainSchedule&) = default;

    void validate() const {
        if (stage1_epochs < 0 || stage2_epochs < 0)
            throw Error(ErrorKind::ConfigError, "epoch counts must be non-negative");
        if (batch_size < 1) throw Error(ErrorKind::ConfigError, "batch size must be positive");
        if (!(stage1_lr > 0.0) || !(stage2_lr > 0.0))
            throw Error(ErrorKind::ConfigError, "learning rates must be positive");
        if (!(train_fraction > 0.0 && train_fraction < 1.0))
            throw Error(ErrorKind::ConfigError, "train fraction must be in (0,1)");
    }
};

inline nlohmann::json to_json(const TrainSchedule& s) {
    return {{"stage1_epochs", s.stage1_epochs}, {"stage2_epochs", s.stage2_epochs},
            {"stage1_lr", s.stage1_lr},         {"stage2_lr", s.stage2_lr},
            {"batch_size", s.batch_size},       {"train_fraction", s.train_fraction},
            {"selection", "best-validation-accuracy"}};
}

inline TrainSchedule schedule_from_json(const nlohmann::json& j) {
    TrainSchedule s;
    try {
        s.stage1_epochs = j.at("stage1_epochs").get<int>();
        s.stage2_epochs = j.at("stage2_epochs").get<int>();
        s.stage1_lr = j.at("stage1_lr").get<double>();
        s.stage2_lr = j.at("stage2_lr").get<double>();
        s.batch_size = j.value("batch_size", 16);
        s.train_fraction = j.value("train_fraction", 0.9);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::ConfigError, std::string("train schedule: ") + e.what());
    }
    return s;
}

struct NamedTensor {
    std::string name;
    ParamGroup group = ParamGroup::Backbone;
    std::vector<int> shape;
    std::vector<double> values;

    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Where backbone weights come from: `random-init`, or named tensors (for
/// example loaded from a checkpoint archive).
struct WeightSource {
    std::optional<std::vector<NamedTensor>> tensors;

    static WeightSource random_init() { return {}; }
    static WeightSource from_tensors(std::vector<NamedTensor> t) { return {std::move(t)}; }
    bool is_random() const { return !tensors.has_value(); }
};

struct BackboneOutput {
    Var features;   ///< last convolution stage, [C,h,w]
    Var embedding;  ///< what the head consumes
};

struct ForwardResult {
    Var features;
    Var output;  ///< logits (CNNs) or output capsule lengths (capsule), both [2]
};

class DetectorModel {
public:
    explicit DetectorModel(DetectorConfig config) : config_(std::move(config)) {
        if (config_.input_height < 8 || config_.input_width < 8)
            throw Error(ErrorKind::ConfigError, "input size must be at least 8x8");
    }
    virtual ~DetectorModel() = default;
    DetectorModel(const DetectorModel&) = delete;
    DetectorModel& operator=(const DetectorModel&) = delete;

    const DetectorConfig& config() const { return config_; }
    Mode mode() const { return mode_; }
    void set_mode(Mode m) { mode_ = m; }
    bool is_eval() const { return mode_ == Mode::Eval; }

    std::vector<nn::Parameter>& parameters() { return params_; }
    const std::vector<nn::Parameter>& parameters() const { return params_; }

    std::vector<nn::Parameter*> group(ParamGroup g) {
        std::vector<nn::Parameter*> out;
        for (auto& p : params_)
            if (p.group == g) out.push_back(&p);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.var->numel();
        return n;
    }

    std::vector<NamedTensor> snapshot(std::optional<ParamGroup> only = std::nullopt) const {
        std::vector<NamedTensor> out;
        for (const auto& p : params_)
            if (!only || p.group == *only) out.push_back({p.name, p.group, p.var->shape, p.var->value});
        return out;
    }

    /// Overwrites parameters from tensors with matching names and shapes.
    /// Every parameter of the selected groups must be present.
    void restore(const std::vector<NamedTensor>& tensors, std::set<ParamGroup> groups = {ParamGroup::Backbone,
                                                                                          ParamGroup::Head}) {
        std::map<std::string, const NamedTensor*> by_name;
        for (const auto& t : tensors) by_name[t.name] = &t;
        for (auto& p : params_) {
            if (!groups.count(p.group)) continue;
            auto it = by_name.find(p.name);
            if (it == by_name.end())
                throw Error(ErrorKind::IncompatibleWeights, "weight source lacks parameter '" + p.name + "'");
            if (it->second->shape != p.var->shape)
                throw Error(ErrorKind::IncompatibleWeights, "parameter '" + p.name + "' has shape " +
                                                                nn::shape_str(it->second->shape) + ", model expects " +
                                                                nn::shape_str(p.var->shape));
        }
        for (auto& p : params_)
            if (groups.count(p.group)) p.var->value = by_name.at(p.name)->values;
    }

    /// Resize to the configured input size, then scale each channel to [-1,1].
    Var prepare_input(const Image& crop) const {
        if (crop.empty() || crop.channels != 3)
            throw Error(ErrorKind::ShapeError, "detector input must be a non-empty 3-channel crop, got " +
                                                   std::to_string(crop.height) + "x" + std::to_string(crop.width) +
                                                   "x" + std::to_string(crop.channels));
        const Image r = resize_bilinear(crop, config_.input_height, config_.input_width);
        const int H = r.height, W = r.width;
        std::vector<double> v(static_cast<std::size_t>(3) * H * W);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    v[(static_cast<std::size_t>(c) * H + y) * W + x] = r.at(y, x, c) / 127.5 - 1.0;
        return nn::leaf(std::move(v), {3, H, W});
    }

    virtual std::string feature_layer() const = 0;
    virtual BackboneOutput backbone(const Var& input) const = 0;
    virtual Var head(const Var& embedding) const = 0;
    virtual Var loss(const Var& output, Label target, double weight) const = 0;
    virtual std::array<double, 2> probabilities(const Var& output) const = 0;
    /// Scalar whose gradient Grad-CAM follows.
    virtual Var target_score(const Var& output, Label target) const = 0;

    ForwardResult forward(const Var& input) const {
        auto b = backbone(input);
        return {b.features, head(b.embedding)};
    }

protected:
    /// Fresh two-way heads start small so initial predictions are not saturated.
    static constexpr double kHeadInitSd = 0.01;

    nn::Parameter& add(std::string name, ParamGroup g, std::vector<int> shape, int fan_in, Rng& rng,
                       bool bias = false, double sd = 0.0) {
        params_.push_back(nn::make_parameter(std::move(name), g, std::move(shape), fan_in, rng, bias, sd));
        return params_.back();
    }

    Var param(std::size_t index) const { return params_[index].var; }

    DetectorConfig config_;
    std::vector<nn::Parameter> params_;
    Mode mode_ = Mode::Train;
};

namespace detail {

inline std::vector<int> widths_or(const DetectorConfig& c, std::vector<int> fallback, std::size_t count) {
    const auto& w = c.widths.empty() ? fallback : c.widths;
    if (w.size() != count)
        throw Error(ErrorKind::ConfigError, std::string(architecture_name(c.architecture)) + " needs " +
                                                std::to_string(count) + " widths");
    for (int x : w)
        if (x < 1) throw Error(ErrorKind::ConfigError, "widths must be positive");
    return w;
}

/// Shared two-way softmax head over a pooled embedding.
class SoftmaxHeadModel : public DetectorModel {
public:
    using DetectorModel::DetectorModel;

    Var loss(const Var& output, Label target, double weight) const override {
        return nn::softmax_cross_entropy(output, static_cast<int>(target), weight);
    }
    std::array<double, 2> probabilities(const Var& output) const override {
        const auto p = nn::softmax(output->value);
        return {p[0], p[1]};
    }
    Var target_score(const Var& output, Label target) const override {
        return nn::select(output, static_cast<int>(target));
    }
};

struct SepConv {
    std::size_t dw, pw, pw_bias;
};

} // namespace detail

/// Desk-scale backbone: four blocks of depthwise 3x3 + pointwise 1x1 + ReLU +
/// 2x2 max pool, global average pooling, and a two-way linear head.
class TinyCnn final : public detail::SoftmaxHeadModel {
public:
    static constexpr int kBlocks = 4;

    explicit TinyCnn(DetectorConfig config) : SoftmaxHeadModel(std::move(config)) {
        widths_ = detail::widths_or(config_, {48, 96, 192, 384}, kBlocks);
        if (config_.input_height < 16 || config_.input_width < 16)
            throw Error(ErrorKind::ConfigError, "tiny_cnn needs inputs of at least 16x16");
        Rng rng(mix_seed(config_.seed, 0x7c11));
        int in = 3;
        for (int b = 0; b < kBlocks; ++b) {
            const std::string pre = "block" + std::to_string(b + 1) + ".";
            blocks_.push_back({params_.size(), params_.size() + 1, params_.size() + 2});
            add(pre + "depthwise.weight", ParamGroup::Backbone, {in, 1, 3, 3}, 9, rng);
            add(pre + "pointwise.weight", ParamGroup::Backbone, {widths_[b], in, 1, 1}, in, rng);
            add(pre + "pointwise.bias", ParamGroup::Backbone, {widths_[b]}, 1, rng, true);
            in = widths_[b];
        }
        fc_ = params_.size();
        add("head.fc.weight", ParamGroup::Head, {2, in}, in, rng, false, kHeadInitSd);
        add("head.fc.bias", ParamGroup::Head, {2}, 1, rng, true);
    }

    std::string feature_layer() const override { return "block4.relu"; }

    BackboneOutput backbone(const Var& x) const override {
        Var h = x;
        Var features;
        for (int b = 0; b < kBlocks; ++b) {
            const auto& s = blocks_[static_cast<std::size_t>(b)];
            const int c = h->shape[0];
            h = nn::conv2d(h, param(s.dw), nullptr, {1, 1, c});
            h = nn::relu(nn::conv2d(h, param(s.pw), param(s.pw_bias)));
            if (b == kBlocks - 1) features = h;
            h = nn::maxpool2(h);
        }
        return {features, nn::global_avg_pool(h)};
    }

    Var head(const Var& e) const override { return nn::linear(e, param(fc_), param(fc_ + 1)); }

private:
    std::vector<int> widths_;
    std::vector<detail::SepConv> blocks_;
    std::size_t fc_ = 0;
};

/// Reduced separable-convolution network in the style of Xception: a
/// convolutional stem, two residual blocks of separable convolutions with
/// strided 1x1 shortcuts, a separable exit convolution, global average
/// pooling and a replaceable two-way head.
class TransferCnn final : public detail::SoftmaxHeadModel {
public:
    explicit TransferCnn(DetectorConfig config) : SoftmaxHeadModel(std::move(config)) {
        w_ = detail::widths_or(config_, {16, 32, 64, 128}, 4);
        if (config_.input_height % 8 || config_.input_width % 8)
            throw Error(ErrorKind::ConfigError, "transfer_cnn needs input sides divisible by 8");
        Rng rng(mix_seed(config_.seed, 0x7c12));
        stem_ = params_.size();
        add("stem.conv.weight", ParamGroup::Backbone, {w_[0], 3, 3, 3}, 27, rng);
        add("stem.conv.bias", ParamGroup::Backbone, {w_[0]}, 1, rng, true);
        for (int b = 0; b < 2; ++b) {
            const std::string pre = "block" + std::to_string(b + 1) + ".";
            const int in = w_[static_cast<std::size_t>(b)], out = w_[static_cast<std::size_t>(b) + 1];
            Block blk;
            blk.sep1 = sep(pre + "sep1.", in, out, rng);
            blk.sep2 = sep(pre + "sep2.", out, out, rng);
            blk.shortcut = params_.size();
            add(pre + "shortcut.weight", ParamGroup::Backbone, {out, in, 1, 1}, in, rng);
            add(pre + "shortcut.bias", ParamGroup::Backbone, {out}, 1, rng, true);
            blocks_.push_back(blk);
        }
        exit_ = sep("exit.sep.", w_[2], w_[3], rng);
        fc_ = params_.size();
        add("head.fc.weight", ParamGroup::Head, {2, w_[3]}, w_[3], rng, false, kHeadInitSd);
        add("head.fc.bias", ParamGroup::Head, {2}, 1, rng, true);
    }

    std::string feature_layer() const override { return "exit.relu"; }

    BackboneOutput backbone(const Var& x) const override {
        Var h = nn::maxpool2(nn::relu(nn::conv2d(x, param(stem_), param(stem_ + 1), {1, 1, 1})));
        for (const auto& blk : blocks_) {
            Var r = nn::relu(apply(blk.sep1, h));
            Var m = nn::maxpool2(apply(blk.sep2, r));
            Var sc = nn::conv2d(h, param(blk.shortcut), param(blk.shortcut + 1), {2, 0, 1});
            h = nn::relu(nn::add(m, sc));
        }
        Var features = nn::relu(apply(exit_, h));
        return {features, nn::global_avg_pool(features)};
    }

    Var head(const Var& e) const override { return nn::linear(e, param(fc_), param(fc_ + 1)); }

private:
    struct Block {
        detail::SepConv sep1, sep2;
        std::size_t shortcut = 0;
    };

    detail::SepConv sep(const std::string& pre, int in, int out, Rng& rng) {
        detail::SepConv s{params_.size(), params_.size() + 1, params_.size() + 2};
        add(pre + "depthwise.weight", ParamGroup::Backbone, {in, 1, 3, 3}, 9, rng);
        add(pre + "pointwise.weight", ParamGroup::Backbone, {out, in, 1, 1}, in, rng);
        add(pre + "pointwise.bias", ParamGroup::Backbone, {out}, 1, rng, true);
        return s;
    }

    Var apply(const detail::SepConv& s, const Var& h) const {
        Var d = nn::conv2d(h, param(s.dw), nullptr, {1, 1, h->shape[0]});
        return nn::conv2d(d, param(s.pw), param(s.pw_bias));
    }

    std::vector<int> w_;
    std::size_t stem_ = 0, fc_ = 0;
    std::vector<Block> blocks_;
    detail::SepConv exit_{};
};

/// VGG-style feature extractor truncated after its third max-pooling stage
/// (2, 2 and 4 3x3 convolutions per stage), followed by primary capsules
/// (conv, ReLU, statistics pooling, linear projection, squash) and output
/// capsules obtained by dynamic routing. Only the capsules are trainable.
class CapsuleNet final : public DetectorModel {
public:
    static constexpr int kPrimaryCapsules = 10;
    static constexpr int kOutputCapsules = 2;
    static constexpr int kPrimaryDim = 8;
    static constexpr int kOutputDim = 4;
    static constexpr std::array<int, 3> kConvsPerStage = {2, 2, 4};

    explicit CapsuleNet(DetectorConfig config) : DetectorModel(std::move(config)) {
        w_ = detail::widths_or(config_, {8, 16, 32}, 3);
        if (config_.input_height % 8 || config_.input_width % 8)
            throw Error(ErrorKind::ConfigError, "capsule needs input sides divisible by 8");
        if (config_.routing_iterations < 1) throw Error(ErrorKind::ConfigError, "routing iterations must be >= 1");
        Rng rng(mix_seed(config_.seed, 0x7c13));
        int in = 3;
        for (std::size_t s = 0; s < kConvsPerStage.size(); ++s)
            for (int k = 0; k < kConvsPerStage[s]; ++k) {
                const std::string pre = "features.stage" + std::to_string(s + 1) + ".conv" + std::to_string(k + 1) + ".";
                convs_.push_back({params_.size(), s});
                add(pre + "weight", ParamGroup::Backbone, {w_[s], in, 3, 3}, in * 9, rng);
                add(pre + "bias", ParamGroup::Backbone, {w_[s]}, 1, rng, true);
                in = w_[s];
            }
        for (int c = 0; c < kPrimaryCapsules; ++c) {
            const std::string pre = "capsules.primary" + std::to_string(c + 1) + ".";
            primary_.push_back(params_.size());
            add(pre + "conv.weight", ParamGroup::Head, {kPrimaryDim, in, 3, 3}, in * 9, rng);
            add(pre + "conv.bias", ParamGroup::Head, {kPrimaryDim}, 1, rng, true);
            add(pre + "proj.weight", ParamGroup::Head, {kPrimaryDim, 2 * kPrimaryDim}, 2 * kPrimaryDim, rng);
            add(pre + "proj.bias", ParamGroup::Head, {kPrimaryDim}, 1, rng, true);
        }
        route_ = params_.size();
        add("capsules.routing.weight", ParamGroup::Head, {kPrimaryCapsules, kOutputCapsules, kOutputDim, kPrimaryDim},
            kPrimaryDim, rng);
    }

    int primary_capsule_count() const { return kPrimaryCapsules; }
    int output_capsule_count() const { return kOutputCapsules; }
    int feature_pool_stages() const { return static_cast<int>(kConvsPerStage.size()); }

    std::string feature_layer() const override { return "features.stage3.conv4.relu"; }

    BackboneOutput backbone(const Var& x) const override {
        Var h = x;
        Var features;
        for (std::size_t i = 0; i < convs_.size(); ++i) {
            h = nn::relu(nn::conv2d(h, param(convs_[i].weight), param(convs_[i].weight + 1), {1, 1, 1}));
            const bool stage_end = i + 1 == convs_.size() || convs_[i + 1].stage != convs_[i].stage;
            if (stage_end) {
                if (i + 1 == convs_.size()) features = h;
                h = nn::maxpool2(h);
            }
        }
        return {features, h};
    }

    Var head(const Var& e) const override {
        std::vector<Var> caps;
        for (std::size_t p : primary_) {
            Var c = nn::relu(nn::conv2d(e, param(p), param(p + 1), {1, 1, 1}));
            caps.push_back(nn::linear(nn::stats_pool(c), param(p + 2), param(p + 3)));
        }
        Var u = nn::squash(nn::reshape(nn::concat(caps), {kPrimaryCapsules, kPrimaryDim}));
        Var v = nn::dynamic_routing(u, param(route_), config_.routing_iterations);
        return nn::row_norms(v);
    }

    Var loss(const Var& output, Label target, double weight) const override {
        return nn::margin_loss(output, static_cast<int>(target), weight);
    }

    /// Output capsule lengths normalized to sum to one.
    std::array<double, 2> probabilities(const Var& output) const override {
        const double r = output->value[0], f = output->value[1];
        if (!(r + f > 0.0)) return {0.5, 0.5};
        return {r / (r + f), f / (r + f)};
    }

    Var target_score(const Var& output, Label target) const override {
        return nn::select(output, static_cast<int>(target));
    }

private:
    struct ConvRef {
        std::size_t weight;
        std::size_t stage;
    };
    std::vector<int> w_;
    std::vector<ConvRef> convs_;
    std::vector<std::size_t> primary_;
    std::size_t route_ = 0;
};

inline std::unique_ptr<DetectorModel> make_model(const DetectorConfig& config) {
    switch (config.architecture) {
    case Architecture::TinyCnn: return std::make_unique<TinyCnn>(config);
    case Architecture::TransferCnn: return std::make_unique<TransferCnn>(config);
    case Architecture::Capsule: return std::make_unique<CapsuleNet>(config);
    }
    throw Error(ErrorKind::ConfigError, "unknown architecture");
}

namespace detail {

inline std::unique_ptr<DetectorModel> build_with_source(const DetectorConfig& config, const WeightSource& source) {
    auto model = make_model(config);
    if (!source.is_random()) model->restore(*source.tensors, {ParamGroup::Backbone});
    return model;
}

} // namespace detail

/// Backbone copied from `source` (or seeded random init), fresh two-way head.
inline std::unique_ptr<DetectorModel> build_transfer_detector(const DetectorConfig& config,
                                                              const WeightSource& source) {
    if (config.architecture == Architecture::Capsule)
        throw Error(ErrorKind::ConfigError, "build_transfer_detector: use build_capsule_detector for capsule models");
    return detail::build_with_source(config, source);
}

inline std::unique_ptr<DetectorModel> build_capsule_detector(const DetectorConfig& config,
                                                             const WeightSource& source) {
    if (config.architecture != Architecture::Capsule)
        throw Error(ErrorKind::ConfigError, "build_capsule_detector needs architecture capsule");
    return detail::build_with_source(config, source);
}

// ---------------------------------------------------------------------------
// Training

struct TrainingSample {
    std::vector<double> input;  ///< normalized [3,H,W]
    Label label = Label::Real;
    std::string identity;
    std::string unit_id;
};

inline TrainingSample make_training_sample(const DetectorModel& model, const FaceCrop& crop, Label label,
                                           std::string identity, std::string unit_id) {
    return {model.prepare_input(crop.pixels)->value, label, std::move(identity), std::move(unit_id)};
}

struct EpochRecord {
    int epoch = 0;  ///< 1-based across both stages
    int stage = 0;
    double train_loss = 0.0;
    double validation_accuracy = 0.0;

    friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct Checkpoint {
    int epoch = 0;  ///< 0 = untrained initial model
    int stage = 0;
    double validation_accuracy = 0.0;
    std::vector<NamedTensor> parameters;
    DetectorConfig config;
    TrainSchedule schedule;
    std::string data_hash;
    std::vector<EpochRecord> trace;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// 1-based epoch with the highest accuracy; the earliest wins ties.
/// Returns 0 for an empty trace.
inline int select_best_epoch(std::span<const double> accuracies) {
    int best = 0;
    for (std::size_t i = 0; i < accuracies.size(); ++i)
        if (best == 0 || accuracies[i] > accuracies[static_cast<std::size_t>(best) - 1]) best = static_cast<int>(i) + 1;
    return best;
}

struct TrainHooks {
    std::function<void(int stage, const DetectorModel&)> on_stage_end;
    std::function<void(const EpochRecord&)> on_epoch_end;
};

inline std::string data_hash(const std::vector<TrainingSample>& data) {
    Fnv1a h;
    for (const auto& s : data) {
        h.update(s.input.data(), s.input.size() * sizeof(double));
        const int l = static_cast<int>(s.label);
        h.update(&l, sizeof(l));
        h.update(s.identity.data(), s.identity.size());
        h.update(s.unit_id.data(), s.unit_id.size());
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h.value()));
    return buf;
}

namespace detail {

struct StagePlan {
    int stage;
    int epochs;
    double lr;
    bool backbone_trainable;
};

/// Identity-disjoint internal split of the development data.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>>
split_train_validation(const std::vector<TrainingSample>& data, double train_fraction, std::uint64_t seed) {
    std::set<std::string> id_set;
    for (const auto& s : data) id_set.insert(s.identity);
    std::vector<std::string> ids(id_set.begin(), id_set.end());
    std::vector<std::size_t> all(data.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    if (ids.size() < 2) {
        warn("development data has a single identity; validation reuses the training samples");
        return {all, all};
    }
    Rng rng(mix_seed(seed, 0x5a11));
    rng.shuffle(std::span<std::string>(ids));
    const std::size_t n_train = dataset::dev_identity_count(ids.size(), train_fraction);
    std::set<std::string> train_ids(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<std::size_t> tr, va;
    for (std::size_t i = 0; i < data.size(); ++i) (train_ids.count(data[i].identity) ? tr : va).push_back(i);
    return {tr, va};
}

inline std::array<double, 2> class_weights(const DetectorConfig& c, const std::vector<TrainingSample>& data,
                                           const std::vector<std::size_t>& idx) {
    if (c.class_weights) return *c.class_weights;
    double n[2] = {0, 0};
    for (auto i : idx) n[static_cast<int>(data[i].label)] += 1;
    const double total = n[0] + n[1];
    return {n[0] > 0 ? total / (2 * n[0]) : 1.0, n[1] > 0 ? total / (2 * n[1]) : 1.0};
}

class Trainer {
public:
    Trainer(DetectorModel& model, const std::vector<TrainingSample>& data, const TrainSchedule& schedule,
            const TrainHooks& hooks)
        : model_(model), data_(data), schedule_(schedule), hooks_(hooks) {}

    Checkpoint run(const std::vector<StagePlan>& stages) {
        schedule_.validate();
        if (data_.empty()) throw Error(ErrorKind::EmptyDataset, "no development samples to train on");
        const auto& cfg = model_.config();
        const std::size_t expect = static_cast<std::size_t>(3) * cfg.input_height * cfg.input_width;
        for (const auto& s : data_)
            if (s.input.size() != expect)
                throw Error(ErrorKind::ShapeError, "training sample " + s.unit_id + " has the wrong input size");
        std::tie(train_, val_) = split_train_validation(data_, schedule_.train_fraction, cfg.seed);
        if (train_.empty()) throw Error(ErrorKind::EmptyDataset, "internal training split is empty");
        weights_ = class_weights(cfg, data_, train_);

        Checkpoint best;
        best.config = cfg;
        best.schedule = schedule_;
        best.data_hash = data_hash(data_);
        bool have_best = false;
        int epoch = 0;
        const Mode saved_mode = model_.mode();
        model_.set_mode(Mode::Train);
        for (const auto& st : stages) {
            set_trainable(st.backbone_trainable);
            nn::Adam opt(st.lr);
            if (!st.backbone_trainable) cache_embeddings();
            for (int e = 0; e < st.epochs; ++e) {
                ++epoch;
                const double loss = train_epoch(opt, epoch, st);
                const double acc = validation_accuracy(!st.backbone_trainable);
                EpochRecord rec{epoch, st.stage, loss, acc};
                best.trace.push_back(rec);
                if (hooks_.on_epoch_end) hooks_.on_epoch_end(rec);
                if (!have_best || acc > best.validation_accuracy) {
                    have_best = true;
                    best.epoch = epoch;
                    best.stage = st.stage;
                    best.validation_accuracy = acc;
                    best.parameters = model_.snapshot();
                }
            }
            cache_.clear();
            if (hooks_.on_stage_end) hooks_.on_stage_end(st.stage, model_);
        }
        set_trainable(true);
        if (!have_best) {
            best.validation_accuracy = validation_accuracy(false);
            best.parameters = model_.snapshot();
        }
        model_.restore(best.parameters);
        model_.set_mode(saved_mode);
        return best;
    }

private:
    void set_trainable(bool backbone) {
        for (auto& p : model_.parameters())
            p.var->requires_grad = p.group == ParamGroup::Head || backbone;
    }

    void cache_embeddings() {
        nn::NoGradScope ng;
        cache_.assign(data_.size(), {});
        const auto& cfg = model_.config();
        for (std::size_t i = 0; i < data_.size(); ++i) {
            auto b = model_.backbone(nn::leaf(data_[i].input, {3, cfg.input_height, cfg.input_width}));
            cache_[i] = b.embedding->value;
            cache_shape_ = b.embedding->shape;
        }
    }

    Var output_for(std::size_t i, bool use_cache) const {
        if (use_cache && !cache_.empty()) return model_.head(nn::leaf(cache_[i], cache_shape_));
        const auto& cfg = model_.config();
        return model_.forward(nn::leaf(data_[i].input, {3, cfg.input_height, cfg.input_width})).output;
    }

    double train_epoch(nn::Adam& opt, int epoch, const StagePlan& st) {
        std::vector<std::size_t> order = train_;
        Rng rng(mix_seed(model_.config().seed, 0x1000 + static_cast<std::uint64_t>(epoch)));
        rng.shuffle(std::span<std::size_t>(order));
        std::vector<nn::Parameter*> trainable;
        for (auto& p : model_.parameters())
            if (p.var->requires_grad) trainable.push_back(&p);
        const std::size_t B = static_cast<std::size_t>(schedule_.batch_size);
        double total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += B) {
            const std::size_t end = std::min(order.size(), start + B);
            for (auto* p : trainable) {
                auto& g = p->var->ensure_grad();
                std::fill(g.begin(), g.end(), 0.0);
            }
            for (std::size_t k = start; k < end; ++k) {
                const auto& s = data_[order[k]];
                Var out = output_for(order[k], !st.backbone_trainable);
                Var l = model_.loss(out, s.label, weights_[static_cast<int>(s.label)]);
                const double lv = l->value[0];
                if (!std::isfinite(lv))
                    throw Error(ErrorKind::NonFiniteLoss, "non-finite loss " + std::to_string(lv) + " at epoch " +
                                                              std::to_string(epoch) + " (stage " +
                                                              std::to_string(st.stage) + "), sample " + s.unit_id);
                total += lv;
                const std::vector<double> seed{1.0 / static_cast<double>(end - start)};
                nn::backward(l, &seed);
            }
            for (auto* p : trainable)
                for (double g : p->var->grad)
                    if (!std::isfinite(g))
                        throw Error(ErrorKind::NonFiniteLoss, "non-finite gradient in '" + p->name + "' at epoch " +
                                                                  std::to_string(epoch));
            opt.step(trainable);
        }
        for (auto& p : model_.parameters()) p.var->grad.clear();
        return total / static_cast<double>(order.size());
    }

    double validation_accuracy(bool use_cache) const {
        nn::NoGradScope ng;
        std::size_t correct = 0;
        for (auto i : val_) {
            const auto p = model_.probabilities(output_for(i, use_cache));
            const Label pred = p[1] > 0.5 ? Label::Fake : Label::Real;
            if (pred == data_[i].label) ++correct;
        }
        return static_cast<double>(correct) / static_cast<double>(val_.size());
    }

    DetectorModel& model_;
    const std::vector<TrainingSample>& data_;
    TrainSchedule schedule_;
    TrainHooks hooks_;
    std::vector<std::size_t> train_, val_;
    std::array<double, 2> weights_{1.0, 1.0};
    std::vector<std::vector<double>> cache_;
    std::vector<int> cache_shape_;
};

} // namespace detail

/// Stage 1 trains the head with the backbone frozen; stage 2 trains all
/// parameters. The model is left holding the selected checkpoint.
inline Checkpoint train_transfer(DetectorModel& model, const std::vector<TrainingSample>& dev_data,
                                 const TrainSchedule& schedule, const TrainHooks& hooks = {}) {
    if (model.config().architecture == Architecture::Capsule)
        throw Error(ErrorKind::ConfigError, "train_transfer does not apply to capsule models; use train_capsule");
    return detail::Trainer(model, dev_data, schedule, hooks)
        .run({{1, schedule.stage1_epochs, schedule.stage1_lr, false},
              {2, schedule.stage2_epochs, schedule.stage2_lr, true}});
}

/// Only capsule parameters are trained, for stage1 + stage2 epochs (each at
/// its stage's learning rate); the feature extractor never changes.
inline Checkpoint train_capsule(DetectorModel& model, const std::vector<TrainingSample>& dev_data,
                                const TrainSchedule& schedule, const TrainHooks& hooks = {}) {
    if (model.config().architecture != Architecture::Capsule)
        throw Error(ErrorKind::ConfigError, "train_capsule needs a capsule model");
    return detail::Trainer(model, dev_data, schedule, hooks)
        .run({{1, schedule.stage1_epochs, schedule.stage1_lr, false},
              {2, schedule.stage2_epochs, schedule.stage2_lr, false}});
}

inline Checkpoint train(DetectorModel& model, const std::vector<TrainingSample>& dev_data,
                        const TrainSchedule& schedule, const TrainHooks& hooks = {}) {
    return model.config().architecture == Architecture::Capsule ? train_capsule(model, dev_data, schedule, hooks)
                                                                 : train_transfer(model, dev_data, schedule, hooks);
}

/// Probability of the fake class for one crop.
inline double predict(const DetectorModel& model, const FaceCrop& crop) {
    if (!model.is_eval()) throw Error(ErrorKind::ModeError, "predict needs a model in eval mode");
    nn::NoGradScope ng;
    const auto out = model.forward(model.prepare_input(crop.pixels)).output;
    return std::clamp(model.probabilities(out)[1], 0.0, 1.0);
}

} // namespace dfeval::detectors
