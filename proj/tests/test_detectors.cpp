#include <gtest/gtest.h>

#include "dfeval/detectors.hpp"
#include "fixtures.hpp"

using namespace dfeval;
using namespace dfeval::detectors;

namespace {

DetectorConfig cfg(Architecture a, int side = 16, std::uint64_t seed = 3) {
    DetectorConfig c;
    c.architecture = a;
    c.database = "toy";
    c.region = RegionKind::Mouth;
    c.input_height = c.input_width = side;
    c.seed = seed;
    return c;
}

DetectorConfig small(Architecture a, std::uint64_t seed = 3) {
    auto c = cfg(a, 16, seed);
    c.widths = a == Architecture::TinyCnn      ? std::vector<int>{6, 8, 10, 12}
               : a == Architecture::TransferCnn ? std::vector<int>{4, 6, 8, 10}
                                                : std::vector<int>{4, 6, 8};
    return c;
}

TrainSchedule quick(int s1, int s2) {
    TrainSchedule s;
    s.stage1_epochs = s1;
    s.stage2_epochs = s2;
    s.stage1_lr = 1e-2;
    s.stage2_lr = 3e-3;
    s.batch_size = 4;
    s.train_fraction = 0.75;
    return s;
}

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error raised";
    return ErrorKind::IoError;
}

std::unique_ptr<DetectorModel> build(const DetectorConfig& c, const WeightSource& src = WeightSource::random_init()) {
    return c.architecture == Architecture::Capsule ? build_capsule_detector(c, src) : build_transfer_detector(c, src);
}

FaceCrop crop_of(const Image& img) { return {img, RegionKind::Mouth, ""}; }

constexpr std::array kArchs{Architecture::TinyCnn, Architecture::TransferCnn, Architecture::Capsule};

} // namespace

TEST(Detector, TwoWayProbabilitiesSumToOne) {
    for (auto a : kArchs) {
        auto m = build(small(a));
        Rng rng(1);
        for (int i = 0; i < 5; ++i) {
            const auto out = m->forward(m->prepare_input(fixture::toy_crop(rng, 20, 24, i % 2))).output;
            ASSERT_EQ(out->numel(), 2u);
            const auto p = m->probabilities(out);
            EXPECT_NEAR(p[0] + p[1], 1.0, 1e-12) << architecture_name(a);
            EXPECT_GE(p[1], 0.0);
            EXPECT_LE(p[1], 1.0);
        }
    }
}

TEST(Detector, RandomInitIsSeedDeterministic) {
    for (auto a : kArchs) {
        EXPECT_EQ(build(small(a, 5))->snapshot(), build(small(a, 5))->snapshot());
        EXPECT_NE(build(small(a, 5))->snapshot(), build(small(a, 6))->snapshot());
    }
}

TEST(Detector, PretrainedSourceCopiesBackboneAndFreshensHead) {
    for (auto a : kArchs) {
        auto donor = build(small(a, 100));
        auto m = build(small(a, 7), WeightSource::from_tensors(donor->snapshot()));
        EXPECT_EQ(m->snapshot(ParamGroup::Backbone), donor->snapshot(ParamGroup::Backbone));
        EXPECT_NE(m->snapshot(ParamGroup::Head), donor->snapshot(ParamGroup::Head));
        EXPECT_EQ(m->snapshot(ParamGroup::Head), build(small(a, 7))->snapshot(ParamGroup::Head));
    }
}

TEST(Detector, IncompatibleWeightSource) {
    auto donor = build(small(Architecture::TinyCnn));
    auto c = small(Architecture::TinyCnn);
    c.widths = {6, 8, 10, 14};
    EXPECT_EQ(kind_of([&] { build(c, WeightSource::from_tensors(donor->snapshot())); }), ErrorKind::IncompatibleWeights);
    auto missing = donor->snapshot();
    missing.erase(missing.begin());
    EXPECT_EQ(kind_of([&] { build(small(Architecture::TinyCnn), WeightSource::from_tensors(missing)); }),
              ErrorKind::IncompatibleWeights);
    EXPECT_EQ(kind_of([&] { build(small(Architecture::TransferCnn), WeightSource::from_tensors(donor->snapshot())); }),
              ErrorKind::IncompatibleWeights);
}

TEST(Detector, CapsuleStructure) {
    auto m = make_model(cfg(Architecture::Capsule, 32));
    auto* caps = dynamic_cast<CapsuleNet*>(m.get());
    ASSERT_NE(caps, nullptr);
    EXPECT_EQ(caps->primary_capsule_count(), 10);
    EXPECT_EQ(caps->output_capsule_count(), 2);
    EXPECT_EQ(caps->feature_pool_stages(), 3);
    Rng rng(2);
    const auto b = m->backbone(m->prepare_input(fixture::toy_crop(rng, 32, 32, false)));
    EXPECT_EQ(b.embedding->shape, (std::vector<int>{32, 4, 4}));  // three 2x2 pools: 32 -> 4
    EXPECT_EQ(b.features->shape, (std::vector<int>{32, 8, 8}));
    int convs = 0;
    for (const auto& p : m->parameters())
        if (p.group == ParamGroup::Backbone && p.var->shape.size() == 4) ++convs;
    EXPECT_EQ(convs, 8);
}

TEST(Detector, ConfigErrors) {
    EXPECT_EQ(kind_of([] { make_model(cfg(Architecture::TinyCnn, 8)); }), ErrorKind::ConfigError);
    EXPECT_EQ(kind_of([] { make_model(cfg(Architecture::Capsule, 20)); }), ErrorKind::ConfigError);
    EXPECT_EQ(kind_of([] { build_capsule_detector(cfg(Architecture::TinyCnn), {}); }), ErrorKind::ConfigError);
    EXPECT_EQ(kind_of([] { build_transfer_detector(cfg(Architecture::Capsule), {}); }), ErrorKind::ConfigError);
    auto c = cfg(Architecture::TinyCnn);
    c.widths = {4, 4};
    EXPECT_EQ(kind_of([&] { make_model(c); }), ErrorKind::ConfigError);
    EXPECT_EQ(kind_of([] { parse_architecture("resnet"); }), ErrorKind::ConfigError);
    auto m = make_model(small(Architecture::TinyCnn));
    const auto data = fixture::toy_samples(*m, 4, 2, 1);
    auto bad = quick(1, 1);
    bad.stage1_epochs = -1;
    EXPECT_EQ(kind_of([&] { train(*m, data, bad); }), ErrorKind::ConfigError);
    bad = quick(1, 1);
    bad.train_fraction = 1.0;
    EXPECT_EQ(kind_of([&] { train(*m, data, bad); }), ErrorKind::ConfigError);
    auto caps = make_model(small(Architecture::Capsule));
    EXPECT_EQ(kind_of([&] { train_transfer(*caps, data, quick(1, 1)); }), ErrorKind::ConfigError);
    EXPECT_EQ(kind_of([&] { train_capsule(*m, data, quick(1, 1)); }), ErrorKind::ConfigError);
}

TEST(Training, StageOneFreezesBackbone) {
    for (auto a : {Architecture::TinyCnn, Architecture::TransferCnn}) {
        auto m = make_model(small(a));
        const auto data = fixture::toy_samples(*m, 8, 4, 2);
        const auto backbone0 = m->snapshot(ParamGroup::Backbone);
        const auto head0 = m->snapshot(ParamGroup::Head);
        bool checked1 = false, checked2 = false;
        TrainHooks hooks;
        hooks.on_stage_end = [&](int stage, const DetectorModel& mm) {
            if (stage == 1) {
                EXPECT_EQ(mm.snapshot(ParamGroup::Backbone), backbone0);
                EXPECT_NE(mm.snapshot(ParamGroup::Head), head0);
                checked1 = true;
            } else {
                EXPECT_GT(fixture::max_abs_diff(mm.snapshot(ParamGroup::Backbone), backbone0), 0.0);
                checked2 = true;
            }
        };
        train(*m, data, quick(2, 2), hooks);
        EXPECT_TRUE(checked1 && checked2);
    }
}

TEST(Training, CapsuleNeverTouchesFeatureExtractor) {
    auto m = make_model(small(Architecture::Capsule));
    const auto data = fixture::toy_samples(*m, 6, 4, 3);
    const auto backbone0 = m->snapshot(ParamGroup::Backbone);
    std::vector<int> stages;
    TrainHooks hooks;
    hooks.on_stage_end = [&](int stage, const DetectorModel& mm) {
        stages.push_back(stage);
        EXPECT_EQ(mm.snapshot(ParamGroup::Backbone), backbone0);
    };
    const auto ck = train(*m, data, quick(1, 2), hooks);
    EXPECT_EQ(stages, (std::vector<int>{1, 2}));
    EXPECT_EQ(m->snapshot(ParamGroup::Backbone), backbone0);
    EXPECT_EQ(ck.trace.size(), 3u);
}

TEST(Training, CapsuleLossDecreases) {
    auto m = make_model(small(Architecture::Capsule));
    const auto data = fixture::toy_samples(*m, 8, 4, 4);
    const auto ck = train(*m, data, quick(0, 5));
    ASSERT_EQ(ck.trace.size(), 5u);
    EXPECT_LT(ck.trace.back().train_loss, ck.trace.front().train_loss);
}

TEST(Training, SelectBestEpochEarliestMax) {
    const std::vector<double> acc{0.6, 0.9, 0.9, 0.7};
    EXPECT_EQ(select_best_epoch(acc), 2);
    EXPECT_EQ(select_best_epoch(std::vector<double>{}), 0);
    EXPECT_EQ(select_best_epoch(std::vector<double>{0.5}), 1);
}

TEST(Training, CheckpointMatchesBestTraceEntry) {
    auto m = make_model(small(Architecture::TinyCnn));
    const auto data = fixture::toy_samples(*m, 8, 4, 5);
    const auto ck = train(*m, data, quick(2, 3));
    ASSERT_EQ(ck.trace.size(), 5u);
    std::vector<double> acc;
    for (const auto& r : ck.trace) acc.push_back(r.validation_accuracy);
    EXPECT_EQ(ck.epoch, select_best_epoch(acc));
    EXPECT_EQ(ck.stage, ck.trace[static_cast<std::size_t>(ck.epoch) - 1].stage);
    EXPECT_EQ(m->snapshot(), ck.parameters);
    EXPECT_EQ(ck.data_hash, data_hash(data));
    for (std::size_t i = 0; i < ck.trace.size(); ++i) {
        EXPECT_EQ(ck.trace[i].epoch, static_cast<int>(i) + 1);
        EXPECT_EQ(ck.trace[i].stage, i < 2 ? 1 : 2);
    }
}

TEST(Training, StageTwoOnlyWhenScheduled) {
    auto m = make_model(small(Architecture::TinyCnn));
    const auto data = fixture::toy_samples(*m, 6, 2, 6);
    const auto ck = train(*m, data, quick(1, 0));
    ASSERT_EQ(ck.trace.size(), 1u);
    EXPECT_EQ(ck.stage, 1);
}

TEST(Training, ZeroEpochsKeepsInitialModel) {
    auto m = make_model(small(Architecture::TinyCnn));
    const auto init = m->snapshot();
    const auto data = fixture::toy_samples(*m, 6, 2, 7);
    const auto ck = train(*m, data, quick(0, 0));
    EXPECT_EQ(ck.epoch, 0);
    EXPECT_TRUE(ck.trace.empty());
    EXPECT_EQ(ck.parameters, init);
}

TEST(Training, DeterministicForFixedSeed) {
    auto a = make_model(small(Architecture::TinyCnn));
    auto b = make_model(small(Architecture::TinyCnn));
    const auto data = fixture::toy_samples(*a, 6, 4, 8);
    EXPECT_EQ(train(*a, data, quick(1, 2)), train(*b, data, quick(1, 2)));
}

TEST(Training, EmptyDataset) {
    auto m = make_model(small(Architecture::TinyCnn));
    EXPECT_EQ(kind_of([&] { train(*m, {}, quick(1, 1)); }), ErrorKind::EmptyDataset);
}

TEST(Training, WrongSampleSizeIsShapeError) {
    auto m = make_model(small(Architecture::TinyCnn));
    auto data = fixture::toy_samples(*m, 4, 2, 9);
    data[3].input.pop_back();
    EXPECT_EQ(kind_of([&] { train(*m, data, quick(1, 1)); }), ErrorKind::ShapeError);
}

TEST(Training, NonFiniteInputStopsTraining) {
    auto m = make_model(small(Architecture::TinyCnn));
    auto data = fixture::toy_samples(*m, 4, 2, 10);
    for (auto& s : data) s.input[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        train(*m, data, quick(1, 1));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::NonFiniteLoss);
        EXPECT_NE(std::string(e.what()).find("at epoch "), std::string::npos);
    }
}

TEST(Predict, RequiresEvalMode) {
    auto m = make_model(small(Architecture::TinyCnn));
    Rng rng(11);
    const auto crop = crop_of(fixture::toy_crop(rng, 16, 16, true));
    EXPECT_EQ(kind_of([&] { predict(*m, crop); }), ErrorKind::ModeError);
    m->set_mode(Mode::Eval);
    const double p = predict(*m, crop);
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
    EXPECT_EQ(p, predict(*m, crop));
}

TEST(Predict, BadCropIsShapeError) {
    auto m = make_model(small(Architecture::TinyCnn));
    m->set_mode(Mode::Eval);
    EXPECT_EQ(kind_of([&] { predict(*m, crop_of(Image{})); }), ErrorKind::ShapeError);
    EXPECT_EQ(kind_of([&] { predict(*m, crop_of(Image(10, 10, 1))); }), ErrorKind::ShapeError);
}

TEST(Predict, LearnsToySignal) {
    auto m = make_model(small(Architecture::TinyCnn));
    const auto data = fixture::toy_samples(*m, 12, 4, 12);
    train(*m, data, quick(3, 12));
    m->set_mode(Mode::Eval);
    Rng rng(13);
    double real = 0, fake = 0;
    for (int i = 0; i < 10; ++i) {
        real += predict(*m, crop_of(fixture::toy_crop(rng, 16, 16, false)));
        fake += predict(*m, crop_of(fixture::toy_crop(rng, 16, 16, true)));
    }
    EXPECT_GT(fake, real);
}

TEST(Detector, DefaultTinyCnnSize) {
    const auto n = make_model(cfg(Architecture::TinyCnn, 32))->parameter_count();
    EXPECT_GT(n, 95000u);
    EXPECT_LT(n, 110000u);
}

TEST(GradientCheck, TinyCnnParameters) {
    auto m = make_model(small(Architecture::TinyCnn));
    const auto data = fixture::toy_samples(*m, 2, 3, 14);
    const auto r = fixture::parameter_gradcheck(*m, data, 10, 2, 15);
    EXPECT_GE(r.checked, 10 * 2 * 5);
    EXPECT_LT(r.worst_relative, 1e-3);
}

TEST(GradientCheck, CapsuleHeadParameters) {
    auto c = small(Architecture::Capsule);
    c.routing_iterations = 1;
    auto m = make_model(c);
    const auto data = fixture::toy_samples(*m, 2, 2, 16);
    const auto r = fixture::parameter_gradcheck(*m, data, static_cast<int>(m->parameters().size()), 1, 17);
    EXPECT_LT(r.worst_relative, 1e-3);
}
