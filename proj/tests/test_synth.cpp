#include <gtest/gtest.h>

#include "dfeval/dataset.hpp"
#include "dfeval/synth.hpp"
#include "oracles.hpp"

using namespace dfeval;
using namespace dfeval::synth;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error raised";
    return ErrorKind::IoError;
}

CorpusSpec small_corpus() {
    CorpusSpec s;
    s.n_identities = 10;
    s.videos_per_identity = 2;
    s.frames_per_video = 5;
    s.fake_fraction = 0.5;
    s.artifact_region = RegionKind::Mouth;
    s.seed = 7;
    s.canvas = {32, 32};
    return s;
}

std::vector<std::string> tree_files(const std::filesystem::path& root) {
    std::vector<std::string> out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(root))
        if (e.is_regular_file()) out.push_back(std::filesystem::relative(e.path(), root).string());
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace

TEST(SynthFace, NoiselessFramesAreIdentical) {
    SynthSpec s{123, std::nullopt, 0.5, {48, 48}, 0.0};
    EXPECT_EQ(generate_face(s, 1).crop.pixels, generate_face(s, 2).crop.pixels);
    s.noise_level = 0.05;
    EXPECT_NE(generate_face(s, 1).crop.pixels, generate_face(s, 2).crop.pixels);
}

TEST(SynthFace, DeterministicInSeeds) {
    const SynthSpec s{9, RegionKind::Eyes, 0.7, {40, 48}, 0.03};
    const auto a = generate_face(s, 5), b = generate_face(s, 5);
    EXPECT_EQ(a.crop.pixels, b.crop.pixels);
    EXPECT_EQ(a.landmarks.points(), b.landmarks.points());
    EXPECT_EQ(a.label, Label::Fake);
    EXPECT_EQ(generate_face({9, std::nullopt, 0.7, {40, 48}, 0.03}, 5).label, Label::Real);
}

TEST(SynthFace, GeometryDependsOnIdentityOnly) {
    const SynthSpec s{11, RegionKind::Nose, 0.5, {64, 64}, 0.02};
    EXPECT_EQ(generate_face(s, 1).landmarks.points(), generate_face(s, 99).landmarks.points());
    const SynthSpec other{12, RegionKind::Nose, 0.5, {64, 64}, 0.02};
    EXPECT_NE(generate_face(s, 1).landmarks.points(), generate_face(other, 1).landmarks.points());
}

TEST(SynthFace, ArtifactStaysInsideItsRegion) {
    for (RegionKind r : {RegionKind::Eyes, RegionKind::Nose, RegionKind::Mouth, RegionKind::Rest})
        for (std::uint64_t id : {1u, 2u, 3u}) {
            const SynthSpec fake{id, r, 0.6, {64, 64}, 0.02};
            SynthSpec clean = fake;
            clean.artifact_region.reset();
            const auto f = generate_face(fake, 4), c = generate_face(clean, 4);
            const auto masks = build_all_masks(c.landmarks);
            const auto& mask = masks.get(r).bits;
            int changed = 0;
            for (int y = 0; y < 64; ++y)
                for (int x = 0; x < 64; ++x)
                    for (int k = 0; k < 3; ++k)
                        if (f.crop.pixels.at(y, x, k) != c.crop.pixels.at(y, x, k)) {
                            ASSERT_TRUE(mask.at(y, x)) << region_name(r) << " pixel " << x << "," << y;
                            ++changed;
                        }
            EXPECT_GT(changed, mask.count() / 2) << region_name(r);
        }
}

TEST(SynthFace, ZeroStrengthMatchesClean) {
    const SynthSpec fake{5, RegionKind::Mouth, 0.0, {32, 32}, 0.02};
    SynthSpec clean = fake;
    clean.artifact_region.reset();
    EXPECT_EQ(generate_face(fake, 3).crop.pixels, generate_face(clean, 3).crop.pixels);
}

TEST(SynthFace, ValidationErrors) {
    EXPECT_EQ(kind_of([] { generate_face({1, RegionKind::Mouth, 1.5, {32, 32}, 0.0}, 0); }), ErrorKind::ConfigError);
    EXPECT_EQ(kind_of([] { generate_face({1, RegionKind::Face, 0.5, {32, 32}, 0.0}, 0); }), ErrorKind::ConfigError);
    EXPECT_EQ(kind_of([] { generate_face({1, std::nullopt, 0.5, {8, 32}, 0.0}, 0); }), ErrorKind::ConfigError);
    EXPECT_EQ(kind_of([] { generate_face({1, std::nullopt, 0.5, {32, 32}, -0.1}, 0); }), ErrorKind::ConfigError);
}

TEST(Corpus, CountsLabelsAndIngestion) {
    oracle::TempDir dir;
    const auto recs = generate_manifest(small_corpus(), dir.path());
    ASSERT_EQ(recs.size(), 20u);
    EXPECT_EQ(std::count_if(recs.begin(), recs.end(), [](const auto& r) { return r.label == Label::Fake; }), 10);
    const auto m = dataset::ingest_manifest(dir / "manifest.jsonl");
    EXPECT_EQ(m.records, recs);
    EXPECT_EQ(m.profile().real_count, 10);
    EXPECT_EQ(m.profile().fake_count, 10);
    const auto frames = dataset::sample_frames(m.records[0], 1.0, 100);
    EXPECT_EQ(frames.size(), 5u);
    const auto lms = load_landmarks(dir / "landmarks" / (m.records[0].video_id + ".csv"), Canvas{32, 32});
    ASSERT_EQ(lms.size(), 5u);
    EXPECT_EQ(lms[0].frame_ref(), frames[0].frame_ref);
    EXPECT_EQ(lms[0].canvas(), (Canvas{32, 32}));
}

TEST(Corpus, NonCorrelatedLabelsMixWithinIdentities) {
    const auto fake = assign_labels(small_corpus());
    for (const auto& per_id : fake) EXPECT_NE(per_id[0], per_id[1]);
}

TEST(Corpus, CorrelatedLabelsMakeWholeIdentitiesFake) {
    auto s = small_corpus();
    s.identity_correlated_labels = true;
    s.videos_per_identity = 3;
    const auto fake = assign_labels(s);
    int fake_ids = 0;
    for (const auto& per_id : fake) {
        EXPECT_TRUE(std::all_of(per_id.begin(), per_id.end(), [&](bool b) { return b == per_id[0]; }));
        fake_ids += per_id[0];
    }
    EXPECT_EQ(fake_ids, 5);
}

TEST(Corpus, NoFakesIsSingleClassAtEvaluation) {
    oracle::TempDir dir;
    auto s = small_corpus();
    s.fake_fraction = 0.0;
    const auto recs = generate_manifest(s, dir.path());
    metrics::ScoreSet scores;
    for (const auto& r : recs) scores.entries.push_back({r.video_id, 0.5, r.label});
    EXPECT_EQ(kind_of([&] { metrics::auc(scores); }), ErrorKind::SingleClass);
}

TEST(Corpus, RerunIsByteIdentical) {
    oracle::TempDir a, b;
    generate_manifest(small_corpus(), a.path());
    generate_manifest(small_corpus(), b.path());
    const auto fa = tree_files(a.path());
    ASSERT_EQ(fa, tree_files(b.path()));
    for (const auto& f : fa) ASSERT_EQ(oracle::slurp(a / f), oracle::slurp(b / f)) << f;
}

TEST(Corpus, IdentityAppearanceStableAcrossVideos) {
    const auto s = small_corpus();
    SynthSpec spec{identity_seed(s, 3), std::nullopt, 0.5, s.canvas, 0.0};
    EXPECT_EQ(generate_face(spec, frame_seed(s, 3, 0, 0)).crop.pixels,
              generate_face(spec, frame_seed(s, 3, 1, 4)).crop.pixels);
    EXPECT_NE(identity_seed(s, 3), identity_seed(s, 4));
}

TEST(Corpus, Errors) {
    oracle::TempDir dir;
    auto s = small_corpus();
    s.n_identities = 1;
    EXPECT_EQ(kind_of([&] { generate_manifest(s, dir.path()); }), ErrorKind::TooFewIdentities);
    s = small_corpus();
    s.fake_fraction = 2;
    EXPECT_EQ(kind_of([&] { generate_manifest(s, dir.path()); }), ErrorKind::ConfigError);
    s = small_corpus();
    s.artifact_region = RegionKind::Face;
    EXPECT_EQ(kind_of([&] { generate_manifest(s, dir.path()); }), ErrorKind::ConfigError);
}
