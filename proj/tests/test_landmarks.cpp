#include <gtest/gtest.h>

#include <sstream>

#include "dfeval/landmarks.hpp"
#include "dfeval/log.hpp"
#include "oracles.hpp"

using namespace dfeval;

namespace {

const Canvas kCanvas{64, 64};

std::string record_line(const std::string& frame, int n_values, double fill = 1.5) {
    std::string line = frame;
    for (int i = 0; i < n_values; ++i) line += "," + std::to_string(fill + i * 0.25);
    return line;
}

ErrorKind parse_error_kind(const std::string& text) {
    std::istringstream in(text);
    try {
        landmark_csv::parse(in, kCanvas);
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error raised";
    return ErrorKind::IoError;
}

struct WarningCapture {
    std::vector<std::string> messages;
    std::function<void(const std::string&)> saved;
    WarningCapture() : saved(warning_sink()) {
        warning_sink() = [this](const std::string& m) { messages.push_back(m); };
    }
    ~WarningCapture() { warning_sink() = saved; }
};

} // namespace

TEST(LandmarkCsv, WellFormedRecordGives68Points) {
    std::istringstream in(landmark_csv::header() + "\n" + record_line("f0", 136) + "\n");
    const auto sets = landmark_csv::parse(in, kCanvas);
    ASSERT_EQ(sets.size(), 1u);
    EXPECT_EQ(sets[0].points().size(), 68u);
    EXPECT_EQ(sets[0].frame_ref(), "f0");
    EXPECT_DOUBLE_EQ(sets[0].point(1).x, 1.5);
    EXPECT_DOUBLE_EQ(sets[0].point(68).x, 1.5 + 67 * 0.25);
    EXPECT_DOUBLE_EQ(sets[0].point(1).y, 1.5 + 68 * 0.25);
}

TEST(LandmarkCsv, WrongFieldCountIsMalformed) {
    EXPECT_EQ(parse_error_kind(record_line("f0", 134) + "\n"), ErrorKind::MalformedRecord);
    EXPECT_EQ(parse_error_kind(record_line("f0", 137) + "\n"), ErrorKind::MalformedRecord);
}

TEST(LandmarkCsv, NonFiniteOrNonNumericIsMalformed) {
    for (const std::string bad : {"nan", "inf", "-inf", "abc", "1.0x", ""}) {
        std::string line = record_line("f0", 135) + "," + bad;
        EXPECT_EQ(parse_error_kind(line + "\n"), ErrorKind::MalformedRecord) << bad;
    }
}

TEST(LandmarkCsv, EmptyFileIsRejected) {
    EXPECT_EQ(parse_error_kind(""), ErrorKind::EmptyFile);
    EXPECT_EQ(parse_error_kind(landmark_csv::header() + "\n"), ErrorKind::EmptyFile);
}

TEST(LandmarkCsv, WrongHeaderIsMalformed) {
    EXPECT_EQ(parse_error_kind("frame,a,b\n" + record_line("f0", 136) + "\n"), ErrorKind::MalformedRecord);
}

TEST(LandmarkCsv, RoundTripIsByteStable) {
    Rng rng(5);
    std::vector<LandmarkSet> sets;
    for (int i = 0; i < 6; ++i) sets.push_back(oracle::random_landmarks(rng, kCanvas));
    const std::string text = landmark_csv::serialize(sets);
    std::istringstream in(text);
    const auto parsed = landmark_csv::parse(in, kCanvas);
    ASSERT_EQ(parsed.size(), sets.size());
    for (std::size_t i = 0; i < sets.size(); ++i) EXPECT_EQ(parsed[i].points(), sets[i].points());
    EXPECT_EQ(landmark_csv::serialize(parsed), text);
}

TEST(LandmarkCsv, FileLoadAndSave) {
    oracle::TempDir dir;
    const auto lm = canonical_template(kCanvas, "frame_000000");
    save_landmarks(dir / "a.csv", {lm});
    const auto back = load_landmarks(dir / "a.csv", kCanvas);
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(back[0], lm);
    EXPECT_THROW(load_landmarks(dir / "missing.csv", kCanvas), Error);
}

TEST(LandmarkCsv, OutsideCanvasPointsAreKeptWithWarning) {
    oracle::TempDir dir;
    auto pts = canonical_template(kCanvas).points();
    pts[0].x = -3.0;
    pts[16].x = 70.0;
    save_landmarks(dir / "edge.csv", {LandmarkSet(pts, "f", kCanvas)});
    WarningCapture cap;
    const auto back = load_landmarks(dir / "edge.csv", kCanvas);
    ASSERT_EQ(back.size(), 1u);
    EXPECT_DOUBLE_EQ(back[0].point(1).x, -3.0);
    ASSERT_EQ(cap.messages.size(), 1u);
    EXPECT_NE(cap.messages[0].find("2 landmark(s)"), std::string::npos);
}

TEST(LandmarkSet, IndexingIsOneBased) {
    const auto lm = canonical_template(kCanvas);
    EXPECT_EQ(&lm.point(1), &lm.points()[0]);
    EXPECT_EQ(&lm.point(68), &lm.points()[67]);
    EXPECT_THROW(lm.point(0), std::out_of_range);
    EXPECT_THROW(lm.point(69), std::out_of_range);
}

TEST(LandmarkSet, RejectsNonFiniteCoordinates) {
    auto pts = canonical_template(kCanvas).points();
    pts[30].y = std::numeric_limits<double>::quiet_NaN();
    try {
        LandmarkSet(pts, "f", kCanvas);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::MalformedRecord);
        EXPECT_NE(std::string(e.what()).find("landmark 31"), std::string::npos);
    }
}

TEST(DetectLandmarks, StubBackendPassesTemplateThrough) {
    const auto tmpl = place_template(3, 4, 40, 50);
    const FixedTemplateBackend backend(tmpl);
    const Image img(64, 64, 3);
    const auto lm = detect_landmarks(img, backend, "f");
    EXPECT_EQ(lm.points(), tmpl);
    EXPECT_EQ(lm.canvas(), kCanvas);
}

TEST(DetectLandmarks, BlankImageHasNoFace) {
    Image blank(64, 64, 3);
    std::fill(blank.data.begin(), blank.data.end(), 120);
    try {
        detect_landmarks(blank, "foreground-fit");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::NoFaceFound);
    }
    EXPECT_THROW(detect_landmarks(Image{}, "template"), Error);
}

TEST(DetectLandmarks, UnknownBackendIsUnavailable) {
    try {
        detect_landmarks(Image(8, 8, 3), "openface-remote");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::BackendUnavailable);
    }
}

TEST(DetectLandmarks, ShiftedContentShiftsEveryPoint) {
    auto draw = [](int ox, int oy) {
        Image img(96, 96, 3);
        for (int y = 10 + oy; y < 60 + oy; ++y)
            for (int x = 12 + ox; x < 52 + ox; ++x)
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = 200;
        return img;
    };
    const auto a = detect_landmarks(draw(0, 0), "foreground-fit");
    const auto b = detect_landmarks(draw(10, 10), "foreground-fit");
    for (int i = 1; i <= kLandmarkCount; ++i) {
        EXPECT_NEAR(b.point(i).x - a.point(i).x, 10.0, 1e-9) << i;
        EXPECT_NEAR(b.point(i).y - a.point(i).y, 10.0, 1e-9) << i;
    }
}

TEST(DetectLandmarks, TranslatedSetShiftsExactly) {
    const auto lm = canonical_template(kCanvas);
    const auto moved = lm.translated(10, 10);
    for (int i = 1; i <= kLandmarkCount; ++i) {
        EXPECT_DOUBLE_EQ(moved.point(i).x, lm.point(i).x + 10);
        EXPECT_DOUBLE_EQ(moved.point(i).y, lm.point(i).y + 10);
    }
}
