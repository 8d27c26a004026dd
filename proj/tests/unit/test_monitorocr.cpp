#include <gtest/gtest.h>

#include <fstream>

#include "../oracles.hpp"
#include "../test_util.hpp"
#include "neoward/monitorocr.hpp"

using namespace neoward;
using namespace neoward::ocr;
using testutil::TempDir;

namespace {

TextBox box(std::string text, double x, double y, double w, double h, double conf = 0.9) {
  return TextBox{std::move(text), conf, x, y, w, h};
}

void write(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p);
  out << content;
}

}  // namespace

// ---- anchors and regions ---------------------------------------------------------

TEST(Anchors, LexiconMatchAndConfidenceTieBreak) {
  const auto lex = AnchorLexicon::defaults();
  auto a = find_anchors({box("HR", 10, 10, 20, 10, 0.8), box("ECG", 10, 200, 20, 10, 0.9), box("spo2 ", 300, 10, 30, 10)},
                        lex);
  ASSERT_TRUE(a.by_vital[0]);
  EXPECT_EQ(a.by_vital[0]->text, "ECG");
  ASSERT_TRUE(a.by_vital[1]);
  EXPECT_FALSE(a.by_vital[2]);
  auto only = find_anchors({box("HR", 10, 10, 20, 10)}, lex);
  EXPECT_EQ(only.by_vital[0]->text, "HR");
  // equal confidence: top-most wins
  auto tie = find_anchors({box("HR", 0, 50, 5, 5, 0.7), box("PR", 0, 20, 5, 5, 0.7)}, lex);
  EXPECT_EQ(tie.by_vital[0]->text, "PR");
}

TEST(Anchors, LexiconValidation) {
  AnchorLexicon lex = AnchorLexicon::defaults();
  EXPECT_NO_THROW(lex.validate());
  lex.labels[2].insert("HR");
  EXPECT_THROW(lex.validate(), Error);
  AnchorLexicon empty;
  EXPECT_THROW(empty.validate(), Error);
}

TEST(ExpandRegion, DefaultFactorsExample) {
  const auto anchor = box("HR", 100, 100, 30, 20);
  const auto r = expand_region(anchor, 4.0, 1.5);
  EXPECT_DOUBLE_EQ(r.x0, 0.0);  // -20 clipped
  EXPECT_DOUBLE_EQ(r.x1, 250.0);
  EXPECT_DOUBLE_EQ(r.y0, 70.0);
  EXPECT_DOUBLE_EQ(r.y1, 150.0);
  const auto clipped = expand_region(anchor, 4.0, 1.5, ImageSize{180, 480});
  EXPECT_EQ(clipped, (Rect{0, 70, 180, 150}));
}

TEST(ExpandRegion, UnitFactorDoublesReachAndEdgeNeverNegative) {
  const auto r = expand_region(box("HR", 200, 200, 10, 10), 1.0, 1.0);
  EXPECT_EQ(r, (Rect{190, 190, 220, 220}));
  const auto edge = expand_region(box("HR", 0, 0, 10, 10), 4.0, 1.5, ImageSize{20, 20});
  EXPECT_GE(edge.x0, 0.0);
  EXPECT_GE(edge.y0, 0.0);
  EXPECT_LE(edge.x1, 20.0);
  EXPECT_THROW(expand_region(box("HR", 0, 0, 1, 1), 0.0, 1.0), Error);
}

TEST(ParseNumeric, IntegersAndTruncatedDecimals) {
  EXPECT_EQ(parse_numeric("142"), 142);
  EXPECT_EQ(parse_numeric(" 97.6 "), 97);
  EXPECT_FALSE(parse_numeric("12a"));
  EXPECT_FALSE(parse_numeric(""));
  EXPECT_FALSE(parse_numeric("-5"));
  EXPECT_FALSE(parse_numeric("HR"));
}

// ---- selection --------------------------------------------------------------------

TEST(SelectValue, LargestInRange) {
  const auto anchor = box("HR", 0, 0, 10, 10);
  const Rect region{0, 0, 500, 500};
  const ValueRange hr{40, 250};
  EXPECT_EQ(select_value(region, {box("142", 20, 20, 10, 10)}, hr, anchor)->text, "142");
  EXPECT_EQ(select_value(region, {box("140", 20, 20, 10, 10), box("141", 50, 50, 20, 20)}, hr, anchor)->text, "141");
  EXPECT_EQ(select_value(region, {box("142", 20, 20, 10, 10), box("999", 50, 50, 40, 40)}, hr, anchor)->text, "142");
  EXPECT_FALSE(select_value(region, {box("abc", 20, 20, 10, 10)}, hr, anchor));
  // equal area: nearest centre wins
  EXPECT_EQ(select_value(region, {box("150", 100, 100, 10, 10), box("151", 20, 0, 10, 10)}, hr, anchor)->text, "151");
}

TEST(SelectValue, MatchesBruteForceOracle) {
  SeededRng rng(31);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<TextBox> boxes;
    const auto n = rng.below(25);
    for (std::uint64_t i = 0; i < n; ++i) {
      std::string text;
      switch (rng.below(4)) {
        case 0: text = std::to_string(rng.below(300)); break;
        case 1: text = std::to_string(rng.below(150)) + "." + std::to_string(rng.below(10)); break;
        case 2: text = "x" + std::to_string(rng.below(9)); break;
        default: text = std::to_string(30 + rng.below(100)); break;
      }
      // coarse grid so area and distance ties actually occur
      boxes.push_back(box(text, 10.0 * rng.below(40), 10.0 * rng.below(40), 5.0 * (1 + rng.below(4)),
                          5.0 * (1 + rng.below(4))));
    }
    const auto anchor = box("HR", 10.0 * rng.below(40), 10.0 * rng.below(40), 20, 10);
    const Rect region{rng.uniform(0, 200), rng.uniform(0, 200), rng.uniform(200, 400), rng.uniform(200, 400)};
    const ValueRange range{static_cast<int>(rng.below(60)), static_cast<int>(60 + rng.below(200))};
    const auto got = select_value(region, boxes, range, anchor);
    const auto want = oracle::brute_force_select(region, boxes, range, anchor);
    ASSERT_EQ(got.has_value(), want.has_value()) << "trial " << trial;
    if (got) ASSERT_EQ(*got, *want) << "trial " << trial;
  }
}

TEST(SelectValue, NestedRegionOnlyLosesToLargerBox) {
  SeededRng rng(32);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<TextBox> boxes;
    for (int i = 0; i < 15; ++i)
      boxes.push_back(box(std::to_string(40 + rng.below(100)), rng.uniform(0, 400), rng.uniform(0, 400),
                          rng.uniform(2, 30), rng.uniform(2, 30)));
    const auto anchor = box("HR", 200, 200, 10, 10);
    const Rect inner{150, 150, 260, 260};
    const Rect outer{100, 100, 320, 320};
    const auto a = select_value(inner, boxes, {40, 250}, anchor);
    const auto b = select_value(outer, boxes, {40, 250}, anchor);
    if (a && b && !(*a == *b)) ASSERT_GE(b->area(), a->area());
    if (a) ASSERT_TRUE(b);
  }
}

// ---- extraction ----------------------------------------------------------------------

TEST(Extract, CleanLayoutAndEmpty) {
  std::vector<TextBox> boxes{box("HR", 20, 20, 30, 15), box("142", 60, 20, 80, 50),
                             box("SpO2", 20, 200, 40, 15), box("96", 70, 200, 60, 50),
                             box("RR", 20, 380, 30, 15), box("48", 60, 380, 60, 50)};
  auto e = extract(boxes, AnchorLexicon::defaults(), ExtractConfig{});
  ASSERT_TRUE(e.vitals[0]);
  EXPECT_EQ(e.vitals[0]->value, 142);
  ASSERT_TRUE(e.vitals[1]);
  EXPECT_EQ(e.vitals[1]->value, 96);
  ASSERT_TRUE(e.vitals[2]);
  EXPECT_EQ(e.vitals[2]->value, 48);
  auto none = extract({}, AnchorLexicon::defaults(), ExtractConfig{});
  for (const auto& v : none.vitals) EXPECT_FALSE(v);
}

TEST(Extract, GeneratedCleanCorpusIsPerfect) {
  std::vector<Extraction> preds;
  GroundTruth truth;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto layout = generate_layout(seed);
    const auto id = "img_" + std::to_string(seed);
    preds.push_back(extract(layout.detections.boxes, AnchorLexicon::defaults(), ExtractConfig{},
                            layout.detections.image, id));
    truth[id] = layout.truth;
  }
  const auto ev = evaluate(preds, truth);
  for (const auto& s : ev.by_vital) EXPECT_DOUBLE_EQ(s.accuracy(), 1.0);
}

TEST(Extract, DistractorCorpusAtLeastNinetyPercent) {
  std::vector<Extraction> preds;
  GroundTruth truth;
  LayoutOptions opt;
  opt.distractors = true;
  for (std::uint64_t seed = 1000; seed < 1200; ++seed) {
    auto layout = generate_layout(seed, opt);
    const auto id = "img_" + std::to_string(seed);
    preds.push_back(extract(layout.detections.boxes, AnchorLexicon::defaults(), ExtractConfig{},
                            layout.detections.image, id));
    truth[id] = layout.truth;
  }
  const auto ev = evaluate(preds, truth);
  for (const auto& s : ev.by_vital) EXPECT_GE(s.accuracy(), 0.90);
}

// ---- files --------------------------------------------------------------------------------

TEST(Detections, ParseFormatRoundTrip) {
  auto f = parse_detections("# image 640 480\nHR\t0.9\t10\t10\t30\t15\n\n# note\n142\t0.95\t60\t10\t80\t50\n", "a");
  ASSERT_TRUE(f.image);
  EXPECT_DOUBLE_EQ(f.image->width, 640);
  ASSERT_EQ(f.boxes.size(), 2u);
  EXPECT_EQ(f.boxes[1].text, "142");
  auto again = parse_detections(format_detections(f), "a");
  EXPECT_EQ(again.boxes, f.boxes);
  EXPECT_THROW(parse_detections("HR\t0.9\t10\n", "b"), Error);
  EXPECT_THROW(parse_detections("HR\tx\t1\t1\t1\t1\n", "b"), Error);
  EXPECT_THROW(parse_detections("HR\t0.9\t1\t1\t-1\t1\n", "b"), Error);
}

TEST(Truth, Parse) {
  auto t = parse_truth("img1\thr\t142\nimg1\tspo2\t96\nimg2\trr\t40\n");
  EXPECT_EQ(t.at("img1").at(MonitorVital::kHr), 142);
  EXPECT_EQ(t.at("img2").at(MonitorVital::kRr), 40);
  EXPECT_THROW(parse_truth("img1\tbp\t1\n"), Error);
}

// ---- scoring --------------------------------------------------------------------------------

namespace {

Extraction pred(std::string id, std::optional<int> hr) {
  Extraction e;
  e.image_id = std::move(id);
  if (hr) e.vitals[0] = VitalReading{*hr, {}, {}};
  return e;
}

}  // namespace

TEST(Evaluate, AllCorrect) {
  GroundTruth t{{"a", {{MonitorVital::kHr, 140}}}, {"b", {{MonitorVital::kHr, 150}}}};
  auto ev = evaluate({pred("a", 140), pred("b", 150)}, t);
  const auto& s = ev.by_vital[0];
  EXPECT_DOUBLE_EQ(s.precision(), 1.0);
  EXPECT_DOUBLE_EQ(s.recall(), 1.0);
  EXPECT_DOUBLE_EQ(s.f1(), 1.0);
  EXPECT_DOUBLE_EQ(s.accuracy(), 1.0);
}

TEST(Evaluate, TwoOfThreeCorrect) {
  GroundTruth t{{"a", {{MonitorVital::kHr, 140}}}, {"b", {{MonitorVital::kHr, 150}}}, {"c", {{MonitorVital::kHr, 160}}}};
  auto ev = evaluate({pred("a", 140), pred("b", 150), pred("c", 99)}, t);
  const auto& s = ev.by_vital[0];
  EXPECT_EQ(s.tp, 2u);
  EXPECT_EQ(s.fp, 1u);
  EXPECT_EQ(s.fn, 1u);
  EXPECT_NEAR(s.precision(), 2.0 / 3, 1e-12);
  EXPECT_NEAR(s.recall(), 2.0 / 3, 1e-12);
  EXPECT_NEAR(s.f1(), 2.0 / 3, 1e-12);
  EXPECT_NEAR(s.accuracy(), 2.0 / 3, 1e-12);
}

TEST(Evaluate, MissingAndSpuriousAndUnknownImage) {
  GroundTruth t{{"a", {{MonitorVital::kHr, 140}}}, {"b", {}}};
  auto ev = evaluate({pred("a", std::nullopt), pred("b", 120)}, t);
  EXPECT_EQ(ev.by_vital[0].fn, 1u);
  EXPECT_EQ(ev.by_vital[0].fp, 1u);
  EXPECT_EQ(ev.by_vital[0].tp, 0u);
  EXPECT_DOUBLE_EQ(ev.by_vital[0].f1(), 0.0);
  EXPECT_THROW(evaluate({pred("zzz", 1)}, t), Error);
  EXPECT_FALSE(ev.table().empty());
}

// ---- batch ----------------------------------------------------------------------------------

TEST(Batch, MalformedFileBecomesErrorEntry) {
  TempDir dir;
  for (std::uint64_t i = 0; i < 9; ++i) {
    auto layout = generate_layout(i);
    write(dir.path() / ("img_" + std::to_string(i) + ".tsv"), format_detections(layout.detections));
  }
  write(dir.path() / "img_9.tsv", "HR\tnot-a-number\n");
  write(dir.path() / "notes.txt", "ignored");
  auto out = batch_extract(dir.path(), 4);
  ASSERT_EQ(out.size(), 10u);
  std::size_t errors = 0;
  for (const auto& e : out) {
    if (!e.error.empty()) {
      ++errors;
      EXPECT_EQ(e.image_id, "img_9");
      EXPECT_FALSE(e.extraction);
    }
  }
  EXPECT_EQ(errors, 1u);
  TempDir empty;
  EXPECT_TRUE(batch_extract(empty.path(), 4).empty());
}

TEST(Batch, WorkerCountDoesNotChangeResults) {
  TempDir dir;
  LayoutOptions opt;
  opt.distractors = true;
  for (std::uint64_t i = 0; i < 100; ++i) {
    auto layout = generate_layout(500 + i, opt);
    char name[32];
    std::snprintf(name, sizeof name, "img_%04llu.tsv", static_cast<unsigned long long>(i));
    write(dir.path() / name, format_detections(layout.detections));
  }
  auto one = batch_extract(dir.path(), 1);
  auto eight = batch_extract(dir.path(), 8);
  ASSERT_EQ(one.size(), 100u);
  ASSERT_EQ(one.size(), eight.size());
  for (std::size_t i = 0; i < one.size(); ++i) {
    ASSERT_EQ(one[i].image_id, eight[i].image_id);
    if (i) ASSERT_LT(one[i - 1].image_id, one[i].image_id);
    ASSERT_TRUE(one[i].extraction && eight[i].extraction);
    for (std::size_t v = 0; v < 3; ++v) {
      const auto& a = one[i].extraction->vitals[v];
      const auto& b = eight[i].extraction->vitals[v];
      ASSERT_EQ(a.has_value(), b.has_value());
      if (a) ASSERT_EQ(a->value, b->value);
    }
  }
}
