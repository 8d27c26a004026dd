#pragma once

// Spatial value extraction from text-detection output of a bedside monitor
// photo: label anchors, expanded search regions, largest plausible number.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace neoward::ocr {

struct TextBox {
  std::string text;
  double confidence = 1.0;
  double x = 0, y = 0, w = 1, h = 1;

  double cx() const noexcept { return x + w / 2; }
  double cy() const noexcept { return y + h / 2; }
  double area() const noexcept { return w * h; }
  void validate() const;
  bool operator==(const TextBox&) const = default;
};

enum class MonitorVital : std::uint8_t { kHr = 0, kSpo2 = 1, kRr = 2 };
inline constexpr std::array<MonitorVital, 3> kMonitorVitals = {MonitorVital::kHr, MonitorVital::kSpo2,
                                                               MonitorVital::kRr};
std::string_view monitor_vital_name(MonitorVital v);
std::optional<MonitorVital> parse_monitor_vital(std::string_view name);

struct AnchorLexicon {
  std::array<std::set<std::string>, 3> labels;  // stored upper-cased and trimmed
  static AnchorLexicon defaults();
  /// Non-empty, pairwise disjoint sets.
  void validate() const;
  std::optional<MonitorVital> match(std::string_view text) const;
};

struct ValueRange {
  int lo = 0;
  int hi = 0;
};

struct ExtractConfig {
  double fx = 4.0;
  double fy = 1.5;
  std::array<ValueRange, 3> ranges{{{40, 250}, {50, 100}, {5, 120}}};
  void validate() const;
};

struct Rect {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool contains(double px, double py) const noexcept { return px >= x0 && px <= x1 && py >= y0 && py <= y1; }
  bool operator==(const Rect&) const = default;
};

struct ImageSize {
  double width = 0;
  double height = 0;
};

struct Anchors {
  std::array<std::optional<TextBox>, 3> by_vital;
};

Anchors find_anchors(const std::vector<TextBox>& boxes, const AnchorLexicon& lexicon);

/// [x - fx*w, x + (1+fx)*w] x [y - fy*h, y + (1+fy)*h], clipped at 0 and, when
/// known, at the image size.
Rect expand_region(const TextBox& anchor, double fx, double fy, std::optional<ImageSize> image = std::nullopt);

/// Integer value of a numeric string; decimals truncate ("97.6" -> 97).
std::optional<int> parse_numeric(std::string_view text);

/// Largest-area box whose centre is in `region`, whose text is numeric and in
/// range; ties go to the centre nearest the anchor's centre, then top-most,
/// then left-most.
std::optional<TextBox> select_value(const Rect& region, const std::vector<TextBox>& boxes, ValueRange range,
                                    const TextBox& anchor);

struct VitalReading {
  int value = 0;
  TextBox source;
  TextBox anchor;
};

struct Extraction {
  std::string image_id;
  std::array<std::optional<VitalReading>, 3> vitals;
};

Extraction extract(const std::vector<TextBox>& boxes, const AnchorLexicon& lexicon, const ExtractConfig& config,
                   std::optional<ImageSize> image = std::nullopt, std::string image_id = {});

// ---- files -----------------------------------------------------------------

struct DetectionFile {
  std::string image_id;
  std::optional<ImageSize> image;
  std::vector<TextBox> boxes;
};

/// `text<TAB>confidence<TAB>x<TAB>y<TAB>w<TAB>h` per line; blank lines and
/// `#` comments are skipped, except an optional `# image <W> <H>` header.
DetectionFile parse_detections(std::string_view text, std::string image_id);
std::string format_detections(const DetectionFile& file);

/// Map image_id -> vital -> value, from `image_id<TAB>vital<TAB>value` lines.
using GroundTruth = std::map<std::string, std::map<MonitorVital, int>>;
GroundTruth parse_truth(std::string_view text);

struct BatchEntry {
  std::string image_id;
  std::optional<Extraction> extraction;
  std::string error;  // set when the file could not be parsed
};

/// Every `*.tsv` file in `dir` (image id = file stem), processed by `workers`
/// threads; results ordered by image id.
std::vector<BatchEntry> batch_extract(const std::filesystem::path& dir, unsigned workers,
                                      const AnchorLexicon& lexicon = AnchorLexicon::defaults(),
                                      const ExtractConfig& config = {});

// ---- scoring ---------------------------------------------------------------

struct VitalScore {
  std::size_t tp = 0, fp = 0, fn = 0;
  std::size_t images_with_truth = 0;
  double precision() const noexcept;
  double recall() const noexcept;
  double f1() const noexcept;
  double accuracy() const noexcept;
};

struct Evaluation {
  std::array<VitalScore, 3> by_vital;
  std::string table() const;
};

/// A wrong value counts as both a false positive and a false negative.
/// Throws kInvalidArgument if a prediction's image id is missing from truth.
Evaluation evaluate(const std::vector<Extraction>& predictions, const GroundTruth& truth);

// ---- fixtures ----------------------------------------------------------------

struct LayoutOptions {
  /// Small alarm-limit numbers near each value (always strictly smaller area).
  bool distractors = false;
  double width = 640;
  double height = 480;
};

struct Layout {
  DetectionFile detections;
  std::map<MonitorVital, int> truth;
};

/// Monitor-like layout: one panel per vital with a label and a large value.
Layout generate_layout(std::uint64_t seed, const LayoutOptions& options = {});

}  // namespace neoward::ocr
