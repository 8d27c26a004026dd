#include "neoward/monitorocr.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "neoward/common.hpp"

namespace neoward::ocr {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string upper(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

double parse_double(std::string_view s, std::string_view what) {
  s = trim(s);
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || !std::isfinite(v))
    throw Error(ErrorCode::kDecode, fmt::format("bad {}: '{}'", what, s));
  return v;
}

std::size_t idx(MonitorVital v) { return static_cast<std::size_t>(v); }

}  // namespace

void TextBox::validate() const {
  if (!(w > 0 && h > 0)) throw Error(ErrorCode::kInvalidArgument, "box width and height must be > 0");
  if (!(confidence >= 0.0 && confidence <= 1.0))
    throw Error(ErrorCode::kInvalidArgument, "confidence must be in [0, 1]");
}

std::string_view monitor_vital_name(MonitorVital v) {
  switch (v) {
    case MonitorVital::kHr: return "hr";
    case MonitorVital::kSpo2: return "spo2";
    case MonitorVital::kRr: return "rr";
  }
  return "?";
}

std::optional<MonitorVital> parse_monitor_vital(std::string_view name) {
  const auto u = upper(trim(name));
  if (u == "HR") return MonitorVital::kHr;
  if (u == "SPO2") return MonitorVital::kSpo2;
  if (u == "RR") return MonitorVital::kRr;
  return std::nullopt;
}

AnchorLexicon AnchorLexicon::defaults() {
  AnchorLexicon lex;
  lex.labels[0] = {"HR", "ECG", "PR"};
  lex.labels[1] = {"SPO2", "%SPO2"};
  lex.labels[2] = {"RR", "RESP"};
  return lex;
}

void AnchorLexicon::validate() const {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].empty()) throw Error(ErrorCode::kInvalidArgument, "lexicon set must not be empty");
    for (std::size_t j = i + 1; j < labels.size(); ++j)
      for (const auto& l : labels[i])
        if (labels[j].count(l)) throw Error(ErrorCode::kInvalidArgument, "lexicon sets overlap on " + l);
  }
}

std::optional<MonitorVital> AnchorLexicon::match(std::string_view text) const {
  const auto key = upper(trim(text));
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i].count(key)) return kMonitorVitals[i];
  return std::nullopt;
}

void ExtractConfig::validate() const {
  if (!(fx > 0 && fy > 0)) throw Error(ErrorCode::kInvalidArgument, "expansion factors must be > 0");
  for (const auto& r : ranges)
    if (r.lo > r.hi) throw Error(ErrorCode::kInvalidArgument, "plausibility range lo > hi");
}

Anchors find_anchors(const std::vector<TextBox>& boxes, const AnchorLexicon& lexicon) {
  Anchors out;
  for (const auto& b : boxes) {
    auto v = lexicon.match(b.text);
    if (!v) continue;
    auto& slot = out.by_vital[idx(*v)];
    if (!slot || b.confidence > slot->confidence || (b.confidence == slot->confidence && b.y < slot->y)) slot = b;
  }
  return out;
}

Rect expand_region(const TextBox& anchor, double fx, double fy, std::optional<ImageSize> image) {
  if (!(fx > 0 && fy > 0)) throw Error(ErrorCode::kInvalidArgument, "expansion factors must be > 0");
  Rect r{anchor.x - fx * anchor.w, anchor.y - fy * anchor.h, anchor.x + (1 + fx) * anchor.w,
         anchor.y + (1 + fy) * anchor.h};
  r.x0 = std::max(0.0, r.x0);
  r.y0 = std::max(0.0, r.y0);
  r.x1 = std::max(0.0, r.x1);
  r.y1 = std::max(0.0, r.y1);
  if (image) {
    r.x1 = std::min(r.x1, image->width);
    r.y1 = std::min(r.y1, image->height);
    r.x0 = std::min(r.x0, r.x1);
    r.y0 = std::min(r.y0, r.y1);
  }
  return r;
}

std::optional<int> parse_numeric(std::string_view text) {
  text = trim(text);
  if (text.empty()) return std::nullopt;
  auto dot = text.find('.');
  auto whole = text.substr(0, dot);
  if (whole.empty() || whole.size() > 6) return std::nullopt;
  for (char c : whole)
    if (!std::isdigit(static_cast<unsigned char>(c))) return std::nullopt;
  if (dot != std::string_view::npos) {
    auto frac = text.substr(dot + 1);
    if (frac.empty()) return std::nullopt;
    for (char c : frac)
      if (!std::isdigit(static_cast<unsigned char>(c))) return std::nullopt;
  }
  int v = 0;
  std::from_chars(whole.data(), whole.data() + whole.size(), v);
  return v;
}

std::optional<TextBox> select_value(const Rect& region, const std::vector<TextBox>& boxes, ValueRange range,
                                    const TextBox& anchor) {
  const TextBox* best = nullptr;
  double best_d = 0;
  for (const auto& b : boxes) {
    if (!region.contains(b.cx(), b.cy())) continue;
    auto v = parse_numeric(b.text);
    if (!v || *v < range.lo || *v > range.hi) continue;
    const double d = std::hypot(b.cx() - anchor.cx(), b.cy() - anchor.cy());
    bool better = !best;
    if (best) {
      if (b.area() != best->area()) {
        better = b.area() > best->area();
      } else if (d != best_d) {
        better = d < best_d;
      } else if (b.y != best->y) {
        better = b.y < best->y;
      } else {
        better = b.x < best->x;
      }
    }
    if (better) {
      best = &b;
      best_d = d;
    }
  }
  if (!best) return std::nullopt;
  return *best;
}

Extraction extract(const std::vector<TextBox>& boxes, const AnchorLexicon& lexicon, const ExtractConfig& config,
                   std::optional<ImageSize> image, std::string image_id) {
  config.validate();
  Extraction out;
  out.image_id = std::move(image_id);
  const auto anchors = find_anchors(boxes, lexicon);
  for (auto v : kMonitorVitals) {
    const auto& anchor = anchors.by_vital[idx(v)];
    if (!anchor) continue;
    const auto region = expand_region(*anchor, config.fx, config.fy, image);
    auto chosen = select_value(region, boxes, config.ranges[idx(v)], *anchor);
    if (!chosen) continue;
    out.vitals[idx(v)] = VitalReading{*parse_numeric(chosen->text), *chosen, *anchor};
  }
  return out;
}

// ---- files -----------------------------------------------------------------

DetectionFile parse_detections(std::string_view text, std::string image_id) {
  DetectionFile file;
  file.image_id = std::move(image_id);
  int lineno = 0;
  for (auto raw : split(text, '\n')) {
    ++lineno;
    if (!raw.empty() && raw.back() == '\r') raw.remove_suffix(1);
    auto line = trim(raw);
    if (line.empty()) continue;
    if (line.front() == '#') {
      std::istringstream in{std::string(line.substr(1))};
      std::string word;
      double w = 0, h = 0;
      if (in >> word && word == "image") {
        if (!(in >> w >> h) || w <= 0 || h <= 0)
          throw Error(ErrorCode::kDecode, fmt::format("line {}: bad image header", lineno));
        file.image = ImageSize{w, h};
      }
      continue;
    }
    auto f = split(raw, '\t');
    if (f.size() != 6) throw Error(ErrorCode::kDecode, fmt::format("line {}: expected 6 tab-separated fields", lineno));
    TextBox b;
    b.text = std::string(trim(f[0]));
    try {
      b.confidence = parse_double(f[1], "confidence");
      b.x = parse_double(f[2], "x");
      b.y = parse_double(f[3], "y");
      b.w = parse_double(f[4], "w");
      b.h = parse_double(f[5], "h");
      b.validate();
    } catch (const Error& e) {
      throw Error(ErrorCode::kDecode, fmt::format("line {}: {}", lineno, e.what()));
    }
    file.boxes.push_back(std::move(b));
  }
  return file;
}

std::string format_detections(const DetectionFile& file) {
  std::string out;
  if (file.image) out += fmt::format("# image {} {}\n", file.image->width, file.image->height);
  for (const auto& b : file.boxes) out += fmt::format("{}\t{}\t{}\t{}\t{}\t{}\n", b.text, b.confidence, b.x, b.y, b.w, b.h);
  return out;
}

GroundTruth parse_truth(std::string_view text) {
  GroundTruth truth;
  int lineno = 0;
  for (auto raw : split(text, '\n')) {
    ++lineno;
    auto line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    auto f = split(line, '\t');
    if (f.size() != 3) throw Error(ErrorCode::kDecode, fmt::format("truth line {}: expected 3 fields", lineno));
    auto v = parse_monitor_vital(f[1]);
    if (!v) throw Error(ErrorCode::kDecode, fmt::format("truth line {}: unknown vital '{}'", lineno, f[1]));
    auto value = parse_numeric(f[2]);
    if (!value) throw Error(ErrorCode::kDecode, fmt::format("truth line {}: bad value '{}'", lineno, f[2]));
    truth[std::string(trim(f[0]))][*v] = *value;
  }
  return truth;
}

std::vector<BatchEntry> batch_extract(const std::filesystem::path& dir, unsigned workers,
                                      const AnchorLexicon& lexicon, const ExtractConfig& config) {
  if (workers == 0) throw Error(ErrorCode::kInvalidArgument, "workers must be >= 1");
  if (!std::filesystem::is_directory(dir)) throw Error(ErrorCode::kNotFound, "not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".tsv") files.push_back(e.path());
  std::sort(files.begin(), files.end(), [](const auto& a, const auto& b) { return a.stem() < b.stem(); });

  std::vector<BatchEntry> out(files.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (;;) {
      const auto i = next.fetch_add(1);
      if (i >= files.size()) return;
      auto& entry = out[i];
      entry.image_id = files[i].stem().string();
      try {
        const Bytes raw = read_file(files[i].string());
        auto det = parse_detections(std::string_view(reinterpret_cast<const char*>(raw.data()), raw.size()),
                                    entry.image_id);
        entry.extraction = extract(det.boxes, lexicon, config, det.image, entry.image_id);
      } catch (const std::exception& e) {
        entry.error = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  const unsigned n = std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(files.size(), 1)));
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  return out;
}

// ---- scoring ---------------------------------------------------------------

double VitalScore::precision() const noexcept {
  return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
}
double VitalScore::recall() const noexcept {
  return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
}
double VitalScore::f1() const noexcept {
  const double p = precision(), r = recall();
  return p + r == 0 ? 0.0 : 2 * p * r / (p + r);
}
double VitalScore::accuracy() const noexcept {
  return images_with_truth == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(images_with_truth);
}

std::string Evaluation::table() const {
  std::string out = fmt::format("{:<6}{:>10}{:>10}{:>10}{:>10}{:>6}{:>6}{:>6}\n", "vital", "precision", "recall",
                                "f1", "accuracy", "tp", "fp", "fn");
  for (auto v : kMonitorVitals) {
    const auto& s = by_vital[idx(v)];
    out += fmt::format("{:<6}{:>10.3f}{:>10.3f}{:>10.3f}{:>10.3f}{:>6}{:>6}{:>6}\n", monitor_vital_name(v),
                       s.precision(), s.recall(), s.f1(), s.accuracy(), s.tp, s.fp, s.fn);
  }
  return out;
}

Evaluation evaluate(const std::vector<Extraction>& predictions, const GroundTruth& truth) {
  Evaluation ev;
  std::set<std::string> seen;
  for (const auto& p : predictions) {
    auto it = truth.find(p.image_id);
    if (it == truth.end()) throw Error(ErrorCode::kInvalidArgument, "no ground truth for image " + p.image_id);
    if (!seen.insert(p.image_id).second) throw Error(ErrorCode::kInvalidArgument, "duplicate prediction " + p.image_id);
    for (auto v : kMonitorVitals) {
      auto& s = ev.by_vital[idx(v)];
      const auto& pred = p.vitals[idx(v)];
      auto t = it->second.find(v);
      const bool has_truth = t != it->second.end();
      if (has_truth) ++s.images_with_truth;
      if (pred && has_truth && pred->value == t->second) {
        ++s.tp;
        continue;
      }
      if (pred) ++s.fp;
      if (has_truth) ++s.fn;
    }
  }
  for (const auto& [id, vitals] : truth)
    if (!seen.count(id)) throw Error(ErrorCode::kInvalidArgument, "no prediction for image " + id);
  return ev;
}

// ---- fixtures ----------------------------------------------------------------

Layout generate_layout(std::uint64_t seed, const LayoutOptions& options) {
  SeededRng rng(seed);
  Layout layout;
  layout.detections.image_id = fmt::format("layout_{:06}", seed);
  layout.detections.image = ImageSize{options.width, options.height};
  auto& boxes = layout.detections.boxes;

  static const std::array<std::vector<std::string>, 3> kLabels{{{"HR", "ECG", "PR"}, {"SpO2", "%SpO2"}, {"RR", "Resp"}}};
  static const std::array<ValueRange, 3> kValues{{{100, 180}, {85, 100}, {30, 70}}};
  static const std::array<ValueRange, 3> kHiLimits{{{160, 200}, {95, 100}, {60, 80}}};
  static const std::array<ValueRange, 3> kLoLimits{{{80, 100}, {85, 90}, {20, 30}}};
  static const std::array<std::string, 3> kUnits{"bpm", "%", "rpm"};
  const double panel_h = (options.height - 40) / 3;

  auto draw = [&](ValueRange r) { return r.lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(r.hi - r.lo + 1))); };

  for (std::size_t i = 0; i < 3; ++i) {
    const auto& names = kLabels[i];
    TextBox label;
    label.text = names[rng.below(names.size())];
    label.confidence = rng.uniform(0.85, 0.99);
    label.w = 14.0 * static_cast<double>(std::max<std::size_t>(label.text.size(), 2)) + 8;
    label.h = 20;
    const bool value_left = rng.uniform() < 0.3;
    label.x = value_left ? rng.uniform(220, 300) : rng.uniform(40, 120);
    label.y = 20 + panel_h * static_cast<double>(i) + rng.uniform(10, 30);

    const int value = draw(kValues[i]);
    TextBox big;
    big.text = std::to_string(value);
    big.confidence = rng.uniform(0.7, 0.99);
    big.w = 70 + rng.uniform(0, 20);
    big.h = 50;
    big.x = value_left ? label.x - 20 - big.w : label.x + label.w + 20;
    big.y = label.y - 5;
    boxes.push_back(label);
    boxes.push_back(big);
    boxes.push_back(TextBox{kUnits[i], rng.uniform(0.6, 0.95), label.x, label.y + 24, 30, 12});

    if (options.distractors) {
      const double lx = big.x + big.w + 5;
      boxes.push_back(TextBox{std::to_string(draw(kHiLimits[i])), rng.uniform(0.5, 0.9), lx, big.y, 24, 12});
      boxes.push_back(TextBox{std::to_string(draw(kLoLimits[i])), rng.uniform(0.5, 0.9), lx, big.y + 30, 24, 12});
    }
    layout.truth[kMonitorVitals[i]] = value;
  }
  // detection order from a real recognizer carries no meaning
  for (std::size_t i = boxes.size(); i > 1; --i) std::swap(boxes[i - 1], boxes[rng.below(i)]);
  return layout;
}

}  // namespace neoward::ocr
