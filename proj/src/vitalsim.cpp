#include "neoward/vitalsim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace neoward {

namespace {

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double parse_double(std::string_view s, std::string_view what) {
  std::string tmp(trim(s));
  try {
    std::size_t used = 0;
    double v = std::stod(tmp, &used);
    if (used != tmp.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorCode::kMalformed, "bad number for " + std::string(what) + ": '" + tmp + "'");
  }
}

Curve parse_curve(std::string_view value) {
  Curve curve;
  std::istringstream in{std::string(value)};
  std::string tok;
  while (in >> tok) {
    auto colon = tok.find(':');
    if (colon == std::string::npos) {
      curve.knots.emplace_back(0.0, parse_double(tok, "curve"));
    } else {
      curve.knots.emplace_back(parse_double(tok.substr(0, colon), "curve time"),
                               parse_double(tok.substr(colon + 1), "curve value"));
    }
  }
  if (curve.knots.empty()) throw Error(ErrorCode::kMalformed, "empty curve");
  for (std::size_t i = 1; i < curve.knots.size(); ++i) {
    if (curve.knots[i].first <= curve.knots[i - 1].first)
      throw Error(ErrorCode::kMalformed, "curve knots must have ascending times");
  }
  return curve;
}

std::int32_t to_centi(double v) { return static_cast<std::int32_t>(std::lround(v * 100.0)); }

}  // namespace

std::string_view vital_name(Vital v) {
  switch (v) {
    case Vital::kHr: return "hr";
    case Vital::kSpo2: return "spo2";
    case Vital::kRr: return "rr";
    case Vital::kTemp: return "temp";
  }
  return "?";
}

std::optional<Vital> parse_vital(std::string_view name) {
  std::string lower;
  for (char c : name) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (lower == "hr") return Vital::kHr;
  if (lower == "spo2") return Vital::kSpo2;
  if (lower == "rr") return Vital::kRr;
  if (lower == "temp") return Vital::kTemp;
  return std::nullopt;
}

std::int32_t VitalSample::value(Vital v) const noexcept {
  switch (v) {
    case Vital::kHr: return hr;
    case Vital::kSpo2: return spo2;
    case Vital::kRr: return rr;
    case Vital::kTemp: return temp;
  }
  return 0;
}

void VitalSample::set(Vital v, std::int32_t centi) noexcept {
  switch (v) {
    case Vital::kHr: hr = centi; break;
    case Vital::kSpo2: spo2 = centi; break;
    case Vital::kRr: rr = centi; break;
    case Vital::kTemp: temp = centi; break;
  }
}

VitalBounds clamp_bounds(Vital v) noexcept {
  switch (v) {
    case Vital::kHr: return {0, 30000};
    case Vital::kSpo2: return {0, 10000};
    case Vital::kRr: return {0, 20000};
    case Vital::kTemp: return {2000, 4500};
  }
  return {0, 0};
}

VitalSample clamp(VitalSample s) noexcept {
  for (auto v : kAllVitals) {
    auto b = clamp_bounds(v);
    s.set(v, std::clamp(s.value(v), b.lo, b.hi));
  }
  return s;
}

bool within_clamp_bounds(const VitalSample& s) noexcept {
  return std::all_of(kAllVitals.begin(), kAllVitals.end(), [&](Vital v) {
    auto b = clamp_bounds(v);
    return s.value(v) >= b.lo && s.value(v) <= b.hi;
  });
}

double Curve::at(double t_s) const {
  if (knots.empty()) return 0.0;
  if (t_s <= knots.front().first) return knots.front().second;
  if (t_s >= knots.back().first) return knots.back().second;
  auto it = std::upper_bound(knots.begin(), knots.end(), t_s,
                             [](double t, const auto& k) { return t < k.first; });
  const auto& [t1, v1] = *it;
  const auto& [t0, v0] = *(it - 1);
  return v0 + (v1 - v0) * (t_s - t0) / (t1 - t0);
}

std::string_view event_kind_name(EventKind k) {
  switch (k) {
    case EventKind::kBradycardia: return "bradycardia";
    case EventKind::kDesaturation: return "desaturation";
    case EventKind::kHypothermia: return "hypothermia";
    case EventKind::kApnea: return "apnea";
  }
  return "?";
}

std::optional<EventKind> parse_event_kind(std::string_view name) {
  if (name == "bradycardia") return EventKind::kBradycardia;
  if (name == "desaturation") return EventKind::kDesaturation;
  if (name == "hypothermia") return EventKind::kHypothermia;
  if (name == "apnea") return EventKind::kApnea;
  return std::nullopt;
}

Vital affected_vital(EventKind k) noexcept {
  switch (k) {
    case EventKind::kBradycardia: return Vital::kHr;
    case EventKind::kDesaturation: return Vital::kSpo2;
    case EventKind::kHypothermia: return Vital::kTemp;
    case EventKind::kApnea: return Vital::kRr;
  }
  return Vital::kHr;
}

const Curve& Scenario::baseline(Vital v) const {
  switch (v) {
    case Vital::kHr: return hr;
    case Vital::kSpo2: return spo2;
    case Vital::kRr: return rr;
    case Vital::kTemp: return temp;
  }
  return hr;
}

void Scenario::validate() const {
  if (!(duration_s > 0)) throw Error(ErrorCode::kInvalidArgument, "scenario duration must be > 0");
  for (double s : noise_std) {
    if (!(s >= 0)) throw Error(ErrorCode::kInvalidArgument, "noise std must be >= 0");
  }
  for (const auto& e : events) {
    if (e.onset_s < 0 || e.duration_s <= 0 || e.onset_s + e.duration_s > duration_s)
      throw Error(ErrorCode::kInvalidArgument,
                  "event interval outside scenario: " + std::string(event_kind_name(e.kind)));
  }
  for (const auto& g : glitches) {
    if (g.t_s < 0 || g.t_s >= duration_s)
      throw Error(ErrorCode::kInvalidArgument, "glitch outside scenario");
  }
}

Scenario parse_scenario(std::string_view text) {
  Scenario sc;
  sc.events.clear();
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::string t = trim(line);
    if (t.empty()) continue;

    auto fail = [&](const std::string& msg) {
      throw Error(ErrorCode::kMalformed, "scenario line " + std::to_string(lineno) + ": " + msg);
    };

    if (t.rfind("event ", 0) == 0 || t.rfind("glitch ", 0) == 0) {
      std::istringstream words(t);
      std::string head, kind;
      words >> head >> kind;
      double onset = -1, duration = -1, magnitude = 0, at = -1;
      std::string kv;
      while (words >> kv) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) fail("expected key=value, got '" + kv + "'");
        auto key = kv.substr(0, eq);
        double v = parse_double(kv.substr(eq + 1), key);
        if (key == "onset") onset = v;
        else if (key == "duration") duration = v;
        else if (key == "magnitude") magnitude = v;
        else if (key == "at") at = v;
        else fail("unknown attribute '" + key + "'");
      }
      if (head == "event") {
        auto k = parse_event_kind(kind);
        if (!k) fail("unknown event kind '" + kind + "'");
        if (onset < 0 || duration <= 0) fail("event needs onset= and duration=");
        sc.events.push_back({*k, onset, duration, magnitude});
      } else {
        auto v = parse_vital(kind);
        if (!v) fail("unknown glitch vital '" + kind + "'");
        if (at < 0) fail("glitch needs at=");
        sc.glitches.push_back({*v, at, magnitude});
      }
      continue;
    }

    auto eq = t.find('=');
    if (eq == std::string::npos) fail("expected key = value");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key == "name") sc.name = value;
    else if (key == "duration_s") sc.duration_s = parse_double(value, key);
    else if (key == "start_ms") sc.start_ms = static_cast<std::int64_t>(parse_double(value, key));
    else if (key == "seed") sc.seed = static_cast<std::uint64_t>(std::stoull(value));
    else if (key == "baseline.hr") sc.hr = parse_curve(value);
    else if (key == "baseline.spo2") sc.spo2 = parse_curve(value);
    else if (key == "baseline.rr") sc.rr = parse_curve(value);
    else if (key == "baseline.temp") sc.temp = parse_curve(value);
    else if (key == "baseline.motion") sc.motion = parse_curve(value);
    else if (key.rfind("noise.", 0) == 0) {
      auto v = parse_vital(key.substr(6));
      if (!v) fail("unknown noise vital '" + key + "'");
      sc.noise_std[static_cast<std::size_t>(*v)] = parse_double(value, key);
    } else {
      fail("unknown key '" + key + "'");
    }
  }
  sc.validate();
  return sc;
}

std::optional<Scenario> builtin_scenario(std::string_view name) {
  Scenario sc;
  sc.name = std::string(name);
  if (name == "stable") return sc;
  if (name == "desaturation") {
    sc.events.push_back({EventKind::kDesaturation, 600, 300, -12.0});
    return sc;
  }
  if (name == "bradycardia") {
    sc.events.push_back({EventKind::kBradycardia, 600, 180, -45.0});
    return sc;
  }
  if (name == "hypothermia") {
    sc.temp = Curve{{{0, 36.8}, {1800, 36.2}, {3600, 35.6}}};
    sc.events.push_back({EventKind::kHypothermia, 1200, 1200, -0.8});
    return sc;
  }
  if (name == "apnea") {
    sc.events.push_back({EventKind::kApnea, 900, 30, -40.0});
    return sc;
  }
  if (name == "active") {
    sc.motion = Curve{{{0, 10}, {600, 120}, {1200, 220}, {1800, 30}}};
    return sc;
  }
  return std::nullopt;
}

Scenario load_scenario(const std::string& name_or_path) {
  if (auto sc = builtin_scenario(name_or_path)) return *sc;
  std::ifstream in(name_or_path);
  if (!in) throw Error(ErrorCode::kNotFound, "no built-in scenario or file named " + name_or_path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str());
}

VitalSample generate_sample(const Scenario& scenario, DeviceId device_id, std::int64_t t_ms) {
  if (t_ms < scenario.start_ms || t_ms >= scenario.end_ms())
    throw Error(ErrorCode::kOutOfRange, "t_ms outside scenario duration");
  const double t_s = static_cast<double>(t_ms - scenario.start_ms) / 1000.0;

  VitalSample s;
  s.device_id = device_id;
  s.t_ms = t_ms;
  std::array<double, 4> value{};
  for (auto v : kAllVitals) value[static_cast<std::size_t>(v)] = scenario.baseline(v).at(t_s);

  for (const auto& e : scenario.events) {
    if (t_s >= e.onset_s && t_s < e.onset_s + e.duration_s) {
      value[static_cast<std::size_t>(affected_vital(e.kind))] += e.magnitude;
      s.flags |= sample_flags::kSyntheticEvent;
    }
  }
  for (const auto& g : scenario.glitches) {
    if (std::abs(t_s - g.t_s) < 1e-9) value[static_cast<std::size_t>(g.vital)] += g.magnitude;
  }

  for (auto v : kAllVitals) {
    auto i = static_cast<std::size_t>(v);
    double noise = 0.0;
    if (scenario.noise_std[i] > 0) {
      noise = scenario.noise_std[i] *
              hash_gaussian(scenario.seed, device_id * 8 + i, static_cast<std::uint64_t>(t_ms));
    }
    s.set(v, to_centi(value[i] + noise));
  }
  double motion = std::clamp(scenario.motion.at(t_s), 0.0, 255.0);
  s.motion = static_cast<std::uint8_t>(std::lround(motion));
  return clamp(s);
}

void RateConfig::validate() const {
  if (mid_threshold > high_threshold)
    throw Error(ErrorCode::kInvalidArgument, "rate tiers must be ordered");
  if (!(low_hz > 0) || mid_hz < low_hz || high_hz < mid_hz)
    throw Error(ErrorCode::kInvalidArgument, "rates must be positive and non-decreasing");
}

double adaptive_rate(std::uint8_t motion, const RateConfig& config) {
  config.validate();
  if (motion >= config.high_threshold) return config.high_hz;
  if (motion >= config.mid_threshold) return config.mid_hz;
  return config.low_hz;
}

double power_current(const PowerMode& mode) {
  if (mode.kind == PowerMode::Kind::kAdvertising) return 12.79;
  switch (mode.update_interval_s) {
    case 1: return 13.52;
    case 2: return 12.74;
    case 4: return 12.70;
    case 5: return 12.69;
    default:
      throw Error(ErrorCode::kUnsupported,
                  "no measurement for update interval " + std::to_string(mode.update_interval_s) + " s");
  }
}

double battery_life_h(double capacity_mah, double current_ma) {
  if (!(capacity_mah > 0) || !(current_ma > 0))
    throw Error(ErrorCode::kInvalidArgument, "capacity and current must be positive");
  // Currents are known to 0.01 mA; divide in integer units so the 0.1 h
  // rounding is exact.
  auto centi_ma = static_cast<long long>(std::llround(current_ma * 100.0));
  auto milli_mah = static_cast<long long>(std::llround(capacity_mah * 1000.0));
  if (centi_ma <= 0) throw Error(ErrorCode::kInvalidArgument, "current below resolution");
  // tenths of hours = capacity[mAh] * 10 / current[mA] = milli_mah / centi_ma
  long long num = milli_mah;
  long long tenths = (2 * num + centi_ma) / (2 * centi_ma);
  return static_cast<double>(tenths) / 10.0;
}

}  // namespace neoward
