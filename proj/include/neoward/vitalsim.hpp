#pragma once

// Simulated wearable: scenario-driven vitals, motion-adaptive sampling and the
// measured current/battery table.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "neoward/common.hpp"

namespace neoward {

using DeviceId = std::uint64_t;

enum class Vital : std::uint8_t { kHr = 0, kSpo2 = 1, kRr = 2, kTemp = 3 };
inline constexpr std::array<Vital, 4> kAllVitals = {Vital::kHr, Vital::kSpo2, Vital::kRr,
                                                    Vital::kTemp};
std::string_view vital_name(Vital v);
std::optional<Vital> parse_vital(std::string_view name);

namespace sample_flags {
inline constexpr std::uint8_t kSensorDegraded = 0x01;
inline constexpr std::uint8_t kSyntheticEvent = 0x02;
}  // namespace sample_flags

/// One multimodal reading. Vitals are fixed-point centi-units
/// (centi-bpm, centi-percent, centi-breaths/min, centi-degC).
struct VitalSample {
  DeviceId device_id = 0;
  std::int64_t t_ms = 0;
  std::int32_t hr = 0;
  std::int32_t spo2 = 0;
  std::int32_t rr = 0;
  std::int32_t temp = 0;
  std::uint8_t motion = 0;
  std::uint8_t flags = 0;

  std::int32_t value(Vital v) const noexcept;
  void set(Vital v, std::int32_t centi) noexcept;
  bool operator==(const VitalSample&) const = default;
};

struct VitalBounds {
  std::int32_t lo;
  std::int32_t hi;
};
VitalBounds clamp_bounds(Vital v) noexcept;
VitalSample clamp(VitalSample s) noexcept;
bool within_clamp_bounds(const VitalSample& s) noexcept;

/// Piecewise-linear curve over scenario seconds; constant beyond its ends.
struct Curve {
  std::vector<std::pair<double, double>> knots;  // (t_s, value), ascending t_s
  double at(double t_s) const;
  static Curve constant(double v) { return Curve{{{0.0, v}}}; }
};

enum class EventKind { kBradycardia, kDesaturation, kHypothermia, kApnea };
std::string_view event_kind_name(EventKind k);
std::optional<EventKind> parse_event_kind(std::string_view name);
Vital affected_vital(EventKind k) noexcept;

struct ScenarioEvent {
  EventKind kind;
  double onset_s;
  double duration_s;
  double magnitude;  // additive, natural units of the affected vital
};

/// Single-sample sensor artifact; not a physiological event, so unflagged.
struct Glitch {
  Vital vital;
  double t_s;
  double magnitude;
};

struct Scenario {
  std::string name = "stable";
  double duration_s = 3600;
  std::int64_t start_ms = 1'700'000'000'000;
  std::uint64_t seed = 42;
  Curve hr = Curve::constant(140.0);
  Curve spo2 = Curve::constant(97.0);
  Curve rr = Curve::constant(45.0);
  Curve temp = Curve::constant(36.8);
  Curve motion = Curve::constant(0.0);
  std::array<double, 4> noise_std = {2.04, 1.39, 2.0, 0.2};  // hr, spo2, rr, temp
  std::vector<ScenarioEvent> events;
  std::vector<Glitch> glitches;

  const Curve& baseline(Vital v) const;
  std::int64_t end_ms() const { return start_ms + static_cast<std::int64_t>(duration_s * 1000.0); }
  void validate() const;
};

/// Parses the line-oriented scenario format (see docs/scenario-format.md).
Scenario parse_scenario(std::string_view text);
Scenario load_scenario(const std::string& name_or_path);
/// Built-in scenarios: stable, desaturation, bradycardia, hypothermia, apnea, active.
std::optional<Scenario> builtin_scenario(std::string_view name);

VitalSample generate_sample(const Scenario& scenario, DeviceId device_id, std::int64_t t_ms);

struct RateConfig {
  std::uint8_t mid_threshold = 64;
  std::uint8_t high_threshold = 192;
  double low_hz = 1.0;
  double mid_hz = 4.0;
  double high_hz = 10.0;
  void validate() const;
};

double adaptive_rate(std::uint8_t motion, const RateConfig& config = {});

struct PowerMode {
  enum class Kind { kAdvertising, kConnected } kind = Kind::kAdvertising;
  int update_interval_s = 1;

  static PowerMode advertising() { return {Kind::kAdvertising, 0}; }
  static PowerMode connected(int interval_s) { return {Kind::kConnected, interval_s}; }
};

inline constexpr std::array<int, 4> kSupportedIntervals = {1, 2, 4, 5};

/// Measured average current in mA. Throws kUnsupported for intervals outside
/// the measured set.
double power_current(const PowerMode& mode);

/// capacity / current in hours, rounded to 0.1 h.
double battery_life_h(double capacity_mah, double current_ma);

}  // namespace neoward
