#pragma once

// Threshold events, Bayesian false-alarm scoring, dynamic-window clustering and
// the acknowledgment state machine.

#include <array>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "neoward/vitalsim.hpp"

namespace neoward {

enum class AlertSource : std::uint8_t { kHr = 0, kSpo2 = 1, kRr = 2, kTemp = 3, kRisk = 4 };
std::string_view alert_source_name(AlertSource s);
inline AlertSource source_of(Vital v) { return static_cast<AlertSource>(v); }

enum class Direction : std::uint8_t { kLow, kHigh };
std::string_view direction_name(Direction d);

enum class PatientCategory { kExtremePreterm, kVeryPreterm, kModerateLatePreterm, kTerm };
std::string_view category_name(PatientCategory c);
std::optional<PatientCategory> parse_category(std::string_view name);

/// Per-vital inclusive normal range in centi-units. The shipped defaults are
/// placeholders, not clinically validated limits.
struct ThresholdProfile {
  PatientCategory category = PatientCategory::kTerm;
  std::array<VitalBounds, 4> bounds{};
  void validate() const;
};
ThresholdProfile default_profile(PatientCategory category);
/// Text config, one line per bound: `<category>.<vital> = <low> <high>` in
/// natural units (bpm, %, /min, degC). Unlisted entries keep defaults.
std::map<PatientCategory, ThresholdProfile> parse_threshold_config(std::string_view text);

struct RawEvent {
  DeviceId device_id = 0;
  AlertSource source = AlertSource::kHr;
  Direction direction = Direction::kLow;
  std::int64_t t_ms = 0;
  std::int32_t value = 0;
  bool degraded = false;  // reading came from a sensor flagged degraded
};

std::vector<RawEvent> threshold_check(const VitalSample& sample, const ThresholdProfile& profile);

/// Sensor reliability r plus Beta(a, b) event history for one device/source.
struct ReliabilityState {
  double r = 0.9;
  double a = 1.0;
  double b = 1.0;
  ReliabilityState() = default;
  ReliabilityState(double r_, double a_, double b_);
  double prior() const noexcept { return a / (a + b); }
};

/// P(true event | abnormal reading) = prior*r / (prior*r + (1-prior)*(1-r)).
double bayesian_posterior(double prior, double r);
double bayesian_posterior(const RawEvent& event, const ReliabilityState& rel);

struct ClusterConfig {
  std::int64_t base_window_ms = 30'000;
  double growth = 1.5;
  std::int64_t max_window_ms = 300'000;
  /// Gap allowed after a cluster already holding `members` events.
  double window_ms(std::size_t members) const;
};

enum class AlertState { kRaised, kAcknowledged, kSuppressed };
std::string_view alert_state_name(AlertState s);

struct Alert {
  std::uint64_t alert_id = 0;
  DeviceId device_id = 0;
  AlertSource source = AlertSource::kHr;
  Direction direction = Direction::kLow;
  std::int64_t first_t_ms = 0;
  std::int64_t last_t_ms = 0;
  std::uint32_t event_count = 0;
  double posterior = 0.0;
  AlertState state = AlertState::kRaised;
  double window_ms = 0.0;  // cluster window at close (0 while open)
  std::optional<std::int64_t> acked_at_ms;
  std::string acked_by;
};

/// Greedy dynamic-window clustering of one device/source/direction stream.
/// Consecutive readings inside one cluster are treated as independent
/// evidence: each event's posterior uses the previous event's posterior as
/// its prior, starting from `prior`. Alert.posterior is the member maximum.
/// Returned alerts are in raised state with window_ms set; ids are 0.
std::vector<Alert> cluster(const std::vector<RawEvent>& events, const ClusterConfig& config,
                           double prior, double r);

struct AlertEngineConfig {
  ClusterConfig clustering{};
  double posterior_gate = 0.5;
  std::int64_t quiet_period_ms = 120'000;
  double risk_gate = 0.7;
  double default_reliability = 0.9;
  double degraded_reliability = 0.6;
  PatientCategory default_category = PatientCategory::kTerm;
  std::map<PatientCategory, ThresholdProfile> profiles;
};

/// Streaming alert evaluator. All entry points serialise on one internal
/// mutex, which plays the role of the evaluator task's mailbox.
class AlertEngine {
 public:
  explicit AlertEngine(AlertEngineConfig config = {});

  /// Returns alerts raised or updated by this sample.
  std::vector<Alert> on_sample(const VitalSample& sample);
  std::vector<Alert> on_event(const RawEvent& event, double r);
  /// Model output enters as a fifth source when p_high reaches the risk gate.
  std::vector<Alert> on_risk(DeviceId device, std::int64_t t_ms, double p_high);
  /// Closes clusters whose window has expired by now_ms.
  std::vector<Alert> tick(std::int64_t now_ms);

  /// raised -> acknowledged; repeated acks are no-ops. kNotFound for unknown ids.
  Alert acknowledge(std::uint64_t alert_id, const std::string& user, std::int64_t now_ms);
  /// raised/acknowledged -> suppressed (dismissed as a false alarm).
  Alert suppress(std::uint64_t alert_id, const std::string& user);

  std::vector<Alert> alerts(std::optional<AlertState> state = std::nullopt) const;
  std::optional<Alert> get(std::uint64_t alert_id) const;

  void set_category(DeviceId device, PatientCategory category);
  void set_reliability(DeviceId device, AlertSource source, ReliabilityState state);
  ReliabilityState reliability(DeviceId device, AlertSource source) const;

 private:
  struct StreamKey {
    DeviceId device;
    AlertSource source;
    Direction direction;
    auto operator<=>(const StreamKey&) const = default;
  };
  struct OpenCluster {
    std::int64_t first_t = 0;
    std::int64_t last_t = 0;
    std::uint32_t count = 0;
    double chain = 0.0;
    double max_p = 0.0;
    std::optional<std::uint64_t> alert_id;
  };

  std::vector<Alert> handle(const RawEvent& event, double r);
  std::optional<Alert> close(const StreamKey& key, OpenCluster& c);
  ReliabilityState& rel(DeviceId device, AlertSource source);
  const ThresholdProfile& profile_for(DeviceId device) const;

  AlertEngineConfig config_;
  mutable std::mutex mu_;
  std::uint64_t next_id_ = 1;
  std::map<std::uint64_t, Alert> alerts_;
  std::map<StreamKey, OpenCluster> open_;
  std::map<StreamKey, std::uint64_t> last_acked_;
  std::map<std::pair<DeviceId, AlertSource>, ReliabilityState> reliability_;
  std::map<DeviceId, PatientCategory> categories_;
};

struct SuppressionReport {
  std::size_t raw_alarms = 0;
  std::size_t filtered_alarms = 0;
  std::size_t raw_false_alarms = 0;
  std::size_t filtered_false_alarms = 0;
  std::size_t true_events = 0;
  std::size_t missed_true_events = 0;
  double false_alarm_reduction() const {
    return raw_false_alarms == 0 ? 0.0
                                 : 1.0 - static_cast<double>(filtered_false_alarms) / static_cast<double>(raw_false_alarms);
  }
};

/// Replays a labeled scenario (events are true, glitches are false) through
/// clustering with and without the posterior gate. An alert is true when any
/// member reading carries the synthetic-event flag.
SuppressionReport evaluate_suppression(const Scenario& scenario, DeviceId device,
                                       const ThresholdProfile& profile, const ReliabilityState& rel,
                                       const ClusterConfig& clustering = {}, double gate = 0.5);

}  // namespace neoward
