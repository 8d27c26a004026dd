#include "neoward/alerts.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace neoward {

std::string_view alert_source_name(AlertSource s) {
  switch (s) {
    case AlertSource::kHr: return "hr";
    case AlertSource::kSpo2: return "spo2";
    case AlertSource::kRr: return "rr";
    case AlertSource::kTemp: return "temp";
    case AlertSource::kRisk: return "risk";
  }
  return "?";
}

std::string_view direction_name(Direction d) { return d == Direction::kLow ? "low" : "high"; }

std::string_view category_name(PatientCategory c) {
  switch (c) {
    case PatientCategory::kExtremePreterm: return "extreme-preterm";
    case PatientCategory::kVeryPreterm: return "very-preterm";
    case PatientCategory::kModerateLatePreterm: return "moderate-late-preterm";
    case PatientCategory::kTerm: return "term";
  }
  return "?";
}

std::optional<PatientCategory> parse_category(std::string_view name) {
  for (auto c : {PatientCategory::kExtremePreterm, PatientCategory::kVeryPreterm,
                 PatientCategory::kModerateLatePreterm, PatientCategory::kTerm}) {
    if (category_name(c) == name) return c;
  }
  return std::nullopt;
}

std::string_view alert_state_name(AlertState s) {
  switch (s) {
    case AlertState::kRaised: return "raised";
    case AlertState::kAcknowledged: return "acknowledged";
    case AlertState::kSuppressed: return "suppressed";
  }
  return "?";
}

void ThresholdProfile::validate() const {
  for (auto v : kAllVitals) {
    const auto& b = bounds[static_cast<std::size_t>(v)];
    if (!(b.lo < b.hi))
      throw Error(ErrorCode::kInvalidArgument,
                  "threshold low must be < high for " + std::string(vital_name(v)) + " in " +
                      std::string(category_name(category)));
  }
}

ThresholdProfile default_profile(PatientCategory category) {
  // Placeholder limits (centi-units): hr, spo2, rr, temp.
  ThresholdProfile p;
  p.category = category;
  switch (category) {
    case PatientCategory::kExtremePreterm:
      p.bounds = {{{10000, 20000}, {8500, 10000}, {3000, 7000}, {3600, 3780}}};
      break;
    case PatientCategory::kVeryPreterm:
      p.bounds = {{{10000, 19000}, {8800, 10000}, {3000, 6500}, {3600, 3780}}};
      break;
    case PatientCategory::kModerateLatePreterm:
      p.bounds = {{{10000, 18500}, {8800, 10000}, {3000, 6000}, {3600, 3780}}};
      break;
    case PatientCategory::kTerm:
      p.bounds = {{{10000, 18000}, {9000, 10000}, {3000, 6000}, {3600, 3780}}};
      break;
  }
  return p;
}

std::map<PatientCategory, ThresholdProfile> parse_threshold_config(std::string_view text) {
  std::map<PatientCategory, ThresholdProfile> out;
  for (auto c : {PatientCategory::kExtremePreterm, PatientCategory::kVeryPreterm,
                 PatientCategory::kModerateLatePreterm, PatientCategory::kTerm})
    out[c] = default_profile(c);

  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    auto fail = [&](const std::string& msg) {
      throw Error(ErrorCode::kMalformed, "threshold config line " + std::to_string(lineno) + ": " + msg);
    };
    auto eq = line.find('=');
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (eq == std::string::npos) fail("expected <category>.<vital> = <low> <high>");
    std::string key = line.substr(0, eq);
    key.erase(std::remove_if(key.begin(), key.end(), ::isspace), key.end());
    auto dot = key.rfind('.');
    if (dot == std::string::npos) fail("key needs <category>.<vital>");
    auto cat = parse_category(key.substr(0, dot));
    auto vital = parse_vital(key.substr(dot + 1));
    if (!cat) fail("unknown category '" + key.substr(0, dot) + "'");
    if (!vital) fail("unknown vital '" + key.substr(dot + 1) + "'");
    std::istringstream values(line.substr(eq + 1));
    double lo = 0, hi = 0;
    if (!(values >> lo >> hi)) fail("expected two numbers");
    out[*cat].bounds[static_cast<std::size_t>(*vital)] = {static_cast<std::int32_t>(std::lround(lo * 100)),
                                                           static_cast<std::int32_t>(std::lround(hi * 100))};
  }
  for (const auto& [c, p] : out) p.validate();
  return out;
}

std::vector<RawEvent> threshold_check(const VitalSample& sample, const ThresholdProfile& profile) {
  std::vector<RawEvent> out;
  for (auto v : kAllVitals) {
    const auto& b = profile.bounds[static_cast<std::size_t>(v)];
    const auto value = sample.value(v);
    if (value >= b.lo && value <= b.hi) continue;
    out.push_back({sample.device_id, source_of(v), value < b.lo ? Direction::kLow : Direction::kHigh, sample.t_ms,
                   value, (sample.flags & sample_flags::kSensorDegraded) != 0});
  }
  return out;
}

ReliabilityState::ReliabilityState(double r_, double a_, double b_) : r(r_), a(a_), b(b_) {
  if (!(r > 0.0 && r < 1.0)) throw Error(ErrorCode::kInvalidArgument, "sensor reliability must lie in (0,1)");
  if (!(a >= 1.0 && b >= 1.0)) throw Error(ErrorCode::kInvalidArgument, "history counts must be >= 1");
}

double bayesian_posterior(double prior, double r) {
  if (!(r > 0.0 && r < 1.0)) throw Error(ErrorCode::kInvalidArgument, "sensor reliability must lie in (0,1)");
  if (!(prior >= 0.0 && prior <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "prior must lie in [0,1]");
  const double true_alarm = prior * r;
  const double false_alarm = (1.0 - prior) * (1.0 - r);
  return true_alarm / (true_alarm + false_alarm);
}

double bayesian_posterior(const RawEvent&, const ReliabilityState& rel) { return bayesian_posterior(rel.prior(), rel.r); }

double ClusterConfig::window_ms(std::size_t members) const {
  const double exponent = members == 0 ? 0.0 : static_cast<double>(members - 1);
  return std::min(static_cast<double>(base_window_ms) * std::pow(growth, exponent),
                  static_cast<double>(max_window_ms));
}

std::vector<Alert> cluster(const std::vector<RawEvent>& events, const ClusterConfig& config, double prior, double r) {
  for (std::size_t i = 1; i < events.size(); ++i) {
    if (events[i].t_ms < events[i - 1].t_ms) throw Error(ErrorCode::kUnordered, "events must be ordered by t_ms");
    if (events[i].device_id != events[0].device_id || events[i].source != events[0].source)
      throw Error(ErrorCode::kInvalidArgument, "events must share device and source");
  }
  std::vector<Alert> out;
  double chain = prior;
  for (const auto& e : events) {
    bool join = !out.empty() && static_cast<double>(e.t_ms - out.back().last_t_ms) <=
                                    config.window_ms(out.back().event_count);
    if (!join) {
      if (!out.empty()) out.back().window_ms = config.window_ms(out.back().event_count);
      Alert a;
      a.device_id = e.device_id;
      a.source = e.source;
      a.direction = e.direction;
      a.first_t_ms = a.last_t_ms = e.t_ms;
      out.push_back(a);
      chain = prior;
    }
    Alert& a = out.back();
    chain = bayesian_posterior(chain, r);
    a.last_t_ms = e.t_ms;
    ++a.event_count;
    a.posterior = std::max(a.posterior, chain);
  }
  if (!out.empty()) out.back().window_ms = config.window_ms(out.back().event_count);
  return out;
}

// ---- engine ------------------------------------------------------------------

AlertEngine::AlertEngine(AlertEngineConfig config) : config_(std::move(config)) {
  if (config_.profiles.empty()) {
    for (auto c : {PatientCategory::kExtremePreterm, PatientCategory::kVeryPreterm,
                   PatientCategory::kModerateLatePreterm, PatientCategory::kTerm})
      config_.profiles[c] = default_profile(c);
  }
  for (const auto& [c, p] : config_.profiles) p.validate();
}

ReliabilityState& AlertEngine::rel(DeviceId device, AlertSource source) {
  auto [it, inserted] = reliability_.try_emplace({device, source});
  if (inserted) it->second.r = config_.default_reliability;
  return it->second;
}

const ThresholdProfile& AlertEngine::profile_for(DeviceId device) const {
  auto it = categories_.find(device);
  auto cat = it == categories_.end() ? config_.default_category : it->second;
  return config_.profiles.at(cat);
}

std::vector<Alert> AlertEngine::on_sample(const VitalSample& sample) {
  std::lock_guard lock(mu_);
  std::vector<Alert> out;
  for (const auto& e : threshold_check(sample, profile_for(sample.device_id))) {
    double r = e.degraded ? config_.degraded_reliability : rel(e.device_id, e.source).r;
    auto changed = handle(e, r);
    out.insert(out.end(), changed.begin(), changed.end());
  }
  return out;
}

std::vector<Alert> AlertEngine::on_event(const RawEvent& event, double r) {
  std::lock_guard lock(mu_);
  return handle(event, r);
}

std::vector<Alert> AlertEngine::on_risk(DeviceId device, std::int64_t t_ms, double p_high) {
  std::lock_guard lock(mu_);
  if (p_high < config_.risk_gate) return {};
  RawEvent e{device, AlertSource::kRisk, Direction::kHigh, t_ms, static_cast<std::int32_t>(std::lround(p_high * 10000)), false};
  return handle(e, rel(device, AlertSource::kRisk).r);
}

std::vector<Alert> AlertEngine::handle(const RawEvent& e, double r) {
  std::vector<Alert> out;
  StreamKey key{e.device_id, e.source, e.direction};

  // Quiet period after acknowledgment: fold without re-raising.
  if (auto it = last_acked_.find(key); it != last_acked_.end()) {
    Alert& acked = alerts_.at(it->second);
    if (acked.state == AlertState::kAcknowledged && acked.acked_at_ms &&
        e.t_ms - *acked.acked_at_ms <= config_.quiet_period_ms && e.t_ms >= *acked.acked_at_ms) {
      ++acked.event_count;
      acked.last_t_ms = std::max(acked.last_t_ms, e.t_ms);
      out.push_back(acked);
      return out;
    }
  }

  auto& reliability = rel(e.device_id, e.source);
  auto it = open_.find(key);
  if (it != open_.end()) {
    OpenCluster& c = it->second;
    if (static_cast<double>(e.t_ms - c.last_t) > config_.clustering.window_ms(c.count)) {
      if (auto closed = close(key, c)) out.push_back(*closed);
      open_.erase(it);
      it = open_.end();
    }
  }
  if (it == open_.end()) {
    OpenCluster fresh;
    fresh.first_t = e.t_ms;
    fresh.chain = reliability.prior();
    it = open_.emplace(key, fresh).first;
  }

  OpenCluster& c = it->second;
  c.chain = bayesian_posterior(c.chain, r);
  c.max_p = std::max(c.max_p, c.chain);
  c.last_t = e.t_ms;
  ++c.count;

  if (!c.alert_id && c.max_p >= config_.posterior_gate) {
    Alert a;
    a.alert_id = next_id_++;
    a.device_id = e.device_id;
    a.source = e.source;
    a.direction = e.direction;
    a.first_t_ms = c.first_t;
    c.alert_id = a.alert_id;
    alerts_[a.alert_id] = a;
  }
  if (c.alert_id) {
    Alert& a = alerts_.at(*c.alert_id);
    a.last_t_ms = c.last_t;
    a.event_count = c.count;
    a.posterior = c.max_p;
    out.push_back(a);
  }
  return out;
}

std::optional<Alert> AlertEngine::close(const StreamKey& key, OpenCluster& c) {
  const double window = config_.clustering.window_ms(c.count);
  if (c.alert_id) {
    Alert& a = alerts_.at(*c.alert_id);
    a.window_ms = window;
    return a;
  }
  // Never crossed the gate: recorded directly as suppressed.
  Alert a;
  a.alert_id = next_id_++;
  a.device_id = key.device;
  a.source = key.source;
  a.direction = key.direction;
  a.first_t_ms = c.first_t;
  a.last_t_ms = c.last_t;
  a.event_count = c.count;
  a.posterior = c.max_p;
  a.state = AlertState::kSuppressed;
  a.window_ms = window;
  alerts_[a.alert_id] = a;
  return a;
}

std::vector<Alert> AlertEngine::tick(std::int64_t now_ms) {
  std::lock_guard lock(mu_);
  std::vector<Alert> out;
  for (auto it = open_.begin(); it != open_.end();) {
    if (static_cast<double>(now_ms - it->second.last_t) > config_.clustering.window_ms(it->second.count)) {
      if (auto closed = close(it->first, it->second)) out.push_back(*closed);
      it = open_.erase(it);
    } else {
      ++it;
    }
  }
  return out;
}

Alert AlertEngine::acknowledge(std::uint64_t alert_id, const std::string& user, std::int64_t now_ms) {
  std::lock_guard lock(mu_);
  auto it = alerts_.find(alert_id);
  if (it == alerts_.end()) throw Error(ErrorCode::kNotFound, "unknown alert id " + std::to_string(alert_id));
  Alert& a = it->second;
  if (a.state == AlertState::kAcknowledged) return a;
  if (a.state != AlertState::kRaised)
    throw Error(ErrorCode::kConflict, "alert is " + std::string(alert_state_name(a.state)) + ", cannot acknowledge");
  a.state = AlertState::kAcknowledged;
  a.acked_at_ms = now_ms;
  a.acked_by = user;
  rel(a.device_id, a.source).a += 1.0;

  StreamKey key{a.device_id, a.source, a.direction};
  if (auto open = open_.find(key); open != open_.end() && open->second.alert_id == alert_id) {
    a.window_ms = config_.clustering.window_ms(open->second.count);
    open_.erase(open);
  }
  last_acked_[key] = alert_id;
  return a;
}

Alert AlertEngine::suppress(std::uint64_t alert_id, const std::string& user) {
  std::lock_guard lock(mu_);
  auto it = alerts_.find(alert_id);
  if (it == alerts_.end()) throw Error(ErrorCode::kNotFound, "unknown alert id " + std::to_string(alert_id));
  Alert& a = it->second;
  if (a.state == AlertState::kSuppressed) return a;
  a.state = AlertState::kSuppressed;
  a.acked_by = user;
  rel(a.device_id, a.source).b += 1.0;
  StreamKey key{a.device_id, a.source, a.direction};
  if (auto open = open_.find(key); open != open_.end() && open->second.alert_id == alert_id) {
    a.window_ms = config_.clustering.window_ms(open->second.count);
    open_.erase(open);
  }
  return a;
}

std::vector<Alert> AlertEngine::alerts(std::optional<AlertState> state) const {
  std::lock_guard lock(mu_);
  std::vector<Alert> out;
  for (const auto& [id, a] : alerts_) {
    if (!state || a.state == *state) out.push_back(a);
  }
  return out;
}

std::optional<Alert> AlertEngine::get(std::uint64_t alert_id) const {
  std::lock_guard lock(mu_);
  auto it = alerts_.find(alert_id);
  if (it == alerts_.end()) return std::nullopt;
  return it->second;
}

void AlertEngine::set_category(DeviceId device, PatientCategory category) {
  std::lock_guard lock(mu_);
  categories_[device] = category;
}

void AlertEngine::set_reliability(DeviceId device, AlertSource source, ReliabilityState state) {
  std::lock_guard lock(mu_);
  reliability_[{device, source}] = state;
}

ReliabilityState AlertEngine::reliability(DeviceId device, AlertSource source) const {
  std::lock_guard lock(mu_);
  auto it = reliability_.find({device, source});
  if (it == reliability_.end()) {
    ReliabilityState s;
    s.r = config_.default_reliability;
    return s;
  }
  return it->second;
}

SuppressionReport evaluate_suppression(const Scenario& scenario, DeviceId device, const ThresholdProfile& profile,
                                       const ReliabilityState& rel, const ClusterConfig& clustering, double gate) {
  struct Labeled {
    RawEvent event;
    bool truth;
  };
  std::map<std::pair<AlertSource, Direction>, std::vector<Labeled>> streams;
  for (std::int64_t t = scenario.start_ms; t < scenario.end_ms(); t += 1000) {
    auto s = generate_sample(scenario, device, t);
    for (const auto& e : threshold_check(s, profile))
      streams[{e.source, e.direction}].push_back({e, (s.flags & sample_flags::kSyntheticEvent) != 0});
  }

  SuppressionReport report;
  std::vector<std::pair<std::int64_t, std::int64_t>> survived;  // surviving true alert spans
  for (auto& [key, labeled] : streams) {
    std::vector<RawEvent> events;
    for (const auto& l : labeled) events.push_back(l.event);
    auto alerts = cluster(events, clustering, rel.prior(), rel.r);
    for (const auto& a : alerts) {
      bool truth = std::any_of(labeled.begin(), labeled.end(), [&](const Labeled& l) {
        return l.truth && l.event.t_ms >= a.first_t_ms && l.event.t_ms <= a.last_t_ms;
      });
      const bool passes = a.posterior >= gate;
      ++report.raw_alarms;
      if (!truth) ++report.raw_false_alarms;
      if (passes) {
        ++report.filtered_alarms;
        if (!truth) ++report.filtered_false_alarms;
        else survived.emplace_back(a.first_t_ms, a.last_t_ms);
      }
    }
  }
  for (const auto& ev : scenario.events) {
    ++report.true_events;
    const auto on = scenario.start_ms + static_cast<std::int64_t>(ev.onset_s * 1000);
    const auto off = on + static_cast<std::int64_t>(ev.duration_s * 1000);
    bool caught = std::any_of(survived.begin(), survived.end(),
                              [&](const auto& span) { return span.first < off && span.second >= on; });
    if (!caught) ++report.missed_true_events;
  }
  return report;
}

}  // namespace neoward
