#include "neoward/gateway.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "neoward/device.hpp"

namespace neoward {

namespace {

using json = nlohmann::json;

std::int64_t steady_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

Bytes to_bytes(const json& j) {
  auto s = j.dump();
  return Bytes(s.begin(), s.end());
}

json parse_payload(const StoredRecord& rec) {
  return json::parse(rec.payload.begin(), rec.payload.end());
}

constexpr std::uint64_t kStaticFeaturesRecord = 1;

}  // namespace

Clock system_clock_ms() {
  return [] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
  };
}

json to_json(const KmcSession& s) {
  json j = {{"session_id", s.session_id}, {"device_id", s.device_id}, {"start_ms", s.start_ms},
            {"initiator", s.initiator}, {"active", s.active()}};
  j["end_ms"] = s.end_ms ? json(*s.end_ms) : json(nullptr);
  j["duration_ms"] = s.duration_ms() ? json(*s.duration_ms()) : json(nullptr);
  return j;
}

KmcSession session_from_json(const json& j) {
  KmcSession s;
  s.session_id = j.at("session_id").get<std::uint64_t>();
  s.device_id = j.at("device_id").get<DeviceId>();
  s.start_ms = j.at("start_ms").get<std::int64_t>();
  if (j.contains("end_ms") && !j["end_ms"].is_null()) s.end_ms = j["end_ms"].get<std::int64_t>();
  s.initiator = j.value("initiator", "");
  return s;
}

json to_json(const Annotation& a) {
  return {{"annotation_id", a.annotation_id}, {"device_id", a.device_id}, {"t_ms", a.t_ms},
          {"author", a.author}, {"text", a.text}};
}

json to_json(const VitalSample& s) {
  return {{"device_id", s.device_id}, {"t_ms", s.t_ms},      {"hr", s.hr / 100.0},
          {"spo2", s.spo2 / 100.0},   {"rr", s.rr / 100.0},  {"temp", s.temp / 100.0},
          {"motion", s.motion},       {"flags", s.flags}};
}

json to_json(const Alert& a) {
  json j = {{"alert_id", a.alert_id},
            {"device_id", a.device_id},
            {"source", alert_source_name(a.source)},
            {"direction", direction_name(a.direction)},
            {"first_t_ms", a.first_t_ms},
            {"last_t_ms", a.last_t_ms},
            {"event_count", a.event_count},
            {"posterior", a.posterior},
            {"state", alert_state_name(a.state)},
            {"window_ms", a.window_ms}};
  if (a.acked_at_ms) {
    j["acked_at_ms"] = *a.acked_at_ms;
    j["acked_by"] = a.acked_by;
  }
  return j;
}

Gateway::Gateway(Store& store, Clock clock, GatewayConfig config)
    : store_(store), clock_(std::move(clock)), config_(std::move(config)), alerts_(config_.alerts) {
  last_batch_flush_ms_ = clock_();
}

Gateway::~Gateway() { stop(); }

RingBuffer<Gateway::Queued>& Gateway::ring_for(DeviceId device) {
  {
    std::shared_lock lock(rings_mu_);
    if (auto it = rings_.find(device); it != rings_.end()) return *it->second;
  }
  std::unique_lock lock(rings_mu_);
  auto& slot = rings_[device];
  if (!slot) slot = std::make_unique<RingBuffer<Queued>>(config_.ring_capacity);
  return *slot;
}

std::size_t Gateway::on_frame(FrameReceiver& rx, ByteView bytes) {
  ReceivedFrame frame;
  try {
    frame = rx.receive(bytes);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kReplay) ++replays_;
    else ++rejects_;
    return 0;
  }
  try {
    return ingest(frame);
  } catch (const Error&) {
    ++rejects_;
    return 0;
  }
}

std::size_t Gateway::ingest(const ReceivedFrame& frame) {
  switch (frame.frame.type) {
    case FrameType::kVitalsBatch: {
      auto samples = decode_batch(frame.plaintext, frame.frame.device_id);
      ++frames_;
      auto& ring = ring_for(frame.frame.device_id);
      const auto now = steady_ns();
      for (const auto& s : samples) ring.push(Queued{s, now});
      enqueued_ += samples.size();
      wake_.notify_one();
      return samples.size();
    }
    case FrameType::kStaticFeatures: {
      auto values = decode_features(frame.plaintext);
      ++frames_;
      ++static_frames_;
      std::lock_guard lock(batch_mu_);
      batch_queue_.push_back({frame.frame.device_id, clock_(), std::move(values)});
      return 0;
    }
    case FrameType::kAdvertise:
    case FrameType::kAck:
      ++frames_;
      return 0;
  }
  return 0;
}

std::size_t Gateway::pump() {
  std::lock_guard drain(drain_mu_);
  std::vector<std::pair<DeviceId, RingBuffer<Queued>*>> rings;
  {
    std::shared_lock lock(rings_mu_);
    for (auto& [dev, ring] : rings_) rings.emplace_back(dev, ring.get());
  }
  std::size_t stored = 0;
  std::vector<double> lat;
  for (auto& [dev, ring] : rings) {
    std::vector<Queued> items;
    while (auto q = ring->pop()) items.push_back(*q);
    if (items.empty()) continue;
    std::vector<VitalSample> samples;
    samples.reserve(items.size());
    for (const auto& q : items) samples.push_back(q.sample);
    stored += store_.append_vitals(samples);
    const auto done = steady_ns();
    for (const auto& q : items) lat.push_back(static_cast<double>(done - q.enqueued_ns) / 1e6);

    for (const auto& s : samples) {
      publish(json{{"type", "vitals"}, {"sample", to_json(s)}});
      for (const auto& a : alerts_.on_sample(s)) publish(json{{"type", "alert"}, {"alert", to_json(a)}});
      if (config_.risk_model) run_risk(s);
    }
  }
  for (const auto& a : alerts_.tick(clock_())) publish(json{{"type", "alert"}, {"alert", to_json(a)}});
  stored_ += stored;
  if (!lat.empty()) {
    std::lock_guard lock(metrics_mu_);
    latencies_ms_.insert(latencies_ms_.end(), lat.begin(), lat.end());
  }

  bool due = false;
  {
    std::lock_guard lock(batch_mu_);
    due = clock_() - last_batch_flush_ms_ >= config_.batch_flush_ms;
  }
  if (due) flush_batch_queue_locked();
  return stored;
}

void Gateway::run_risk(const VitalSample& s) {
  const auto& model = *config_.risk_model;
  auto& inf = risk_[s.device_id];
  if (!inf) {
    // statics from the device's last static-features frame: 3 static values
    // followed by the semi-static vector; population defaults otherwise
    std::array<double, 3> st{30.0, 1.0, 2400.0};
    std::vector<double> semi(model.config.semistatic_dim, 0.0);
    if (auto it = device_statics_.find(s.device_id); it != device_statics_.end()) {
      const auto& v = it->second;
      for (std::size_t i = 0; i < 3 && i < v.size(); ++i) st[i] = v[i];
      for (std::size_t i = 0; i < semi.size() && 3 + i < v.size(); ++i) semi[i] = v[3 + i];
    }
    inf = std::make_unique<smt::StreamInference>(model, st, std::move(semi));
  }
  auto out = inf->push(s);
  if (!out) return;
  publish(json{{"type", "risk"},
               {"device_id", s.device_id},
               {"t_ms", out->t_s * 1000},
               {"p_low", out->score.p_low},
               {"p_moderate", out->score.p_moderate},
               {"p_high", out->score.p_high}});
  for (const auto& a : alerts_.on_risk(s.device_id, s.t_ms, out->score.p_high))
    publish(json{{"type", "alert"}, {"alert", to_json(a)}});
}

void Gateway::flush_batch_queue() {
  std::lock_guard drain(drain_mu_);
  flush_batch_queue_locked();
}

void Gateway::flush_batch_queue_locked() {
  std::vector<StaticFeatureUpdate> pending;
  {
    std::lock_guard lock(batch_mu_);
    pending.swap(batch_queue_);
    last_batch_flush_ms_ = clock_();
  }
  if (config_.risk_model) {
    for (const auto& u : pending) {
      device_statics_[u.device_id] = u.values;
      risk_.erase(u.device_id);
    }
  }
  for (const auto& u : pending) {
    json j = {{"device_id", u.device_id}, {"t_ms", u.t_ms}, {"static_features", u.values}};
    store_.put(RecordKind::kDeviceMeta, u.device_id, kStaticFeaturesRecord, u.t_ms, to_bytes(j));
  }
}

void Gateway::start() {
  if (running_.exchange(true)) return;
  worker_ = std::thread([this] {
    while (running_) {
      pump();
      std::unique_lock lock(wake_mu_);
      wake_.wait_for(lock, std::chrono::milliseconds(100));
    }
    pump();
  });
}

void Gateway::stop() {
  if (!running_.exchange(false)) return;
  wake_.notify_all();
  if (worker_.joinable()) worker_.join();
}

std::uint64_t Gateway::next_record_id(RecordKind kind) const {
  std::uint64_t max_id = 0;
  for (const auto& r : store_.records(kind)) max_id = std::max(max_id, r.key.record_id);
  return max_id + 1;
}

KmcSession Gateway::session_start(DeviceId device, const std::string& user) {
  std::lock_guard lock(session_mu_);
  for (const auto& s : sessions(device)) {
    if (s.active())
      throw Error(ErrorCode::kConflict, "device already has active session " + std::to_string(s.session_id));
  }
  KmcSession s;
  s.session_id = next_record_id(RecordKind::kSession);
  s.device_id = device;
  s.start_ms = clock_();
  s.initiator = user;
  store_.put(RecordKind::kSession, device, s.session_id, s.start_ms, to_bytes(to_json(s)));
  publish(json{{"type", "session"}, {"session", to_json(s)}});
  return s;
}

KmcSession Gateway::session_stop(std::uint64_t session_id) {
  std::lock_guard lock(session_mu_);
  for (auto s : sessions()) {
    if (s.session_id != session_id) continue;
    if (!s.active()) throw Error(ErrorCode::kConflict, "session already stopped");
    auto end = clock_();
    s.end_ms = std::max(end, s.start_ms + 1);
    store_.put(RecordKind::kSession, s.device_id, s.session_id, *s.end_ms, to_bytes(to_json(s)));
    publish(json{{"type", "session"}, {"session", to_json(s)}});
    return s;
  }
  throw Error(ErrorCode::kNotFound, "unknown session " + std::to_string(session_id));
}

std::vector<KmcSession> Gateway::sessions(std::optional<DeviceId> device) const {
  std::vector<KmcSession> out;
  for (const auto& r : store_.records(RecordKind::kSession, device)) out.push_back(session_from_json(parse_payload(r)));
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.session_id < b.session_id; });
  return out;
}

Annotation Gateway::annotate(DeviceId device, const std::string& author, const std::string& text,
                             std::optional<std::uint64_t> edit_id) {
  std::lock_guard lock(session_mu_);
  Annotation a;
  a.device_id = device;
  a.author = author;
  a.text = text;
  a.t_ms = clock_();
  if (edit_id) {
    if (!store_.get({RecordKind::kAnnotation, device, *edit_id}))
      throw Error(ErrorCode::kNotFound, "unknown annotation " + std::to_string(*edit_id));
    a.annotation_id = *edit_id;
  } else {
    a.annotation_id = next_record_id(RecordKind::kAnnotation);
  }
  store_.put(RecordKind::kAnnotation, device, a.annotation_id, a.t_ms, to_bytes(to_json(a)));
  return a;
}

std::vector<Annotation> Gateway::annotations(DeviceId device) const {
  std::vector<Annotation> out;
  for (const auto& r : store_.records(RecordKind::kAnnotation, device)) {
    auto j = parse_payload(r);
    out.push_back({j.at("annotation_id").get<std::uint64_t>(), j.at("device_id").get<DeviceId>(),
                   j.at("t_ms").get<std::int64_t>(), j.value("author", ""), j.value("text", "")});
  }
  return out;
}

int Gateway::subscribe(Listener listener) {
  std::lock_guard lock(listeners_mu_);
  int id = next_listener_++;
  listeners_[id] = std::move(listener);
  return id;
}

void Gateway::unsubscribe(int id) {
  std::lock_guard lock(listeners_mu_);
  listeners_.erase(id);
}

void Gateway::publish(const json& message) {
  std::lock_guard lock(listeners_mu_);
  for (auto& [id, l] : listeners_) l(message);
}

GatewayMetrics Gateway::metrics() const {
  GatewayMetrics m;
  m.frames = frames_;
  m.rejects = rejects_;
  m.replays = replays_;
  m.samples_enqueued = enqueued_;
  m.samples_stored = stored_;
  m.static_frames = static_frames_;
  {
    std::shared_lock lock(rings_mu_);
    for (const auto& [dev, ring] : rings_) m.ring_drops += ring->dropped_count();
  }
  std::vector<double> lat;
  {
    std::lock_guard lock(metrics_mu_);
    lat = latencies_ms_;
  }
  if (!lat.empty()) {
    std::sort(lat.begin(), lat.end());
    auto pct = [&](double q) {
      auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(lat.size()))) - 1;
      return lat[std::min(idx, lat.size() - 1)];
    };
    m.p50_latency_ms = pct(0.50);
    m.p99_latency_ms = pct(0.99);
    m.max_latency_ms = lat.back();
  }
  return m;
}

void Gateway::reset_latency() {
  std::lock_guard lock(metrics_mu_);
  latencies_ms_.clear();
}

}  // namespace neoward
