#pragma once

// Ward gateway core: per-device rings feeding one drain task, the static
// feature batch queue, persistence, alert evaluation, KMC sessions,
// annotations and subscriber fan-out. The HTTP/WebSocket surface lives in
// api.hpp.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "neoward/alerts.hpp"
#include "neoward/ring_buffer.hpp"
#include "neoward/smt.hpp"
#include "neoward/store.hpp"
#include "neoward/transport.hpp"

namespace neoward {

using Clock = std::function<std::int64_t()>;
Clock system_clock_ms();

struct KmcSession {
  std::uint64_t session_id = 0;
  DeviceId device_id = 0;
  std::int64_t start_ms = 0;
  std::optional<std::int64_t> end_ms;
  std::string initiator;

  bool active() const noexcept { return !end_ms.has_value(); }
  std::optional<std::int64_t> duration_ms() const {
    if (!end_ms) return std::nullopt;
    return *end_ms - start_ms;
  }
};
nlohmann::json to_json(const KmcSession& s);
KmcSession session_from_json(const nlohmann::json& j);

struct Annotation {
  std::uint64_t annotation_id = 0;
  DeviceId device_id = 0;
  std::int64_t t_ms = 0;
  std::string author;
  std::string text;
};
nlohmann::json to_json(const Annotation& a);

nlohmann::json to_json(const VitalSample& s);
nlohmann::json to_json(const Alert& a);

struct GatewayConfig {
  std::size_t ring_capacity = 1024;
  std::int64_t batch_flush_ms = 60'000;
  AlertEngineConfig alerts{};
  /// When set, each device's 1 Hz stream feeds a sliding-window risk model
  /// whose p_high enters the alert engine as the risk source.
  std::shared_ptr<const smt::Model> risk_model;
};

struct GatewayMetrics {
  std::uint64_t frames = 0;
  std::uint64_t rejects = 0;
  std::uint64_t replays = 0;
  std::uint64_t samples_enqueued = 0;
  std::uint64_t samples_stored = 0;
  std::uint64_t ring_drops = 0;
  std::uint64_t static_frames = 0;
  double p50_latency_ms = 0;
  double p99_latency_ms = 0;
  double max_latency_ms = 0;
};

/// Device-side statics arrive as frame type 3 with a float vector payload.
struct StaticFeatureUpdate {
  DeviceId device_id = 0;
  std::int64_t t_ms = 0;
  std::vector<double> values;
};

class Gateway {
 public:
  using Listener = std::function<void(const nlohmann::json&)>;

  Gateway(Store& store, Clock clock, GatewayConfig config = {});
  ~Gateway();
  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  /// Raw bytes from a device connection: authenticated by `rx`, then ingested.
  /// Failures bump the rejects (or replays) metric and store nothing.
  std::size_t on_frame(FrameReceiver& rx, ByteView bytes);

  /// Authenticated frame. Vitals batches go onto the device's ring (returns the
  /// sample count); static features go to the batch queue (returns 0).
  std::size_t ingest(const ReceivedFrame& frame);

  /// Drains every ring into the store, runs alerts and fan-out, and flushes
  /// the batch queue when due. Returns samples stored.
  std::size_t pump();
  void flush_batch_queue();

  /// Background drain task; wakes on ingest and at least every 100 ms.
  void start();
  void stop();

  KmcSession session_start(DeviceId device, const std::string& user);
  KmcSession session_stop(std::uint64_t session_id);
  std::vector<KmcSession> sessions(std::optional<DeviceId> device = std::nullopt) const;

  Annotation annotate(DeviceId device, const std::string& author, const std::string& text,
                      std::optional<std::uint64_t> edit_id = std::nullopt);
  std::vector<Annotation> annotations(DeviceId device) const;

  int subscribe(Listener listener);
  void unsubscribe(int id);
  void publish(const nlohmann::json& message);

  GatewayMetrics metrics() const;
  void reset_latency();

  Store& store() noexcept { return store_; }
  AlertEngine& alerts() noexcept { return alerts_; }
  std::int64_t now_ms() const { return clock_(); }

 private:
  struct Queued {
    VitalSample sample;
    std::int64_t enqueued_ns;
  };
  RingBuffer<Queued>& ring_for(DeviceId device);
  void run_risk(const VitalSample& s);
  void flush_batch_queue_locked();
  std::uint64_t next_record_id(RecordKind kind) const;

  Store& store_;
  Clock clock_;
  GatewayConfig config_;
  AlertEngine alerts_;

  mutable std::shared_mutex rings_mu_;
  std::map<DeviceId, std::unique_ptr<RingBuffer<Queued>>> rings_;

  std::mutex batch_mu_;
  std::vector<StaticFeatureUpdate> batch_queue_;
  std::int64_t last_batch_flush_ms_ = 0;

  std::mutex drain_mu_;
  std::map<DeviceId, std::unique_ptr<smt::StreamInference>> risk_;  // guarded by drain_mu_
  std::map<DeviceId, std::vector<double>> device_statics_;           // guarded by drain_mu_
  mutable std::mutex session_mu_;

  mutable std::mutex listeners_mu_;
  std::map<int, Listener> listeners_;
  int next_listener_ = 1;

  mutable std::mutex metrics_mu_;
  std::vector<double> latencies_ms_;
  std::atomic<std::uint64_t> frames_{0}, rejects_{0}, replays_{0}, enqueued_{0}, stored_{0}, static_frames_{0};

  std::mutex wake_mu_;
  std::condition_variable wake_;
  std::atomic<bool> running_{false};
  std::thread worker_;
};

}  // namespace neoward
