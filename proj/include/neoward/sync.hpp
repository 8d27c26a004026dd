#pragma once

// Offline-first push synchronisation from the gateway store to an
// aggregation server, plus the mock server and a seeded network impairment
// layer for tests.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "neoward/common.hpp"
#include "neoward/store.hpp"
#include "neoward/transport.hpp"

namespace neoward {

enum class Origin : std::uint8_t { kGateway = 0, kServer = 1 };

struct SyncDelta {
  RecordKey key;
  std::uint64_t version = 0;
  std::int64_t t_ms = 0;
  Bytes payload;
  std::uint32_t checksum = 0;  // crc32 of payload
  std::uint64_t cursor = 0;
  Origin origin = Origin::kGateway;

  bool checksum_ok() const { return crc32(payload) == checksum; }
  bool operator==(const SyncDelta&) const = default;
};

struct DeltaSet {
  std::vector<SyncDelta> deltas;
  /// The requested cursor is ahead of the store: the caller must restart from 0.
  bool reset = false;
};

DeltaSet compute_delta(const Store& store, std::uint64_t last_cursor);

/// One push unit: the acknowledged cursor it was computed from, then deltas in
/// cursor order.
struct DeltaBatch {
  std::uint64_t prev_cursor = 0;
  std::vector<SyncDelta> deltas;
  bool operator==(const DeltaBatch&) const = default;
};

Bytes serialize_batch(const DeltaBatch& batch);
DeltaBatch deserialize_batch(ByteView bytes);

struct DeflateConfig {
  int window_bits = 15;  // 9..15, i.e. 512 B .. 32 KiB
  int level = 6;
  int mem_level = 8;
};

/// Raw deflate of the serialized batch behind a 1-byte prelude carrying the
/// window bits.
Bytes compress_payload(const DeltaBatch& batch, const DeflateConfig& config = {});
DeltaBatch decompress_payload(ByteView bytes);

/// Later mutation time wins; on equal times the server copy wins; remaining
/// ties break on version then payload bytes so the result does not depend on
/// argument order.
const SyncDelta& resolve_conflict(const SyncDelta& local, const SyncDelta& remote);

/// SHA-256 (hex) over the latest version of every entity, in key order.
std::string state_digest(const std::map<RecordKey, SyncDelta>& state);
std::string store_digest(const Store& store);

// ---- mock aggregation server -----------------------------------------------

struct PushResult {
  int status = 200;  // 200 ok, 400 malformed, 409 cursor gap, 422 checksum
  std::uint64_t cursor = 0;
  std::size_t applied = 0;
  std::size_t deduped = 0;
  std::string error;
};

class AggregationServer {
 public:
  /// Without a state dir the server is purely in memory.
  explicit AggregationServer(std::optional<std::filesystem::path> state_dir = std::nullopt);

  PushResult push(ByteView compressed);
  std::uint64_t cursor() const;
  std::string checksum() const;
  std::map<RecordKey, SyncDelta> state() const;
  /// Deltas in the order they were applied (for FIFO checks).
  std::vector<std::uint64_t> applied_cursors() const;

 private:
  PushResult apply(const DeltaBatch& batch, bool replaying);

  std::optional<std::filesystem::path> state_dir_;
  mutable std::mutex mu_;
  std::uint64_t cursor_ = 0;
  std::map<RecordKey, SyncDelta> state_;
  std::vector<std::uint64_t> applied_;
};

// ---- clients and impairment ------------------------------------------------

struct PushAck {
  int status = 200;
  std::uint64_t cursor = 0;
  std::size_t applied = 0;
  std::size_t deduped = 0;
};

class SyncClient {
 public:
  virtual ~SyncClient() = default;
  /// nullopt = request or response lost (timeout).
  virtual std::optional<PushAck> push(ByteView compressed) = 0;
  virtual std::optional<std::uint64_t> cursor() = 0;
  virtual std::optional<std::string> checksum() = 0;
};

class LocalSyncClient : public SyncClient {
 public:
  explicit LocalSyncClient(AggregationServer& server) : server_(server) {}
  std::optional<PushAck> push(ByteView compressed) override;
  std::optional<std::uint64_t> cursor() override { return server_.cursor(); }
  std::optional<std::string> checksum() override { return server_.checksum(); }

 private:
  AggregationServer& server_;
};

class HttpSyncClient : public SyncClient {
 public:
  explicit HttpSyncClient(std::string base_url, int timeout_ms = 5000);
  std::optional<PushAck> push(ByteView compressed) override;
  std::optional<std::uint64_t> cursor() override;
  std::optional<std::string> checksum() override;

 private:
  std::string base_url_;
  int timeout_ms_;
};

/// Simulated time shared by the impairment layer and the sync loop.
class SimClock {
 public:
  std::int64_t now_ms() const noexcept { return now_; }
  void advance(double ms) { now_ += static_cast<std::int64_t>(ms); }

 private:
  std::int64_t now_ = 0;
};

struct NetworkCondition {
  double latency_lo_ms = 50;
  double latency_hi_ms = 50;
  double loss = 0.0;
  std::uint64_t seed = 1;
  void validate() const;
  /// Parses "LO..HI" (or a single value) in ms.
  static std::pair<double, double> parse_latency(std::string_view text);
};

/// Wraps a client: each request and each response is independently lost with
/// probability `loss`; each delivered leg costs a uniform latency draw on the
/// simulated clock. A lost leg costs the request timeout instead.
class ImpairedClient : public SyncClient {
 public:
  ImpairedClient(SyncClient& inner, NetworkCondition condition, SimClock& clock);
  std::optional<PushAck> push(ByteView compressed) override;
  std::optional<std::uint64_t> cursor() override;
  std::optional<std::string> checksum() override;

  double timeout_ms() const noexcept { return 2.0 * condition_.latency_hi_ms + 100.0; }
  std::uint64_t lost_requests() const noexcept { return lost_requests_; }
  std::uint64_t lost_responses() const noexcept { return lost_responses_; }

 private:
  bool deliver();
  NetworkCondition condition_;
  SyncClient& inner_;
  SimClock& clock_;
  SeededRng rng_;
  std::uint64_t lost_requests_ = 0;
  std::uint64_t lost_responses_ = 0;
};

// ---- sync loop ---------------------------------------------------------------

struct SyncOptions {
  std::size_t batch_size = 256;
  int max_attempts = 12;
  ConnectionProfile backoff{0, 100, 30'000, 0.0, 0, 0};
  DeflateConfig deflate{};
  std::string cursor_meta = "sync_cursor";
};

struct SyncReport {
  std::size_t pushed = 0;
  std::size_t deduped = 0;
  std::size_t retries = 0;
  std::size_t batches = 0;
  std::uint64_t final_cursor = 0;
  bool complete = false;
  bool reset = false;
  double waited_ms = 0;
};

std::uint64_t load_sync_cursor(const Store& store, const std::string& meta = "sync_cursor");

/// Pushes everything mutated since the stored cursor, batch by batch in cursor
/// order. The cursor advances only on acknowledged batches. With a clock,
/// timeouts and backoff waits are charged to it instead of sleeping.
SyncReport sync_once(Store& store, SyncClient& client, const SyncOptions& options = {},
                     SimClock* clock = nullptr);

}  // namespace neoward
