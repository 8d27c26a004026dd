#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include "neoward/common.hpp"
#include "neoward/vitalsim.hpp"

namespace neoward {

enum class RecordKind : std::uint8_t { kVital = 0, kAnnotation = 1, kSession = 2, kDeviceMeta = 3 };
inline constexpr std::array<RecordKind, 4> kAllRecordKinds = {
    RecordKind::kVital, RecordKind::kAnnotation, RecordKind::kSession, RecordKind::kDeviceMeta};
std::string_view record_kind_name(RecordKind kind);
std::optional<RecordKind> parse_record_kind(std::string_view name);

struct RecordKey {
  RecordKind kind = RecordKind::kVital;
  DeviceId device_id = 0;
  std::uint64_t record_id = 0;
  auto operator<=>(const RecordKey&) const = default;
};

struct StoredRecord {
  RecordKey key;
  std::int64_t t_ms = 0;        // time of last mutation
  std::uint64_t version = 0;    // per entity, strictly increasing
  std::uint64_t cursor = 0;     // store-wide mutation sequence number
  Bytes payload;                // plaintext in memory; sealed on disk
  std::uint32_t checksum = 0;   // crc32 of payload
};

using StoreKey = std::array<std::uint8_t, 32>;

struct StoreOptions {
  /// Vitals older than this are dropped from the in-memory index on open and
  /// on prune(); 0 keeps everything.
  int retain_days = 0;
  /// Flush (fsync) after this many appended records; 0 = only explicit flush().
  std::size_t flush_every = 256;
};

/// Fixed 26-byte little-endian layout of one vital sample as a record payload.
Bytes encode_vital_payload(const VitalSample& s);
VitalSample decode_vital_payload(DeviceId device, ByteView payload);

/// Append-only, AES-256-GCM sealed, crc-framed log per record kind, with an
/// in-memory index rebuilt on open. Torn tails from a crash are truncated.
///
/// On-disk record: u32 body_len | u32 crc32(body) | body, where body is
/// kind u8, device u64, record_id u64, t_ms i64, version u64, cursor u64,
/// payload_crc u32, nonce[12], sealed_len u32, ciphertext||tag. The metadata
/// prefix (everything before the nonce) is the GCM associated data.
class Store {
 public:
  Store(std::filesystem::path dir, const StoreKey& key, StoreOptions options = {});
  ~Store();
  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  /// Inserts or updates an entity. Identical payload for an existing entity is
  /// a no-op that returns the current record.
  StoredRecord put(RecordKind kind, DeviceId device, std::uint64_t record_id, std::int64_t t_ms,
                   ByteView payload);
  /// Persists samples as vital records keyed by t_ms; returns how many were new.
  std::size_t append_vitals(std::span<const VitalSample> samples);

  std::optional<StoredRecord> get(const RecordKey& key) const;
  std::vector<VitalSample> query_vitals(DeviceId device, std::int64_t from_ms, std::int64_t to_ms) const;
  std::vector<DeviceId> devices() const;
  std::vector<StoredRecord> records(RecordKind kind, std::optional<DeviceId> device = std::nullopt) const;
  /// Latest version of every entity mutated after `cursor`, in mutation order.
  std::vector<StoredRecord> changed_since(std::uint64_t cursor) const;
  /// Latest version of every entity, keyed.
  std::map<RecordKey, StoredRecord> snapshot() const;
  std::uint64_t max_cursor() const;
  std::size_t vital_count() const;

  void flush();
  void prune(std::int64_t now_ms);

  /// Small durable key/value side files (sync cursor and similar).
  std::optional<std::string> read_meta(const std::string& name) const;
  void write_meta(const std::string& name, const std::string& value);

  const std::filesystem::path& dir() const noexcept { return dir_; }
  std::filesystem::path log_path(RecordKind kind) const;

 private:
  void load();
  void index(StoredRecord rec);
  void write_record(const StoredRecord& rec);

  std::filesystem::path dir_;
  StoreKey key_;
  StoreOptions options_;
  mutable std::shared_mutex mu_;
  std::array<std::FILE*, 4> files_{};
  std::size_t unflushed_ = 0;
  std::uint64_t max_cursor_ = 0;
  std::map<RecordKey, StoredRecord> latest_;
  std::map<std::uint64_t, RecordKey> by_cursor_;
  std::map<DeviceId, std::map<std::int64_t, VitalSample>> vitals_;
};

}  // namespace neoward
