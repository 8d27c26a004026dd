#pragma once

// Device <-> gateway wire protocol.
//
// Frame layout (all integers little-endian):
//
//   off  size  field
//   0    2     magic 0x4E 0x57 ("NW")
//   2    1     version (1)
//   3    1     frame_type (0 advertise, 1 vitals-batch, 2 ack, 3 static-features)
//   4    8     device_id
//   12   4     seq
//   16   4     nonce_ctr
//   20   2     payload_len (<= 4096)
//   22   n     ciphertext (ChaCha20-Poly1305 IETF, AD = bytes 0..21)
//   22+n 16    auth_tag
//   38+n 4     crc32 over bytes 0..37+n

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "neoward/common.hpp"
#include "neoward/vitalsim.hpp"

namespace neoward {

inline constexpr std::uint8_t kMagic0 = 0x4E;
inline constexpr std::uint8_t kMagic1 = 0x57;
inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::size_t kHeaderSize = 22;
inline constexpr std::size_t kTagSize = 16;
inline constexpr std::size_t kCrcSize = 4;
inline constexpr std::size_t kFrameOverhead = kHeaderSize + kTagSize + kCrcSize;
inline constexpr std::size_t kMaxPayload = 4096;

enum class FrameType : std::uint8_t {
  kAdvertise = 0,
  kVitalsBatch = 1,
  kAck = 2,
  kStaticFeatures = 3,
};

using DeviceKey = std::array<std::uint8_t, 32>;
using AuthTag = std::array<std::uint8_t, kTagSize>;
using HeaderBytes = std::array<std::uint8_t, kHeaderSize>;

struct Frame {
  FrameType type = FrameType::kVitalsBatch;
  DeviceId device_id = 0;
  std::uint32_t seq = 0;
  std::uint32_t nonce_ctr = 0;
  Bytes ciphertext;
  AuthTag tag{};

  bool operator==(const Frame&) const = default;
};

// ---- batch codec -----------------------------------------------------------

/// Columnar zigzag-varint delta encoding of one device's ordered samples.
Bytes encode_batch(std::span<const VitalSample> samples);
std::vector<VitalSample> decode_batch(ByteView plaintext, DeviceId device_id);

/// Uncompressed reference size: 8-byte timestamp + four 4-byte vitals.
inline constexpr std::size_t kBaselineBytesPerSample = 24;

// ---- AEAD ------------------------------------------------------------------

HeaderBytes header_bytes(FrameType type, DeviceId device_id, std::uint32_t seq,
                         std::uint32_t nonce_ctr, std::uint16_t payload_len);
std::array<std::uint8_t, 12> frame_nonce(DeviceId device_id, std::uint32_t nonce_ctr);

struct Sealed {
  Bytes ciphertext;
  AuthTag tag{};
};

/// Stateless AEAD seal. Callers must never repeat (device_id, nonce_ctr) under
/// one key; DeviceSealer enforces that.
Sealed seal(ByteView plaintext, const DeviceKey& key, FrameType type, DeviceId device_id,
            std::uint32_t seq, std::uint32_t nonce_ctr);
/// Throws kAuthFailed when the tag does not verify.
Bytes open(const Frame& frame, const DeviceKey& key);

/// Per-device sending state: seq and nonce counters, monotonic by construction.
class DeviceSealer {
 public:
  DeviceSealer(DeviceKey key, DeviceId device_id, std::uint32_t first_seq = 1)
      : key_(key), device_id_(device_id), next_seq_(first_seq), next_nonce_(first_seq) {}

  /// Seal with explicit counters; kNonceReuse if nonce_ctr was already consumed.
  Frame seal(FrameType type, ByteView plaintext, std::uint32_t seq, std::uint32_t nonce_ctr);
  /// Seal with the next counters.
  Frame seal_next(FrameType type, ByteView plaintext);

  DeviceId device_id() const noexcept { return device_id_; }
  std::uint32_t next_seq() const noexcept { return next_seq_; }

 private:
  DeviceKey key_;
  DeviceId device_id_;
  std::uint32_t next_seq_;
  std::uint32_t next_nonce_;
};

// ---- framing ---------------------------------------------------------------

Bytes build_frame(const Frame& frame);
/// Structural parse: length, magic, version, type, payload_len, crc. No crypto.
Frame parse_frame(ByteView bytes);

struct ReceivedFrame {
  Frame frame;
  Bytes plaintext;
};

using KeyLookup = std::function<std::optional<DeviceKey>(DeviceId)>;

/// Connection-side receiver: structural parse, tag check, then seq
/// monotonicity. A rejected frame never changes receiver state.
class FrameReceiver {
 public:
  explicit FrameReceiver(KeyLookup keys) : keys_(std::move(keys)) {}

  ReceivedFrame receive(ByteView bytes);
  std::optional<std::uint32_t> last_seq(DeviceId device) const;
  void reset(DeviceId device) { last_seq_.erase(device); }

 private:
  KeyLookup keys_;
  std::map<DeviceId, std::uint32_t> last_seq_;
};

/// Splits an ordered byte stream into whole frames using payload_len.
class FrameSplitter {
 public:
  void feed(ByteView bytes) { buffer_.insert(buffer_.end(), bytes.begin(), bytes.end()); }
  /// Next complete frame, if buffered. A stream whose header cannot be a frame
  /// throws kBadMagic; the caller should drop the connection.
  std::optional<Bytes> next();
  std::size_t buffered() const noexcept { return buffer_.size(); }

 private:
  Bytes buffer_;
};

// ---- link management -------------------------------------------------------

enum class LinkPriority { kCritical, kStandard };

/// Connection interval from priority and signal strength (rssi clamped to
/// [-100, -40] dBm).
double connection_interval_ms(LinkPriority priority, double rssi_dbm);

struct ConnectionProfile {
  DeviceId device_id = 0;
  double backoff_base_ms = 100;
  double backoff_cap_ms = 30000;
  double jitter = 0.0;
  double last_good_interval_ms = 0;
  std::uint64_t seed = 0;

  void validate() const;
  /// Device-specific jitter draw in [-0.5, 0.5], fixed for the profile.
  double jitter_draw() const noexcept;
};

double next_backoff_ms(const ConnectionProfile& profile, int attempt);

/// Derives a per-device key from a shared fixture master key (keyed BLAKE2b).
DeviceKey derive_device_key(const DeviceKey& master, DeviceId device_id);
DeviceKey load_key_file(const std::string& path);

// ---- channels --------------------------------------------------------------

class FrameSink {
 public:
  virtual ~FrameSink() = default;
  /// false = link failure; the caller owns retry.
  virtual bool send(ByteView frame) = 0;
};

}  // namespace neoward
