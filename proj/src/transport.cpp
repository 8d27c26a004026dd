#include "neoward/transport.hpp"

#include <sodium.h>

#include <algorithm>
#include <cmath>
#include <mutex>

namespace neoward {

namespace {

void ensure_sodium() {
  static std::once_flag once;
  std::call_once(once, [] {
    if (sodium_init() < 0) throw Error(ErrorCode::kIo, "libsodium initialisation failed");
  });
}

bool valid_frame_type(std::uint8_t t) { return t <= static_cast<std::uint8_t>(FrameType::kStaticFeatures); }

}  // namespace

// ---- batch codec -----------------------------------------------------------

Bytes encode_batch(std::span<const VitalSample> samples) {
  if (samples.empty()) throw Error(ErrorCode::kInvalidArgument, "empty batch");
  const auto device = samples.front().device_id;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].device_id != device) throw Error(ErrorCode::kMixedDevice, "batch mixes device ids");
    if (i > 0 && samples[i].t_ms <= samples[i - 1].t_ms)
      throw Error(ErrorCode::kUnordered, "batch timestamps must strictly increase");
  }
  if (samples.front().t_ms < 0) throw Error(ErrorCode::kInvalidArgument, "negative timestamp");

  Bytes out;
  out.reserve(samples.size() * 12 + 16);
  ByteWriter w(out);
  const auto base = samples.front().t_ms;
  w.varint(static_cast<std::uint64_t>(base));
  w.varint(samples.size());

  auto column = [&](auto field) {
    std::int64_t prev = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      std::int64_t v = field(samples[i]);
      w.zigzag(i == 0 ? v : v - prev);
      prev = v;
    }
  };
  column([&](const VitalSample& s) { return s.t_ms - base; });
  column([](const VitalSample& s) { return std::int64_t{s.hr}; });
  column([](const VitalSample& s) { return std::int64_t{s.spo2}; });
  column([](const VitalSample& s) { return std::int64_t{s.rr}; });
  column([](const VitalSample& s) { return std::int64_t{s.temp}; });
  for (const auto& s : samples) w.u8(s.motion);
  for (const auto& s : samples) w.u8(s.flags);
  return out;
}

std::vector<VitalSample> decode_batch(ByteView plaintext, DeviceId device_id) {
  ByteReader r(plaintext);
  try {
    const auto base = r.varint();
    if (base > static_cast<std::uint64_t>(INT64_MAX)) throw Error(ErrorCode::kDecode, "timestamp overflow");
    const auto count = r.varint();
    // Every sample costs at least 7 bytes (five 1-byte varints + motion + flags).
    if (count == 0 || count > r.remaining() / 7) throw Error(ErrorCode::kDecode, "implausible sample count");

    std::vector<VitalSample> out(static_cast<std::size_t>(count));
    for (auto& s : out) s.device_id = device_id;

    auto column = [&](auto assign) {
      std::int64_t prev = 0;
      for (std::size_t i = 0; i < out.size(); ++i) {
        std::int64_t d = r.zigzag();
        std::int64_t v = i == 0 ? d : prev + d;
        assign(out[i], v);
        prev = v;
      }
    };
    auto to_i32 = [](std::int64_t v) {
      if (v < INT32_MIN || v > INT32_MAX) throw Error(ErrorCode::kDecode, "vital out of int32 range");
      return static_cast<std::int32_t>(v);
    };
    column([&](VitalSample& s, std::int64_t v) { s.t_ms = static_cast<std::int64_t>(base) + v; });
    column([&](VitalSample& s, std::int64_t v) { s.hr = to_i32(v); });
    column([&](VitalSample& s, std::int64_t v) { s.spo2 = to_i32(v); });
    column([&](VitalSample& s, std::int64_t v) { s.rr = to_i32(v); });
    column([&](VitalSample& s, std::int64_t v) { s.temp = to_i32(v); });
    for (auto& s : out) s.motion = r.u8();
    for (auto& s : out) s.flags = r.u8();
    if (!r.done()) throw Error(ErrorCode::kDecode, "trailing bytes after batch");
    for (std::size_t i = 1; i < out.size(); ++i) {
      if (out[i].t_ms <= out[i - 1].t_ms) throw Error(ErrorCode::kDecode, "decoded timestamps not increasing");
    }
    return out;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kDecode) throw;
    throw Error(ErrorCode::kDecode, std::string("batch decode: ") + e.what());
  }
}

// ---- AEAD ------------------------------------------------------------------

HeaderBytes header_bytes(FrameType type, DeviceId device_id, std::uint32_t seq,
                         std::uint32_t nonce_ctr, std::uint16_t payload_len) {
  Bytes tmp;
  tmp.reserve(kHeaderSize);
  ByteWriter w(tmp);
  w.u8(kMagic0);
  w.u8(kMagic1);
  w.u8(kProtocolVersion);
  w.u8(static_cast<std::uint8_t>(type));
  w.u64(device_id);
  w.u32(seq);
  w.u32(nonce_ctr);
  w.u16(payload_len);
  HeaderBytes h{};
  std::copy(tmp.begin(), tmp.end(), h.begin());
  return h;
}

std::array<std::uint8_t, 12> frame_nonce(DeviceId device_id, std::uint32_t nonce_ctr) {
  std::array<std::uint8_t, 12> nonce{};
  for (int i = 0; i < 8; ++i) nonce[i] = static_cast<std::uint8_t>(device_id >> (8 * i));
  for (int i = 0; i < 4; ++i) nonce[8 + i] = static_cast<std::uint8_t>(nonce_ctr >> (8 * i));
  return nonce;
}

Sealed seal(ByteView plaintext, const DeviceKey& key, FrameType type, DeviceId device_id,
            std::uint32_t seq, std::uint32_t nonce_ctr) {
  ensure_sodium();
  if (plaintext.size() > kMaxPayload) throw Error(ErrorCode::kPayloadTooLarge, "payload exceeds 4096 bytes");
  auto header = header_bytes(type, device_id, seq, nonce_ctr, static_cast<std::uint16_t>(plaintext.size()));
  auto nonce = frame_nonce(device_id, nonce_ctr);
  Sealed out;
  out.ciphertext.resize(plaintext.size());
  unsigned long long tag_len = 0;
  crypto_aead_chacha20poly1305_ietf_encrypt_detached(
      out.ciphertext.data(), out.tag.data(), &tag_len, plaintext.data(), plaintext.size(),
      header.data(), header.size(), nullptr, nonce.data(), key.data());
  return out;
}

Bytes open(const Frame& frame, const DeviceKey& key) {
  ensure_sodium();
  auto header = header_bytes(frame.type, frame.device_id, frame.seq, frame.nonce_ctr,
                             static_cast<std::uint16_t>(frame.ciphertext.size()));
  auto nonce = frame_nonce(frame.device_id, frame.nonce_ctr);
  Bytes plain(frame.ciphertext.size());
  if (crypto_aead_chacha20poly1305_ietf_decrypt_detached(
          plain.data(), nullptr, frame.ciphertext.data(), frame.ciphertext.size(), frame.tag.data(),
          header.data(), header.size(), nonce.data(), key.data()) != 0) {
    throw Error(ErrorCode::kAuthFailed, "authentication tag mismatch");
  }
  return plain;
}

Frame DeviceSealer::seal(FrameType type, ByteView plaintext, std::uint32_t seq, std::uint32_t nonce_ctr) {
  if (nonce_ctr < next_nonce_) throw Error(ErrorCode::kNonceReuse, "nonce counter already used");
  if (nonce_ctr == UINT32_MAX) throw Error(ErrorCode::kNonceReuse, "nonce counter exhausted");
  auto sealed = neoward::seal(plaintext, key_, type, device_id_, seq, nonce_ctr);
  next_nonce_ = nonce_ctr + 1;
  next_seq_ = std::max(next_seq_, seq + 1);
  return Frame{type, device_id_, seq, nonce_ctr, std::move(sealed.ciphertext), sealed.tag};
}

Frame DeviceSealer::seal_next(FrameType type, ByteView plaintext) {
  return seal(type, plaintext, next_seq_, next_nonce_);
}

// ---- framing ---------------------------------------------------------------

Bytes build_frame(const Frame& frame) {
  if (frame.ciphertext.size() > kMaxPayload) throw Error(ErrorCode::kPayloadTooLarge, "payload exceeds 4096 bytes");
  auto header = header_bytes(frame.type, frame.device_id, frame.seq, frame.nonce_ctr,
                             static_cast<std::uint16_t>(frame.ciphertext.size()));
  Bytes out;
  out.reserve(kFrameOverhead + frame.ciphertext.size());
  ByteWriter w(out);
  w.raw(header);
  w.raw(frame.ciphertext);
  w.raw(frame.tag);
  w.u32(crc32(out));
  return out;
}

Frame parse_frame(ByteView bytes) {
  if (bytes.size() < kFrameOverhead) throw Error(ErrorCode::kTruncated, "frame shorter than fixed overhead");
  if (bytes[0] != kMagic0 || bytes[1] != kMagic1) throw Error(ErrorCode::kBadMagic, "bad magic");
  if (bytes[2] != kProtocolVersion) throw Error(ErrorCode::kBadVersion, "unsupported protocol version");
  if (!valid_frame_type(bytes[3])) throw Error(ErrorCode::kBadFrameType, "unknown frame type");

  ByteReader r(bytes);
  r.raw(4);
  Frame f;
  f.type = static_cast<FrameType>(bytes[3]);
  f.device_id = r.u64();
  f.seq = r.u32();
  f.nonce_ctr = r.u32();
  const std::size_t payload_len = r.u16();
  if (payload_len > kMaxPayload) throw Error(ErrorCode::kPayloadTooLarge, "payload_len exceeds 4096");
  const std::size_t expected = kFrameOverhead + payload_len;
  if (bytes.size() < expected) throw Error(ErrorCode::kTruncated, "frame shorter than payload_len implies");
  if (bytes.size() > expected) throw Error(ErrorCode::kLengthMismatch, "frame longer than payload_len implies");

  const std::uint32_t stored_crc = ByteReader(bytes.subspan(expected - kCrcSize)).u32();
  if (crc32(bytes.first(expected - kCrcSize)) != stored_crc) throw Error(ErrorCode::kBadCrc, "crc mismatch");

  auto ct = r.raw(payload_len);
  f.ciphertext.assign(ct.begin(), ct.end());
  auto tag = r.raw(kTagSize);
  std::copy(tag.begin(), tag.end(), f.tag.begin());
  return f;
}

ReceivedFrame FrameReceiver::receive(ByteView bytes) {
  Frame frame = parse_frame(bytes);
  auto key = keys_ ? keys_(frame.device_id) : std::nullopt;
  if (!key) throw Error(ErrorCode::kUnknownDevice, "no key for device");
  Bytes plain = open(frame, *key);
  auto it = last_seq_.find(frame.device_id);
  if (it != last_seq_.end() && frame.seq <= it->second)
    throw Error(ErrorCode::kReplay, "stale or replayed sequence number");
  last_seq_[frame.device_id] = frame.seq;
  return {std::move(frame), std::move(plain)};
}

std::optional<std::uint32_t> FrameReceiver::last_seq(DeviceId device) const {
  auto it = last_seq_.find(device);
  if (it == last_seq_.end()) return std::nullopt;
  return it->second;
}

std::optional<Bytes> FrameSplitter::next() {
  if (buffer_.size() < kHeaderSize) return std::nullopt;
  if (buffer_[0] != kMagic0 || buffer_[1] != kMagic1) throw Error(ErrorCode::kBadMagic, "stream desynchronised");
  const std::size_t payload_len = buffer_[20] | (static_cast<std::size_t>(buffer_[21]) << 8);
  if (payload_len > kMaxPayload) throw Error(ErrorCode::kPayloadTooLarge, "payload_len exceeds 4096");
  const std::size_t total = kFrameOverhead + payload_len;
  if (buffer_.size() < total) return std::nullopt;
  Bytes frame(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(total));
  buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(total));
  return frame;
}

// ---- link management -------------------------------------------------------

double connection_interval_ms(LinkPriority priority, double rssi_dbm) {
  if (priority == LinkPriority::kCritical) return 7.5;
  const double rssi = std::clamp(rssi_dbm, -100.0, -40.0);
  if (rssi >= -60.0) return 50.0;
  if (rssi <= -90.0) return 400.0;
  return 50.0 + (-60.0 - rssi) / 30.0 * 350.0;
}

void ConnectionProfile::validate() const {
  if (!(backoff_base_ms > 0) || backoff_base_ms > backoff_cap_ms)
    throw Error(ErrorCode::kInvalidArgument, "backoff base must be positive and <= cap");
  if (!(jitter >= 0.0 && jitter <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "jitter must lie in [0,1]");
}

double ConnectionProfile::jitter_draw() const noexcept {
  return hash_uniform(seed, device_id, 0) - 0.5;
}

double next_backoff_ms(const ConnectionProfile& profile, int attempt) {
  profile.validate();
  if (attempt < 0) throw Error(ErrorCode::kInvalidArgument, "attempt must be >= 0");
  // 2^attempt overflows double only past ~1000; the cap binds long before.
  const double raw = attempt >= 64 ? profile.backoff_cap_ms
                                   : std::min(profile.backoff_base_ms * std::ldexp(1.0, attempt),
                                              profile.backoff_cap_ms);
  return raw * (1.0 + profile.jitter * profile.jitter_draw());
}

DeviceKey derive_device_key(const DeviceKey& master, DeviceId device_id) {
  ensure_sodium();
  std::array<std::uint8_t, 8> id{};
  for (int i = 0; i < 8; ++i) id[i] = static_cast<std::uint8_t>(device_id >> (8 * i));
  DeviceKey out{};
  crypto_generichash(out.data(), out.size(), id.data(), id.size(), master.data(), master.size());
  return out;
}

DeviceKey load_key_file(const std::string& path) {
  Bytes raw = read_file(path);
  std::string text(raw.begin(), raw.end());
  Bytes key;
  try {
    key = from_hex(text);
  } catch (const Error&) {
    key = raw;
  }
  if (key.size() != 32) throw Error(ErrorCode::kInvalidArgument, "key file must hold 32 bytes (raw or hex): " + path);
  DeviceKey out{};
  std::copy(key.begin(), key.end(), out.begin());
  return out;
}

}  // namespace neoward
