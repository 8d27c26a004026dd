#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace neoward {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

enum class ErrorCode {
  kInvalidArgument,
  kOutOfRange,
  kUnordered,
  kMixedDevice,
  kNonceReuse,
  kTruncated,
  kBadMagic,
  kBadVersion,
  kBadFrameType,
  kLengthMismatch,
  kPayloadTooLarge,
  kBadCrc,
  kAuthFailed,
  kReplay,
  kUnknownDevice,
  kDecode,
  kConflict,
  kNotFound,
  kBadSignature,
  kExpired,
  kMalformed,
  kForbidden,
  kChecksumMismatch,
  kIo,
  kUnsupported,
};

std::string_view to_string(ErrorCode code);

/// Exception carrying a machine-checkable error kind. All modules throw this.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Little-endian append/read helpers used by every binary layout in the repo.
class ByteWriter {
 public:
  explicit ByteWriter(Bytes& out) : out_(out) {}
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v);
  void raw(ByteView bytes) { out_.insert(out_.end(), bytes.begin(), bytes.end()); }
  void varint(std::uint64_t v);
  void zigzag(std::int64_t v);
  void str(std::string_view s);

 private:
  Bytes& out_;
};

class ByteReader {
 public:
  explicit ByteReader(ByteView in) : in_(in) {}
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64();
  ByteView raw(std::size_t n);
  std::uint64_t varint();
  std::int64_t zigzag();
  std::string str();
  std::size_t remaining() const noexcept { return in_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }
  bool done() const noexcept { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const;
  ByteView in_;
  std::size_t pos_ = 0;
};

constexpr std::uint64_t zigzag_encode(std::int64_t v) noexcept {
  return (static_cast<std::uint64_t>(v) << 1) ^ static_cast<std::uint64_t>(v >> 63);
}
constexpr std::int64_t zigzag_decode(std::uint64_t v) noexcept {
  return static_cast<std::int64_t>(v >> 1) ^ -static_cast<std::int64_t>(v & 1);
}

std::uint32_t crc32(ByteView data) noexcept;

std::string to_hex(ByteView bytes);
Bytes from_hex(std::string_view hex);

Bytes read_file(const std::string& path);
void write_file(const std::string& path, ByteView data);

// Counter-based generator: same (seed, stream, counter) always yields the same
// value, independent of call order.
std::uint64_t splitmix64(std::uint64_t x) noexcept;
double hash_uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) noexcept;
double hash_gaussian(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) noexcept;

/// Small seeded PRNG with a portable uniform draw (std distributions are not
/// bit-stable across standard libraries).
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() noexcept {
    state_ += 0x9E3779B97F4A7C15ULL;
    return splitmix64(state_);
  }
  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  std::uint64_t below(std::uint64_t n) noexcept { return n == 0 ? 0 : next() % n; }
  double gaussian() noexcept;

 private:
  std::uint64_t state_;
};

}  // namespace neoward
