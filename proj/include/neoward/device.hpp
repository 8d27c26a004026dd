#pragma once

#include <cstdint>
#include <functional>

#include "neoward/transport.hpp"
#include "neoward/vitalsim.hpp"

namespace neoward {

struct DeviceConfig {
  int update_interval_s = 1;
  RateConfig rates{};
  ConnectionProfile profile{};
  int max_send_attempts = 8;
  /// Called with the simulated time before each frame is sent; the CLI uses it
  /// to pace real-time runs. Empty = as fast as possible.
  std::function<void(std::int64_t t_ms)> pace;
};

struct DeviceStats {
  std::uint64_t samples = 0;
  std::uint64_t frames = 0;
  std::uint64_t bursts = 0;
  std::uint64_t reconnects = 0;
  std::uint64_t dropped_frames = 0;
  double backoff_wait_ms = 0;
};

/// Runs one simulated device over the whole scenario. Samples accumulate and
/// are sent once per update interval; a sample carrying the synthetic-event
/// flag flushes the pending batch immediately. Failed sends go through the
/// backoff schedule of config.profile.
DeviceStats run_device(const Scenario& scenario, DeviceId device_id, const DeviceKey& key,
                       FrameSink& sink, const DeviceConfig& config);

/// Static-features payload: varint count then little-endian float64 values.
Bytes encode_features(std::span<const double> values);
std::vector<double> decode_features(ByteView plaintext);

}  // namespace neoward
