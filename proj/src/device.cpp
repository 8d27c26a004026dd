#include "neoward/device.hpp"

#include <algorithm>
#include <cmath>

namespace neoward {

namespace {

// Split until every part seals under the 4096-byte payload limit.
void emit_batch(std::span<const VitalSample> batch, DeviceSealer& sealer, FrameSink& sink,
                const DeviceConfig& config, DeviceStats& stats) {
  Bytes plain = encode_batch(batch);
  if (plain.size() > kMaxPayload && batch.size() > 1) {
    auto half = batch.size() / 2;
    emit_batch(batch.first(half), sealer, sink, config, stats);
    emit_batch(batch.subspan(half), sealer, sink, config, stats);
    return;
  }
  Bytes wire = build_frame(sealer.seal_next(FrameType::kVitalsBatch, plain));
  for (int attempt = 0; attempt < config.max_send_attempts; ++attempt) {
    if (sink.send(wire)) {
      ++stats.frames;
      return;
    }
    ++stats.reconnects;
    stats.backoff_wait_ms += next_backoff_ms(config.profile, attempt);
  }
  ++stats.dropped_frames;
}

}  // namespace

DeviceStats run_device(const Scenario& scenario, DeviceId device_id, const DeviceKey& key,
                       FrameSink& sink, const DeviceConfig& config) {
  scenario.validate();
  config.rates.validate();
  if (std::find(kSupportedIntervals.begin(), kSupportedIntervals.end(), config.update_interval_s) ==
      kSupportedIntervals.end())
    throw Error(ErrorCode::kUnsupported, "update interval must be one of 1, 2, 4, 5 s");

  DeviceStats stats;
  DeviceSealer sealer(key, device_id);
  std::vector<VitalSample> pending;
  const std::int64_t interval_ms = config.update_interval_s * 1000LL;
  std::int64_t next_flush = scenario.start_ms + interval_ms;

  auto flush = [&](std::int64_t now) {
    if (pending.empty()) return;
    if (config.pace) config.pace(now);
    emit_batch(pending, sealer, sink, config, stats);
    pending.clear();
  };

  std::int64_t t = scenario.start_ms;
  const std::int64_t end = scenario.end_ms();
  while (t < end) {
    VitalSample s = generate_sample(scenario, device_id, t);
    ++stats.samples;
    pending.push_back(s);
    const auto period_ms =
        static_cast<std::int64_t>(std::llround(1000.0 / adaptive_rate(s.motion, config.rates)));
    const std::int64_t next_t = t + std::max<std::int64_t>(period_ms, 1);

    if (s.flags & sample_flags::kSyntheticEvent) {
      ++stats.bursts;
      flush(t);
    } else if (next_t >= next_flush) {
      flush(t);
    }
    while (next_flush <= next_t) next_flush += interval_ms;
    t = next_t;
  }
  flush(end);
  return stats;
}

Bytes encode_features(std::span<const double> values) {
  Bytes out;
  ByteWriter w(out);
  w.varint(values.size());
  for (double v : values) w.f64(v);
  return out;
}

std::vector<double> decode_features(ByteView plaintext) {
  ByteReader r(plaintext);
  auto n = r.varint();
  if (n > r.remaining() / 8) throw Error(ErrorCode::kDecode, "feature count exceeds payload");
  std::vector<double> out(static_cast<std::size_t>(n));
  for (auto& v : out) v = r.f64();
  if (!r.done()) throw Error(ErrorCode::kDecode, "trailing bytes after features");
  return out;
}

}  // namespace neoward
