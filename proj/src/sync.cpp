#include "neoward/sync.hpp"

#include <sodium.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <thread>

#include <httplib.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

namespace neoward {

namespace {

constexpr std::size_t kMaxInflated = 64u << 20;

SyncDelta delta_from(const StoredRecord& r) {
  SyncDelta d;
  d.key = r.key;
  d.version = r.version;
  d.t_ms = r.t_ms;
  d.payload = r.payload;
  d.checksum = r.checksum;
  d.cursor = r.cursor;
  return d;
}

}  // namespace

DeltaSet compute_delta(const Store& store, std::uint64_t last_cursor) {
  DeltaSet out;
  if (last_cursor > store.max_cursor()) {
    out.reset = true;
    last_cursor = 0;
  }
  for (const auto& r : store.changed_since(last_cursor)) out.deltas.push_back(delta_from(r));
  return out;
}

Bytes serialize_batch(const DeltaBatch& batch) {
  Bytes out;
  ByteWriter w(out);
  w.varint(batch.prev_cursor);
  w.varint(batch.deltas.size());
  for (const auto& d : batch.deltas) {
    w.u8(static_cast<std::uint8_t>(d.key.kind));
    w.u64(d.key.device_id);
    w.varint(d.key.record_id);
    w.varint(d.version);
    w.zigzag(d.t_ms);
    w.varint(d.cursor);
    w.u8(static_cast<std::uint8_t>(d.origin));
    w.u32(d.checksum);
    w.varint(d.payload.size());
    w.raw(d.payload);
  }
  return out;
}

DeltaBatch deserialize_batch(ByteView bytes) {
  try {
    ByteReader r(bytes);
    DeltaBatch batch;
    batch.prev_cursor = r.varint();
    const auto count = r.varint();
    // every delta needs well over one byte, so this bounds the reservation
    if (count > r.remaining()) throw Error(ErrorCode::kMalformed, "delta count exceeds batch size");
    batch.deltas.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      SyncDelta d;
      const auto kind = r.u8();
      if (kind > static_cast<std::uint8_t>(RecordKind::kDeviceMeta))
        throw Error(ErrorCode::kMalformed, "unknown record kind");
      d.key.kind = static_cast<RecordKind>(kind);
      d.key.device_id = r.u64();
      d.key.record_id = r.varint();
      d.version = r.varint();
      d.t_ms = r.zigzag();
      d.cursor = r.varint();
      const auto origin = r.u8();
      if (origin > 1) throw Error(ErrorCode::kMalformed, "unknown origin");
      d.origin = static_cast<Origin>(origin);
      d.checksum = r.u32();
      const auto len = r.varint();
      if (len > r.remaining()) throw Error(ErrorCode::kMalformed, "payload overruns batch");
      auto p = r.raw(len);
      d.payload.assign(p.begin(), p.end());
      batch.deltas.push_back(std::move(d));
    }
    if (!r.done()) throw Error(ErrorCode::kMalformed, "trailing bytes after batch");
    return batch;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kMalformed) throw;
    throw Error(ErrorCode::kMalformed, std::string("bad batch: ") + e.what());
  }
}

Bytes compress_payload(const DeltaBatch& batch, const DeflateConfig& config) {
  if (config.window_bits < 9 || config.window_bits > 15)
    throw Error(ErrorCode::kInvalidArgument, "window_bits must be in 9..15");
  if (config.level < 0 || config.level > 9) throw Error(ErrorCode::kInvalidArgument, "level must be in 0..9");
  if (config.mem_level < 1 || config.mem_level > 9)
    throw Error(ErrorCode::kInvalidArgument, "mem_level must be in 1..9");
  const Bytes raw = serialize_batch(batch);

  z_stream zs{};
  if (deflateInit2(&zs, config.level, Z_DEFLATED, -config.window_bits, config.mem_level, Z_DEFAULT_STRATEGY) != Z_OK)
    throw Error(ErrorCode::kIo, "deflateInit2 failed");
  Bytes out(1 + deflateBound(&zs, raw.size()));
  out[0] = static_cast<std::uint8_t>(config.window_bits);
  zs.next_in = const_cast<Bytef*>(raw.data());
  zs.avail_in = static_cast<uInt>(raw.size());
  zs.next_out = out.data() + 1;
  zs.avail_out = static_cast<uInt>(out.size() - 1);
  const int rc = deflate(&zs, Z_FINISH);
  const auto produced = zs.total_out;
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw Error(ErrorCode::kIo, "deflate did not finish");
  out.resize(1 + produced);
  return out;
}

DeltaBatch decompress_payload(ByteView bytes) {
  if (bytes.empty()) throw Error(ErrorCode::kMalformed, "empty payload");
  const int wbits = bytes[0];
  if (wbits < 9 || wbits > 15) throw Error(ErrorCode::kMalformed, "bad window bits prelude");
  z_stream zs{};
  if (inflateInit2(&zs, -wbits) != Z_OK) throw Error(ErrorCode::kIo, "inflateInit2 failed");
  zs.next_in = const_cast<Bytef*>(bytes.data() + 1);
  zs.avail_in = static_cast<uInt>(bytes.size() - 1);
  Bytes out;
  std::array<std::uint8_t, 16384> chunk{};
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk.data();
    zs.avail_out = chunk.size();
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw Error(ErrorCode::kMalformed, "inflate failed");
    }
    out.insert(out.end(), chunk.data(), chunk.data() + (chunk.size() - zs.avail_out));
    if (out.size() > kMaxInflated) {
      inflateEnd(&zs);
      throw Error(ErrorCode::kMalformed, "inflated payload too large");
    }
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw Error(ErrorCode::kMalformed, "truncated deflate stream");
    }
  }
  inflateEnd(&zs);
  return deserialize_batch(out);
}

const SyncDelta& resolve_conflict(const SyncDelta& local, const SyncDelta& remote) {
  if (local.key != remote.key) throw Error(ErrorCode::kInvalidArgument, "conflict between different entities");
  if (local.t_ms != remote.t_ms) return local.t_ms > remote.t_ms ? local : remote;
  if (local.origin != remote.origin) return local.origin == Origin::kServer ? local : remote;
  if (local.version != remote.version) return local.version > remote.version ? local : remote;
  return std::lexicographical_compare(remote.payload.begin(), remote.payload.end(), local.payload.begin(),
                                      local.payload.end())
             ? local
             : remote;
}

std::string state_digest(const std::map<RecordKey, SyncDelta>& state) {
  if (sodium_init() < 0) throw Error(ErrorCode::kIo, "sodium_init failed");
  crypto_hash_sha256_state st;
  crypto_hash_sha256_init(&st);
  Bytes buf;
  for (const auto& [key, d] : state) {
    buf.clear();
    ByteWriter w(buf);
    w.u8(static_cast<std::uint8_t>(key.kind));
    w.u64(key.device_id);
    w.u64(key.record_id);
    w.u64(d.version);
    w.i64(d.t_ms);
    w.u32(d.checksum);
    w.u32(static_cast<std::uint32_t>(d.payload.size()));
    w.raw(d.payload);
    crypto_hash_sha256_update(&st, buf.data(), buf.size());
  }
  std::array<std::uint8_t, crypto_hash_sha256_BYTES> out{};
  crypto_hash_sha256_final(&st, out.data());
  return to_hex(out);
}

std::string store_digest(const Store& store) {
  std::map<RecordKey, SyncDelta> state;
  for (const auto& [key, rec] : store.snapshot()) state.emplace(key, delta_from(rec));
  return state_digest(state);
}

// ---- AggregationServer -----------------------------------------------------

AggregationServer::AggregationServer(std::optional<std::filesystem::path> state_dir)
    : state_dir_(std::move(state_dir)) {
  if (!state_dir_) return;
  std::filesystem::create_directories(*state_dir_);
  const auto log = *state_dir_ / "batches.log";
  if (!std::filesystem::exists(log)) return;
  const Bytes all = read_file(log.string());
  std::size_t pos = 0, good = 0;
  while (pos + 8 <= all.size()) {
    ByteReader hdr(ByteView(all).subspan(pos, 8));
    const auto len = hdr.u32();
    const auto crc = hdr.u32();
    if (pos + 8 + len > all.size()) break;
    auto body = ByteView(all).subspan(pos + 8, len);
    if (crc32(body) != crc) break;
    apply(deserialize_batch(body), true);
    pos += 8 + len;
    good = pos;
  }
  if (good != all.size()) {
    spdlog::warn("mock server: truncating {} torn bytes from {}", all.size() - good, log.string());
    std::filesystem::resize_file(log, good);
  }
}

PushResult AggregationServer::push(ByteView compressed) {
  DeltaBatch batch;
  try {
    batch = decompress_payload(compressed);
  } catch (const Error& e) {
    return PushResult{400, cursor(), 0, 0, e.what()};
  }
  return apply(batch, false);
}

PushResult AggregationServer::apply(const DeltaBatch& batch, bool replaying) {
  std::lock_guard lock(mu_);
  PushResult res;
  res.cursor = cursor_;
  for (const auto& d : batch.deltas) {
    if (!d.checksum_ok()) {
      res.status = 422;
      res.error = "checksum mismatch at cursor " + std::to_string(d.cursor);
      return res;
    }
  }
  std::uint64_t prev = batch.prev_cursor;
  for (const auto& d : batch.deltas) {
    if (d.cursor <= prev) {
      res.status = 400;
      res.error = "deltas out of cursor order";
      return res;
    }
    prev = d.cursor;
  }
  if (batch.prev_cursor > cursor_) {
    res.status = 409;
    res.error = "cursor gap: batch starts at " + std::to_string(batch.prev_cursor) + ", server at " +
                std::to_string(cursor_);
    return res;
  }

  for (const auto& d : batch.deltas) {
    if (d.cursor <= cursor_) {
      ++res.deduped;
      continue;
    }
    auto it = state_.find(d.key);
    bool take = it == state_.end();
    if (!take) {
      if (it->second.version == d.version && it->second.payload == d.payload) {
        take = false;
      } else {
        take = &resolve_conflict(d, it->second) == &d;
      }
    }
    if (take) {
      SyncDelta copy = d;
      copy.origin = Origin::kServer;
      state_[d.key] = std::move(copy);
      ++res.applied;
    } else {
      ++res.deduped;
    }
    applied_.push_back(d.cursor);
  }
  if (!batch.deltas.empty()) cursor_ = std::max(cursor_, batch.deltas.back().cursor);
  res.cursor = cursor_;

  if (state_dir_ && !replaying && res.applied + res.deduped > 0) {
    const Bytes body = serialize_batch(batch);
    Bytes rec;
    ByteWriter w(rec);
    w.u32(static_cast<std::uint32_t>(body.size()));
    w.u32(crc32(body));
    w.raw(body);
    const auto path = (*state_dir_ / "batches.log").string();
    std::FILE* f = std::fopen(path.c_str(), "ab");
    if (!f) throw Error(ErrorCode::kIo, "cannot open " + path);
    const bool ok = std::fwrite(rec.data(), 1, rec.size(), f) == rec.size() && std::fflush(f) == 0 &&
                    ::fsync(fileno(f)) == 0;
    std::fclose(f);
    if (!ok) throw Error(ErrorCode::kIo, "cannot append to " + path);
  }
  return res;
}

std::uint64_t AggregationServer::cursor() const {
  std::lock_guard lock(mu_);
  return cursor_;
}

std::string AggregationServer::checksum() const { return state_digest(state()); }

std::map<RecordKey, SyncDelta> AggregationServer::state() const {
  std::lock_guard lock(mu_);
  return state_;
}

std::vector<std::uint64_t> AggregationServer::applied_cursors() const {
  std::lock_guard lock(mu_);
  return applied_;
}

// ---- clients ---------------------------------------------------------------

std::optional<PushAck> LocalSyncClient::push(ByteView compressed) {
  auto r = server_.push(compressed);
  return PushAck{r.status, r.cursor, r.applied, r.deduped};
}

HttpSyncClient::HttpSyncClient(std::string base_url, int timeout_ms)
    : base_url_(std::move(base_url)), timeout_ms_(timeout_ms) {}

namespace {

httplib::Client make_client(const std::string& url, int timeout_ms) {
  httplib::Client cli(url);
  const auto sec = timeout_ms / 1000;
  const auto usec = (timeout_ms % 1000) * 1000;
  cli.set_connection_timeout(sec, usec);
  cli.set_read_timeout(sec, usec);
  cli.set_write_timeout(sec, usec);
  return cli;
}

}  // namespace

std::optional<PushAck> HttpSyncClient::push(ByteView compressed) {
  auto cli = make_client(base_url_, timeout_ms_);
  auto res = cli.Post("/api/sync/push", reinterpret_cast<const char*>(compressed.data()), compressed.size(),
                      "application/octet-stream");
  if (!res || res->status >= 500) return std::nullopt;
  PushAck ack;
  ack.status = res->status;
  auto j = nlohmann::json::parse(res->body, nullptr, false);
  if (j.is_object()) {
    ack.cursor = j.value("cursor", std::uint64_t{0});
    ack.applied = j.value("applied", std::size_t{0});
    ack.deduped = j.value("deduped", std::size_t{0});
  }
  return ack;
}

std::optional<std::uint64_t> HttpSyncClient::cursor() {
  auto cli = make_client(base_url_, timeout_ms_);
  auto res = cli.Get("/api/sync/cursor");
  if (!res || res->status != 200) return std::nullopt;
  auto j = nlohmann::json::parse(res->body, nullptr, false);
  if (!j.is_object() || !j.contains("cursor")) return std::nullopt;
  return j["cursor"].get<std::uint64_t>();
}

std::optional<std::string> HttpSyncClient::checksum() {
  auto cli = make_client(base_url_, timeout_ms_);
  auto res = cli.Get("/api/sync/checksum");
  if (!res || res->status != 200) return std::nullopt;
  auto j = nlohmann::json::parse(res->body, nullptr, false);
  if (!j.is_object() || !j.contains("checksum")) return std::nullopt;
  return j["checksum"].get<std::string>();
}

// ---- impairment --------------------------------------------------------------

void NetworkCondition::validate() const {
  const bool ideal = latency_lo_ms == 0 && latency_hi_ms == 0;
  if (!ideal && (latency_lo_ms < 50 || latency_hi_ms > 2000 || latency_lo_ms > latency_hi_ms))
    throw Error(ErrorCode::kInvalidArgument, "latency range must lie within 50..2000 ms");
  if (!(loss >= 0.0 && loss <= 0.30)) throw Error(ErrorCode::kInvalidArgument, "loss must be in [0, 0.30]");
}

std::pair<double, double> NetworkCondition::parse_latency(std::string_view text) {
  auto num = [&](std::string_view s) {
    double v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
      throw Error(ErrorCode::kInvalidArgument, "bad latency: " + std::string(text));
    return v;
  };
  if (auto dots = text.find(".."); dots != std::string_view::npos)
    return {num(text.substr(0, dots)), num(text.substr(dots + 2))};
  const double v = num(text);
  return {v, v};
}

ImpairedClient::ImpairedClient(SyncClient& inner, NetworkCondition condition, SimClock& clock)
    : condition_(condition), inner_(inner), clock_(clock), rng_(condition.seed) {
  condition_.validate();
}

bool ImpairedClient::deliver() {
  if (rng_.uniform() < condition_.loss) {
    clock_.advance(timeout_ms());
    return false;
  }
  clock_.advance(rng_.uniform(condition_.latency_lo_ms, condition_.latency_hi_ms));
  return true;
}

std::optional<PushAck> ImpairedClient::push(ByteView compressed) {
  if (!deliver()) {
    ++lost_requests_;
    return std::nullopt;
  }
  auto ack = inner_.push(compressed);
  if (!deliver()) {
    ++lost_responses_;
    return std::nullopt;
  }
  return ack;
}

std::optional<std::uint64_t> ImpairedClient::cursor() {
  if (!deliver()) return std::nullopt;
  auto c = inner_.cursor();
  if (!deliver()) return std::nullopt;
  return c;
}

std::optional<std::string> ImpairedClient::checksum() {
  if (!deliver()) return std::nullopt;
  auto c = inner_.checksum();
  if (!deliver()) return std::nullopt;
  return c;
}

// ---- sync loop -----------------------------------------------------------------

std::uint64_t load_sync_cursor(const Store& store, const std::string& meta) {
  auto text = store.read_meta(meta);
  if (!text) return 0;
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(text->data(), text->data() + text->size(), v);
  if (ec != std::errc{}) throw Error(ErrorCode::kDecode, "corrupt sync cursor: " + *text);
  return v;
}

SyncReport sync_once(Store& store, SyncClient& client, const SyncOptions& options, SimClock* clock) {
  if (options.batch_size == 0) throw Error(ErrorCode::kInvalidArgument, "batch_size must be > 0");
  if (options.max_attempts < 1) throw Error(ErrorCode::kInvalidArgument, "max_attempts must be >= 1");
  SyncReport report;
  std::uint64_t cursor = load_sync_cursor(store, options.cursor_meta);
  auto persist = [&](std::uint64_t c) {
    cursor = c;
    store.write_meta(options.cursor_meta, std::to_string(c));
  };
  auto wait = [&](double ms) {
    report.waited_ms += ms;
    if (clock) {
      clock->advance(ms);
    } else {
      std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
    }
  };

  DeltaSet set = compute_delta(store, cursor);
  if (set.reset) {
    report.reset = true;
    persist(0);
  }
  int rewinds = 0;
  std::size_t i = 0;
  while (i < set.deltas.size()) {
    DeltaBatch batch;
    batch.prev_cursor = cursor;
    const auto end = std::min(set.deltas.size(), i + options.batch_size);
    batch.deltas.assign(set.deltas.begin() + static_cast<std::ptrdiff_t>(i),
                        set.deltas.begin() + static_cast<std::ptrdiff_t>(end));
    const Bytes body = compress_payload(batch, options.deflate);

    std::optional<PushAck> ack;
    for (int attempt = 0; attempt < options.max_attempts; ++attempt) {
      ack = client.push(body);
      if (ack) break;
      ++report.retries;
      wait(next_backoff_ms(options.backoff, attempt));
    }
    if (!ack) {
      report.final_cursor = cursor;
      return report;
    }
    if (ack->status == 409) {
      // the server is behind our cursor (lost state): rewind to its cursor
      if (++rewinds > 3) throw Error(ErrorCode::kConflict, "server keeps rejecting the sync cursor");
      report.reset = true;
      persist(ack->cursor);
      set = compute_delta(store, cursor);
      i = 0;
      continue;
    }
    if (ack->status == 422) throw Error(ErrorCode::kChecksumMismatch, "server rejected batch checksum");
    if (ack->status != 200) throw Error(ErrorCode::kMalformed, "server rejected batch: " + std::to_string(ack->status));
    persist(batch.deltas.back().cursor);
    report.pushed += ack->applied;
    report.deduped += ack->deduped;
    ++report.batches;
    i = end;
  }
  report.final_cursor = cursor;
  report.complete = true;
  return report;
}

}  // namespace neoward
