#include <gtest/gtest.h>

#include <set>
#include <thread>

#include <httplib.h>

#include "../oracles.hpp"
#include "../test_util.hpp"
#include "neoward/api.hpp"
#include "neoward/sync.hpp"
#include "neoward/vitalsim.hpp"

using namespace neoward;
using testutil::code_of;
using testutil::TempDir;

namespace {

Bytes text(const std::string& s) { return Bytes(s.begin(), s.end()); }

void random_mutations(Store& store, SeededRng& rng, int n, std::int64_t t0) {
  for (int i = 0; i < n; ++i) {
    const auto kind = rng.below(3) == 0 ? RecordKind::kSession : RecordKind::kAnnotation;
    store.put(kind, 1 + rng.below(4), 1 + rng.below(15), t0 + i, text("v" + std::to_string(rng.below(5))));
  }
}

SyncDelta delta(std::int64_t t, std::uint64_t version, Origin origin, std::string payload) {
  SyncDelta d;
  d.key = {RecordKind::kAnnotation, 1, 1};
  d.t_ms = t;
  d.version = version;
  d.origin = origin;
  d.payload = text(payload);
  d.checksum = crc32(d.payload);
  return d;
}

std::vector<VitalSample> stable_hour(DeviceId dev) {
  auto sc = *builtin_scenario("stable");
  sc.duration_s = 3600;
  std::vector<VitalSample> out;
  for (int i = 0; i < 3600; ++i) out.push_back(generate_sample(sc, dev, sc.start_ms + 1000LL * i));
  return out;
}

}  // namespace

// ---- delta computation ----------------------------------------------------------------

TEST(ComputeDelta, EmptyWhenNothingChanged) {
  TempDir dir;
  Store store(dir.path(), testutil::key_from(1));
  store.put(RecordKind::kAnnotation, 1, 1, 1, text("a"));
  auto set = compute_delta(store, store.max_cursor());
  EXPECT_TRUE(set.deltas.empty());
  EXPECT_FALSE(set.reset);
}

TEST(ComputeDelta, MutationOrder) {
  TempDir dir;
  Store store(dir.path(), testutil::key_from(1));
  store.put(RecordKind::kAnnotation, 1, 1, 1, text("a"));
  const auto cut = store.max_cursor();
  std::vector<VitalSample> vs{{1, 10, 1, 1, 1, 3000, 0, 0}, {1, 11, 1, 1, 1, 3000, 0, 0}, {1, 12, 1, 1, 1, 3000, 0, 0}};
  store.append_vitals(vs);
  store.put(RecordKind::kAnnotation, 1, 1, 2, text("edited"));
  auto set = compute_delta(store, cut);
  ASSERT_EQ(set.deltas.size(), 4u);
  for (std::size_t i = 1; i < 4; ++i) EXPECT_LT(set.deltas[i - 1].cursor, set.deltas[i].cursor);
  EXPECT_EQ(set.deltas.back().key.kind, RecordKind::kAnnotation);
  EXPECT_EQ(set.deltas.back().version, 2u);
  for (const auto& d : set.deltas) EXPECT_TRUE(d.checksum_ok());
}

TEST(ComputeDelta, MatchesSnapshotDiffOracle) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    TempDir dir;
    Store store(dir.path(), testutil::key_from(2));
    SeededRng rng(seed);
    random_mutations(store, rng, 60, 0);
    const auto before = store.snapshot();
    const auto cut = store.max_cursor();
    random_mutations(store, rng, static_cast<int>(rng.below(80)), 1000);
    const auto expected = oracle::snapshot_diff(before, store.snapshot());
    auto set = compute_delta(store, cut);
    std::set<RecordKey> got;
    for (const auto& d : set.deltas) got.insert(d.key);
    EXPECT_EQ(got.size(), set.deltas.size()) << "duplicate entity in delta, seed " << seed;
    EXPECT_EQ(got, expected) << "seed " << seed;
  }
}

TEST(ComputeDelta, UnknownCursorSignalsReset) {
  TempDir dir;
  Store store(dir.path(), testutil::key_from(1));
  store.put(RecordKind::kAnnotation, 1, 1, 1, text("a"));
  auto set = compute_delta(store, 999);
  EXPECT_TRUE(set.reset);
  EXPECT_EQ(set.deltas.size(), 1u);
}

// ---- payloads --------------------------------------------------------------------------

TEST(Payload, SerializeAndCompressRoundTrip) {
  SeededRng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    DeltaBatch b;
    b.prev_cursor = rng.below(100);
    std::uint64_t c = b.prev_cursor;
    const auto n = 1 + rng.below(20);
    for (std::uint64_t i = 0; i < n; ++i) {
      SyncDelta d;
      d.key = {static_cast<RecordKind>(rng.below(4)), rng.next(), rng.next()};
      d.version = 1 + rng.below(9);
      d.t_ms = static_cast<std::int64_t>(rng.next() >> 2);
      d.payload.resize(rng.below(64));
      for (auto& byte : d.payload) byte = static_cast<std::uint8_t>(rng.below(256));
      d.checksum = crc32(d.payload);
      d.cursor = c += 1 + rng.below(3);
      d.origin = rng.below(2) ? Origin::kServer : Origin::kGateway;
      b.deltas.push_back(std::move(d));
    }
    ASSERT_EQ(deserialize_batch(serialize_batch(b)), b);
    DeflateConfig cfg;
    cfg.window_bits = 9 + static_cast<int>(rng.below(7));
    ASSERT_EQ(decompress_payload(compress_payload(b, cfg)), b);
  }
}

TEST(Payload, SingleEmptyDeltaRoundTrips) {
  DeltaBatch b;
  SyncDelta d;
  d.cursor = 1;
  d.checksum = crc32(d.payload);
  b.deltas.push_back(d);
  EXPECT_EQ(decompress_payload(compress_payload(b)), b);
}

TEST(Payload, StableHourCompressesBelowHalf) {
  TempDir dir;
  Store store(dir.path(), testutil::key_from(4));
  store.append_vitals(stable_hour(1));
  DeltaBatch b;
  b.deltas = compute_delta(store, 0).deltas;
  ASSERT_EQ(b.deltas.size(), 3600u);
  const auto raw = serialize_batch(b).size();
  const auto packed = compress_payload(b).size();
  EXPECT_LT(static_cast<double>(packed), 0.5 * static_cast<double>(raw)) << packed << " / " << raw;
}

TEST(Payload, GarbageRejected) {
  EXPECT_THROW(decompress_payload(text("\x0f garbage")), Error);
  EXPECT_THROW(decompress_payload({}), Error);
  EXPECT_THROW(deserialize_batch(text("xyz")), Error);
}

// ---- conflicts ---------------------------------------------------------------------------

TEST(ResolveConflict, Examples) {
  auto local = delta(100, 1, Origin::kGateway, "l");
  auto remote = delta(90, 1, Origin::kServer, "r");
  EXPECT_EQ(&resolve_conflict(local, remote), &local);
  remote.t_ms = 100;
  EXPECT_EQ(&resolve_conflict(local, remote), &remote);
  auto other = delta(1, 1, Origin::kGateway, "x");
  other.key.record_id = 2;
  EXPECT_EQ(code_of([&] { resolve_conflict(local, other); }), ErrorCode::kInvalidArgument);
}

TEST(ResolveConflict, CommutativeOverRandomPairs) {
  SeededRng rng(5);
  const std::vector<std::string> payloads{"a", "b", "ab", ""};
  for (int i = 0; i < 10'000; ++i) {
    auto a = delta(static_cast<std::int64_t>(rng.below(3)), 1 + rng.below(3), rng.below(2) ? Origin::kServer : Origin::kGateway,
                   payloads[rng.below(payloads.size())]);
    auto b = delta(static_cast<std::int64_t>(rng.below(3)), 1 + rng.below(3), rng.below(2) ? Origin::kServer : Origin::kGateway,
                   payloads[rng.below(payloads.size())]);
    const SyncDelta ab = resolve_conflict(a, b);
    const SyncDelta ba = resolve_conflict(b, a);
    ASSERT_EQ(ab, ba) << "pair " << i;
    // the winner never has the older timestamp
    ASSERT_EQ(ab.t_ms, std::max(a.t_ms, b.t_ms));
  }
}

// ---- aggregation server ---------------------------------------------------------------------

namespace {

DeltaBatch batch_of(const Store& store, std::uint64_t from) {
  DeltaBatch b;
  b.prev_cursor = from;
  b.deltas = compute_delta(store, from).deltas;
  return b;
}

}  // namespace

TEST(AggregationServer, PushAdvancesCursorAndDedups) {
  TempDir dir;
  Store store(dir.path(), testutil::key_from(6));
  for (int i = 0; i < 5; ++i) store.put(RecordKind::kAnnotation, 1, i + 1, i, text("n"));
  AggregationServer agg;
  auto body = compress_payload(batch_of(store, 0));
  auto r = agg.push(body);
  EXPECT_EQ(r.status, 200);
  EXPECT_EQ(r.applied, 5u);
  EXPECT_EQ(agg.cursor(), 5u);
  const auto digest = agg.checksum();
  r = agg.push(body);
  EXPECT_EQ(r.status, 200);
  EXPECT_EQ(r.applied, 0u);
  EXPECT_EQ(r.deduped, 5u);
  EXPECT_EQ(agg.checksum(), digest);
  EXPECT_EQ(digest, store_digest(store));
}

TEST(AggregationServer, RejectsCorruptGapAndMalformed) {
  TempDir dir;
  Store store(dir.path(), testutil::key_from(6));
  for (int i = 0; i < 4; ++i) store.put(RecordKind::kAnnotation, 1, i + 1, i, text("n"));
  AggregationServer agg;

  auto bad = batch_of(store, 0);
  bad.deltas[2].payload[0] ^= 1;
  auto r = agg.push(compress_payload(bad));
  EXPECT_EQ(r.status, 422);
  EXPECT_EQ(agg.cursor(), 0u);
  EXPECT_TRUE(agg.state().empty()) << "no partial apply";

  auto gap = batch_of(store, 2);
  r = agg.push(compress_payload(gap));
  EXPECT_EQ(r.status, 409);
  EXPECT_EQ(agg.cursor(), 0u);

  auto unordered = batch_of(store, 0);
  std::swap(unordered.deltas[0], unordered.deltas[1]);
  EXPECT_EQ(agg.push(compress_payload(unordered)).status, 400);
  EXPECT_EQ(agg.push(text("nonsense")).status, 400);
  EXPECT_EQ(agg.cursor(), 0u);
}

TEST(AggregationServer, StateDirReplaysAfterRestart) {
  TempDir dir, state;
  Store store(dir.path(), testutil::key_from(6));
  for (int i = 0; i < 7; ++i) store.put(RecordKind::kSession, 2, i + 1, i, text("s" + std::to_string(i)));
  std::string digest;
  {
    AggregationServer agg(state.path());
    agg.push(compress_payload(batch_of(store, 0)));
    digest = agg.checksum();
  }
  AggregationServer again(state.path());
  EXPECT_EQ(again.cursor(), 7u);
  EXPECT_EQ(again.checksum(), digest);
}

TEST(AggregationServer, AppliesInCursorOrder) {
  TempDir dir;
  Store store(dir.path(), testutil::key_from(6));
  SeededRng rng(8);
  random_mutations(store, rng, 200, 0);
  AggregationServer agg;
  LocalSyncClient client(agg);
  SyncOptions opt;
  opt.batch_size = 16;
  auto rep = sync_once(store, client, opt);
  EXPECT_TRUE(rep.complete);
  auto applied = agg.applied_cursors();
  EXPECT_TRUE(std::is_sorted(applied.begin(), applied.end()));
  EXPECT_EQ(std::set<std::uint64_t>(applied.begin(), applied.end()).size(), applied.size());
}

// ---- sync loop ---------------------------------------------------------------------------------

TEST(SyncOnce, CleanNetworkPushesEverythingOnce) {
  TempDir dir;
  Store store(dir.path(), testutil::key_from(7));
  SeededRng rng(9);
  random_mutations(store, rng, 100, 0);
  const auto n = compute_delta(store, 0).deltas.size();
  AggregationServer agg;
  LocalSyncClient client(agg);
  auto rep = sync_once(store, client);
  EXPECT_TRUE(rep.complete);
  EXPECT_EQ(rep.pushed, n);
  EXPECT_EQ(rep.retries, 0u);
  EXPECT_EQ(rep.final_cursor, store.max_cursor());
  EXPECT_EQ(load_sync_cursor(store), store.max_cursor());
  EXPECT_EQ(agg.checksum(), store_digest(store));
  // nothing new: a second pass is a no-op
  auto again = sync_once(store, client);
  EXPECT_EQ(again.pushed, 0u);
  EXPECT_EQ(again.batches, 0u);
}

TEST(SyncOnce, ConvergesUnderWorstImpairment) {
  TempDir dir;
  Store store(dir.path(), testutil::key_from(7));
  SeededRng rng(10);
  random_mutations(store, rng, 300, 0);
  AggregationServer agg;
  LocalSyncClient inner(agg);
  SimClock clock;
  ImpairedClient client(inner, NetworkCondition{2000, 2000, 0.30, 77}, clock);
  SyncOptions opt;
  opt.batch_size = 32;
  SyncReport rep;
  for (int pass = 0; pass < 50 && !rep.complete; ++pass) rep = sync_once(store, client, opt, &clock);
  EXPECT_TRUE(rep.complete);
  EXPECT_EQ(rep.final_cursor, store.max_cursor());
  EXPECT_EQ(agg.checksum(), store_digest(store));
  EXPECT_GT(client.lost_requests() + client.lost_responses(), 0u);
  EXPECT_GT(clock.now_ms(), 0);
}

TEST(SyncOnce, ExhaustedRetriesKeepCursorAtLastAck) {
  TempDir dir;
  Store store(dir.path(), testutil::key_from(7));
  for (int i = 0; i < 10; ++i) store.put(RecordKind::kAnnotation, 1, i + 1, i, text("n"));
  AggregationServer agg;
  LocalSyncClient inner(agg);
  SimClock clock;
  ImpairedClient dead(inner, NetworkCondition{50, 50, 0.30, 1}, clock);
  SyncOptions opt;
  opt.batch_size = 2;
  opt.max_attempts = 1;
  auto rep = sync_once(store, dead, opt, &clock);
  EXPECT_EQ(rep.final_cursor, load_sync_cursor(store));
  EXPECT_LE(rep.final_cursor, agg.cursor());
  if (!rep.complete) EXPECT_LT(rep.final_cursor, store.max_cursor());
}

TEST(SyncOnce, ServerBehindCursorRewinds) {
  TempDir dir;
  Store store(dir.path(), testutil::key_from(7));
  for (int i = 0; i < 6; ++i) store.put(RecordKind::kAnnotation, 1, i + 1, i, text("n"));
  {
    AggregationServer lost;
    LocalSyncClient c(lost);
    sync_once(store, c);
  }
  store.put(RecordKind::kAnnotation, 1, 99, 99, text("late"));
  AggregationServer fresh;
  LocalSyncClient client(fresh);
  auto rep = sync_once(store, client);
  EXPECT_TRUE(rep.complete);
  EXPECT_TRUE(rep.reset);
  EXPECT_EQ(fresh.checksum(), store_digest(store));
}

TEST(NetworkCondition, ParseAndValidate) {
  EXPECT_EQ(NetworkCondition::parse_latency("50..2000"), std::make_pair(50.0, 2000.0));
  EXPECT_EQ(NetworkCondition::parse_latency("500"), std::make_pair(500.0, 500.0));
  EXPECT_THROW(NetworkCondition::parse_latency("x..y"), Error);
  EXPECT_THROW((NetworkCondition{10, 50, 0, 1}.validate()), Error);
  EXPECT_THROW((NetworkCondition{50, 3000, 0, 1}.validate()), Error);
  EXPECT_THROW((NetworkCondition{50, 50, 0.31, 1}.validate()), Error);
  EXPECT_NO_THROW((NetworkCondition{50, 2000, 0.30, 1}.validate()));
}

TEST(NetworkCondition, DeterministicUnderSeed) {
  auto run = [] {
    AggregationServer agg;
    LocalSyncClient inner(agg);
    SimClock clock;
    ImpairedClient c(inner, NetworkCondition{50, 2000, 0.15, 42}, clock);
    for (int i = 0; i < 200; ++i) c.cursor();
    return std::make_pair(clock.now_ms(), c.lost_requests());
  };
  EXPECT_EQ(run(), run());
}

// ---- over HTTP ---------------------------------------------------------------------------------

namespace {

struct HttpServer {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  void start() {
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~HttpServer() {
    server.stop();
    if (thread.joinable()) thread.join();
  }
};

}  // namespace

TEST(SyncHttp, MockServerRoutesAndProxy) {
  TempDir dir;
  Store store(dir.path(), testutil::key_from(11));
  SeededRng rng(12);
  random_mutations(store, rng, 80, 0);

  AggregationServer agg;
  HttpServer mock;
  mount_sync_server_routes(mock.server, agg);
  mock.start();
  HttpServer proxy;
  mount_netsim_proxy(proxy.server, "http://127.0.0.1:" + std::to_string(mock.port), NetworkCondition{50, 60, 0.30, 5});
  proxy.start();

  HttpSyncClient direct("http://127.0.0.1:" + std::to_string(mock.port));
  EXPECT_EQ(direct.cursor(), std::optional<std::uint64_t>(0));

  HttpSyncClient via("http://127.0.0.1:" + std::to_string(proxy.port), 2000);
  SyncOptions opt;
  opt.batch_size = 10;
  opt.max_attempts = 40;
  opt.backoff.backoff_base_ms = 1;
  opt.backoff.backoff_cap_ms = 5;
  SyncReport rep;
  for (int pass = 0; pass < 20 && !rep.complete; ++pass) rep = sync_once(store, via, opt);
  EXPECT_TRUE(rep.complete);
  EXPECT_EQ(direct.cursor(), std::optional<std::uint64_t>(store.max_cursor()));
  EXPECT_EQ(direct.checksum(), std::optional<std::string>(store_digest(store)));

  httplib::Client cli("127.0.0.1", mock.port);
  auto r = cli.Post("/api/sync/push", "garbage", "application/octet-stream");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 400);
}
