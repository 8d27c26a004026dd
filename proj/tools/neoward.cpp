// neoward command line: device simulator, gateway, sync tooling, monitor
// value extraction and the risk model.

#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <thread>

#include <CLI11.hpp>
#include <fmt/core.h>
#include <httplib.h>
#include <sodium.h>
#include <spdlog/spdlog.h>

#include "neoward/api.hpp"
#include "neoward/device.hpp"
#include "neoward/monitorocr.hpp"
#include "neoward/smt.hpp"

using namespace neoward;
namespace fs = std::filesystem;

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

void wait_for_signal(const std::function<void()>& every_second = {}) {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_stop) {
    std::this_thread::sleep_for(std::chrono::seconds(1));
    if (every_second) every_second();
  }
}

struct HostPort {
  std::string host = "127.0.0.1";
  int port = 0;
};

// "host:port", ":port" or "port".
HostPort parse_addr(const std::string& s) {
  HostPort hp;
  const auto colon = s.rfind(':');
  std::string port = s;
  if (colon != std::string::npos) {
    if (colon > 0) hp.host = s.substr(0, colon);
    port = s.substr(colon + 1);
  }
  try {
    std::size_t used = 0;
    hp.port = std::stoi(port, &used);
    if (used != port.size() || hp.port < 0 || hp.port > 65535) throw std::invalid_argument(s);
  } catch (const std::exception&) {
    throw Error(ErrorCode::kInvalidArgument, "bad address: " + s);
  }
  return hp;
}

DeviceKey master_or_default(const std::string& path) {
  if (!path.empty()) return load_key_file(path);
  spdlog::warn("no --device-key-file given; using the all-zero development master key");
  return DeviceKey{};
}

class CountingSink : public FrameSink {
 public:
  bool send(ByteView frame) override {
    ++frames;
    bytes += frame.size();
    return true;
  }
  std::uint64_t frames = 0, bytes = 0;
};

// ---- simulate / power -----------------------------------------------------------

int cmd_simulate(int devices, const std::string& scenario_name, std::uint64_t seed, double duration, int interval,
                 const std::string& sink_spec, const std::string& key_file, bool realtime) {
  auto scenario = load_scenario(scenario_name);
  scenario.seed = seed;
  if (duration > 0) {
    scenario.duration_s = duration;
    const auto before = scenario.events.size();
    std::erase_if(scenario.events, [&](const ScenarioEvent& e) { return e.onset_s + e.duration_s > duration; });
    std::erase_if(scenario.glitches, [&](const Glitch& g) { return g.t_s >= duration; });
    if (scenario.events.size() != before)
      spdlog::warn("{} event(s) fall outside --duration and were dropped", before - scenario.events.size());
  }
  scenario.validate();
  const auto master = master_or_default(key_file);

  std::mutex out_mu;
  std::atomic<std::uint64_t> total_samples{0}, total_frames{0}, total_drops{0};
  std::shared_ptr<FileSink> file_sink;  // one file shared by all devices
  std::mutex file_mu;
  if (sink_spec.rfind("file:", 0) == 0) file_sink = std::make_shared<FileSink>(sink_spec.substr(5));

  class LockedSink : public FrameSink {
   public:
    LockedSink(FrameSink& inner, std::mutex& mu) : inner_(inner), mu_(mu) {}
    bool send(ByteView f) override {
      std::lock_guard lock(mu_);
      return inner_.send(f);
    }

   private:
    FrameSink& inner_;
    std::mutex& mu_;
  };

  const auto wall_start = std::chrono::steady_clock::now();
  std::vector<std::thread> threads;
  CountingSink counting;
  std::mutex counting_mu;
  for (int i = 0; i < devices; ++i) {
    threads.emplace_back([&, id = static_cast<DeviceId>(i + 1)] {
      std::unique_ptr<FrameSink> own;
      FrameSink* sink = nullptr;
      if (file_sink) {
        own = std::make_unique<LockedSink>(*file_sink, file_mu);
      } else if (sink_spec == "memory") {
        own = std::make_unique<LockedSink>(counting, counting_mu);
      } else {
        const auto addr = parse_addr(sink_spec.rfind("tcp:", 0) == 0 ? sink_spec.substr(4) : sink_spec);
        own = std::make_unique<TcpSink>(addr.host, addr.port);
      }
      sink = own.get();
      DeviceConfig cfg;
      cfg.update_interval_s = interval;
      cfg.profile.device_id = id;
      cfg.profile.seed = seed;
      cfg.profile.jitter = 0.2;
      if (realtime) {
        cfg.pace = [&, start = scenario.start_ms](std::int64_t t_ms) {
          std::this_thread::sleep_until(wall_start + std::chrono::milliseconds(t_ms - start));
        };
      }
      const auto stats = run_device(scenario, id, derive_device_key(master, id), *sink, cfg);
      total_samples += stats.samples;
      total_frames += stats.frames;
      total_drops += stats.dropped_frames;
      std::lock_guard lock(out_mu);
      fmt::print("device {} samples={} frames={} bursts={} reconnects={} dropped={}\n", id, stats.samples,
                 stats.frames, stats.bursts, stats.reconnects, stats.dropped_frames);
    });
  }
  for (auto& t : threads) t.join();
  fmt::print("total samples={} frames={} dropped={}\n", total_samples.load(), total_frames.load(),
             total_drops.load());
  if (sink_spec == "memory") fmt::print("wire bytes={}\n", counting.bytes);
  return total_drops == 0 ? 0 : 2;
}

int cmd_power(int interval, double battery_mah, bool advertising) {
  const auto mode = advertising ? PowerMode::advertising() : PowerMode::connected(interval);
  const double ma = power_current(mode);
  const double h = battery_life_h(battery_mah, ma);
  fmt::print("mode: {}\n", advertising ? "advertising" : fmt::format("connected, {} s updates", interval));
  fmt::print("current: {:.2f} mA\n", ma);
  fmt::print("lifetime: {:.1f} h ({:.2f} days) on {:.0f} mAh\n", h, h / 24.0, battery_mah);
  return 0;
}

// ---- gateway -----------------------------------------------------------------

struct GatewayArgs {
  std::string listen = "127.0.0.1:8080";
  std::string ws_listen;
  std::string device_listen;
  std::string store_dir;
  std::string store_key_file;
  std::string token_key_file;
  std::string device_key_file;
  std::string sync_url;
  double sync_interval_s = 0;
  int retain_days = 0;
  std::string model;
};

int cmd_gateway(const GatewayArgs& a) {
  const auto store_key = load_key_file(a.store_key_file);
  const auto token_key = load_key_file(a.token_key_file);
  StoreOptions sopts;
  sopts.retain_days = a.retain_days;
  Store store(a.store_dir, store_key, sopts);

  GatewayConfig gcfg;
  if (!a.model.empty()) gcfg.risk_model = std::make_shared<const smt::Model>(smt::load_model(a.model));
  Gateway gateway(store, system_clock_ms(), gcfg);

  std::unique_ptr<SyncManager> sync;
  if (!a.sync_url.empty()) {
    sync = std::make_unique<SyncManager>(store, std::make_unique<HttpSyncClient>(a.sync_url), SyncOptions{},
                                         [&gateway](const nlohmann::json& m) { gateway.publish(m); });
  }

  ApiConfig api;
  const auto http = parse_addr(a.listen);
  api.host = http.host;
  api.http_port = http.port;
  if (!a.ws_listen.empty()) api.ws_port = parse_addr(a.ws_listen).port;
  if (!a.device_listen.empty()) {
    api.device_port = parse_addr(a.device_listen).port;
    const auto master = master_or_default(a.device_key_file);
    api.device_keys = [master](DeviceId id) -> std::optional<DeviceKey> { return derive_device_key(master, id); };
  }
  api.token_key = token_key;

  gateway.start();
  GatewayServer server(gateway, api, sync.get());
  server.start();
  spdlog::info("gateway http on {}:{}, websocket on {}", api.host, server.http_port(), server.ws_port());
  if (api.device_port) spdlog::info("device frames on port {}", server.device_port());

  auto last_sync = std::chrono::steady_clock::now();
  auto last_prune = last_sync;
  wait_for_signal([&] {
    const auto now = std::chrono::steady_clock::now();
    if (sync && a.sync_interval_s > 0 && now - last_sync >= std::chrono::duration<double>(a.sync_interval_s)) {
      sync->trigger();
      last_sync = now;
    }
    if (a.retain_days > 0 && now - last_prune >= std::chrono::hours(1)) {
      store.prune(gateway.now_ms());
      last_prune = now;
    }
  });
  spdlog::info("shutting down");
  server.stop();
  gateway.stop();
  if (sync) sync->wait_idle();
  store.flush();
  return 0;
}

// ---- sync / mock server / netsim ------------------------------------------------------

int cmd_sync(const std::string& server, const std::string& store_dir, const std::string& key_file, bool once,
             double loop_s) {
  Store store(store_dir, load_key_file(key_file));
  HttpSyncClient client(server);
  auto pass = [&] {
    const auto r = sync_once(store, client);
    fmt::print("pushed={} deduped={} retries={} batches={} cursor={} complete={}{}\n", r.pushed, r.deduped,
               r.retries, r.batches, r.final_cursor, r.complete, r.reset ? " (server reset)" : "");
    return r.complete;
  };
  if (once || loop_s <= 0) return pass() ? 0 : 2;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_stop) {
    try {
      pass();
    } catch (const Error& e) {
      spdlog::error("sync failed: {}", e.what());
    }
    for (double waited = 0; waited < loop_s && !g_stop; waited += 0.1)
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }
  return 0;
}

int serve(httplib::Server& srv, const std::string& listen, const std::string& what) {
  const auto addr = parse_addr(listen);
  const int port = addr.port == 0 ? srv.bind_to_any_port(addr.host) : (srv.bind_to_port(addr.host, addr.port) ? addr.port : -1);
  if (port < 0) throw Error(ErrorCode::kIo, "cannot bind " + listen);
  std::thread t([&] { srv.listen_after_bind(); });
  srv.wait_until_ready();
  spdlog::info("{} listening on {}:{}", what, addr.host, port);
  wait_for_signal();
  srv.stop();
  t.join();
  return 0;
}

int cmd_mock_server(const std::string& listen, const std::string& state) {
  AggregationServer agg(state.empty() ? std::nullopt : std::optional<fs::path>(state));
  httplib::Server srv;
  mount_sync_server_routes(srv, agg);
  return serve(srv, listen, "mock aggregation server");
}

int cmd_netsim(const std::string& listen, const std::string& upstream, const std::string& latency, double loss,
               std::uint64_t seed) {
  NetworkCondition cond;
  std::tie(cond.latency_lo_ms, cond.latency_hi_ms) = NetworkCondition::parse_latency(latency);
  cond.loss = loss;
  cond.seed = seed;
  cond.validate();
  httplib::Server srv;
  mount_netsim_proxy(srv, upstream, cond);
  return serve(srv, listen, "network simulator");
}

// ---- tokens and keys -----------------------------------------------------------

int cmd_keygen(const std::string& out) {
  std::array<std::uint8_t, 32> key{};
  randombytes_buf(key.data(), key.size());
  const auto hex = to_hex(key) + "\n";
  write_file(out, ByteView(reinterpret_cast<const std::uint8_t*>(hex.data()), hex.size()));
  fs::permissions(out, fs::perms::owner_read | fs::perms::owner_write, fs::perm_options::replace);
  return 0;
}

int cmd_token(const std::string& key_file, const std::string& subject, const std::string& role,
              std::optional<DeviceId> device, double ttl_h) {
  AuthToken t;
  t.subject = subject;
  if (role == "parent") t.role = Role::kParent;
  else if (role == "provider") t.role = Role::kProvider;
  else throw Error(ErrorCode::kInvalidArgument, "role must be parent or provider");
  if (t.role == Role::kParent && !device) throw Error(ErrorCode::kInvalidArgument, "parent tokens need --device");
  t.device = device;
  t.expiry_ms = system_clock_ms()() + static_cast<std::int64_t>(ttl_h * 3'600'000.0);
  fmt::print("{}\n", sign_token(t, load_key_file(key_file)));
  return 0;
}

// ---- monitor extraction --------------------------------------------------------------

std::string reading_text(const std::optional<ocr::VitalReading>& r) { return r ? std::to_string(r->value) : "-"; }

int cmd_ocr_extract(const std::string& dir, unsigned workers) {
  const auto entries = ocr::batch_extract(dir, workers);
  int failures = 0;
  fmt::print("image\tHR\tSpO2\tRR\n");
  for (const auto& e : entries) {
    if (!e.extraction) {
      ++failures;
      fmt::print(stderr, "{}: {}\n", e.image_id, e.error);
      continue;
    }
    const auto& v = e.extraction->vitals;
    fmt::print("{}\t{}\t{}\t{}\n", e.image_id, reading_text(v[0]), reading_text(v[1]), reading_text(v[2]));
  }
  return failures == 0 ? 0 : 2;
}

int cmd_ocr_eval(const std::string& dir, const std::string& truth_file, unsigned workers) {
  const auto bytes = read_file(truth_file);
  const auto truth = ocr::parse_truth(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  std::vector<ocr::Extraction> preds;
  for (auto& e : ocr::batch_extract(dir, workers)) {
    if (!e.extraction) throw Error(ErrorCode::kDecode, e.image_id + ": " + e.error);
    preds.push_back(std::move(*e.extraction));
  }
  fmt::print("{}", ocr::evaluate(preds, truth).table());
  return 0;
}

int cmd_ocr_gen(const std::string& out, int count, std::uint64_t seed, bool distractors) {
  fs::create_directories(out);
  std::ofstream truth(fs::path(out) / "truth.txt");
  for (int i = 0; i < count; ++i) {
    ocr::LayoutOptions opts;
    opts.distractors = distractors;
    auto layout = ocr::generate_layout(seed + static_cast<std::uint64_t>(i), opts);
    const auto id = fmt::format("img_{:04d}", i);
    layout.detections.image_id = id;
    std::ofstream(fs::path(out) / (id + ".tsv")) << ocr::format_detections(layout.detections);
    for (const auto& [vital, value] : layout.truth) truth << id << '\t' << ocr::monitor_vital_name(vital) << '\t' << value << '\n';
  }
  fmt::print("wrote {} layouts to {}\n", count, out);
  return 0;
}

// ---- risk model -------------------------------------------------------------------

struct SmtData {
  std::vector<smt::RawWindow> raw;
  std::vector<int> labels;
};

SmtData load_smt_data(const std::string& dir) {
  SmtData d;
  d.raw = smt::read_dataset(dir);
  if (d.raw.empty()) throw Error(ErrorCode::kInvalidArgument, "no windows in " + dir);
  for (const auto& w : d.raw) d.labels.push_back(static_cast<int>(w.label));
  return d;
}

std::vector<smt::Example> to_examples(const SmtData& d, const smt::Normalization& norm,
                                      const std::vector<std::size_t>& idx) {
  std::vector<smt::Example> out;
  for (auto i : idx) out.push_back(smt::to_example(d.raw[i], norm));
  return out;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split(std::size_t n, const std::vector<std::size_t>& held) {
  std::vector<bool> is_held(n, false);
  for (auto i : held) is_held[i] = true;
  std::vector<std::size_t> train;
  for (std::size_t i = 0; i < n; ++i)
    if (!is_held[i]) train.push_back(i);
  return {train, held};
}

struct SmtTrainArgs {
  std::string data, out;
  std::uint64_t seed = 1;
  std::size_t steps = 300;
  double lr = 0.05;
  double gamma = 2.0;
  std::size_t d_model = 16;
  std::size_t heads = 2;
  std::size_t freqs = 4;
};

smt::ModelConfig config_for(const SmtTrainArgs& a, const smt::RawWindow& w) {
  smt::ModelConfig c;
  c.window = w.rows.size();
  c.d_model = a.d_model;
  c.heads = a.heads;
  c.freqs = a.freqs;
  c.semistatic_dim = w.semistatics.size();
  c.validate();
  return c;
}

void print_history(const smt::TrainReport& r) {
  for (const auto& p : r.history)
    fmt::print("step {:5d}  train loss {:.4f} acc {:.3f}  val loss {:.4f} acc {:.3f}\n", p.step, p.train_loss,
               p.train_acc, p.val_loss, p.val_acc);
}

int cmd_smt_train(const SmtTrainArgs& a) {
  const auto d = load_smt_data(a.data);
  const auto folds = smt::stratified_kfold(d.labels, 5, a.seed);
  const auto [train_idx, val_idx] = split(d.raw.size(), folds.front());
  std::vector<smt::RawWindow> train_raw;
  for (auto i : train_idx) train_raw.push_back(d.raw[i]);

  smt::Model model;
  model.config = config_for(a, d.raw.front());
  model.norm = smt::fit_normalization(train_raw);
  const auto train_set = to_examples(d, model.norm, train_idx);
  const auto val_set = to_examples(d, model.norm, val_idx);
  smt::TrainConfig tc;
  tc.steps = a.steps;
  tc.lr = a.lr;
  tc.gamma = a.gamma;
  tc.seed = a.seed;
  const auto report = smt::train(model, train_set, val_set, tc);
  print_history(report);
  fmt::print("class weights: low {:.3f} moderate {:.3f} high {:.3f}\n", report.alpha[0], report.alpha[1],
             report.alpha[2]);
  smt::save_model(model, a.out);
  fmt::print("saved {} ({} parameters)\n", a.out, model.params.size());
  return 0;
}

int cmd_smt_eval(const std::string& model_path, const std::string& data, std::size_t kfold, std::size_t steps,
                 std::uint64_t seed) {
  const auto d = load_smt_data(data);
  const auto model = smt::load_model(model_path);
  if (kfold == 0) {
    std::vector<std::size_t> all(d.raw.size());
    std::iota(all.begin(), all.end(), 0);
    const auto set = to_examples(d, model.norm, all);
    std::array<std::array<int, 3>, 3> confusion{};
    std::vector<std::array<double, 3>> probs;
    for (const auto& ex : set) {
      const auto p = smt::predict(model, ex).as_array();
      probs.push_back(p);
      const auto pred = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
      ++confusion[ex.label][pred];
    }
    fmt::print("accuracy {:.4f} on {} windows, ECE {:.4f}\n", smt::accuracy(model, set), set.size(),
               smt::ece(probs, d.labels));
    fmt::print("confusion (rows = truth): low/moderate/high\n");
    for (int r = 0; r < 3; ++r) fmt::print("  {:>8} {:5d} {:5d} {:5d}\n", smt::risk_class_name(smt::RiskClass(r)),
                                           confusion[r][0], confusion[r][1], confusion[r][2]);
    return 0;
  }
  // cross-validation retrains the loaded architecture from scratch per fold
  const auto folds = smt::stratified_kfold(d.labels, kfold, seed);
  double sum = 0;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const auto [train_idx, val_idx] = split(d.raw.size(), folds[f]);
    std::vector<smt::RawWindow> train_raw;
    for (auto i : train_idx) train_raw.push_back(d.raw[i]);
    smt::Model m;
    m.config = model.config;
    m.norm = smt::fit_normalization(train_raw);
    smt::TrainConfig tc;
    tc.steps = steps;
    tc.seed = seed;
    tc.eval_every = steps;
    const auto train_set = to_examples(d, m.norm, train_idx);
    const auto val_set = to_examples(d, m.norm, val_idx);
    smt::train(m, train_set, val_set, tc);
    const double acc = smt::accuracy(m, val_set);
    sum += acc;
    fmt::print("fold {}: held out {} windows, accuracy {:.4f}\n", f, val_set.size(), acc);
  }
  fmt::print("mean accuracy over {} folds: {:.4f}\n", folds.size(), sum / static_cast<double>(folds.size()));
  return 0;
}

int cmd_smt_calibrate(const std::string& model_path, const std::string& data, const std::string& out) {
  const auto d = load_smt_data(data);
  auto model = smt::load_model(model_path);
  std::vector<std::array<double, 3>> logits;
  for (const auto& w : d.raw) logits.push_back(smt::forward_logits(model, smt::to_example(w, model.norm)));
  const auto c = smt::calibrate(logits, d.labels);
  fmt::print("fitted tau {:.4f}, applied tau {:.4f}\n", c.fitted_tau, c.tau);
  fmt::print("NLL {:.4f} -> {:.4f}\nECE {:.4f} -> {:.4f}\n", c.nll_before, c.nll_after, c.ece_before, c.ece_after);
  model.tau = c.tau;
  smt::save_model(model, out.empty() ? model_path : out);
  return 0;
}

int cmd_smt_gradcheck(std::uint64_t seed) {
  smt::ModelConfig c;
  c.window = 12;
  c.d_model = 8;
  c.heads = 2;
  c.freqs = 3;
  const auto r = smt::gradcheck(c, seed);
  for (const auto& e : r.tensors)
    fmt::print("{:>7}  max rel err {:.3e}  max |grad| {:.3e}\n", e.tensor, e.max_rel_error, e.max_abs_grad);
  fmt::print("checked {} entries, max rel err {:.3e} ({})\n", r.checked, r.max_rel_error,
             r.max_rel_error < 1e-4 ? "ok" : "FAILED");
  return r.max_rel_error < 1e-4 ? 0 : 1;
}

int cmd_smt_make_data(const std::string& out, std::size_t count, std::size_t window, std::uint64_t seed) {
  const auto windows = smt::generate_dataset(count, window, seed);
  smt::write_dataset(out, windows);
  std::array<int, 3> counts{};
  for (const auto& w : windows) ++counts[static_cast<int>(w.label)];
  fmt::print("wrote {} windows to {} (low {}, moderate {}, high {})\n", windows.size(), out, counts[0], counts[1],
             counts[2]);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (sodium_init() < 0) {
    std::fprintf(stderr, "libsodium failed to initialise\n");
    return 1;
  }
  CLI::App app{"neoward: neonatal wearable telemetry toolkit"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error");

  // simulate
  int sim_devices = 1, sim_interval = 1;
  std::string sim_scenario = "stable", sim_sink = "memory", sim_key;
  std::uint64_t sim_seed = 42;
  double sim_duration = 0;
  bool sim_realtime = false;
  auto* sim = app.add_subcommand("simulate", "run simulated wearables");
  sim->add_option("--devices", sim_devices)->check(CLI::Range(1, 10000));
  sim->add_option("--scenario", sim_scenario, "built-in name or scenario file");
  sim->add_option("--seed", sim_seed);
  sim->add_option("--duration", sim_duration, "seconds (default: the scenario's)");
  sim->add_option("--interval", sim_interval)->check(CLI::IsMember({1, 2, 4, 5}));
  sim->add_option("--sink", sim_sink, "memory | file:PATH | [tcp:]HOST:PORT");
  sim->add_option("--device-key-file", sim_key, "master key the per-device keys derive from");
  sim->add_flag("--realtime", sim_realtime, "pace frames at wall-clock speed");

  // power
  int pw_interval = 1;
  double pw_mah = 2000;
  bool pw_adv = false;
  auto* power = app.add_subcommand("power", "current draw and battery lifetime");
  power->add_option("--interval", pw_interval)->check(CLI::IsMember({1, 2, 4, 5}));
  power->add_option("--battery-mah", pw_mah)->check(CLI::PositiveNumber);
  power->add_flag("--advertising", pw_adv);

  // gateway
  GatewayArgs ga;
  auto* gw = app.add_subcommand("gateway", "run the ward gateway");
  gw->add_option("--listen", ga.listen, "HTTP address");
  gw->add_option("--ws-listen", ga.ws_listen, "WebSocket address (default: HTTP port + 1)");
  gw->add_option("--device-listen", ga.device_listen, "TCP address for device frames");
  gw->add_option("--store", ga.store_dir)->required();
  gw->add_option("--store-key-file", ga.store_key_file)->required()->check(CLI::ExistingFile);
  gw->add_option("--token-key-file", ga.token_key_file)->required()->check(CLI::ExistingFile);
  gw->add_option("--device-key-file", ga.device_key_file)->check(CLI::ExistingFile);
  gw->add_option("--sync-url", ga.sync_url, "aggregation server base URL");
  gw->add_option("--sync-interval", ga.sync_interval_s, "seconds between background sync passes (0 = manual)");
  gw->add_option("--retain-days", ga.retain_days, "0 keeps vitals forever")->check(CLI::NonNegativeNumber);
  gw->add_option("--model", ga.model, "risk model file")->check(CLI::ExistingFile);

  // sync
  std::string sy_server, sy_store, sy_key;
  bool sy_once = false;
  double sy_loop = 0;
  auto* sy = app.add_subcommand("sync", "push local changes to the aggregation server");
  sy->add_option("--server", sy_server)->required();
  sy->add_option("--store", sy_store)->required();
  sy->add_option("--store-key-file", sy_key)->required()->check(CLI::ExistingFile);
  auto* once_opt = sy->add_flag("--once", sy_once);
  sy->add_option("--loop", sy_loop, "seconds between passes")->excludes(once_opt);

  // mock-server
  std::string ms_listen = "127.0.0.1:9090", ms_state;
  auto* ms = app.add_subcommand("mock-server", "mock aggregation server");
  ms->add_option("--listen", ms_listen);
  ms->add_option("--state", ms_state, "directory for the durable batch log");

  // netsim
  std::string ns_listen = "127.0.0.1:9191", ns_upstream = "http://127.0.0.1:9090", ns_latency = "50..50";
  double ns_loss = 0;
  std::uint64_t ns_seed = 1;
  auto* ns = app.add_subcommand("netsim", "latency/loss proxy in front of a server");
  ns->add_option("--listen", ns_listen);
  ns->add_option("--upstream", ns_upstream);
  ns->add_option("--latency", ns_latency, "LO..HI milliseconds");
  ns->add_option("--loss", ns_loss)->check(CLI::Range(0.0, 0.3));
  ns->add_option("--seed", ns_seed);

  // keys and tokens
  std::string kg_out;
  auto* kg = app.add_subcommand("keygen", "write a random 32-byte hex key");
  kg->add_option("--out", kg_out)->required();
  std::string tk_key, tk_sub, tk_role = "provider";
  std::optional<DeviceId> tk_device;
  double tk_ttl = 12;
  auto* tk = app.add_subcommand("token", "issue a signed access token");
  tk->add_option("--token-key-file", tk_key)->required()->check(CLI::ExistingFile);
  tk->add_option("--subject", tk_sub)->required();
  tk->add_option("--role", tk_role)->check(CLI::IsMember({"parent", "provider"}));
  tk->add_option("--device", tk_device);
  tk->add_option("--ttl-hours", tk_ttl)->check(CLI::PositiveNumber);

  // monitor extraction
  std::string oc_dir, oc_truth, og_out;
  unsigned oc_workers = 1;
  int og_count = 200;
  std::uint64_t og_seed = 1;
  bool og_distractors = false;
  auto* ox = app.add_subcommand("ocr-extract", "extract vitals from detection files");
  ox->add_option("--detections", oc_dir)->required()->check(CLI::ExistingDirectory);
  ox->add_option("--workers", oc_workers)->check(CLI::Range(1u, 256u));
  auto* oe = app.add_subcommand("ocr-eval", "score extraction against ground truth");
  oe->add_option("--detections", oc_dir)->required()->check(CLI::ExistingDirectory);
  oe->add_option("--truth", oc_truth)->required()->check(CLI::ExistingFile);
  oe->add_option("--workers", oc_workers)->check(CLI::Range(1u, 256u));
  auto* og = app.add_subcommand("ocr-gen", "generate synthetic monitor layouts");
  og->add_option("--out", og_out)->required();
  og->add_option("--count", og_count)->check(CLI::PositiveNumber);
  og->add_option("--seed", og_seed);
  og->add_flag("--distractors", og_distractors);

  // smt
  auto* smt_cmd = app.add_subcommand("smt", "risk model");
  smt_cmd->require_subcommand(1);
  SmtTrainArgs st;
  auto* s_train = smt_cmd->add_subcommand("train", "train from a dataset directory");
  s_train->add_option("--data", st.data)->required()->check(CLI::ExistingDirectory);
  s_train->add_option("--out", st.out)->required();
  s_train->add_option("--seed", st.seed);
  s_train->add_option("--steps", st.steps);
  s_train->add_option("--lr", st.lr);
  s_train->add_option("--gamma", st.gamma);
  s_train->add_option("--d-model", st.d_model);
  s_train->add_option("--heads", st.heads);
  s_train->add_option("--freqs", st.freqs);
  std::string se_model, se_data, se_out;
  std::size_t se_kfold = 0, se_steps = 300;
  std::uint64_t se_seed = 1;
  auto* s_eval = smt_cmd->add_subcommand("eval", "accuracy, confusion and ECE");
  s_eval->add_option("--model", se_model)->required()->check(CLI::ExistingFile);
  s_eval->add_option("--data", se_data)->required()->check(CLI::ExistingDirectory);
  s_eval->add_option("--kfold", se_kfold, "stratified k-fold retraining");
  s_eval->add_option("--steps", se_steps, "training steps per fold");
  s_eval->add_option("--seed", se_seed);
  auto* s_cal = smt_cmd->add_subcommand("calibrate", "fit the softmax temperature");
  s_cal->add_option("--model", se_model)->required()->check(CLI::ExistingFile);
  s_cal->add_option("--data", se_data)->required()->check(CLI::ExistingDirectory);
  s_cal->add_option("--out", se_out, "default: overwrite --model");
  std::uint64_t sg_seed = 7;
  auto* s_grad = smt_cmd->add_subcommand("gradcheck", "finite-difference gradient check");
  s_grad->add_option("--seed", sg_seed);
  std::string sm_out;
  std::size_t sm_count = 300, sm_window = 300;
  std::uint64_t sm_seed = 1;
  auto* s_make = smt_cmd->add_subcommand("make-data", "generate a labelled window dataset");
  s_make->add_option("--out", sm_out)->required();
  s_make->add_option("--count", sm_count);
  s_make->add_option("--window", sm_window);
  s_make->add_option("--seed", sm_seed);

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*sim) return cmd_simulate(sim_devices, sim_scenario, sim_seed, sim_duration, sim_interval, sim_sink, sim_key, sim_realtime);
    if (*power) return cmd_power(pw_interval, pw_mah, pw_adv);
    if (*gw) return cmd_gateway(ga);
    if (*sy) return cmd_sync(sy_server, sy_store, sy_key, sy_once, sy_loop);
    if (*ms) return cmd_mock_server(ms_listen, ms_state);
    if (*ns) return cmd_netsim(ns_listen, ns_upstream, ns_latency, ns_loss, ns_seed);
    if (*kg) return cmd_keygen(kg_out);
    if (*tk) return cmd_token(tk_key, tk_sub, tk_role, tk_device, tk_ttl);
    if (*ox) return cmd_ocr_extract(oc_dir, oc_workers);
    if (*oe) return cmd_ocr_eval(oc_dir, oc_truth, oc_workers);
    if (*og) return cmd_ocr_gen(og_out, og_count, og_seed, og_distractors);
    if (*s_train) return cmd_smt_train(st);
    if (*s_eval) return cmd_smt_eval(se_model, se_data, se_kfold, se_steps, se_seed);
    if (*s_cal) return cmd_smt_calibrate(se_model, se_data, se_out);
    if (*s_grad) return cmd_smt_gradcheck(sg_seed);
    if (*s_make) return cmd_smt_make_data(sm_out, sm_count, sm_window, sm_seed);
  } catch (const Error& e) {
    fmt::print(stderr, "error ({}): {}\n", to_string(e.code()), e.what());
    return 1;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
