#include "neoward/api.hpp"

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <charconv>
#include <chrono>
#include <deque>
#include <set>

#include <httplib.h>
#include <spdlog/spdlog.h>

namespace neoward {

namespace net = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;
using json = nlohmann::json;

namespace {

std::int64_t wall_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

json report_json(const SyncReport& r) {
  return {{"pushed", r.pushed},           {"deduped", r.deduped}, {"retries", r.retries},
          {"batches", r.batches},         {"final_cursor", r.final_cursor},
          {"complete", r.complete},       {"reset", r.reset}};
}

}  // namespace

int http_status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kMalformed:
    case ErrorCode::kDecode:
    case ErrorCode::kOutOfRange:
      return 400;
    case ErrorCode::kBadSignature:
    case ErrorCode::kExpired:
      return 401;
    case ErrorCode::kForbidden:
      return 403;
    case ErrorCode::kNotFound:
      return 404;
    case ErrorCode::kConflict:
      return 409;
    case ErrorCode::kChecksumMismatch:
      return 422;
    default:
      return 500;
  }
}

// ---- channels --------------------------------------------------------------------

bool GatewaySink::send(ByteView frame) {
  std::lock_guard lock(mu_);
  gateway_.on_frame(receiver_, frame);
  return true;
}

FileSink::FileSink(const std::string& path) : file_(std::fopen(path.c_str(), "ab")) {
  if (!file_) throw Error(ErrorCode::kIo, "cannot open " + path);
}

FileSink::~FileSink() {
  if (file_) std::fclose(file_);
}

bool FileSink::send(ByteView frame) {
  return std::fwrite(frame.data(), 1, frame.size(), file_) == frame.size() && std::fflush(file_) == 0;
}

struct TcpSink::Impl {
  std::string host;
  int port;
  net::io_context ioc;
  tcp::socket socket{ioc};
};

TcpSink::TcpSink(std::string host, int port) : impl_(std::make_unique<Impl>()) {
  impl_->host = std::move(host);
  impl_->port = port;
}

TcpSink::~TcpSink() = default;

bool TcpSink::send(ByteView frame) {
  boost::system::error_code ec;
  if (!impl_->socket.is_open()) {
    tcp::resolver resolver(impl_->ioc);
    auto endpoints = resolver.resolve(impl_->host, std::to_string(impl_->port), ec);
    if (ec) return false;
    net::connect(impl_->socket, endpoints, ec);
    if (ec) {
      impl_->socket.close(ec);
      return false;
    }
    impl_->socket.set_option(tcp::no_delay(true), ec);
    ++connects_;
  }
  net::write(impl_->socket, net::buffer(frame.data(), frame.size()), ec);
  if (ec) {
    impl_->socket.close(ec);
    return false;
  }
  return true;
}

// ---- sync manager ----------------------------------------------------------------

SyncManager::SyncManager(Store& store, std::unique_ptr<SyncClient> client, SyncOptions options, Publish publish)
    : store_(store), client_(std::move(client)), options_(std::move(options)), publish_(std::move(publish)) {}

SyncManager::~SyncManager() {
  wait_idle();
  if (worker_.joinable()) worker_.join();
}

SyncReport SyncManager::run_pass() {
  SyncReport report;
  std::string error;
  try {
    report = sync_once(store_, *client_, options_);
  } catch (const std::exception& e) {
    error = e.what();
    spdlog::warn("sync pass failed: {}", error);
  }
  {
    std::lock_guard lock(mu_);
    running_ = false;
    last_finished_ms_ = wall_ms();
    last_error_ = error;
    if (error.empty()) last_ = report;
  }
  idle_.notify_all();
  if (publish_) publish_(json{{"type", "sync"}, {"status", status()}});
  return report;
}

bool SyncManager::trigger() {
  std::lock_guard lock(mu_);
  if (running_) return false;
  running_ = true;
  if (worker_.joinable()) worker_.join();
  worker_ = std::thread([this] { run_pass(); });
  return true;
}

std::optional<SyncReport> SyncManager::run_now() {
  {
    std::lock_guard lock(mu_);
    if (running_) return std::nullopt;
    running_ = true;
  }
  return run_pass();
}

void SyncManager::wait_idle() {
  std::unique_lock lock(mu_);
  idle_.wait(lock, [&] { return !running_; });
}

json SyncManager::status() const {
  const auto cursor = load_sync_cursor(store_, options_.cursor_meta);
  const auto max_cursor = store_.max_cursor();
  json j = {{"enabled", true}, {"cursor", cursor}, {"max_cursor", max_cursor},
            {"pending", cursor <= max_cursor ? store_.changed_since(cursor).size() : store_.snapshot().size()}};
  std::lock_guard lock(mu_);
  j["running"] = running_;
  j["last"] = last_ ? report_json(*last_) : json(nullptr);
  j["last_finished_ms"] = last_finished_ms_ ? json(last_finished_ms_) : json(nullptr);
  j["last_error"] = last_error_.empty() ? json(nullptr) : json(last_error_);
  return j;
}

// ---- HTTP routes -------------------------------------------------------------------

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view kind, const std::string& message) {
  send_json(res, status, json{{"error", kind}, {"message", message}});
}

std::optional<std::string> bearer(const httplib::Request& req) {
  auto h = req.get_header_value("Authorization");
  constexpr std::string_view kPrefix = "Bearer ";
  if (h.size() > kPrefix.size() && h.compare(0, kPrefix.size(), kPrefix) == 0) return h.substr(kPrefix.size());
  if (req.has_param("token")) return req.get_param_value("token");
  return std::nullopt;
}

std::uint64_t parse_u64(const std::string& s, std::string_view what) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    throw Error(ErrorCode::kInvalidArgument, std::string("bad ") + std::string(what) + ": " + s);
  return v;
}

std::int64_t parse_i64(const std::string& s, std::string_view what) {
  std::int64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    throw Error(ErrorCode::kInvalidArgument, std::string("bad ") + std::string(what) + ": " + s);
  return v;
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  auto j = json::parse(req.body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw Error(ErrorCode::kMalformed, "body must be a JSON object");
  return j;
}

using Handler = std::function<void(const httplib::Request&, httplib::Response&, const AuthToken&)>;

// Wraps a handler with token verification and error mapping. `perm` and the
// device extractor decide authorization before the handler runs; without a
// permission the handler filters by token itself.
httplib::Server::Handler guarded(Gateway& gw, const SigningKey& key, std::optional<Permission> perm,
                                 std::function<std::optional<DeviceId>(const httplib::Request&)> device_of,
                                 Handler h) {
  return [&gw, key, perm, device_of = std::move(device_of), h = std::move(h)](const httplib::Request& req,
                                                                             httplib::Response& res) {
    try {
      auto raw = bearer(req);
      if (!raw) return send_error(res, 401, "unauthorized", "missing bearer token");
      AuthToken token;
      try {
        token = verify_token(*raw, key, gw.now_ms());
      } catch (const Error& e) {
        return send_error(res, 401, to_string(e.code()), e.what());
      }
      const auto device = device_of ? device_of(req) : std::nullopt;
      if (perm && !permits(token, *perm, device)) return send_error(res, 403, "forbidden", "role does not permit this call");
      h(req, res, token);
    } catch (const Error& e) {
      send_error(res, http_status_for(e.code()), to_string(e.code()), e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal", e.what());
    }
  };
}

std::optional<DeviceId> path_device(const httplib::Request& req) {
  return parse_u64(req.path_params.at("id"), "device id");
}

}  // namespace

void mount_gateway_routes(httplib::Server& server, Gateway& gw, const SigningKey& key, SyncManager* sync) {
  server.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, json{{"ok", true}});
  });

  server.Get("/api/devices", guarded(gw, key, std::nullopt, {}, [&gw](const httplib::Request&, httplib::Response& res, const AuthToken& tok) {
    json out = json::array();
    const auto sessions = gw.sessions();
    for (DeviceId dev : gw.store().devices()) {
      if (!permits(tok, Permission::kReadVitals, dev)) continue;
      json d = {{"device_id", dev}};
      const auto now = gw.now_ms();
      auto recent = gw.store().query_vitals(dev, std::numeric_limits<std::int64_t>::min() / 2, now + 86'400'000);
      d["last_sample"] = recent.empty() ? json(nullptr) : to_json(recent.back());
      d["active_session"] = nullptr;
      for (const auto& s : sessions)
        if (s.device_id == dev && s.active()) d["active_session"] = to_json(s);
      out.push_back(std::move(d));
    }
    send_json(res, 200, json{{"devices", out}});
  }));

  server.Get("/api/devices/:id/vitals", guarded(gw, key, Permission::kReadVitals, path_device, [&gw](const httplib::Request& req, httplib::Response& res, const AuthToken&) {
    const auto dev = *path_device(req);
    const auto to = req.has_param("to") ? parse_i64(req.get_param_value("to"), "to") : gw.now_ms();
    const auto from = req.has_param("from") ? parse_i64(req.get_param_value("from"), "from") : to - 300'000;
    json samples = json::array();
    for (const auto& s : gw.store().query_vitals(dev, from, to)) samples.push_back(to_json(s));
    send_json(res, 200, json{{"device_id", dev}, {"from", from}, {"to", to}, {"samples", samples}});
  }));

  server.Get("/api/devices/:id/annotations", guarded(gw, key, Permission::kReadSessions, path_device, [&gw](const httplib::Request& req, httplib::Response& res, const AuthToken&) {
    json out = json::array();
    for (const auto& a : gw.annotations(*path_device(req))) out.push_back(to_json(a));
    send_json(res, 200, json{{"annotations", out}});
  }));

  server.Post("/api/devices/:id/annotations", guarded(gw, key, Permission::kWriteAnnotations, path_device, [&gw](const httplib::Request& req, httplib::Response& res, const AuthToken& tok) {
    auto body = parse_body(req);
    if (!body.contains("text") || !body["text"].is_string()) throw Error(ErrorCode::kInvalidArgument, "text is required");
    std::optional<std::uint64_t> edit;
    if (body.contains("annotation_id")) edit = body["annotation_id"].get<std::uint64_t>();
    auto a = gw.annotate(*path_device(req), tok.subject, body["text"].get<std::string>(), edit);
    send_json(res, edit ? 200 : 201, to_json(a));
  }));

  server.Get("/api/sessions", guarded(gw, key, Permission::kReadSessions,
                                      [](const httplib::Request& req) -> std::optional<DeviceId> {
                                        if (!req.has_param("device")) return std::nullopt;
                                        return parse_u64(req.get_param_value("device"), "device");
                                      },
                                      [&gw](const httplib::Request& req, httplib::Response& res, const AuthToken&) {
    std::optional<DeviceId> dev;
    if (req.has_param("device")) dev = parse_u64(req.get_param_value("device"), "device");
    json out = json::array();
    for (const auto& s : gw.sessions(dev)) out.push_back(to_json(s));
    send_json(res, 200, json{{"sessions", out}});
  }));

  server.Post("/api/sessions/start", guarded(gw, key, Permission::kManageSessions, {}, [&gw](const httplib::Request& req, httplib::Response& res, const AuthToken& tok) {
    auto body = parse_body(req);
    if (!body.contains("device_id") || !body["device_id"].is_number_unsigned())
      throw Error(ErrorCode::kInvalidArgument, "device_id is required");
    send_json(res, 201, to_json(gw.session_start(body["device_id"].get<DeviceId>(), tok.subject)));
  }));

  server.Post("/api/sessions/:id/stop", guarded(gw, key, Permission::kManageSessions, {}, [&gw](const httplib::Request& req, httplib::Response& res, const AuthToken&) {
    send_json(res, 200, to_json(gw.session_stop(parse_u64(req.path_params.at("id"), "session id"))));
  }));

  server.Get("/api/alerts", guarded(gw, key, Permission::kReadAlerts, {}, [&gw](const httplib::Request& req, httplib::Response& res, const AuthToken&) {
    std::optional<AlertState> state;
    if (req.has_param("state")) {
      const auto s = req.get_param_value("state");
      if (s == "raised") state = AlertState::kRaised;
      else if (s == "acknowledged") state = AlertState::kAcknowledged;
      else if (s == "suppressed") state = AlertState::kSuppressed;
      else throw Error(ErrorCode::kInvalidArgument, "unknown alert state " + s);
    }
    json out = json::array();
    for (const auto& a : gw.alerts().alerts(state)) out.push_back(to_json(a));
    send_json(res, 200, json{{"alerts", out}});
  }));

  server.Post("/api/alerts/:id/ack", guarded(gw, key, Permission::kAckAlerts, {}, [&gw](const httplib::Request& req, httplib::Response& res, const AuthToken& tok) {
    auto a = gw.alerts().acknowledge(parse_u64(req.path_params.at("id"), "alert id"), tok.subject, gw.now_ms());
    gw.publish(json{{"type", "alert"}, {"alert", to_json(a)}});
    send_json(res, 200, to_json(a));
  }));

  server.Post("/api/alerts/:id/suppress", guarded(gw, key, Permission::kAckAlerts, {}, [&gw](const httplib::Request& req, httplib::Response& res, const AuthToken& tok) {
    auto a = gw.alerts().suppress(parse_u64(req.path_params.at("id"), "alert id"), tok.subject);
    gw.publish(json{{"type", "alert"}, {"alert", to_json(a)}});
    send_json(res, 200, to_json(a));
  }));

  server.Get("/api/sync/status", guarded(gw, key, Permission::kSync, {}, [sync](const httplib::Request&, httplib::Response& res, const AuthToken&) {
    if (!sync) return send_json(res, 200, json{{"enabled", false}});
    send_json(res, 200, sync->status());
  }));

  server.Post("/api/sync/trigger", guarded(gw, key, Permission::kSync, {}, [sync](const httplib::Request&, httplib::Response& res, const AuthToken&) {
    if (!sync) return send_error(res, 503, "unavailable", "no sync target configured");
    const bool started = sync->trigger();
    send_json(res, started ? 202 : 200, json{{"started", started}, {"already_running", !started}});
  }));

  server.Get("/api/metrics", guarded(gw, key, Permission::kListDevices, {}, [&gw](const httplib::Request&, httplib::Response& res, const AuthToken&) {
    const auto m = gw.metrics();
    send_json(res, 200, json{{"frames", m.frames},
                             {"rejects", m.rejects},
                             {"replays", m.replays},
                             {"samples_enqueued", m.samples_enqueued},
                             {"samples_stored", m.samples_stored},
                             {"ring_drops", m.ring_drops},
                             {"static_frames", m.static_frames},
                             {"p50_latency_ms", m.p50_latency_ms},
                             {"p99_latency_ms", m.p99_latency_ms},
                             {"max_latency_ms", m.max_latency_ms}});
  }));
}

// ---- WebSocket stream and device listener ------------------------------------------

namespace {

constexpr std::size_t kMaxQueuedMessages = 4096;

// Which stream messages a token may see.
bool visible(const AuthToken& tok, const json& msg) {
  const auto type = msg.value("type", "");
  auto device_in = [&](const char* field) -> std::optional<DeviceId> {
    if (msg.contains(field) && msg[field].contains("device_id")) return msg[field]["device_id"].get<DeviceId>();
    return std::nullopt;
  };
  if (type == "vitals") return permits(tok, Permission::kReadVitals, device_in("sample"));
  if (type == "session") return permits(tok, Permission::kReadSessions, device_in("session"));
  if (type == "risk") return permits(tok, Permission::kReadVitals, msg.value("device_id", DeviceId{0}));
  if (type == "alert") return permits(tok, Permission::kReadAlerts, device_in("alert"));
  return permits(tok, Permission::kSync);
}

class WsSession : public std::enable_shared_from_this<WsSession> {
 public:
  WsSession(tcp::socket socket, Gateway& gw, SigningKey key, std::atomic<std::size_t>& live)
      : ws_(std::move(socket)), gw_(gw), key_(key), live_(live) {
    ++live_;
  }
  ~WsSession() {
    if (sub_) gw_.unsubscribe(sub_);
    --live_;
  }

  void run() {
    http::async_read(ws_.next_layer(), buffer_, req_,
                     [self = shared_from_this()](beast::error_code ec, std::size_t) { self->on_request(ec); });
  }

 private:
  void reject(http::status status, const std::string& message) {
    auto res = std::make_shared<http::response<http::string_body>>(status, req_.version());
    res->set(http::field::content_type, "application/json");
    res->body() = json{{"error", message}}.dump();
    res->prepare_payload();
    res->keep_alive(false);
    http::async_write(ws_.next_layer(), *res, [self = shared_from_this(), res](beast::error_code, std::size_t) {
      beast::error_code ignored;
      self->ws_.next_layer().socket().shutdown(tcp::socket::shutdown_both, ignored);
    });
  }

  void on_request(beast::error_code ec) {
    if (ec) return;
    const std::string target(req_.target());
    const auto q = target.find('?');
    if (target.substr(0, q) != "/ws/stream") return reject(http::status::not_found, "unknown path");
    if (!websocket::is_upgrade(req_)) return reject(http::status::bad_request, "websocket upgrade required");
    std::string raw;
    const auto auth = std::string(req_[http::field::authorization]);
    if (auth.rfind("Bearer ", 0) == 0) raw = auth.substr(7);
    if (raw.empty() && q != std::string::npos) {
      httplib::Params params;
      httplib::detail::parse_query_text(target.substr(q + 1), params);
      if (auto it = params.find("token"); it != params.end()) raw = it->second;
    }
    try {
      token_ = verify_token(raw, key_, gw_.now_ms());
    } catch (const Error& e) {
      return reject(http::status::unauthorized, std::string(to_string(e.code())));
    }
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(req_, [self = shared_from_this()](beast::error_code ec2) { self->on_accept(ec2); });
  }

  void on_accept(beast::error_code ec) {
    if (ec) return;
    std::weak_ptr<WsSession> weak = shared_from_this();
    const AuthToken tok = *token_;
    auto executor = ws_.get_executor();
    sub_ = gw_.subscribe([weak, tok, executor](const json& msg) {
      if (!visible(tok, msg)) return;
      auto self = weak.lock();
      if (!self) return;
      net::post(executor, [self, text = msg.dump()]() mutable { self->enqueue(std::move(text)); });
    });
    enqueue(json{{"type", "hello"}, {"subject", tok.subject}, {"role", role_name(tok.role)}}.dump());
    do_read();
  }

  void do_read() {
    ws_.async_read(inbox_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) {
        if (self->sub_) self->gw_.unsubscribe(self->sub_);
        self->sub_ = 0;
        return;
      }
      self->inbox_.consume(self->inbox_.size());
      self->do_read();
    });
  }

  void enqueue(std::string text) {
    if (queue_.size() >= kMaxQueuedMessages) queue_.pop_front();  // slow consumer: drop oldest
    queue_.push_back(std::move(text));
    if (!writing_) do_write();
  }

  void do_write() {
    if (queue_.empty()) {
      writing_ = false;
      return;
    }
    writing_ = true;
    ws_.text(true);
    ws_.async_write(net::buffer(queue_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return;
      self->queue_.pop_front();
      self->do_write();
    });
  }

  websocket::stream<beast::tcp_stream> ws_;
  Gateway& gw_;
  SigningKey key_;
  std::atomic<std::size_t>& live_;
  beast::flat_buffer buffer_;
  beast::flat_buffer inbox_;
  http::request<http::string_body> req_;
  std::optional<AuthToken> token_;
  std::deque<std::string> queue_;
  bool writing_ = false;
  int sub_ = 0;
};

class DeviceConnection : public std::enable_shared_from_this<DeviceConnection> {
 public:
  DeviceConnection(tcp::socket socket, Gateway& gw, FrameReceiver& rx, std::mutex& rx_mu)
      : socket_(std::move(socket)), gw_(gw), rx_(rx), rx_mu_(rx_mu) {}

  void run() { do_read(); }

 private:
  void do_read() {
    socket_.async_read_some(net::buffer(chunk_), [self = shared_from_this()](boost::system::error_code ec, std::size_t n) {
      if (ec) return;
      self->splitter_.feed(ByteView(self->chunk_.data(), n));
      try {
        while (auto frame = self->splitter_.next()) {
          std::lock_guard lock(self->rx_mu_);
          self->gw_.on_frame(self->rx_, *frame);
        }
      } catch (const Error& e) {
        spdlog::warn("device connection dropped: {}", e.what());
        return;
      }
      self->do_read();
    });
  }

  tcp::socket socket_;
  Gateway& gw_;
  FrameReceiver& rx_;
  std::mutex& rx_mu_;
  FrameSplitter splitter_;
  std::array<std::uint8_t, 16384> chunk_{};
};

tcp::acceptor open_acceptor(net::io_context& ioc, const std::string& host, int port) {
  tcp::endpoint ep(net::ip::make_address(host), static_cast<unsigned short>(port));
  tcp::acceptor acc(ioc);
  boost::system::error_code ec;
  acc.open(ep.protocol(), ec);
  if (!ec) acc.set_option(net::socket_base::reuse_address(true), ec);
  if (!ec) acc.bind(ep, ec);
  if (!ec) acc.listen(net::socket_base::max_listen_connections, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot listen on " + host + ":" + std::to_string(port) + ": " + ec.message());
  return acc;
}

}  // namespace

struct GatewayServer::Net {
  net::io_context ioc;
  std::optional<tcp::acceptor> ws_acceptor;
  std::optional<tcp::acceptor> device_acceptor;
  std::thread thread;
  std::atomic<std::size_t> live{0};
  std::unique_ptr<FrameReceiver> rx;
  std::mutex rx_mu;

  void accept_ws(Gateway& gw, const SigningKey& key) {
    ws_acceptor->async_accept([this, &gw, key](boost::system::error_code ec, tcp::socket socket) {
      if (ec) return;
      std::make_shared<WsSession>(std::move(socket), gw, key, live)->run();
      accept_ws(gw, key);
    });
  }

  void accept_devices(Gateway& gw) {
    device_acceptor->async_accept([this, &gw](boost::system::error_code ec, tcp::socket socket) {
      if (ec) return;
      std::make_shared<DeviceConnection>(std::move(socket), gw, *rx, rx_mu)->run();
      accept_devices(gw);
    });
  }
};

GatewayServer::GatewayServer(Gateway& gateway, ApiConfig config, SyncManager* sync)
    : gateway_(gateway), config_(std::move(config)), sync_(sync) {}

GatewayServer::~GatewayServer() { stop(); }

std::size_t GatewayServer::ws_sessions() const noexcept { return net_ ? net_->live.load() : 0; }

void GatewayServer::start() {
  if (http_) return;
  http_ = std::make_unique<httplib::Server>();
  mount_gateway_routes(*http_, gateway_, config_.token_key, sync_);
  if (config_.http_port == 0) {
    http_port_ = http_->bind_to_any_port(config_.host);
  } else {
    http_port_ = http_->bind_to_port(config_.host, config_.http_port) ? config_.http_port : -1;
  }
  if (http_port_ < 0) {
    http_.reset();
    throw Error(ErrorCode::kIo, "cannot bind HTTP port " + std::to_string(config_.http_port));
  }
  http_thread_ = std::thread([this] { http_->listen_after_bind(); });

  net_ = std::make_unique<Net>();
  const int ws_req = config_.ws_port.value_or(config_.http_port == 0 ? 0 : config_.http_port + 1);
  net_->ws_acceptor.emplace(open_acceptor(net_->ioc, config_.host, ws_req));
  ws_port_ = net_->ws_acceptor->local_endpoint().port();
  net_->accept_ws(gateway_, config_.token_key);
  if (config_.device_port) {
    if (!config_.device_keys) throw Error(ErrorCode::kInvalidArgument, "device listener needs a key lookup");
    net_->rx = std::make_unique<FrameReceiver>(config_.device_keys);
    net_->device_acceptor.emplace(open_acceptor(net_->ioc, config_.host, *config_.device_port));
    device_port_ = net_->device_acceptor->local_endpoint().port();
    net_->accept_devices(gateway_);
  }
  net_->thread = std::thread([n = net_.get()] { n->ioc.run(); });
  http_->wait_until_ready();
}

void GatewayServer::stop() {
  if (http_) {
    http_->stop();
    if (http_thread_.joinable()) http_thread_.join();
    http_.reset();
  }
  if (net_) {
    net_->ioc.stop();
    if (net_->thread.joinable()) net_->thread.join();
    net_.reset();
  }
}

// ---- WebSocket client ------------------------------------------------------------

struct WsClient::Impl {
  net::io_context ioc;
  websocket::stream<tcp::socket> ws{ioc};
  beast::flat_buffer buffer;
  bool open = false;
  bool pending = false;  // an async read is outstanding across read() calls
  std::optional<std::string> ready;
};

WsClient::WsClient(const std::string& host, int port, const std::string& token, const std::string& target)
    : impl_(std::make_unique<Impl>()) {
  tcp::resolver resolver(impl_->ioc);
  auto endpoints = resolver.resolve(host, std::to_string(port));
  net::connect(impl_->ws.next_layer(), endpoints);
  impl_->ws.set_option(websocket::stream_base::decorator([token](websocket::request_type& req) {
    req.set(http::field::authorization, "Bearer " + token);
  }));
  beast::error_code ec;
  impl_->ws.handshake(host + ":" + std::to_string(port), target, ec);
  if (ec) throw Error(ErrorCode::kForbidden, "websocket handshake rejected: " + ec.message());
  impl_->open = true;
}

WsClient::~WsClient() { close(); }

std::optional<std::string> WsClient::read(int timeout_ms) {
  auto& im = *impl_;
  if (!im.open) return std::nullopt;
  if (!im.pending) {
    im.pending = true;
    im.buffer.clear();
    im.ws.async_read(im.buffer, [&im](beast::error_code ec, std::size_t) {
      im.pending = false;
      if (ec) im.open = false;
      else im.ready = beast::buffers_to_string(im.buffer.data());
    });
  }
  im.ioc.restart();
  im.ioc.run_for(std::chrono::milliseconds(timeout_ms));
  if (!im.ready) return std::nullopt;
  auto out = std::move(*im.ready);
  im.ready.reset();
  return out;
}

void WsClient::close() {
  if (!impl_ || !impl_->open) return;
  auto& im = *impl_;
  beast::error_code ec;
  if (im.pending) {
    im.ws.next_layer().cancel(ec);
    im.ioc.restart();
    im.ioc.run();
    im.ws.next_layer().close(ec);
  } else {
    im.ws.close(websocket::close_code::normal, ec);
  }
  im.open = false;
}

// ---- mock server routes and proxy ----------------------------------------------------

void mount_sync_server_routes(httplib::Server& server, AggregationServer& agg) {
  server.set_payload_max_length(64u << 20);
  server.Post("/api/sync/push", [&agg](const httplib::Request& req, httplib::Response& res) {
    const auto r = agg.push(ByteView(reinterpret_cast<const std::uint8_t*>(req.body.data()), req.body.size()));
    json j = {{"cursor", r.cursor}, {"applied", r.applied}, {"deduped", r.deduped}};
    if (!r.error.empty()) j["error"] = r.error;
    send_json(res, r.status, j);
  });
  server.Get("/api/sync/cursor", [&agg](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, json{{"cursor", agg.cursor()}});
  });
  server.Get("/api/sync/checksum", [&agg](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, json{{"checksum", agg.checksum()}, {"entities", agg.state().size()}});
  });
}

void mount_netsim_proxy(httplib::Server& server, const std::string& upstream, const NetworkCondition& condition) {
  condition.validate();
  struct Shared {
    std::mutex mu;
    SeededRng rng;
    explicit Shared(std::uint64_t seed) : rng(seed) {}
  };
  auto shared = std::make_shared<Shared>(condition.seed);
  auto handler = [shared, upstream, condition](const httplib::Request& req, httplib::Response& res) {
    auto leg = [&]() -> std::optional<double> {
      std::lock_guard lock(shared->mu);
      if (shared->rng.uniform() < condition.loss) return std::nullopt;
      return shared->rng.uniform(condition.latency_lo_ms, condition.latency_hi_ms);
    };
    auto sleep_ms = [](double ms) { std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms)); };
    auto lost = [&] {
      sleep_ms(2 * condition.latency_hi_ms);
      send_error(res, 504, "lost", "dropped by network simulator");
    };
    auto there = leg();
    if (!there) return lost();
    sleep_ms(*there);
    httplib::Client cli(upstream);
    cli.set_read_timeout(30, 0);
    httplib::Headers headers;
    const auto ctype = req.get_header_value("Content-Type");
    httplib::Result r = req.method == "POST"
                            ? cli.Post(req.target, headers, req.body, ctype.empty() ? "application/octet-stream" : ctype)
                            : cli.Get(req.target, headers);
    auto back = leg();
    if (!back) return lost();
    sleep_ms(*back);
    if (!r) return send_error(res, 502, "upstream", httplib::to_string(r.error()));
    res.status = r->status;
    res.set_content(r->body, r->get_header_value("Content-Type"));
  };
  server.set_payload_max_length(64u << 20);
  server.Get(".*", handler);
  server.Post(".*", handler);
}

}  // namespace neoward
