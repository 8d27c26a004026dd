#pragma once

// Network surface: frame channels, the gateway's HTTP API and WebSocket
// stream, the device TCP listener, background sync, the mock aggregation
// server's routes and the impairment proxy.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include <json.hpp>

#include "neoward/gateway.hpp"
#include "neoward/sync.hpp"
#include "neoward/token.hpp"
#include "neoward/transport.hpp"

namespace httplib {
class Server;
}

namespace neoward {

// ---- frame channels ------------------------------------------------------------

/// In-process link straight into a gateway.
class GatewaySink : public FrameSink {
 public:
  GatewaySink(Gateway& gateway, FrameReceiver& receiver) : gateway_(gateway), receiver_(receiver) {}
  bool send(ByteView frame) override;

 private:
  Gateway& gateway_;
  FrameReceiver& receiver_;
  std::mutex mu_;
};

/// Appends raw frames to a file; frames are self-delimiting, so the file can
/// be replayed through FrameSplitter.
class FileSink : public FrameSink {
 public:
  explicit FileSink(const std::string& path);
  ~FileSink() override;
  bool send(ByteView frame) override;

 private:
  std::FILE* file_ = nullptr;
};

/// Length-free TCP stream of frames to a gateway's device port. Reconnects
/// lazily after a failed write.
class TcpSink : public FrameSink {
 public:
  TcpSink(std::string host, int port);
  ~TcpSink() override;
  bool send(ByteView frame) override;
  std::uint64_t connects() const noexcept { return connects_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::uint64_t connects_ = 0;
};

// ---- background sync -------------------------------------------------------------

class SyncManager {
 public:
  using Publish = std::function<void(const nlohmann::json&)>;
  SyncManager(Store& store, std::unique_ptr<SyncClient> client, SyncOptions options = {}, Publish publish = {});
  ~SyncManager();

  /// Starts a background pass; false (and no effect) if one is running.
  bool trigger();
  /// Runs a pass on the calling thread unless one is already running.
  std::optional<SyncReport> run_now();
  void wait_idle();
  nlohmann::json status() const;

 private:
  SyncReport run_pass();

  Store& store_;
  std::unique_ptr<SyncClient> client_;
  SyncOptions options_;
  Publish publish_;
  mutable std::mutex mu_;
  std::condition_variable idle_;
  bool running_ = false;
  std::optional<SyncReport> last_;
  std::int64_t last_finished_ms_ = 0;
  std::string last_error_;
  std::thread worker_;
};

// ---- gateway server --------------------------------------------------------------

struct ApiConfig {
  std::string host = "127.0.0.1";
  int http_port = 8080;            // 0 = pick a free port
  std::optional<int> ws_port;      // default http_port + 1 (0 = pick)
  std::optional<int> device_port;  // device frame listener, off when unset
  SigningKey token_key{};
  KeyLookup device_keys;
};

/// Mounts the /api routes on `server`. `sync` may be null (sync endpoints then
/// answer 503).
void mount_gateway_routes(httplib::Server& server, Gateway& gateway, const SigningKey& token_key, SyncManager* sync);

class GatewayServer {
 public:
  GatewayServer(Gateway& gateway, ApiConfig config, SyncManager* sync = nullptr);
  ~GatewayServer();
  GatewayServer(const GatewayServer&) = delete;
  GatewayServer& operator=(const GatewayServer&) = delete;

  /// Binds every listener (throws kIo on failure) and starts serving.
  void start();
  void stop();

  int http_port() const noexcept { return http_port_; }
  int ws_port() const noexcept { return ws_port_; }
  int device_port() const noexcept { return device_port_; }
  std::size_t ws_sessions() const noexcept;

 private:
  struct Net;
  Gateway& gateway_;
  ApiConfig config_;
  SyncManager* sync_;
  std::unique_ptr<httplib::Server> http_;
  std::unique_ptr<Net> net_;
  std::thread http_thread_;
  int http_port_ = 0, ws_port_ = 0, device_port_ = 0;
};

/// Minimal synchronous WebSocket client for the stream endpoint.
class WsClient {
 public:
  WsClient(const std::string& host, int port, const std::string& token, const std::string& target = "/ws/stream");
  ~WsClient();
  /// Next text message, or nullopt on timeout or close.
  std::optional<std::string> read(int timeout_ms);
  void close();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// ---- mock aggregation server and impairment proxy -----------------------------------

void mount_sync_server_routes(httplib::Server& server, AggregationServer& aggregation);

/// Forwards every request to `upstream` (http://host:port). Each leg is
/// delayed by a uniform latency draw and lost with probability `loss`; a lost
/// leg answers 504 after the slowest possible round trip.
void mount_netsim_proxy(httplib::Server& server, const std::string& upstream, const NetworkCondition& condition);

/// Maps an Error to an HTTP status.
int http_status_for(ErrorCode code);

}  // namespace neoward
