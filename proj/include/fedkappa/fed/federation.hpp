#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fedkappa/client/client.hpp"
#include "fedkappa/data/site.hpp"
#include "fedkappa/fed/protocol.hpp"
#include "fedkappa/fed/transport.hpp"

namespace fedkappa::fed {

using LogFn = std::function<void(const std::string&)>;

struct ServerOptions {
  /// Longest wait for any inbound event before the federation is aborted.
  std::chrono::milliseconds idle_timeout = std::chrono::minutes(10);
  /// How long to wait for clients to hang up after SHUTDOWN.
  std::chrono::milliseconds close_grace = std::chrono::seconds(30);
  LogFn log;
};

struct Rejection {
  std::size_t session = 0;
  ErrorCode code = ErrorCode::Malformed;
  std::string message;
};

struct ServerResult {
  nn::ParamVector global;
  std::vector<RoundAudit> audit;
  std::vector<Rejection> rejections;
};

/// Drives server_step from the hub's inbox until the last round completes.
/// Invalid messages are rejected and logged. A bound client that disconnects
/// or sends an undecodable frame before the end aborts the federation:
/// SHUTDOWN goes to everyone else and FederationAborted is thrown with the
/// current round. Sessions that never joined are dropped quietly.
ServerResult serve(const FederationConfig& config, Hub& hub, const ServerOptions& options = {});

/// serve() behind a TCP listener. `on_listening` receives the bound port.
ServerResult serve_tcp(const FederationConfig& config, const std::string& host, std::uint16_t port,
                       const ServerOptions& options = {}, const std::function<void(std::uint16_t)>& on_listening = {});

struct ClientOptions {
  std::optional<std::filesystem::path> checkpoint_dir;
  LogFn log;
};

struct JoinedClient {
  FederationConfig config;
  client::ClientRuntime runtime;
  nn::ParamVector final_global;
};

/// Client side: JOIN, take the configuration from JOIN_ACK, then answer each
/// MODEL_BROADCAST with a DELTA_SUBMIT until SHUTDOWN. Throws
/// FederationAborted if the server aborts or the connection drops early.
/// Without a seed the client uses the master seed from the configuration.
JoinedClient run_client(Connection& conn, const std::string& client_id, data::SiteDataset site,
                        std::optional<std::uint64_t> seed = std::nullopt, const ClientOptions& options = {});

struct SimulationResult {
  ServerResult server;
  std::vector<JoinedClient> clients;  ///< roster order
};

/// All clients on threads over in-process connections; client k trains on
/// sites[k] with the master seed. Checkpoints go to
/// <checkpoint_root>/<client id>/ when a root is given.
SimulationResult simulate(const FederationConfig& config, const std::vector<data::SiteDataset>& sites,
                          const std::optional<std::filesystem::path>& checkpoint_root = std::nullopt,
                          const ServerOptions& options = {});

}  // namespace fedkappa::fed
