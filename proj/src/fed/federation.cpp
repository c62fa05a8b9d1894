#include "fedkappa/fed/federation.hpp"

#include <atomic>
#include <map>
#include <thread>

namespace fedkappa::fed {

namespace {

void say(const LogFn& log, const std::string& line) {
  if (log) log(line);
}

}  // namespace

ServerResult serve(const FederationConfig& config, Hub& hub, const ServerOptions& options) {
  auto state = ServerState::initial(config);
  ServerResult result;
  std::map<std::size_t, std::string> bound;
  std::map<std::string, std::size_t> session_of;

  auto reject = [&](std::size_t session, ErrorCode code, const std::string& why) {
    result.rejections.push_back({session, code, why});
    say(options.log, "rejected from " + hub.describe(session) + ": " + why);
  };
  auto deliver = [&](const std::vector<Outbound>& out) {
    for (const auto& o : out) hub.send(session_of.at(o.to), o.msg);
  };
  auto abort = [&](const std::string& why) {
    say(options.log, "aborting in round " + std::to_string(state.round) + ": " + why);
    for (const auto& [session, id] : bound) hub.send(session, Shutdown{"aborted: " + why});
    hub.shutdown(std::chrono::seconds(1));
    throw FederationAborted(static_cast<std::uint32_t>(state.round), why);
  };

  while (state.phase != Phase::Done) {
    auto ev = hub.next(options.idle_timeout);
    if (!ev) abort("no client activity within the idle timeout");
    const auto session = ev->session;
    const auto it = bound.find(session);

    if (ev->kind != Hub::Event::Kind::Message) {
      if (ev->error) reject(session, ev->error->code(), ev->error->what());
      if (it != bound.end()) {
        abort("client '" + it->second + "' " + (ev->error ? "sent an invalid frame" : "disconnected"));
      }
      continue;
    }

    const Message& msg = *ev->msg;
    try {
      if (const auto* join = std::get_if<Join>(&msg)) {
        if (it != bound.end()) {
          throw Error(ErrorCode::DuplicateClient, "session already joined as '" + it->second + "'");
        }
        auto step = server_step(state, msg);
        bound[session] = join->client_id;
        session_of[join->client_id] = session;
        say(options.log, "joined: " + join->client_id + " (" + hub.describe(session) + ")");
        state = std::move(step.state);
        deliver(step.out);
        continue;
      }
      if (it == bound.end()) throw Error(ErrorCode::UnknownClient, "message before JOIN");
      if (const auto* sub = std::get_if<DeltaSubmit>(&msg); sub && sub->update.client_id != it->second) {
        throw Error(ErrorCode::UnknownClient,
                    "session of '" + it->second + "' submitted as '" + sub->update.client_id + "'");
      }
      const auto before = state.round;
      auto step = server_step(state, msg);
      state = std::move(step.state);
      if (state.audit.size() > result.audit.size()) {
        say(options.log, "round " + std::to_string(before) + " aggregated, global " +
                             to_hex(state.audit.back().global_digest).substr(0, 16));
      }
      result.audit = state.audit;
      deliver(step.out);
    } catch (const FederationAborted&) {
      throw;
    } catch (const Error& e) {
      reject(session, e.code(), e.what());
    }
  }
  result.global = state.global;
  result.audit = state.audit;
  hub.shutdown(options.close_grace);
  return result;
}

ServerResult serve_tcp(const FederationConfig& config, const std::string& host, std::uint16_t port,
                       const ServerOptions& options, const std::function<void(std::uint16_t)>& on_listening) {
  config.validate();
  TcpListener listener(host, port);
  say(options.log, "listening on " + host + ":" + std::to_string(listener.port()));
  if (on_listening) on_listening(listener.port());
  Hub hub;
  std::atomic<bool> stop{false};
  std::thread acceptor([&] {
    while (!stop.load()) {
      auto conn = listener.accept(std::chrono::milliseconds(100));
      if (!conn) continue;
      try {
        hub.add(std::move(conn));
      } catch (const Error&) {
        return;
      }
    }
  });
  auto finish = [&] {
    stop.store(true);
    acceptor.join();
    listener.close();
  };
  try {
    auto result = serve(config, hub, options);
    finish();
    return result;
  } catch (...) {
    finish();
    throw;
  }
}

JoinedClient run_client(Connection& conn, const std::string& client_id, data::SiteDataset site,
                        std::optional<std::uint64_t> seed, const ClientOptions& options) {
  conn.send(Join{client_id, kProtocolVersion});
  auto first = conn.receive();
  if (!first) throw FederationAborted(0, "server closed the connection before JOIN_ACK");
  if (const auto* s = std::get_if<Shutdown>(&*first)) throw FederationAborted(0, "server refused: " + s->reason);
  const auto* ack = std::get_if<JoinAck>(&*first);
  if (!ack) throw Error(ErrorCode::Malformed, "expected JOIN_ACK");
  auto config = FederationConfig::from_text(ack->config);
  config.validate();
  say(options.log, client_id + ": joined, " + std::to_string(config.rounds) + " rounds, config " +
                       to_hex(config.digest()).substr(0, 16));

  client::ClientRuntime runtime(client_id, config.train, std::move(site), seed.value_or(config.seed),
                                options.checkpoint_dir);
  std::uint64_t last_round = 0;
  std::optional<nn::ParamVector> final_global;
  for (;;) {
    auto msg = conn.receive();
    if (!msg) {
      throw FederationAborted(static_cast<std::uint32_t>(last_round), "server closed the connection");
    }
    if (auto* b = std::get_if<ModelBroadcast>(&*msg)) {
      last_round = b->round;
      auto local = runtime.on_broadcast(b->round, b->params, config.rounds);
      if (local) {
        say(options.log, client_id + ": round " + std::to_string(b->round) + " n_k=" + std::to_string(local->n_k) +
                             " loss=" + std::to_string(local->epoch_loss));
        conn.send(DeltaSubmit{b->round, {client_id, std::move(local->delta), local->n_k}});
      } else {
        final_global = std::move(b->params);
      }
    } else if (std::holds_alternative<RoundComplete>(*msg)) {
      continue;
    } else if (const auto* s = std::get_if<Shutdown>(&*msg)) {
      if (s->reason != "complete" || !final_global) {
        throw FederationAborted(static_cast<std::uint32_t>(last_round), "server shut down: " + s->reason);
      }
      break;
    } else {
      throw Error(ErrorCode::Malformed, "unexpected " + std::string(to_string(message_type(*msg))) + " from server");
    }
  }
  conn.close();
  return {std::move(config), std::move(runtime), std::move(*final_global)};
}

SimulationResult simulate(const FederationConfig& config, const std::vector<data::SiteDataset>& sites,
                          const std::optional<std::filesystem::path>& checkpoint_root, const ServerOptions& options) {
  config.validate();
  if (sites.size() != config.roster.size()) {
    throw Error(ErrorCode::InvalidConfig, std::to_string(sites.size()) + " datasets for a roster of " +
                                              std::to_string(config.roster.size()));
  }
  const auto k = sites.size();
  Hub hub;
  std::vector<std::unique_ptr<Connection>> client_ends;
  for (std::size_t i = 0; i < k; ++i) {
    auto [server_end, client_end] = make_inproc_pair();
    hub.add(std::move(server_end));
    client_ends.push_back(std::move(client_end));
  }
  std::vector<std::optional<JoinedClient>> joined(k);
  std::vector<std::exception_ptr> errors(k);
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < k; ++i) {
    threads.emplace_back([&, i] {
      try {
        ClientOptions opts;
        opts.log = options.log;
        if (checkpoint_root) opts.checkpoint_dir = *checkpoint_root / config.roster[i];
        joined[i].emplace(run_client(*client_ends[i], config.roster[i], sites[i], config.seed, opts));
      } catch (...) {
        errors[i] = std::current_exception();
        client_ends[i]->close();
      }
    });
  }
  SimulationResult result;
  std::exception_ptr server_error;
  try {
    result.server = serve(config, hub, options);
  } catch (...) {
    server_error = std::current_exception();
    for (auto& c : client_ends) c->close();
  }
  for (auto& t : threads) t.join();
  // A client failure is the root cause of the abort it triggers on the server.
  for (auto& e : errors) {
    if (!e) continue;
    try {
      std::rethrow_exception(e);
    } catch (const FederationAborted&) {
    } catch (...) {
      throw;
    }
  }
  if (server_error) std::rethrow_exception(server_error);
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (auto& j : joined) result.clients.push_back(std::move(*j));
  return result;
}

}  // namespace fedkappa::fed
