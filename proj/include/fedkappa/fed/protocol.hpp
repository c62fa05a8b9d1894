#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fedkappa/client/client.hpp"
#include "fedkappa/common/digest.hpp"
#include "fedkappa/nn/model.hpp"

namespace fedkappa::fed {

/// Everything that determines a federation's result.
struct FederationConfig {
  std::uint64_t rounds = 60;
  std::vector<std::string> roster;
  std::uint64_t seed = 1;
  client::TrainConfig train;

  /// Throws InvalidConfig: rounds >= 1, roster nonempty with unique ids.
  void validate() const;
  /// Key-value text (see KvConfig); keys sorted.
  std::string to_text() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static FederationConfig from_text(std::string_view text);
  /// SHA-256 of to_text().
  Digest digest() const;
  bool operator==(const FederationConfig&) const = default;
};

struct ClientUpdate {
  std::string client_id;
  nn::ParamVector delta;
  std::uint64_t n_k = 0;
  bool operator==(const ClientUpdate&) const = default;
};

inline constexpr std::uint16_t kProtocolVersion = 1;

struct Join {
  std::string client_id;
  std::uint16_t protocol_version = kProtocolVersion;
  bool operator==(const Join&) const = default;
};
struct JoinAck {
  std::string config;  ///< FederationConfig::to_text()
  bool operator==(const JoinAck&) const = default;
};
struct ModelBroadcast {
  std::uint64_t round = 0;
  nn::ParamVector params;
  bool operator==(const ModelBroadcast&) const = default;
};
struct DeltaSubmit {
  std::uint64_t round = 0;
  ClientUpdate update;
  bool operator==(const DeltaSubmit&) const = default;
};
struct RoundComplete {
  std::uint64_t round = 0;
  bool operator==(const RoundComplete&) const = default;
};
struct Shutdown {
  std::string reason;
  bool operator==(const Shutdown&) const = default;
};

using Message = std::variant<Join, JoinAck, ModelBroadcast, DeltaSubmit, RoundComplete, Shutdown>;

enum class MessageType : std::uint16_t {
  Join = 1,
  JoinAck = 2,
  ModelBroadcast = 3,
  DeltaSubmit = 4,
  RoundComplete = 5,
  Shutdown = 6,
};

MessageType message_type(const Message& msg);
std::string_view to_string(MessageType type);

// Frame layout (little-endian):
//   "FKFL" | u16 version | u16 type | u32 payload length | payload
// Payloads:
//   JOIN            str16 client_id | u16 protocol_version
//   JOIN_ACK        str32 config
//   MODEL_BROADCAST u64 round | FKPV params
//   DELTA_SUBMIT    u64 round | str16 client_id | u64 n_k | FKPV delta
//   ROUND_COMPLETE  u64 round
//   SHUTDOWN        str16 reason
// strN is a uN byte length followed by the bytes.
inline constexpr std::size_t kFrameHeaderSize = 12;
inline constexpr std::uint32_t kMaxPayload = 256u << 20;

struct FrameHeader {
  std::uint16_t version = 0;
  std::uint16_t type = 0;
  std::uint32_t length = 0;
};

std::vector<std::uint8_t> encode_message(const Message& msg);
/// Validates magic (BadMagic), version (VersionMismatch) and the length cap
/// (Malformed). `bytes` must hold at least kFrameHeaderSize bytes (Truncated).
FrameHeader decode_header(std::span<const std::uint8_t> bytes);
/// Decodes a payload of the given type. Unknown types and trailing bytes are
/// Malformed; short payloads are Truncated.
Message decode_payload(std::uint16_t type, std::span<const std::uint8_t> payload);
/// Decodes exactly one frame; short input is Truncated, extra bytes Malformed.
Message decode_message(std::span<const std::uint8_t> bytes);

/// Iteration-weighted FederatedAveraging. With x_k = phi_prev + delta_k and
/// w_k = n_k / sum(n), returns fl32(x_1 + sum_k w_k (x_k - x_1)) evaluated in
/// double in the order given. Offsetting by x_1 makes identical client
/// models aggregate to exactly that model.
/// Throws NoUpdates on an empty list, SpecMismatch on a shape mismatch and
/// Malformed on n_k == 0.
nn::ParamVector aggregate(const nn::ParamVector& global_prev, const std::vector<ClientUpdate>& updates);

struct ClientAudit {
  std::string client_id;
  std::uint64_t n_k = 0;
  double delta_norm = 0.0;
};

struct RoundAudit {
  std::uint64_t round = 0;
  std::vector<ClientAudit> clients;
  Digest global_digest{};
};

/// One JSON object per line.
std::string audit_to_jsonl(const std::vector<RoundAudit>& audit);

enum class Phase : std::uint8_t { Joining, Training, Done };

/// Server side of the round loop. Pure data: server_step never mutates its
/// input.
struct ServerState {
  FederationConfig config;
  Phase phase = Phase::Joining;
  std::uint64_t round = 0;  ///< current round; 0 while joining
  nn::ParamVector global;
  std::set<std::string> joined;
  std::set<std::string> pending;
  std::map<std::string, ClientUpdate> received;
  std::vector<RoundAudit> audit;

  static ServerState initial(const FederationConfig& config);
};

struct Outbound {
  std::string to;  ///< client id
  Message msg;
};

struct StepResult {
  ServerState state;
  std::vector<Outbound> out;
};

/// Applies one inbound message. Invalid messages throw and leave the caller's
/// state untouched: UnknownClient (not on the roster), DuplicateClient (second
/// JOIN or second submission in a round), StaleUpdate (wrong round),
/// VersionMismatch (JOIN with another protocol version), SpecMismatch (delta
/// shape), Malformed (a message the server never accepts).
///
/// When the last roster client joins, MODEL_BROADCAST{1} goes to everyone.
/// When the last submission of round t arrives the server aggregates, sends
/// ROUND_COMPLETE{t}, then MODEL_BROADCAST{t + 1}. After round T that final
/// broadcast carries the finished model and is followed by SHUTDOWN.
StepResult server_step(const ServerState& state, const Message& msg);

}  // namespace fedkappa::fed
