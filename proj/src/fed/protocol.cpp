#include "fedkappa/fed/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fedkappa/common/bytes.hpp"
#include "fedkappa/common/error.hpp"
#include "fedkappa/common/kv_config.hpp"
#include "fedkappa/nn/param_io.hpp"
#include "json.hpp"

namespace fedkappa::fed {

using nn::ParamVector;

void FederationConfig::validate() const {
  if (rounds < 1) throw Error(ErrorCode::InvalidConfig, "rounds must be >= 1");
  if (roster.empty()) throw Error(ErrorCode::InvalidConfig, "roster is empty");
  std::set<std::string> seen;
  for (const auto& id : roster) {
    if (id.empty() || id.find_first_of(", \t\n=#") != std::string::npos) {
      throw Error(ErrorCode::InvalidConfig, "bad client id '" + id + "'");
    }
    if (!seen.insert(id).second) throw Error(ErrorCode::InvalidConfig, "client id '" + id + "' listed twice");
  }
  train.validate();
}

namespace {

const char* const kKeys[] = {"rounds",
                             "roster",
                             "seed",
                             "lr",
                             "lr_decay_factor",
                             "lr_decay_every",
                             "weight_decay",
                             "batch_size",
                             "flip_prob",
                             "max_rotation_deg",
                             "intensity_shift_range",
                             "resolution",
                             "classes",
                             "layers",
                             "finetune_epochs",
                             "finetune_lr_scale"};

}  // namespace

std::string FederationConfig::to_text() const {
  KvConfig kv;
  kv.set("rounds", std::to_string(rounds));
  std::string ids;
  for (const auto& id : roster) ids += (ids.empty() ? "" : ",") + id;
  kv.set("roster", ids);
  kv.set("seed", std::to_string(seed));
  kv.set("lr", format_double(train.schedule.base_lr));
  kv.set("lr_decay_factor", format_double(train.schedule.decay_factor));
  kv.set("lr_decay_every", std::to_string(train.schedule.decay_every));
  kv.set("weight_decay", format_double(train.weight_decay));
  kv.set("batch_size", std::to_string(train.batch_size));
  kv.set("flip_prob", format_double(train.augment.flip_prob));
  kv.set("max_rotation_deg", format_double(train.augment.max_rotation_deg));
  kv.set("intensity_shift_range", format_double(train.augment.intensity_shift_range));
  kv.set("resolution", std::to_string(train.spec.input_resolution));
  kv.set("classes", std::to_string(train.spec.num_classes));
  kv.set("layers", train.spec.layers_to_string());
  kv.set("finetune_epochs", std::to_string(train.finetune_epochs));
  kv.set("finetune_lr_scale", format_double(train.finetune_lr_scale));
  return kv.to_text();
}

FederationConfig FederationConfig::from_text(std::string_view text) {
  const auto kv = KvConfig::parse(text);
  for (const auto& [key, value] : kv.entries()) {
    if (std::find(std::begin(kKeys), std::end(kKeys), key) == std::end(kKeys)) {
      throw Error(ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
    }
  }
  FederationConfig c;
  auto u32 = [&](const char* key, std::uint32_t fallback) {
    const auto v = kv.get_u64(key, fallback);
    if (v > 0xFFFFFFFFull) throw Error(ErrorCode::InvalidConfig, std::string(key) + " is too large");
    return static_cast<std::uint32_t>(v);
  };
  c.rounds = kv.get_u64("rounds", c.rounds);
  c.roster = kv.get_list("roster");
  c.seed = kv.get_u64("seed", c.seed);
  auto& t = c.train;
  t.schedule.base_lr = kv.get_double("lr", t.schedule.base_lr);
  t.schedule.decay_factor = kv.get_double("lr_decay_factor", t.schedule.decay_factor);
  t.schedule.decay_every = u32("lr_decay_every", t.schedule.decay_every);
  t.weight_decay = kv.get_double("weight_decay", t.weight_decay);
  t.batch_size = u32("batch_size", t.batch_size);
  t.augment.flip_prob = kv.get_double("flip_prob", t.augment.flip_prob);
  t.augment.max_rotation_deg = kv.get_double("max_rotation_deg", t.augment.max_rotation_deg);
  t.augment.intensity_shift_range = kv.get_double("intensity_shift_range", t.augment.intensity_shift_range);
  const auto res = static_cast<int>(kv.get_int("resolution", t.spec.input_resolution));
  const auto classes = static_cast<int>(kv.get_int("classes", t.spec.num_classes));
  t.spec = nn::ModelSpec::default_spec(res, classes);
  if (auto layers = kv.get("layers")) t.spec.layers = nn::ModelSpec::parse_layers(*layers);
  t.finetune_epochs = u32("finetune_epochs", t.finetune_epochs);
  t.finetune_lr_scale = kv.get_double("finetune_lr_scale", t.finetune_lr_scale);
  return c;
}

Digest FederationConfig::digest() const { return sha256(to_text()); }

MessageType message_type(const Message& msg) {
  return static_cast<MessageType>(msg.index() + 1);
}

std::string_view to_string(MessageType type) {
  switch (type) {
    case MessageType::Join: return "JOIN";
    case MessageType::JoinAck: return "JOIN_ACK";
    case MessageType::ModelBroadcast: return "MODEL_BROADCAST";
    case MessageType::DeltaSubmit: return "DELTA_SUBMIT";
    case MessageType::RoundComplete: return "ROUND_COMPLETE";
    case MessageType::Shutdown: return "SHUTDOWN";
  }
  return "?";
}

namespace {

constexpr char kFrameMagic[4] = {'F', 'K', 'F', 'L'};

struct PayloadWriter {
  ByteWriter& w;
  void operator()(const Join& m) const {
    w.str16(m.client_id);
    w.u16(m.protocol_version);
  }
  void operator()(const JoinAck& m) const { w.str32(m.config); }
  void operator()(const ModelBroadcast& m) const {
    w.u64(m.round);
    nn::encode_params(w, m.params);
  }
  void operator()(const DeltaSubmit& m) const {
    w.u64(m.round);
    w.str16(m.update.client_id);
    w.u64(m.update.n_k);
    nn::encode_params(w, m.update.delta);
  }
  void operator()(const RoundComplete& m) const { w.u64(m.round); }
  void operator()(const Shutdown& m) const { w.str16(m.reason); }
};

}  // namespace

std::vector<std::uint8_t> encode_message(const Message& msg) {
  ByteWriter payload;
  std::visit(PayloadWriter{payload}, msg);
  if (payload.size() > kMaxPayload) throw Error(ErrorCode::Malformed, "payload exceeds the frame size limit");
  ByteWriter w;
  w.raw(std::string_view(kFrameMagic, 4));
  w.u16(kProtocolVersion);
  w.u16(static_cast<std::uint16_t>(message_type(msg)));
  w.u32(static_cast<std::uint32_t>(payload.size()));
  w.bytes(payload.buffer());
  return w.take();
}

FrameHeader decode_header(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.bytes(4);
  if (std::memcmp(magic.data(), kFrameMagic, 4) != 0) throw Error(ErrorCode::BadMagic, "frame magic is not FKFL");
  FrameHeader h;
  h.version = r.u16();
  h.type = r.u16();
  h.length = r.u32();
  if (h.version != kProtocolVersion) {
    throw Error(ErrorCode::VersionMismatch, "frame version " + std::to_string(h.version) + ", expected " +
                                                std::to_string(kProtocolVersion));
  }
  if (h.length > kMaxPayload) throw Error(ErrorCode::Malformed, "frame payload length " + std::to_string(h.length));
  return h;
}

Message decode_payload(std::uint16_t type, std::span<const std::uint8_t> payload) {
  ByteReader r(payload);
  Message msg;
  switch (static_cast<MessageType>(type)) {
    case MessageType::Join: {
      Join m;
      m.client_id = r.str16();
      m.protocol_version = r.u16();
      msg = std::move(m);
      break;
    }
    case MessageType::JoinAck: msg = JoinAck{r.str32()}; break;
    case MessageType::ModelBroadcast: {
      ModelBroadcast m;
      m.round = r.u64();
      m.params = nn::decode_params(r);
      msg = std::move(m);
      break;
    }
    case MessageType::DeltaSubmit: {
      DeltaSubmit m;
      m.round = r.u64();
      m.update.client_id = r.str16();
      m.update.n_k = r.u64();
      m.update.delta = nn::decode_params(r);
      msg = std::move(m);
      break;
    }
    case MessageType::RoundComplete: msg = RoundComplete{r.u64()}; break;
    case MessageType::Shutdown: msg = Shutdown{r.str16()}; break;
    default: throw Error(ErrorCode::Malformed, "unknown message type " + std::to_string(type));
  }
  if (r.remaining() != 0) throw Error(ErrorCode::Malformed, "trailing bytes in message payload");
  return msg;
}

Message decode_message(std::span<const std::uint8_t> bytes) {
  const auto h = decode_header(bytes);
  const auto body = bytes.subspan(kFrameHeaderSize);
  if (body.size() < h.length) {
    throw Error(ErrorCode::Truncated, "frame declares " + std::to_string(h.length) + " payload bytes, has " +
                                          std::to_string(body.size()));
  }
  if (body.size() > h.length) throw Error(ErrorCode::Malformed, "bytes after the frame");
  return decode_payload(h.type, body);
}

ParamVector aggregate(const ParamVector& global_prev, const std::vector<ClientUpdate>& updates) {
  if (updates.empty()) throw Error(ErrorCode::NoUpdates, "no client updates to aggregate");
  std::uint64_t total = 0;
  for (const auto& u : updates) {
    if (u.delta.size() != global_prev.size() || u.delta.spec_hash != global_prev.spec_hash) {
      throw Error(ErrorCode::SpecMismatch, "update from '" + u.client_id + "' does not match the model");
    }
    if (u.n_k == 0) throw Error(ErrorCode::Malformed, "update from '" + u.client_id + "' has n_k = 0");
    total += u.n_k;
  }
  std::vector<double> weight;
  for (const auto& u : updates) weight.push_back(static_cast<double>(u.n_k) / static_cast<double>(total));

  ParamVector out = global_prev;
  const auto& first = updates.front().delta.values;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double phi = global_prev.values[i];
    const double x1 = phi + static_cast<double>(first[i]);
    double acc = 0.0;
    for (std::size_t k = 1; k < updates.size(); ++k) {
      const double xk = phi + static_cast<double>(updates[k].delta.values[i]);
      acc += weight[k] * (xk - x1);
    }
    out.values[i] = static_cast<float>(x1 + acc);
  }
  return out;
}

std::string audit_to_jsonl(const std::vector<RoundAudit>& audit) {
  std::string out;
  for (const auto& a : audit) {
    nlohmann::ordered_json j;
    j["round"] = a.round;
    auto clients = nlohmann::ordered_json::array();
    for (const auto& c : a.clients) {
      nlohmann::ordered_json cj;
      cj["client_id"] = c.client_id;
      cj["n_k"] = c.n_k;
      cj["delta_norm"] = c.delta_norm;
      clients.push_back(cj);
    }
    j["clients"] = clients;
    j["global_digest"] = to_hex(a.global_digest);
    out += j.dump() + "\n";
  }
  return out;
}

ServerState ServerState::initial(const FederationConfig& config) {
  config.validate();
  ServerState s;
  s.config = config;
  s.global = nn::init_params(config.train.spec, derive_seed(config.seed, "global_init"));
  return s;
}

namespace {

void broadcast(StepResult& r, const Message& msg) {
  for (const auto& id : r.state.config.roster) r.out.push_back({id, msg});
}

bool on_roster(const ServerState& s, const std::string& id) {
  return std::find(s.config.roster.begin(), s.config.roster.end(), id) != s.config.roster.end();
}

double l2(const std::vector<float>& v) {
  double s = 0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

StepResult on_join(const ServerState& state, const Join& m) {
  if (!on_roster(state, m.client_id)) throw Error(ErrorCode::UnknownClient, "'" + m.client_id + "' is not on the roster");
  if (m.protocol_version != kProtocolVersion) {
    throw Error(ErrorCode::VersionMismatch, "'" + m.client_id + "' speaks protocol " +
                                                std::to_string(m.protocol_version));
  }
  if (state.joined.count(m.client_id)) throw Error(ErrorCode::DuplicateClient, "'" + m.client_id + "' joined twice");
  if (state.phase != Phase::Joining) throw Error(ErrorCode::Malformed, "JOIN after the federation started");
  StepResult r{state, {}};
  r.state.joined.insert(m.client_id);
  r.out.push_back({m.client_id, JoinAck{state.config.to_text()}});
  if (r.state.joined.size() == state.config.roster.size()) {
    r.state.phase = Phase::Training;
    r.state.round = 1;
    r.state.pending = {state.config.roster.begin(), state.config.roster.end()};
    broadcast(r, ModelBroadcast{1, r.state.global});
  }
  return r;
}

StepResult on_submit(const ServerState& state, const DeltaSubmit& m) {
  const auto& id = m.update.client_id;
  if (!on_roster(state, id)) throw Error(ErrorCode::UnknownClient, "'" + id + "' is not on the roster");
  if (state.phase != Phase::Training) {
    throw Error(ErrorCode::StaleUpdate, "submission from '" + id + "' outside a training round");
  }
  if (m.round != state.round) {
    throw Error(ErrorCode::StaleUpdate, "submission from '" + id + "' for round " + std::to_string(m.round) +
                                            " while in round " + std::to_string(state.round));
  }
  if (state.received.count(id)) throw Error(ErrorCode::DuplicateClient, "'" + id + "' already submitted this round");
  if (m.update.delta.size() != state.global.size() || m.update.delta.spec_hash != state.global.spec_hash) {
    throw Error(ErrorCode::SpecMismatch, "delta from '" + id + "' does not match the model");
  }
  if (m.update.n_k == 0) throw Error(ErrorCode::Malformed, "delta from '" + id + "' has n_k = 0");

  StepResult r{state, {}};
  r.state.pending.erase(id);
  r.state.received.emplace(id, m.update);
  if (!r.state.pending.empty()) return r;

  // Barrier reached: aggregate in roster order.
  std::vector<ClientUpdate> ordered;
  RoundAudit audit;
  audit.round = state.round;
  for (const auto& cid : state.config.roster) {
    const auto& u = r.state.received.at(cid);
    ordered.push_back(u);
    audit.clients.push_back({cid, u.n_k, l2(u.delta.values)});
  }
  r.state.global = aggregate(state.global, ordered);
  audit.global_digest = nn::params_digest(r.state.global);
  r.state.audit.push_back(std::move(audit));
  r.state.received.clear();
  broadcast(r, RoundComplete{state.round});
  const auto next = state.round + 1;
  broadcast(r, ModelBroadcast{next, r.state.global});
  if (state.round == state.config.rounds) {
    r.state.phase = Phase::Done;
    broadcast(r, Shutdown{"complete"});
  } else {
    r.state.round = next;
    r.state.pending = {state.config.roster.begin(), state.config.roster.end()};
  }
  return r;
}

}  // namespace

StepResult server_step(const ServerState& state, const Message& msg) {
  if (const auto* j = std::get_if<Join>(&msg)) return on_join(state, *j);
  if (const auto* d = std::get_if<DeltaSubmit>(&msg)) return on_submit(state, *d);
  throw Error(ErrorCode::Malformed,
              "server does not accept " + std::string(to_string(message_type(msg))) + " messages");
}

}  // namespace fedkappa::fed
