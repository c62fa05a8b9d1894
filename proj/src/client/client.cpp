#include "fedkappa/client/client.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "fedkappa/common/bytes.hpp"
#include "fedkappa/common/error.hpp"
#include "fedkappa/eval/kappa.hpp"
#include "fedkappa/nn/param_io.hpp"
#include "json.hpp"

namespace fedkappa::client {

using data::SiteDataset;
using data::Split;
using nn::AdamState;
using nn::ParamVector;
using nn::Tensor;

void AugmentConfig::validate() const {
  if (!(flip_prob >= 0 && flip_prob <= 1)) throw Error(ErrorCode::InvalidConfig, "flip_prob must be in [0, 1]");
  if (!(max_rotation_deg >= 0 && max_rotation_deg <= 180)) {
    throw Error(ErrorCode::InvalidConfig, "max_rotation_deg must be in [0, 180]");
  }
  if (!(intensity_shift_range >= 0 && intensity_shift_range <= 1)) {
    throw Error(ErrorCode::InvalidConfig, "intensity_shift_range must be in [0, 1]");
  }
}

AugmentDraw draw_augment(const AugmentConfig& config, CounterRng& rng) {
  AugmentDraw d;
  d.flip_h = rng.bernoulli(config.flip_prob);
  d.flip_v = rng.bernoulli(config.flip_prob);
  d.angle_deg = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg);
  d.shift = rng.uniform(-config.intensity_shift_range, config.intensity_shift_range);
  return d;
}

Tensor rotate_bilinear(const Tensor& image, double degrees) {
  if (image.rank() != 2) throw Error(ErrorCode::InvalidShape, "rotation expects a 2-D image");
  const auto h = image.dim(0);
  const auto w = image.dim(1);
  const double rad = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(rad);
  const double s = std::sin(rad);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  auto pixel = [&](long y, long x) -> double {
    if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) return 0.0;
    return image.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  };
  Tensor out({h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      // Inverse map: rotate the output coordinate back by -degrees.
      const double dx = static_cast<double>(x) - cx;
      const double dy = static_cast<double>(y) - cy;
      const double sx = c * dx + s * dy + cx;
      const double sy = -s * dx + c * dy + cy;
      const double fx = std::floor(sx);
      const double fy = std::floor(sy);
      const double tx = sx - fx;
      const double ty = sy - fy;
      const auto x0 = static_cast<long>(fx);
      const auto y0 = static_cast<long>(fy);
      const double v = (1 - ty) * ((1 - tx) * pixel(y0, x0) + tx * pixel(y0, x0 + 1)) +
                       ty * ((1 - tx) * pixel(y0 + 1, x0) + tx * pixel(y0 + 1, x0 + 1));
      out.at(y, x) = static_cast<float>(v);
    }
  }
  return out;
}

Tensor apply_augment(const Tensor& image, const AugmentDraw& d) {
  if (image.rank() != 2) throw Error(ErrorCode::InvalidShape, "augmentation expects a 2-D image");
  const auto h = image.dim(0);
  const auto w = image.dim(1);
  Tensor out = image;
  if (d.flip_h || d.flip_v) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        out.at(y, x) = image.at(d.flip_v ? h - 1 - y : y, d.flip_h ? w - 1 - x : x);
      }
    }
  }
  if (d.angle_deg != 0.0) out = rotate_bilinear(out, d.angle_deg);
  if (d.shift != 0.0) {
    for (auto& v : out.values()) v = static_cast<float>(std::clamp(static_cast<double>(v) + d.shift, 0.0, 1.0));
  }
  return out;
}

Tensor augment(const Tensor& image, const AugmentConfig& config, CounterRng& rng) {
  return apply_augment(image, draw_augment(config, rng));
}

std::size_t effective_batch_size(std::size_t batch_size, std::size_t present_classes) {
  if (present_classes == 0) throw Error(ErrorCode::EmptySplit, "no classes present");
  if (present_classes > batch_size) {
    throw Error(ErrorCode::InvalidConfig, "batch size " + std::to_string(batch_size) + " is smaller than the " +
                                              std::to_string(present_classes) + " present classes");
  }
  return batch_size / present_classes * present_classes;
}

std::vector<std::vector<std::size_t>> balanced_batches(std::span<const std::uint8_t> labels, std::size_t batch_size,
                                                       CounterRng& rng) {
  if (labels.empty()) throw Error(ErrorCode::EmptySplit, "no training samples");
  std::vector<std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= by_class.size()) by_class.resize(labels[i] + 1u);
    by_class[labels[i]].push_back(i);
  }
  std::erase_if(by_class, [](const auto& v) { return v.empty(); });
  const std::size_t present = by_class.size();
  const std::size_t per_class = effective_batch_size(batch_size, present) / present;
  std::size_t majority = 0;
  for (const auto& c : by_class) majority = std::max(majority, c.size());
  const std::size_t n_batches = (majority + per_class - 1) / per_class;

  std::vector<std::vector<std::size_t>> streams;
  for (const auto& members : by_class) {
    std::vector<std::size_t> stream;
    stream.reserve(n_batches * per_class + members.size());
    while (stream.size() < n_batches * per_class) {
      std::vector<std::size_t> perm = members;
      shuffle(std::span(perm), rng);
      stream.insert(stream.end(), perm.begin(), perm.end());
    }
    streams.push_back(std::move(stream));
  }
  std::vector<std::vector<std::size_t>> batches(n_batches);
  for (std::size_t b = 0; b < n_batches; ++b) {
    for (const auto& stream : streams) {
      for (std::size_t k = 0; k < per_class; ++k) batches[b].push_back(stream[b * per_class + k]);
    }
  }
  return batches;
}

void TrainConfig::validate() const {
  spec.validate();
  if (!(schedule.base_lr >= 0)) throw Error(ErrorCode::InvalidConfig, "lr must be >= 0");
  if (!(schedule.decay_factor > 0)) throw Error(ErrorCode::InvalidConfig, "lr decay factor must be > 0");
  if (schedule.decay_every == 0) throw Error(ErrorCode::InvalidConfig, "lr decay interval must be >= 1");
  if (!(weight_decay >= 0)) throw Error(ErrorCode::InvalidConfig, "weight_decay must be >= 0");
  if (batch_size == 0) throw Error(ErrorCode::InvalidConfig, "batch_size must be >= 1");
  if (!(finetune_lr_scale >= 0)) throw Error(ErrorCode::InvalidConfig, "finetune_lr_scale must be >= 0");
  augment.validate();
}

ParamVector apply_delta(const ParamVector& phi, const ParamVector& delta) {
  if (phi.size() != delta.size() || phi.spec_hash != delta.spec_hash) {
    throw Error(ErrorCode::SpecMismatch, "delta does not match the model");
  }
  ParamVector out = phi;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.values[i] = static_cast<float>(static_cast<double>(phi.values[i]) + static_cast<double>(delta.values[i]));
  }
  return out;
}

ParamVector compute_delta(const ParamVector& after, const ParamVector& before) {
  if (after.size() != before.size() || after.spec_hash != before.spec_hash) {
    throw Error(ErrorCode::SpecMismatch, "models differ in shape");
  }
  ParamVector out = after;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.values[i] = static_cast<float>(static_cast<double>(after.values[i]) - static_cast<double>(before.values[i]));
  }
  return out;
}

EpochResult train_epoch(const TrainConfig& config, const ParamVector& start, const AdamState& state,
                        const SiteDataset& site, double lr, CounterRng& rng) {
  nn::check_params(config.spec, start);
  if (site.resolution != config.spec.input_resolution) {
    throw Error(ErrorCode::SpecMismatch, "site '" + site.site_id + "' resolution " + std::to_string(site.resolution) +
                                             " differs from model input " +
                                             std::to_string(config.spec.input_resolution));
  }
  const auto train = site.indices(Split::Train);
  if (train.empty()) throw Error(ErrorCode::EmptySplit, "site '" + site.site_id + "' has no training images");
  std::vector<std::uint8_t> labels;
  labels.reserve(train.size());
  for (auto i : train) labels.push_back(site.labels[i]);

  const auto batches = balanced_batches(labels, config.batch_size, rng);
  const auto r = static_cast<std::size_t>(site.resolution);
  EpochResult result{start, state, 0, 0.0};
  double loss_sum = 0;
  for (const auto& batch : batches) {
    Tensor x({batch.size(), r, r});
    std::vector<int> y;
    y.reserve(batch.size());
    auto dst = x.values().begin();
    for (auto local : batch) {
      const auto i = train[local];
      const auto img = augment(site.images[i], config.augment, rng);
      dst = std::copy(img.data().begin(), img.data().end(), dst);
      y.push_back(site.labels[i]);
    }
    auto lg = nn::loss_and_grad(config.spec, result.params, x, y);
    loss_sum += lg.loss;
    auto step = nn::adam_step(result.params, lg.grad, result.state, lr, config.weight_decay);
    result.params = std::move(step.params);
    result.state = std::move(step.state);
    ++result.iterations;
  }
  result.mean_loss = loss_sum / static_cast<double>(batches.size());
  return result;
}

LocalResult local_training(const TrainConfig& config, const ParamVector& phi_in, const SiteDataset& site,
                           std::uint64_t round, std::uint64_t seed, const AdamState& state) {
  if (round == 0) throw Error(ErrorCode::InvalidConfig, "rounds are numbered from 1");
  CounterRng rng(derive_seed(derive_seed(seed, "local"), round));
  const double lr = nn::lr_at(config.schedule, round - 1);
  auto epoch = train_epoch(config, phi_in, state, site, lr, rng);
  return {compute_delta(epoch.params, phi_in), epoch.iterations, epoch.mean_loss, std::move(epoch.state)};
}

std::optional<double> validation_kappa(const nn::ModelSpec& spec, const ParamVector& params, const SiteDataset& site) {
  if (site.count(Split::Val) == 0) return std::nullopt;
  try {
    return eval::split_kappa(spec, params, site, Split::Val);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::DegenerateMarginals) return std::nullopt;
    throw;
  }
}

std::string_view to_string(Source source) {
  switch (source) {
    case Source::Global: return "global";
    case Source::Local: return "local";
    case Source::Initial: return "initial";
  }
  return "?";
}

Source source_from_string(std::string_view text) {
  if (text == "global") return Source::Global;
  if (text == "local") return Source::Local;
  if (text == "initial") return Source::Initial;
  throw Error(ErrorCode::Malformed, "unknown candidate source '" + std::string(text) + "'");
}

std::string TrainHistory::to_jsonl() const {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["round"] = r.round;
    j["source"] = to_string(r.source);
    j["val_kappa"] = r.val_kappa ? nlohmann::json(*r.val_kappa) : nlohmann::json(nullptr);
    j["digest"] = to_hex(r.digest);
    out += j.dump() + "\n";
  }
  return out;
}

TrainHistory TrainHistory::from_jsonl(std::string_view text) {
  TrainHistory h;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(start, end - start);
    start = end + 1;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      HistoryRecord r;
      r.round = j.at("round").get<std::uint64_t>();
      r.source = source_from_string(j.at("source").get<std::string>());
      if (!j.at("val_kappa").is_null()) r.val_kappa = j.at("val_kappa").get<double>();
      r.digest = digest_from_hex(j.at("digest").get<std::string>());
      h.records.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Malformed, std::string("bad history line: ") + e.what());
    }
  }
  return h;
}

std::size_t select_best(const TrainHistory& history) {
  if (history.records.empty()) throw Error(ErrorCode::NoCandidates, "history has no candidates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.records.size(); ++i) {
    const auto& cand = history.records[i].val_kappa;
    const auto& cur = history.records[best].val_kappa;
    if (cand && (!cur || *cand > *cur)) best = i;
  }
  return best;
}

CheckpointStore::CheckpointStore(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  std::filesystem::create_directories(*dir_, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir_->string() + ": " + ec.message());
}

Digest CheckpointStore::put(const ParamVector& params) {
  const auto digest = nn::params_digest(params);
  auto [it, inserted] = models_.emplace(digest, params);
  if (inserted && dir_) nn::save_params(*dir_ / (to_hex(digest) + ".fkpv"), params);
  return digest;
}

const ParamVector& CheckpointStore::get(const Digest& digest) const {
  const auto it = models_.find(digest);
  if (it == models_.end()) throw Error(ErrorCode::NoCandidates, "no checkpoint " + to_hex(digest));
  return it->second;
}

ClientRuntime::ClientRuntime(std::string client_id, TrainConfig config, SiteDataset site, std::uint64_t seed,
                             std::optional<std::filesystem::path> checkpoint_dir)
    : id_(std::move(client_id)),
      config_(std::move(config)),
      site_(std::move(site)),
      seed_(seed),
      store_(checkpoint_dir ? CheckpointStore(*checkpoint_dir) : CheckpointStore()) {
  config_.validate();
  if (site_.count(Split::Train) == 0) {
    throw Error(ErrorCode::EmptySplit, "client '" + id_ + "' has no training images");
  }
}

void ClientRuntime::record(std::uint64_t round, const ParamVector& params, Source source) {
  HistoryRecord r;
  r.round = round;
  r.source = source;
  r.val_kappa = validation_kappa(config_.spec, params, site_);
  r.digest = store_.put(params);
  history_.records.push_back(r);
}

std::optional<LocalResult> ClientRuntime::on_broadcast(std::uint64_t round, const ParamVector& phi,
                                                       std::uint64_t total_rounds) {
  nn::check_params(config_.spec, phi);
  if (round == 0 || round > total_rounds + 1) {
    throw Error(ErrorCode::StaleUpdate, "broadcast for round " + std::to_string(round));
  }
  if (round > 1) record(round - 1, phi, Source::Global);
  if (round > total_rounds) return std::nullopt;
  auto result = local_training(config_, phi, site_, round, seed_, adam_);
  adam_ = result.state;
  record(round, apply_delta(phi, result.delta), Source::Local);
  return result;
}

Selection ClientRuntime::best() const {
  const auto& r = history_.records[select_best(history_)];
  return {store_.get(r.digest), r};
}

FineTuneResult fine_tune(const TrainConfig& config, const ParamVector& start, const SiteDataset& site,
                         std::uint32_t epochs, std::uint64_t seed) {
  config.validate();
  nn::check_params(config.spec, start);
  if (site.count(Split::Train) == 0) {
    throw Error(ErrorCode::EmptySplit, "site '" + site.site_id + "' has no training images");
  }
  CheckpointStore store;
  FineTuneResult out;
  auto add = [&](std::uint64_t round, const ParamVector& p, Source source) {
    HistoryRecord r;
    r.round = round;
    r.source = source;
    r.val_kappa = validation_kappa(config.spec, p, site);
    r.digest = store.put(p);
    out.history.records.push_back(r);
  };
  add(0, start, Source::Initial);
  const double lr = config.schedule.base_lr * config.finetune_lr_scale;
  const auto key = derive_seed(seed, "finetune");
  ParamVector params = start;
  AdamState state;
  for (std::uint32_t e = 1; e <= epochs; ++e) {
    CounterRng rng(derive_seed(key, e));
    auto epoch = train_epoch(config, params, state, site, lr, rng);
    params = std::move(epoch.params);
    state = std::move(epoch.state);
    add(e, params, Source::Local);
  }
  out.selected = out.history.records[select_best(out.history)];
  out.params = store.get(out.selected.digest);
  return out;
}

}  // namespace fedkappa::client
