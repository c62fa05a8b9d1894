#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedkappa/common/digest.hpp"
#include "fedkappa/common/rng.hpp"
#include "fedkappa/data/site.hpp"
#include "fedkappa/nn/model.hpp"
#include "fedkappa/nn/optim.hpp"

namespace fedkappa::client {

struct AugmentConfig {
  double flip_prob = 0.5;
  double max_rotation_deg = 45.0;
  double intensity_shift_range = 0.1;  ///< additive shift drawn from +-range

  static AugmentConfig none() { return {0.0, 0.0, 0.0}; }
  void validate() const;
  bool operator==(const AugmentConfig&) const = default;
};

/// One sampled augmentation. Drawing always consumes the same number of
/// random values, whatever the config.
struct AugmentDraw {
  bool flip_h = false;
  bool flip_v = false;
  double angle_deg = 0.0;
  double shift = 0.0;
};

AugmentDraw draw_augment(const AugmentConfig& config, CounterRng& rng);
nn::Tensor apply_augment(const nn::Tensor& image, const AugmentDraw& draw);
nn::Tensor augment(const nn::Tensor& image, const AugmentConfig& config, CounterRng& rng);

/// Rotation about the image center, bilinear, zero outside the source.
nn::Tensor rotate_bilinear(const nn::Tensor& image, double degrees);

/// Largest multiple of `present_classes` not above `batch_size`.
std::size_t effective_batch_size(std::size_t batch_size, std::size_t present_classes);

/// One epoch of class-balanced batches over `labels`. Each batch holds
/// batch_size / P indices from each of the P present classes; each class
/// draws from a stream of concatenated shuffled permutations of its indices,
/// so minority classes repeat. The epoch has ceil(majority / (batch_size / P))
/// batches. Throws EmptySplit on no labels, InvalidConfig if P > batch_size.
std::vector<std::vector<std::size_t>> balanced_batches(std::span<const std::uint8_t> labels, std::size_t batch_size,
                                                       CounterRng& rng);

struct TrainConfig {
  nn::ModelSpec spec = nn::ModelSpec::default_spec();
  /// Desk-scale default. At 1e-4 the 60-round runs stay undertrained; use
  /// lr 1e-4 with 300 rounds for the original schedule.
  nn::LrSchedule schedule{1e-3};
  double weight_decay = 1e-5;
  std::uint32_t batch_size = 32;
  AugmentConfig augment;
  std::uint32_t finetune_epochs = 30;
  double finetune_lr_scale = 0.1;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// fl32(phi + delta), each term widened to double.
nn::ParamVector apply_delta(const nn::ParamVector& phi, const nn::ParamVector& delta);
/// fl32(after - before), each term widened to double.
nn::ParamVector compute_delta(const nn::ParamVector& after, const nn::ParamVector& before);

struct EpochResult {
  nn::ParamVector params;
  nn::AdamState state;
  std::uint64_t iterations = 0;
  double mean_loss = 0.0;
};

/// One epoch of balanced, augmented mini-batch Adam on the train split.
EpochResult train_epoch(const TrainConfig& config, const nn::ParamVector& start, const nn::AdamState& state,
                        const data::SiteDataset& site, double lr, CounterRng& rng);

struct LocalResult {
  nn::ParamVector delta;
  std::uint64_t n_k = 0;
  double epoch_loss = 0.0;
  nn::AdamState state;
};

/// One round of local training from phi_in: lr = lr_at(schedule, round - 1),
/// randomness from (seed, round). Returns the delta phi_out - phi_in and the
/// iteration count.
LocalResult local_training(const TrainConfig& config, const nn::ParamVector& phi_in, const data::SiteDataset& site,
                           std::uint64_t round, std::uint64_t seed, const nn::AdamState& state = {});

/// Linear weighted kappa on the validation split, or nullopt when it is
/// undefined (degenerate marginals or no validation images).
std::optional<double> validation_kappa(const nn::ModelSpec& spec, const nn::ParamVector& params,
                                       const data::SiteDataset& site);

enum class Source : std::uint8_t { Global, Local, Initial };
std::string_view to_string(Source source);
Source source_from_string(std::string_view text);

struct HistoryRecord {
  std::uint64_t round = 0;
  std::optional<double> val_kappa;
  Digest digest{};
  Source source = Source::Local;
  bool operator==(const HistoryRecord&) const = default;
};

/// Records in the order they were produced: by round, and within a round the
/// local-intermediate model before the global model aggregated from it.
struct TrainHistory {
  std::vector<HistoryRecord> records;

  /// One JSON object per line.
  std::string to_jsonl() const;
  static TrainHistory from_jsonl(std::string_view text);
  bool operator==(const TrainHistory&) const = default;
};

/// Index of the record with the highest val_kappa (undefined ranks lowest);
/// ties go to the earliest record. Throws NoCandidates when empty.
std::size_t select_best(const TrainHistory& history);

/// Candidate models by digest, in memory and optionally mirrored to
/// <dir>/<hex digest>.fkpv.
class CheckpointStore {
 public:
  CheckpointStore() = default;
  explicit CheckpointStore(std::filesystem::path dir);

  Digest put(const nn::ParamVector& params);
  /// Throws NoCandidates for an unknown digest.
  const nn::ParamVector& get(const Digest& digest) const;
  bool contains(const Digest& digest) const { return models_.count(digest) != 0; }
  std::size_t size() const noexcept { return models_.size(); }
  const std::optional<std::filesystem::path>& dir() const noexcept { return dir_; }

 private:
  std::optional<std::filesystem::path> dir_;
  std::map<Digest, nn::ParamVector> models_;
};

struct Selection {
  nn::ParamVector params;
  HistoryRecord record;
};

/// Client state across a federation: persistent Adam moments, the candidate
/// history and the checkpoint store.
class ClientRuntime {
 public:
  ClientRuntime(std::string client_id, TrainConfig config, data::SiteDataset site, std::uint64_t seed,
                std::optional<std::filesystem::path> checkpoint_dir = std::nullopt);

  /// Handles MODEL_BROADCAST{round, phi}. For round > 1 phi is the global
  /// model aggregated in round - 1 and is recorded as a candidate. For
  /// round <= total_rounds the client then trains one epoch, records the
  /// local-intermediate model and returns its update.
  std::optional<LocalResult> on_broadcast(std::uint64_t round, const nn::ParamVector& phi, std::uint64_t total_rounds);

  Selection best() const;
  const TrainHistory& history() const noexcept { return history_; }
  const CheckpointStore& store() const noexcept { return store_; }
  const std::string& id() const noexcept { return id_; }
  const data::SiteDataset& site() const noexcept { return site_; }
  const TrainConfig& config() const noexcept { return config_; }
  std::uint64_t seed() const noexcept { return seed_; }

 private:
  void record(std::uint64_t round, const nn::ParamVector& params, Source source);

  std::string id_;
  TrainConfig config_;
  data::SiteDataset site_;
  std::uint64_t seed_;
  nn::AdamState adam_;
  TrainHistory history_;
  CheckpointStore store_;
};

struct FineTuneResult {
  nn::ParamVector params;
  HistoryRecord selected;
  TrainHistory history;
};

/// Continues training from `start` with a fresh optimizer at a constant
/// lr = finetune_lr_scale * base_lr for `epochs` epochs. `start` is the
/// round-0 candidate; the validation-best candidate is returned.
FineTuneResult fine_tune(const TrainConfig& config, const nn::ParamVector& start, const data::SiteDataset& site,
                         std::uint32_t epochs, std::uint64_t seed);

}  // namespace fedkappa::client
