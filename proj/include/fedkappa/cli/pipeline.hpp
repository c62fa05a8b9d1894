#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fedkappa/client/client.hpp"
#include "fedkappa/data/site.hpp"
#include "fedkappa/eval/kappa.hpp"
#include "fedkappa/fed/federation.hpp"

// Experiment stages shared by the command-line tool and the acceptance runs.
//
// On-disk layout produced by the tool:
//   <data>/profiles.txt, <data>/<site>.fkds
//   <local>/<site>/best.fkpv, history.jsonl
//   <federated>/global.fkpv, audit.jsonl, config.txt, <site>/best.fkpv, history.jsonl
//   <finetuned>/<site>/best.fkpv, history.jsonl
//   <eval>.csv, <report>/{local,federated,finetuned}.csv, summary.json, report.txt
namespace fedkappa::pipeline {

namespace fs = std::filesystem;

/// Throws IoError naming the path when it does not exist.
void require_exists(const fs::path& path);

/// Writes one dataset per profile plus profiles.txt; returns the files written.
std::vector<fs::path> write_datasets(const fs::path& dir, const std::vector<data::SiteProfile>& profiles);

/// Site ids of a data directory: profiles.txt order when present, otherwise
/// the sorted dataset stems.
std::vector<std::string> data_roster(const fs::path& dir);
std::vector<data::SiteDataset> load_sites(const fs::path& dir, const std::vector<std::string>& roster);

struct SiteModel {
  nn::ParamVector params;
  client::HistoryRecord selected;
  client::TrainHistory history;
};

/// Local-only baseline: `epochs` one-epoch rounds on the site's own data
/// with the federation's optimizer, schedule and per-round randomness, from
/// the federation's initial model. Every epoch's model is a candidate; the
/// validation-best one is returned.
SiteModel train_local(const client::TrainConfig& config, const data::SiteDataset& site, std::uint64_t epochs,
                      std::uint64_t seed);

SiteModel to_site_model(const client::ClientRuntime& runtime);
SiteModel to_site_model(const client::FineTuneResult& result);

/// <dir>/<site>/best.fkpv and history.jsonl.
std::vector<fs::path> save_site_model(const fs::path& dir, const std::string& site_id, const SiteModel& model);
nn::ParamVector load_site_params(const fs::path& dir, const std::string& site_id);

/// global.fkpv, audit.jsonl and config.txt.
std::vector<fs::path> save_server_result(const fs::path& dir, const fed::FederationConfig& config,
                                         const fed::ServerResult& result);

/// Cross-site matrix on the test splits: models[i] on sites[j].
eval::KappaMatrix evaluate(const nn::ModelSpec& spec, const std::vector<nn::ParamVector>& models,
                           const std::vector<data::SiteDataset>& sites,
                           const std::optional<nn::ParamVector>& global = std::nullopt);

/// Diagonal of a square matrix (each site's own model on its own test split).
std::vector<std::optional<double>> diagonal(const eval::KappaMatrix& matrix);

struct RunManifest {
  std::string subcommand;
  Digest config_digest{};
  std::uint64_t seed = 0;
  std::string started;
  std::string finished;
  std::vector<fs::path> artifacts;

  std::string to_json() const;
};

/// UTC, ISO 8601.
std::string utc_timestamp();

/// Writes <dir>/manifest-<subcommand>.json.
fs::path write_manifest(const fs::path& dir, const RunManifest& manifest);

/// Everything one experiment produces, in memory.
struct ExperimentResult {
  std::vector<std::string> site_ids;
  eval::KappaMatrix local;
  eval::KappaMatrix federated;
  std::vector<std::optional<double>> finetuned_diag;
  eval::SummaryStats local_summary;
  eval::SummaryStats federated_summary;
  std::vector<SiteModel> local_models;
  std::vector<SiteModel> federated_models;
  std::vector<SiteModel> finetuned_models;
  nn::ParamVector global;
};

/// Local baselines, a simulated federation, fine-tuning and evaluation.
ExperimentResult run_experiment(const fed::FederationConfig& config, const std::vector<data::SiteDataset>& sites,
                                const fed::LogFn& log = {});

}  // namespace fedkappa::pipeline
