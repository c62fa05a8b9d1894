#include "fedkappa/cli/pipeline.hpp"

#include <algorithm>
#include <ctime>

#include "fedkappa/common/bytes.hpp"
#include "fedkappa/nn/param_io.hpp"
#include "json.hpp"

namespace fedkappa::pipeline {

using nlohmann::ordered_json;

void require_exists(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::IoError, "missing " + path.string());
}

std::vector<fs::path> write_datasets(const fs::path& dir, const std::vector<data::SiteProfile>& profiles) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::IoError, "output directory " + dir.string() + " does not exist");
  std::vector<fs::path> written;
  for (const auto& p : profiles) p.validate();
  for (const auto& p : profiles) {
    const auto path = dir / (p.site_id + ".fkds");
    data::save_dataset(path, data::generate_site(p));
    written.push_back(path);
  }
  const auto profiles_path = dir / "profiles.txt";
  write_text_file(profiles_path, data::profiles_to_text(profiles));
  written.push_back(profiles_path);
  return written;
}

std::vector<std::string> data_roster(const fs::path& dir) {
  require_exists(dir);
  std::vector<std::string> roster;
  const auto profiles_path = dir / "profiles.txt";
  if (fs::exists(profiles_path)) {
    for (const auto& p : data::parse_profiles(read_text_file(profiles_path))) roster.push_back(p.site_id);
    return roster;
  }
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".fkds") roster.push_back(entry.path().stem().string());
  }
  std::sort(roster.begin(), roster.end());
  if (roster.empty()) throw Error(ErrorCode::IoError, "no datasets in " + dir.string());
  return roster;
}

std::vector<data::SiteDataset> load_sites(const fs::path& dir, const std::vector<std::string>& roster) {
  std::vector<data::SiteDataset> sites;
  for (const auto& id : roster) {
    const auto path = dir / (id + ".fkds");
    require_exists(path);
    sites.push_back(data::load_dataset(path));
  }
  return sites;
}

SiteModel train_local(const client::TrainConfig& config, const data::SiteDataset& site, std::uint64_t epochs,
                      std::uint64_t seed) {
  config.validate();
  if (epochs == 0) throw Error(ErrorCode::InvalidConfig, "local training needs at least one epoch");
  auto params = nn::init_params(config.spec, derive_seed(seed, "global_init"));
  nn::AdamState state;
  client::CheckpointStore store;
  SiteModel out;
  for (std::uint64_t e = 1; e <= epochs; ++e) {
    auto step = client::local_training(config, params, site, e, seed, state);
    params = client::apply_delta(params, step.delta);
    state = std::move(step.state);
    client::HistoryRecord r;
    r.round = e;
    r.source = client::Source::Local;
    r.val_kappa = client::validation_kappa(config.spec, params, site);
    r.digest = store.put(params);
    out.history.records.push_back(r);
  }
  out.selected = out.history.records[client::select_best(out.history)];
  out.params = store.get(out.selected.digest);
  return out;
}

SiteModel to_site_model(const client::ClientRuntime& runtime) {
  auto best = runtime.best();
  return {std::move(best.params), best.record, runtime.history()};
}

SiteModel to_site_model(const client::FineTuneResult& result) {
  return {result.params, result.selected, result.history};
}

std::vector<fs::path> save_site_model(const fs::path& dir, const std::string& site_id, const SiteModel& model) {
  const auto site_dir = dir / site_id;
  fs::create_directories(site_dir);
  const auto best = site_dir / "best.fkpv";
  const auto history = site_dir / "history.jsonl";
  nn::save_params(best, model.params);
  write_text_file(history, model.history.to_jsonl());
  return {best, history};
}

nn::ParamVector load_site_params(const fs::path& dir, const std::string& site_id) {
  const auto path = dir / site_id / "best.fkpv";
  require_exists(path);
  return nn::load_params(path);
}

std::vector<fs::path> save_server_result(const fs::path& dir, const fed::FederationConfig& config,
                                         const fed::ServerResult& result) {
  fs::create_directories(dir);
  const auto global = dir / "global.fkpv";
  const auto audit = dir / "audit.jsonl";
  const auto cfg = dir / "config.txt";
  nn::save_params(global, result.global);
  write_text_file(audit, fed::audit_to_jsonl(result.audit));
  write_text_file(cfg, config.to_text());
  return {global, audit, cfg};
}

eval::KappaMatrix evaluate(const nn::ModelSpec& spec, const std::vector<nn::ParamVector>& models,
                           const std::vector<data::SiteDataset>& sites, const std::optional<nn::ParamVector>& global) {
  return eval::cross_site_matrix(spec, models, sites, global, eval::Weighting::Linear, 0);
}

std::vector<std::optional<double>> diagonal(const eval::KappaMatrix& matrix) {
  matrix.validate();
  std::vector<std::optional<double>> d;
  for (std::size_t i = 0; i < matrix.site_ids.size(); ++i) d.push_back(matrix.values[i][i]);
  return d;
}

std::string RunManifest::to_json() const {
  ordered_json j;
  j["subcommand"] = subcommand;
  j["config_digest"] = to_hex(config_digest);
  j["seed"] = seed;
  j["started"] = started;
  j["finished"] = finished;
  auto& a = j["artifacts"] = ordered_json::array();
  for (const auto& p : artifacts) a.push_back(p.string());
  return j.dump(2) + "\n";
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

fs::path write_manifest(const fs::path& dir, const RunManifest& manifest) {
  fs::create_directories(dir);
  const auto path = dir / ("manifest-" + manifest.subcommand + ".json");
  write_text_file(path, manifest.to_json());
  return path;
}

ExperimentResult run_experiment(const fed::FederationConfig& config, const std::vector<data::SiteDataset>& sites,
                                const fed::LogFn& log) {
  config.validate();
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  ExperimentResult r;
  r.site_ids = config.roster;
  const auto& spec = config.train.spec;

  for (const auto& site : sites) {
    say("local baseline " + site.site_id);
    r.local_models.push_back(train_local(config.train, site, config.rounds, config.seed));
  }

  say("federation, " + std::to_string(config.rounds) + " rounds");
  fed::ServerOptions options;
  options.log = log;
  auto sim = fed::simulate(config, sites, std::nullopt, options);
  r.global = sim.server.global;
  for (const auto& c : sim.clients) r.federated_models.push_back(to_site_model(c.runtime));

  for (std::size_t i = 0; i < sites.size(); ++i) {
    say("fine-tuning " + sites[i].site_id);
    r.finetuned_models.push_back(to_site_model(
        client::fine_tune(config.train, r.federated_models[i].params, sites[i], config.train.finetune_epochs,
                          config.seed)));
  }

  auto params_of = [](const std::vector<SiteModel>& ms) {
    std::vector<nn::ParamVector> out;
    for (const auto& m : ms) out.push_back(m.params);
    return out;
  };
  r.local = evaluate(spec, params_of(r.local_models), sites);
  r.federated = evaluate(spec, params_of(r.federated_models), sites, r.global);
  r.finetuned_diag = diagonal(evaluate(spec, params_of(r.finetuned_models), sites));
  r.local_summary = eval::summarize(r.local);
  r.federated_summary = eval::summarize(r.federated, r.local);
  return r;
}

}  // namespace fedkappa::pipeline
