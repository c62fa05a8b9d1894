// fedkappa: data generation, local baselines, federation over threads or TCP,
// fine-tuning, cross-site evaluation and reporting.

#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "fedkappa/cli/pipeline.hpp"
#include "fedkappa/common/bytes.hpp"
#include "fedkappa/nn/param_io.hpp"

namespace fs = std::filesystem;
using namespace fedkappa;
using pipeline::RunManifest;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
  bool quiet = false;
};

fed::LogFn make_log(const Globals& g) {
  if (g.quiet) return {};
  return [](const std::string& line) { std::cerr << "[fedkappa] " << line << "\n"; };
}

fs::path out_dir(const Globals& g) {
  if (g.out.empty()) throw Error(ErrorCode::InvalidConfig, "--out is required");
  return g.out;
}

/// --config file (or `fallback` when given and present), then --seed and
/// --rounds overrides, then the roster from the data directory if unset.
fed::FederationConfig load_config(const Globals& g, std::optional<std::uint64_t> rounds, const std::string& data_dir,
                                  const fs::path& fallback = {}) {
  fed::FederationConfig c;
  if (!g.config.empty()) {
    pipeline::require_exists(g.config);
    c = fed::FederationConfig::from_text(read_text_file(g.config));
  } else if (!fallback.empty() && fs::exists(fallback)) {
    c = fed::FederationConfig::from_text(read_text_file(fallback));
  } else if (!data_dir.empty() && fs::exists(fs::path(data_dir) / "profiles.txt")) {
    // No config file: size the default network to the generated images.
    const auto profiles = data::parse_profiles(read_text_file(fs::path(data_dir) / "profiles.txt"));
    if (!profiles.empty()) {
      c.train.spec = nn::ModelSpec::default_spec(profiles.front().resolution, c.train.spec.num_classes);
    }
  }
  if (g.seed) c.seed = *g.seed;
  if (rounds) c.rounds = *rounds;
  if (c.roster.empty() && !data_dir.empty()) c.roster = pipeline::data_roster(data_dir);
  c.validate();
  return c;
}

void check_resolution(const fed::FederationConfig& c, const std::vector<data::SiteDataset>& sites) {
  for (const auto& s : sites) {
    if (s.resolution != c.train.spec.input_resolution) {
      throw Error(ErrorCode::SpecMismatch, "site '" + s.site_id + "' has resolution " + std::to_string(s.resolution) +
                                               ", the model expects " +
                                               std::to_string(c.train.spec.input_resolution));
    }
  }
}

struct Run {
  RunManifest manifest;
  fs::path dir;

  Run(std::string subcommand, fs::path d) : dir(std::move(d)) {
    manifest.subcommand = std::move(subcommand);
    manifest.started = pipeline::utc_timestamp();
  }
  void add(const std::vector<fs::path>& paths) {
    manifest.artifacts.insert(manifest.artifacts.end(), paths.begin(), paths.end());
  }
  void finish(const Digest& digest, std::uint64_t seed) {
    manifest.config_digest = digest;
    manifest.seed = seed;
    manifest.finished = pipeline::utc_timestamp();
    pipeline::write_manifest(dir, manifest);
  }
};

std::vector<nn::ParamVector> load_models(const fs::path& dir, const std::vector<std::string>& roster) {
  std::vector<nn::ParamVector> out;
  for (const auto& id : roster) out.push_back(pipeline::load_site_params(dir, id));
  return out;
}

// ---- gen-data

struct GenDataArgs {
  std::uint32_t scale = 50;
  std::string profiles;
  std::optional<std::size_t> sites;
  std::optional<int> resolution;
  bool create = false;
};

void cmd_gen_data(const Globals& g, const GenDataArgs& a) {
  const auto dir = out_dir(g);
  const std::uint64_t seed = g.seed.value_or(2021);
  std::vector<data::SiteProfile> profiles;
  if (!a.profiles.empty()) {
    pipeline::require_exists(a.profiles);
    profiles = data::parse_profiles(read_text_file(a.profiles));
  } else {
    profiles = data::default_seven_site_profiles(a.scale, seed);
  }
  if (a.sites) {
    if (*a.sites == 0 || *a.sites > profiles.size()) {
      throw Error(ErrorCode::InvalidConfig, "--sites must be between 1 and " + std::to_string(profiles.size()));
    }
    profiles.resize(*a.sites);
  }
  if (a.resolution) {
    for (auto& p : profiles) p.resolution = *a.resolution;
  }
  if (!fs::is_directory(dir)) {
    if (!a.create) throw Error(ErrorCode::IoError, "output directory " + dir.string() + " does not exist (use --create)");
    fs::create_directories(dir);
  }
  Run run("gen-data", dir);
  run.add(pipeline::write_datasets(dir, profiles));
  run.finish(sha256(data::profiles_to_text(profiles)), seed);
}

// ---- train-local

struct DataArgs {
  std::string data;
  std::optional<std::uint64_t> rounds;
};

void cmd_train_local(const Globals& g, const DataArgs& a) {
  const auto dir = out_dir(g);
  const auto cfg = load_config(g, a.rounds, a.data);
  const auto sites = pipeline::load_sites(a.data, cfg.roster);
  check_resolution(cfg, sites);
  const auto log = make_log(g);
  Run run("train-local", dir);
  for (const auto& site : sites) {
    if (log) log("local baseline " + site.site_id + ", " + std::to_string(cfg.rounds) + " epochs");
    const auto model = pipeline::train_local(cfg.train, site, cfg.rounds, cfg.seed);
    run.add(pipeline::save_site_model(dir, site.site_id, model));
  }
  const auto cfg_path = dir / "config.txt";
  write_text_file(cfg_path, cfg.to_text());
  run.add({cfg_path});
  run.finish(cfg.digest(), cfg.seed);
}

// ---- federate

struct FederateArgs {
  DataArgs data;
  bool simulate = false;
  std::string serve;
  std::string join;
  std::string client_id;
  std::string port_file;
  bool checkpoints = false;
  double idle_timeout_s = 600;
};

void cmd_federate(const Globals& g, const FederateArgs& a) {
  const auto dir = out_dir(g);
  const auto log = make_log(g);
  const int modes = int(a.simulate) + int(!a.serve.empty()) + int(!a.join.empty());
  if (modes != 1) throw Error(ErrorCode::InvalidConfig, "choose exactly one of --simulate, --serve, --join");
  fed::ServerOptions server_opts;
  server_opts.log = log;
  server_opts.idle_timeout = std::chrono::milliseconds(static_cast<std::int64_t>(a.idle_timeout_s * 1000));

  if (a.simulate) {
    if (a.data.data.empty()) throw Error(ErrorCode::InvalidConfig, "--simulate needs --data");
    const auto cfg = load_config(g, a.data.rounds, a.data.data);
    const auto sites = pipeline::load_sites(a.data.data, cfg.roster);
    check_resolution(cfg, sites);
    Run run("federate", dir);
    fs::create_directories(dir);
    std::optional<fs::path> ckpt;
    if (a.checkpoints) ckpt = dir / "checkpoints";
    const auto sim = fed::simulate(cfg, sites, ckpt, server_opts);
    run.add(pipeline::save_server_result(dir, cfg, sim.server));
    for (const auto& c : sim.clients) run.add(pipeline::save_site_model(dir, c.runtime.id(), pipeline::to_site_model(c.runtime)));
    run.finish(cfg.digest(), cfg.seed);
    return;
  }

  if (!a.serve.empty()) {
    const auto cfg = load_config(g, a.data.rounds, a.data.data);
    const auto [host, port] = fed::parse_endpoint(a.serve);
    Run run("federate-serve", dir);
    fs::create_directories(dir);
    const auto result = fed::serve_tcp(cfg, host, port, server_opts, [&](std::uint16_t bound) {
      if (!a.port_file.empty()) {
        // Written whole under a temporary name, then renamed, so readers never see a partial file.
        const fs::path tmp = a.port_file + ".tmp";
        write_text_file(tmp, std::to_string(bound) + "\n");
        fs::rename(tmp, a.port_file);
      }
    });
    run.add(pipeline::save_server_result(dir, cfg, result));
    run.finish(cfg.digest(), cfg.seed);
    return;
  }

  if (a.client_id.empty()) throw Error(ErrorCode::InvalidConfig, "--join needs --client-id");
  if (a.data.data.empty()) throw Error(ErrorCode::InvalidConfig, "--join needs --data");
  const auto site_path = fs::path(a.data.data) / (a.client_id + ".fkds");
  pipeline::require_exists(site_path);
  auto site = data::load_dataset(site_path);
  const auto [host, port] = fed::parse_endpoint(a.join);
  Run run("federate-join-" + a.client_id, dir);
  fs::create_directories(dir);
  fed::ClientOptions opts;
  opts.log = log;
  if (a.checkpoints) opts.checkpoint_dir = dir / "checkpoints" / a.client_id;
  auto conn = fed::tcp_connect(host, port);
  const auto joined = fed::run_client(*conn, a.client_id, std::move(site), g.seed, opts);
  run.add(pipeline::save_site_model(dir, a.client_id, pipeline::to_site_model(joined.runtime)));
  run.finish(joined.config.digest(), g.seed.value_or(joined.config.seed));
}

// ---- finetune

struct FinetuneArgs {
  DataArgs data;
  std::string federated;
  std::optional<std::uint32_t> epochs;
};

void cmd_finetune(const Globals& g, const FinetuneArgs& a) {
  const auto dir = out_dir(g);
  auto cfg = load_config(g, std::nullopt, a.data.data, fs::path(a.federated) / "config.txt");
  if (a.epochs) cfg.train.finetune_epochs = *a.epochs;
  const auto sites = pipeline::load_sites(a.data.data, cfg.roster);
  check_resolution(cfg, sites);
  const auto starts = load_models(a.federated, cfg.roster);
  const auto log = make_log(g);
  Run run("finetune", dir);
  for (std::size_t i = 0; i < sites.size(); ++i) {
    if (log) log("fine-tuning " + sites[i].site_id + ", " + std::to_string(cfg.train.finetune_epochs) + " epochs");
    const auto ft = client::fine_tune(cfg.train, starts[i], sites[i], cfg.train.finetune_epochs, cfg.seed);
    run.add(pipeline::save_site_model(dir, sites[i].site_id, pipeline::to_site_model(ft)));
  }
  const auto cfg_path = dir / "config.txt";
  write_text_file(cfg_path, cfg.to_text());
  run.add({cfg_path});
  run.finish(cfg.digest(), cfg.seed);
}

// ---- eval-matrix

struct EvalArgs {
  std::string data;
  std::string models;
  std::string global;
  std::string name = "matrix";
};

void cmd_eval(const Globals& g, const EvalArgs& a) {
  const auto dir = out_dir(g);
  const auto cfg = load_config(g, std::nullopt, a.data, fs::path(a.models) / "config.txt");
  const auto sites = pipeline::load_sites(a.data, cfg.roster);
  check_resolution(cfg, sites);
  const auto models = load_models(a.models, cfg.roster);
  std::optional<nn::ParamVector> global;
  if (!a.global.empty()) {
    pipeline::require_exists(a.global);
    global = nn::load_params(a.global);
  }
  Run run("eval-matrix-" + a.name, dir);
  fs::create_directories(dir);
  const auto matrix = pipeline::evaluate(cfg.train.spec, models, sites, global);
  const auto path = dir / (a.name + ".csv");
  write_text_file(path, eval::matrix_to_csv(matrix));
  run.add({path});
  run.finish(cfg.digest(), cfg.seed);
}

// ---- report

struct ReportArgs {
  std::string local;
  std::string federated;
  std::string finetuned;
};

void cmd_report(const Globals& g, const ReportArgs& a) {
  const auto dir = out_dir(g);
  for (const auto& p : {a.local, a.federated}) {
    if (p.empty()) throw Error(ErrorCode::InvalidConfig, "report needs --local and --federated");
    pipeline::require_exists(p);
  }
  eval::ReportInputs in;
  in.local = eval::matrix_from_csv(read_text_file(a.local));
  in.federated = eval::matrix_from_csv(read_text_file(a.federated));
  std::string digest_input = read_text_file(a.local) + read_text_file(a.federated);
  if (!a.finetuned.empty()) {
    pipeline::require_exists(a.finetuned);
    const auto text = read_text_file(a.finetuned);
    const auto ft = eval::matrix_from_csv(text);
    if (ft.site_ids != in.federated.site_ids) {
      throw Error(ErrorCode::InvalidShape, "fine-tuned matrix covers different sites than the federated one");
    }
    in.finetuned_diag = pipeline::diagonal(ft);
    digest_input += text;
  }
  Run run("report", dir);
  fs::create_directories(dir);
  run.add(eval::emit_report(dir, in));
  run.finish(sha256(digest_input), g.seed.value_or(0));
  std::cout << eval::render_report(in);
}

// ---- experiment: every stage in one directory tree

struct ExperimentArgs {
  GenDataArgs gen;
  std::optional<std::uint64_t> rounds;
};

void cmd_experiment(const Globals& g, const ExperimentArgs& a) {
  const auto root = out_dir(g);
  fs::create_directories(root);
  Globals sub = g;
  auto stage = [&](const char* name) {
    sub.out = (root / name).string();
    return sub.out;
  };
  auto gen = a.gen;
  gen.create = true;
  const auto data_dir = stage("data");
  cmd_gen_data(sub, gen);
  stage("local");
  cmd_train_local(sub, DataArgs{data_dir, a.rounds});
  FederateArgs fa;
  fa.data = {data_dir, a.rounds};
  fa.simulate = true;
  const auto fed_dir = stage("federated");
  cmd_federate(sub, fa);
  FinetuneArgs ft;
  ft.data = {data_dir, std::nullopt};
  ft.federated = fed_dir;
  const auto ft_dir = stage("finetuned");
  cmd_finetune(sub, ft);

  stage("eval");
  const auto local_dir = (root / "local").string();
  cmd_eval(sub, EvalArgs{data_dir, local_dir, "", "local"});
  cmd_eval(sub, EvalArgs{data_dir, fed_dir, (fs::path(fed_dir) / "global.fkpv").string(), "federated"});
  cmd_eval(sub, EvalArgs{data_dir, ft_dir, "", "finetuned"});
  const auto eval_dir = root / "eval";
  stage("report");
  cmd_report(sub, ReportArgs{(eval_dir / "local.csv").string(), (eval_dir / "federated.csv").string(),
                             (eval_dir / "finetuned.csv").string()});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedkappa: federated averaging on synthetic multi-site density data"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Master seed (overrides the config file)");
  app.add_option("--config", g.config, "Federation config file (key = value)");
  app.add_option("--out", g.out, "Output directory");
  app.add_flag("-q,--quiet", g.quiet, "No progress on stderr");

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "Write synthetic site datasets");
  c_gen->add_option("--scale", gen.scale, "Divide the default site sizes by this factor")->capture_default_str();
  c_gen->add_option("--profiles", gen.profiles, "Site profile file instead of the seven default sites");
  c_gen->add_option("--sites", gen.sites, "Keep only the first N profiles");
  c_gen->add_option("--resolution", gen.resolution, "Override the image resolution of every profile");
  c_gen->add_flag("--create", gen.create, "Create the output directory if missing");

  DataArgs local;
  auto* c_local = app.add_subcommand("train-local", "Local-only baselines, one model per site");
  c_local->add_option("--data", local.data, "Dataset directory")->required();
  c_local->add_option("--rounds", local.rounds, "Epochs (defaults to the federation's rounds)");

  FederateArgs fa;
  auto* c_fed = app.add_subcommand("federate", "Federated averaging");
  c_fed->add_option("--data", fa.data.data, "Dataset directory");
  c_fed->add_option("--rounds", fa.data.rounds, "Number of rounds T");
  c_fed->add_flag("--simulate", fa.simulate, "All clients in this process");
  c_fed->add_option("--serve", fa.serve, "Run the server on host:port");
  c_fed->add_option("--listen", fa.serve, "Alias of --serve");
  c_fed->add_option("--join", fa.join, "Join the server at host:port as a client");
  c_fed->add_option("--client-id", fa.client_id, "Client id for --join");
  c_fed->add_option("--port-file", fa.port_file, "With --serve: write the bound port here");
  c_fed->add_option("--idle-timeout", fa.idle_timeout_s, "Seconds without client traffic before aborting");
  c_fed->add_flag("--checkpoints", fa.checkpoints, "Keep every candidate model on disk");

  FinetuneArgs ft;
  auto* c_ft = app.add_subcommand("finetune", "Local fine-tuning from each client's selected model");
  c_ft->add_option("--data", ft.data.data, "Dataset directory")->required();
  c_ft->add_option("--federated", ft.federated, "Output directory of federate")->required();
  c_ft->add_option("--epochs", ft.epochs, "Fine-tuning epochs");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval-matrix", "Cross-site kappa matrix on the test splits");
  c_eval->add_option("--data", ev.data, "Dataset directory")->required();
  c_eval->add_option("--models", ev.models, "Directory with <site>/best.fkpv")->required();
  c_eval->add_option("--global", ev.global, "Global model to add as an extra row");
  c_eval->add_option("--name", ev.name, "Output file stem")->capture_default_str();

  ReportArgs rep;
  auto* c_rep = app.add_subcommand("report", "Summary of local, federated and fine-tuned kappas");
  c_rep->add_option("--local", rep.local, "Local matrix CSV")->required();
  c_rep->add_option("--federated", rep.federated, "Federated matrix CSV")->required();
  c_rep->add_option("--finetuned", rep.finetuned, "Fine-tuned matrix CSV (diagonal used)");

  ExperimentArgs ex;
  auto* c_ex = app.add_subcommand("experiment", "gen-data, train-local, federate, finetune, eval-matrix and report");
  c_ex->add_option("--scale", ex.gen.scale, "Divide the default site sizes by this factor")->capture_default_str();
  c_ex->add_option("--sites", ex.gen.sites, "Keep only the first N default sites");
  c_ex->add_option("--resolution", ex.gen.resolution, "Image resolution");
  c_ex->add_option("--rounds", ex.rounds, "Number of rounds T");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*c_gen) cmd_gen_data(g, gen);
    if (*c_local) cmd_train_local(g, local);
    if (*c_fed) cmd_federate(g, fa);
    if (*c_ft) cmd_finetune(g, ft);
    if (*c_eval) cmd_eval(g, ev);
    if (*c_rep) cmd_report(g, rep);
    if (*c_ex) cmd_experiment(g, ex);
  } catch (const FederationAborted& e) {
    std::cerr << "error: FederationAborted in round " << e.round() << ": " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.code()) << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
