// End-to-end checks of the fedkappa executable.

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <sstream>

#include "fedkappa/nn/model.hpp"
#include "fedkappa/nn/param_io.hpp"
#include "json.hpp"
#include "proc_util.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& root() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("fedkappa_cli_test_" + std::to_string(getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int log_counter = 0;

proc::Outcome cli(std::vector<std::string> args) {
  args.insert(args.begin(), FEDKAPPA_CLI_PATH);
  return proc::run(args, root() / ("log" + std::to_string(++log_counter) + ".txt"));
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

const std::vector<std::string> kSites = {"client1", "client2", "client3"};

// One small run shared by the tests below: 3 sites, 2 rounds.
struct Workspace {
  fs::path data = root() / "data";
  fs::path local = root() / "local";
  fs::path fed = root() / "fed";
  fs::path ft = root() / "ft";
  fs::path eval = root() / "eval";

  Workspace() {
    auto must = [](const proc::Outcome& o) { REQUIRE_MESSAGE(o.status == 0, o.output); };
    must(cli({"--seed", "5", "--out", data.string(), "-q", "gen-data", "--create", "--sites", "3", "--scale", "300",
              "--resolution", "12"}));
    must(cli({"--seed", "5", "--out", local.string(), "-q", "train-local", "--data", data.string(), "--rounds", "2"}));
    must(cli({"--seed", "5", "--out", fed.string(), "-q", "federate", "--simulate", "--data", data.string(),
              "--rounds", "2"}));
    must(cli({"--seed", "5", "--out", ft.string(), "-q", "finetune", "--data", data.string(), "--federated",
              fed.string(), "--epochs", "1"}));
    must(cli({"--out", eval.string(), "-q", "eval-matrix", "--data", data.string(), "--models", local.string(),
              "--name", "local"}));
    must(cli({"--out", eval.string(), "-q", "eval-matrix", "--data", data.string(), "--models", fed.string(),
              "--global", (fed / "global.fkpv").string(), "--name", "federated"}));
    must(cli({"--out", eval.string(), "-q", "eval-matrix", "--data", data.string(), "--models", ft.string(),
              "--name", "finetuned"}));
  }
};

Workspace& workspace() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_CASE("zero rounds is rejected as InvalidConfig") {
  auto& w = workspace();
  const auto o = cli({"--out", (root() / "t0").string(), "federate", "--simulate", "--data", w.data.string(),
                      "--rounds", "0"});
  CHECK(o.status == 2);
  CHECK(o.output.find("InvalidConfig") != std::string::npos);
}

TEST_CASE("gen-data into a missing directory needs --create") {
  const auto missing = root() / "nope" / "deeper";
  const auto o = cli({"--out", missing.string(), "gen-data", "--sites", "2", "--scale", "300"});
  CHECK(o.status == 2);
  CHECK(o.output.find("IoError") != std::string::npos);
  CHECK_FALSE(fs::exists(missing));
}

TEST_CASE("eval-matrix writes a K x K table") {
  auto& w = workspace();
  const auto rows = lines_of(proc::slurp(w.eval / "local.csv"));
  REQUIRE(rows.size() == kSites.size() + 1);
  for (const auto& row : rows) CHECK(std::count(row.begin(), row.end(), ',') == static_cast<long>(kSites.size()));
  for (std::size_t i = 0; i < kSites.size(); ++i) CHECK(rows[i + 1].rfind(kSites[i] + ",", 0) == 0);

  // The global model adds one row, and no column.
  const auto fed_rows = lines_of(proc::slurp(w.eval / "federated.csv"));
  CHECK(fed_rows.size() == kSites.size() + 2);
}

TEST_CASE("report lists local, federated and fine-tuned kappa per site, byte-identically") {
  auto& w = workspace();
  auto report = [&](const fs::path& out) {
    return cli({"--out", out.string(), "-q", "report", "--local", (w.eval / "local.csv").string(), "--federated",
                (w.eval / "federated.csv").string(), "--finetuned", (w.eval / "finetuned.csv").string()});
  };
  const auto a = report(root() / "rep_a");
  const auto b = report(root() / "rep_b");
  REQUIRE_MESSAGE(a.status == 0, a.output);
  REQUIRE(b.status == 0);

  for (const auto& site : kSites) {
    const auto lines = lines_of(a.output);
    const auto it = std::find_if(lines.begin(), lines.end(), [&](const std::string& l) {
      return l.rfind(site + " ", 0) == 0;
    });
    REQUIRE_MESSAGE(it != lines.end(), site);
    std::istringstream fields(*it);
    std::string name, v1, v2, v3, extra;
    fields >> name >> v1 >> v2 >> v3;
    CHECK_FALSE(v3.empty());
    CHECK_FALSE(static_cast<bool>(fields >> extra));
  }

  for (const char* f : {"report.txt", "summary.json", "local.csv", "federated.csv", "finetuned.csv"}) {
    CHECK_MESSAGE(proc::slurp(root() / "rep_a" / f) == proc::slurp(root() / "rep_b" / f), f);
  }
}

TEST_CASE("each saved model is the history entry with the highest validation kappa") {
  auto& w = workspace();
  for (const auto& dir : {w.local, w.fed, w.ft}) {
    for (const auto& site : kSites) {
      const auto history = lines_of(proc::slurp(dir / site / "history.jsonl"));
      REQUIRE_FALSE(history.empty());
      double best = -2.0;
      std::string best_digest;
      for (const auto& line : history) {
        const auto j = nlohmann::json::parse(line);
        if (j["val_kappa"].is_null()) continue;
        const double k = j["val_kappa"].get<double>();
        if (k > best) {
          best = k;
          best_digest = j["digest"].get<std::string>();
        }
      }
      REQUIRE_FALSE(best_digest.empty());
      const auto params = fedkappa::nn::load_params(dir / site / "best.fkpv");
      CHECK_MESSAGE(fedkappa::to_hex(fedkappa::nn::params_digest(params)) == best_digest, (dir / site).string());
    }
  }
}

TEST_CASE("a missing upstream artifact is reported by path") {
  auto& w = workspace();
  const auto manifest = nlohmann::json::parse(proc::slurp(w.fed / "manifest-federate.json"));
  fs::path victim;
  for (const auto& a : manifest["artifacts"]) {
    const fs::path p = a.get<std::string>();
    if (p.filename() == "best.fkpv") {
      victim = p;
      break;
    }
  }
  REQUIRE_FALSE(victim.empty());
  const auto copy = root() / "fed_broken";
  fs::copy(w.fed, copy, fs::copy_options::recursive);
  const auto removed = copy / fs::relative(victim, w.fed);
  REQUIRE(fs::remove(removed));

  const auto o = cli({"--out", (root() / "ft_broken").string(), "finetune", "--data", w.data.string(),
                      "--federated", copy.string(), "--epochs", "1"});
  CHECK(o.status == 2);
  CHECK(o.output.find("IoError") != std::string::npos);
  CHECK_MESSAGE(o.output.find(removed.string()) != std::string::npos, o.output);
}
