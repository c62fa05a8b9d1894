#include "fedkappa/eval/kappa.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <sstream>
#include <thread>

#include "fedkappa/common/bytes.hpp"
#include "fedkappa/common/error.hpp"
#include "fedkappa/common/kv_config.hpp"
#include "json.hpp"

namespace fedkappa::eval {

using data::SiteDataset;
using data::Split;
using nn::ModelSpec;
using nn::ParamVector;
using nn::Tensor;

ConfusionMatrix ConfusionMatrix::from_labels(std::span<const int> y_true, std::span<const int> y_pred,
                                             int num_classes) {
  if (num_classes < 2) throw Error(ErrorCode::InvalidShape, "kappa needs at least 2 classes");
  if (y_true.size() != y_pred.size()) {
    throw Error(ErrorCode::InvalidShape, "label sequences differ in length (" + std::to_string(y_true.size()) +
                                             " vs " + std::to_string(y_pred.size()) + ")");
  }
  if (y_true.empty()) throw Error(ErrorCode::InvalidShape, "label sequences are empty");
  const auto c = static_cast<std::size_t>(num_classes);
  ConfusionMatrix cm;
  cm.counts.assign(c, std::vector<std::uint64_t>(c, 0));
  for (std::size_t k = 0; k < y_true.size(); ++k) {
    const int t = y_true[k];
    const int p = y_pred[k];
    if (t < 0 || t >= num_classes || p < 0 || p >= num_classes) {
      throw Error(ErrorCode::InvalidLabel, "label pair (" + std::to_string(t) + ", " + std::to_string(p) +
                                               ") outside [0, " + std::to_string(num_classes) + ")");
    }
    ++cm.counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
  }
  return cm;
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t n = 0;
  for (const auto& row : counts) {
    for (auto v : row) n += v;
  }
  return n;
}

namespace {

std::uint64_t disagreement(std::size_t i, std::size_t j, Weighting w) {
  const std::uint64_t d = i > j ? i - j : j - i;
  switch (w) {
    case Weighting::Linear: return d;
    case Weighting::Quadratic: return d * d;
    case Weighting::None: return d == 0 ? 0 : 1;
  }
  return 0;
}

}  // namespace

double weighted_kappa(const ConfusionMatrix& cm, Weighting weighting) {
  const std::size_t c = cm.counts.size();
  if (c < 2) throw Error(ErrorCode::InvalidShape, "kappa needs at least 2 classes");
  for (const auto& row : cm.counts) {
    if (row.size() != c) throw Error(ErrorCode::InvalidShape, "confusion matrix is not square");
  }
  const std::uint64_t n = cm.total();
  if (n == 0) throw Error(ErrorCode::InvalidShape, "confusion matrix is empty");

  // kappa = 1 - (1 - p_o) / (1 - p_e) = 1 - n * sum(d * O) / sum(d * r_i * c_j)
  // with integer disagreement weights d, so everything before the final
  // division is exact.
  std::vector<std::uint64_t> rows(c, 0), cols(c, 0);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      rows[i] += cm.counts[i][j];
      cols[j] += cm.counts[i][j];
    }
  }
  unsigned __int128 observed = 0, expected = 0;
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const std::uint64_t d = disagreement(i, j, weighting);
      observed += static_cast<unsigned __int128>(d) * cm.counts[i][j];
      expected += static_cast<unsigned __int128>(d) * rows[i] * cols[j];
    }
  }
  if (expected == 0) throw Error(ErrorCode::DegenerateMarginals, "chance agreement is 1; kappa undefined");
  const unsigned __int128 a = observed * n;
  const auto diff = static_cast<__int128>(expected) - static_cast<__int128>(a);
  return static_cast<double>(diff) / static_cast<double>(expected);
}

double weighted_kappa(std::span<const int> y_true, std::span<const int> y_pred, int num_classes,
                      Weighting weighting) {
  return weighted_kappa(ConfusionMatrix::from_labels(y_true, y_pred, num_classes), weighting);
}

int patient_argmax(const std::vector<std::vector<double>>& probs) {
  if (probs.empty()) throw Error(ErrorCode::InvalidShape, "no probability vectors to average");
  const std::size_t c = probs.front().size();
  std::vector<double> sum(c, 0.0);
  for (const auto& p : probs) {
    if (p.size() != c) throw Error(ErrorCode::InvalidShape, "probability vectors differ in length");
    for (std::size_t k = 0; k < c; ++k) sum[k] += p[k];
  }
  const double n = static_cast<double>(probs.size());
  int best = 0;
  double best_value = sum[0] / n;
  for (std::size_t k = 1; k < c; ++k) {
    const double v = sum[k] / n;
    if (v > best_value) {
      best_value = v;
      best = static_cast<int>(k);
    }
  }
  return best;
}

std::vector<PatientPrediction> patient_level_predict(const ModelSpec& spec, const ParamVector& params,
                                                     const SiteDataset& site, Split split) {
  const auto idx = site.indices(split);
  if (idx.empty()) {
    throw Error(ErrorCode::EmptySplit,
                "site '" + site.site_id + "' has no " + std::string(data::to_string(split)) + " images");
  }
  if (site.resolution != spec.input_resolution) {
    throw Error(ErrorCode::SpecMismatch, "site resolution " + std::to_string(site.resolution) +
                                             " differs from model input " + std::to_string(spec.input_resolution));
  }
  const auto r = static_cast<std::size_t>(site.resolution);
  constexpr std::size_t kBatch = 64;
  std::map<std::uint32_t, std::vector<std::vector<double>>> probs;
  std::map<std::uint32_t, int> labels;
  for (std::size_t start = 0; start < idx.size(); start += kBatch) {
    const std::size_t b = std::min(kBatch, idx.size() - start);
    Tensor batch({b, r, r});
    for (std::size_t k = 0; k < b; ++k) {
      const auto src = site.images[idx[start + k]].data();
      std::copy(src.begin(), src.end(), batch.values().begin() + static_cast<std::ptrdiff_t>(k * r * r));
    }
    const auto rows = nn::softmax_rows(nn::forward(spec, params, batch));
    for (std::size_t k = 0; k < b; ++k) {
      const auto i = idx[start + k];
      probs[site.patient_ids[i]].push_back(rows[k]);
      labels[site.patient_ids[i]] = site.labels[i];
    }
  }
  std::vector<PatientPrediction> out;
  out.reserve(probs.size());
  for (const auto& [pid, p] : probs) out.push_back({pid, labels[pid], patient_argmax(p)});
  return out;
}

double split_kappa(const ModelSpec& spec, const ParamVector& params, const SiteDataset& site, Split split,
                   Weighting weighting) {
  const auto preds = patient_level_predict(spec, params, site, split);
  std::vector<int> t, p;
  for (const auto& x : preds) {
    t.push_back(x.label);
    p.push_back(x.predicted);
  }
  return weighted_kappa(t, p, spec.num_classes, weighting);
}

void KappaMatrix::validate() const {
  const auto k = site_ids.size();
  auto check_row = [&](const std::vector<std::optional<double>>& row) {
    if (row.size() != k) throw Error(ErrorCode::InvalidShape, "kappa matrix row has wrong length");
    for (const auto& v : row) {
      if (v && !(*v >= -1.0 - 1e-12 && *v <= 1.0 + 1e-12)) {
        throw Error(ErrorCode::Malformed, "kappa value outside [-1, 1]");
      }
    }
  };
  if (values.size() != k) throw Error(ErrorCode::InvalidShape, "kappa matrix is not K x K");
  for (const auto& row : values) check_row(row);
  if (global_row) check_row(*global_row);
}

KappaMatrix cross_site_matrix(const ModelSpec& spec, const std::vector<ParamVector>& models,
                              const std::vector<SiteDataset>& sites, const std::optional<ParamVector>& global,
                              Weighting weighting, unsigned threads) {
  if (models.size() != sites.size()) {
    throw Error(ErrorCode::InvalidShape, std::to_string(models.size()) + " models for " +
                                             std::to_string(sites.size()) + " sites");
  }
  const std::size_t k = sites.size();
  KappaMatrix m;
  for (const auto& s : sites) m.site_ids.push_back(s.site_id);
  m.values.assign(k, std::vector<std::optional<double>>(k));
  if (global) m.global_row.emplace(k);

  // Every cell is written by exactly one task into its own slot.
  const std::size_t rows = k + (global ? 1 : 0);
  const std::size_t cells = rows * k;
  auto cell = [&](std::size_t c) {
    const std::size_t i = c / k;
    const std::size_t j = c % k;
    const ParamVector& model = i < k ? models[i] : *global;
    std::optional<double> v;
    try {
      v = split_kappa(spec, model, sites[j], Split::Test, weighting);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DegenerateMarginals) throw;
    }
    if (i < k) {
      m.values[i][j] = v;
    } else {
      (*m.global_row)[j] = v;
    }
  };
  unsigned n_threads = threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : threads;
  n_threads = static_cast<unsigned>(std::min<std::size_t>(n_threads, cells));
  if (n_threads <= 1) {
    for (std::size_t c = 0; c < cells; ++c) cell(c);
    return m;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n_threads);
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < n_threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t c; (c = next.fetch_add(1)) < cells;) cell(c);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return m;
}

KappaMatrix make_matrix(std::vector<std::string> site_ids, const std::vector<std::vector<double>>& values) {
  KappaMatrix m;
  m.site_ids = std::move(site_ids);
  for (const auto& row : values) m.values.emplace_back(row.begin(), row.end());
  m.validate();
  return m;
}

SummaryStats summarize(const KappaMatrix& matrix, const std::optional<KappaMatrix>& baseline) {
  matrix.validate();
  SummaryStats s;
  double diag = 0, off = 0;
  const std::size_t k = matrix.size();
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const auto& v = matrix.values[i][j];
      if (!v) continue;
      if (i == j) {
        diag += *v;
        ++s.diag_count;
      } else {
        off += *v;
        ++s.offdiag_count;
      }
    }
  }
  s.diag_mean = s.diag_count ? diag / static_cast<double>(s.diag_count) : std::nan("");
  s.offdiag_mean = s.offdiag_count ? off / static_cast<double>(s.offdiag_count) : std::nan("");
  if (baseline) {
    if (baseline->size() != k) {
      throw Error(ErrorCode::InvalidShape, "baseline has K=" + std::to_string(baseline->size()) + ", matrix has K=" +
                                               std::to_string(k));
    }
    const auto base = summarize(*baseline);
    auto rel = [](double now, double before) -> std::optional<double> {
      if (!std::isfinite(now) || !std::isfinite(before) || before == 0) return std::nullopt;
      return (now - before) / before;
    };
    s.rel_improvement_diag = rel(s.diag_mean, base.diag_mean);
    s.rel_improvement_offdiag = rel(s.offdiag_mean, base.offdiag_mean);
  }
  return s;
}

namespace {

std::string fmt6(const std::optional<double>& v) {
  if (!v) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", *v);
  return buf;
}

std::string fixed(double v, int decimals) {
  if (!std::isfinite(v)) return "NA";
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string out = buf;
  // Tiny negative values print as "-0.00".
  if (out.front() == '-' && out.find_first_not_of("-0.") == std::string::npos) out.erase(0, 1);
  return out;
}

std::string percent(const std::optional<double>& v) {
  if (!v) return "NA";
  char buf[48];
  std::snprintf(buf, sizeof buf, "%+.2f%%", *v * 100.0);
  std::string out = buf;
  if (out == "-0.00%") out = "+0.00%";
  return out;
}

std::optional<double> parse_cell(const std::string& text) {
  if (text == "NA") return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size()) {
    throw Error(ErrorCode::Malformed, "bad matrix cell '" + text + "'");
  }
  return v;
}

}  // namespace

std::string matrix_to_csv(const KappaMatrix& matrix) {
  matrix.validate();
  std::string out = "model";
  for (const auto& id : matrix.site_ids) out += "," + id;
  out += "\n";
  auto row = [&](const std::string& name, const std::vector<std::optional<double>>& values) {
    out += name;
    for (const auto& v : values) out += "," + fmt6(v);
    out += "\n";
  };
  for (std::size_t i = 0; i < matrix.size(); ++i) row(matrix.site_ids[i], matrix.values[i]);
  if (matrix.global_row) row("global", *matrix.global_row);
  return out;
}

KappaMatrix matrix_from_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::Malformed, "empty matrix CSV");
  auto header = split_list(line);
  if (header.empty() || header.front() != "model") throw Error(ErrorCode::Malformed, "matrix CSV header must start with 'model'");
  KappaMatrix m;
  m.site_ids.assign(header.begin() + 1, header.end());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_list(line);
    if (cells.size() != header.size()) throw Error(ErrorCode::Malformed, "matrix CSV row has wrong width");
    std::vector<std::optional<double>> row;
    for (std::size_t c = 1; c < cells.size(); ++c) row.push_back(parse_cell(cells[c]));
    if (cells.front() == "global") {
      m.global_row = std::move(row);
    } else {
      if (m.values.size() >= m.site_ids.size() || cells.front() != m.site_ids[m.values.size()]) {
        throw Error(ErrorCode::Malformed, "unexpected matrix row '" + cells.front() + "'");
      }
      m.values.push_back(std::move(row));
    }
  }
  m.validate();
  return m;
}

namespace {

double mean_defined(const std::vector<std::optional<double>>& xs) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& x : xs) {
    if (x) {
      s += *x;
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : std::nan("");
}

nlohmann::json json_number(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

nlohmann::json json_number(const std::optional<double>& v) {
  return v ? json_number(*v) : nlohmann::json(nullptr);
}

void check_inputs(const ReportInputs& in) {
  in.local.validate();
  in.federated.validate();
  if (in.local.site_ids != in.federated.site_ids) {
    throw Error(ErrorCode::InvalidShape, "local and federated matrices list different sites");
  }
  if (in.finetuned_diag && in.finetuned_diag->size() != in.local.size()) {
    throw Error(ErrorCode::InvalidShape, "fine-tuned diagonal has the wrong length");
  }
}

}  // namespace

std::string render_report(const ReportInputs& in) {
  check_inputs(in);
  const auto local = summarize(in.local);
  const auto fed = summarize(in.federated, in.local);
  std::ostringstream os;
  os << "Cross-site kappa summary (" << in.local.size() << " sites)\n\n";
  os << "Per-site test kappa of each site's selected model\n";
  os << "site        local  federated  fine-tuned\n";
  for (std::size_t i = 0; i < in.local.size(); ++i) {
    char line[128];
    const auto ft = in.finetuned_diag ? (*in.finetuned_diag)[i] : std::nullopt;
    std::snprintf(line, sizeof line, "%-10s %6s %10s %11s\n", in.local.site_ids[i].c_str(),
                  in.local.values[i][i] ? fixed(*in.local.values[i][i], 4).c_str() : "NA",
                  in.federated.values[i][i] ? fixed(*in.federated.values[i][i], 4).c_str() : "NA",
                  ft ? fixed(*ft, 4).c_str() : "NA");
    os << line;
  }
  os << "\n";
  auto block = [&](const char* name, const SummaryStats& s) {
    os << name << "\n";
    os << "  diag. mean      " << fixed(s.diag_mean, 2) << "  (" << fixed(s.diag_mean, 6) << ", " << s.diag_count
       << " cells)\n";
    os << "  off-diag. mean  " << fixed(s.offdiag_mean, 2) << "  (" << fixed(s.offdiag_mean, 6) << ", "
       << s.offdiag_count << " cells)\n";
  };
  block("Local training only", local);
  block("After federated learning", fed);
  os << "\nRelative improvement (unrounded means)\n";
  os << "  diag.      " << percent(fed.rel_improvement_diag) << "\n";
  os << "  off-diag.  " << percent(fed.rel_improvement_offdiag) << "\n";
  if (in.federated.global_row) {
    os << "\nGlobal model test kappa\n";
    for (std::size_t j = 0; j < in.federated.size(); ++j) {
      os << "  " << in.federated.site_ids[j] << "  " << ((*in.federated.global_row)[j] ? fixed(*(*in.federated.global_row)[j], 4) : "NA") << "\n";
    }
  }
  if (in.finetuned_diag) {
    std::size_t better = 0, defined = 0;
    for (std::size_t i = 0; i < in.local.size(); ++i) {
      const auto& ft = (*in.finetuned_diag)[i];
      const auto& fl = in.federated.values[i][i];
      if (ft && fl) {
        ++defined;
        better += *ft >= *fl;
      }
    }
    os << "\nFine-tuning\n";
    os << "  diag. mean      " << fixed(mean_defined(*in.finetuned_diag), 2) << "  ("
       << fixed(mean_defined(*in.finetuned_diag), 6) << ")\n";
    os << "  sites at or above federated kappa: " << better << " of " << defined << "\n";
  }
  return os.str();
}

std::vector<std::filesystem::path> emit_report(const std::filesystem::path& dir, const ReportInputs& in) {
  check_inputs(in);
  std::vector<std::filesystem::path> written;
  auto put = [&](const std::string& name, const std::string& text) {
    const auto path = dir / name;
    write_text_file(path, text);
    written.push_back(path);
  };
  put("local.csv", matrix_to_csv(in.local));
  put("federated.csv", matrix_to_csv(in.federated));
  if (in.finetuned_diag) {
    std::string csv = "site,kappa\n";
    for (std::size_t i = 0; i < in.local.size(); ++i) {
      csv += in.local.site_ids[i] + "," + fmt6((*in.finetuned_diag)[i]) + "\n";
    }
    put("finetuned.csv", csv);
  }

  const auto local = summarize(in.local);
  const auto fed = summarize(in.federated, in.local);
  nlohmann::ordered_json j;
  j["diag_mean"] = json_number(fed.diag_mean);
  j["offdiag_mean"] = json_number(fed.offdiag_mean);
  j["rel_improvement_diag"] = json_number(fed.rel_improvement_diag);
  j["rel_improvement_offdiag"] = json_number(fed.rel_improvement_offdiag);
  j["local_diag_mean"] = json_number(local.diag_mean);
  j["local_offdiag_mean"] = json_number(local.offdiag_mean);
  if (in.finetuned_diag) j["finetuned_diag_mean"] = json_number(mean_defined(*in.finetuned_diag));
  j["sites"] = in.local.site_ids;
  put("summary.json", j.dump(2) + "\n");
  put("report.txt", render_report(in));
  return written;
}

}  // namespace fedkappa::eval
