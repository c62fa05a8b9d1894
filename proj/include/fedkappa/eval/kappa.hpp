#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedkappa/data/site.hpp"
#include "fedkappa/nn/model.hpp"

namespace fedkappa::eval {

enum class Weighting { Linear, Quadratic, None };

/// counts[t][p]: rows are ground truth, columns prediction.
struct ConfusionMatrix {
  std::vector<std::vector<std::uint64_t>> counts;

  static ConfusionMatrix from_labels(std::span<const int> y_true, std::span<const int> y_pred, int num_classes);
  std::uint64_t total() const;
};

/// Cohen's weighted kappa, (p_o - p_e) / (1 - p_e), in double. Linear
/// agreement weights are 1 - |i - j| / (C - 1).
/// Throws InvalidShape on empty or mismatched inputs, InvalidLabel on labels
/// outside [0, C), DegenerateMarginals when 1 - p_e vanishes.
double weighted_kappa(std::span<const int> y_true, std::span<const int> y_pred, int num_classes = 4,
                      Weighting weighting = Weighting::Linear);
double weighted_kappa(const ConfusionMatrix& cm, Weighting weighting = Weighting::Linear);

/// argmax of the element-wise mean of `probs`; ties go to the lower class.
int patient_argmax(const std::vector<std::vector<double>>& probs);

struct PatientPrediction {
  std::uint32_t patient_id = 0;
  int label = 0;
  int predicted = 0;
};

/// Softmax outputs of every image in `split`, averaged per patient. Sorted by
/// patient id. Throws EmptySplit if the split has no images.
std::vector<PatientPrediction> patient_level_predict(const nn::ModelSpec& spec, const nn::ParamVector& params,
                                                     const data::SiteDataset& site, data::Split split);

/// Kappa of patient-level predictions on one split.
double split_kappa(const nn::ModelSpec& spec, const nn::ParamVector& params, const data::SiteDataset& site,
                   data::Split split, Weighting weighting = Weighting::Linear);

/// values[i][j]: model i on site j's test split. A cell with degenerate
/// marginals is std::nullopt.
struct KappaMatrix {
  std::vector<std::string> site_ids;
  std::vector<std::vector<std::optional<double>>> values;
  std::optional<std::vector<std::optional<double>>> global_row;

  std::size_t size() const noexcept { return site_ids.size(); }
  void validate() const;
  bool operator==(const KappaMatrix&) const = default;
};

KappaMatrix cross_site_matrix(const nn::ModelSpec& spec, const std::vector<nn::ParamVector>& models,
                              const std::vector<data::SiteDataset>& sites,
                              const std::optional<nn::ParamVector>& global = std::nullopt,
                              Weighting weighting = Weighting::Linear, unsigned threads = 0);

/// Builds a fully defined matrix from plain numbers.
KappaMatrix make_matrix(std::vector<std::string> site_ids, const std::vector<std::vector<double>>& values);

struct SummaryStats {
  double diag_mean = 0;
  double offdiag_mean = 0;
  std::size_t diag_count = 0;     ///< defined diagonal cells used
  std::size_t offdiag_count = 0;  ///< defined off-diagonal cells used
  std::optional<double> rel_improvement_diag;
  std::optional<double> rel_improvement_offdiag;
};

/// Means over defined cells; relative improvements (new - base) / base on the
/// unrounded means when a baseline is given. Throws InvalidShape on K
/// mismatch.
SummaryStats summarize(const KappaMatrix& matrix, const std::optional<KappaMatrix>& baseline = std::nullopt);

/// CSV: header "model,<site ids>", then one row per model (and "global" if
/// present). Values use %.6g; undefined cells are "NA".
std::string matrix_to_csv(const KappaMatrix& matrix);
KappaMatrix matrix_from_csv(std::string_view text);

struct ReportInputs {
  KappaMatrix local;
  KappaMatrix federated;
  /// Diagonal only: kappa of each site's fine-tuned model on its own test set.
  std::optional<std::vector<std::optional<double>>> finetuned_diag;
};

/// Writes local.csv, federated.csv, finetuned.csv (when present),
/// summary.json and report.txt into `dir`. Returns the written paths.
std::vector<std::filesystem::path> emit_report(const std::filesystem::path& dir, const ReportInputs& inputs);

/// The text report alone.
std::string render_report(const ReportInputs& inputs);

}  // namespace fedkappa::eval
