#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "encvit/attacks.hpp"
#include "encvit/dataset.hpp"
#include "encvit/ensemble.hpp"

namespace encvit {

/// Sub-model i is initialized and shuffled from derive_seed(train.rng_seed,
/// kSubmodelStream, i); the baseline uses train.rng_seed itself.
inline constexpr std::uint64_t kSubmodelStream = 0x5355424d;

struct TrainedModel {
  std::shared_ptr<const VitParams<float>> params;
  double val_accuracy = 0;
  std::vector<EpochStats> trace;
};

/// Plain-trained model (the 0-key reference), validated on `val`.
TrainedModel train_baseline(const Dataset& train, const Dataset& val, const VitConfig& model,
                            const TrainConfig& config);

/// One model per key, each trained and validated on images encrypted with
/// its own key. `jobs` models train concurrently.
std::vector<SubModel> train_submodels(const Dataset& train, const Dataset& val,
                                      const KeySet& keys, const VitConfig& model,
                                      const TrainConfig& config, unsigned jobs = 1,
                                      std::vector<std::vector<EpochStats>>* traces = nullptr);

struct ReportRow {
  std::string model;
  std::size_t n = 1;
  std::string policy;
  std::size_t leaked_keys = 0;
  double clean = 0;
  std::optional<double> pgd_ce, pgd_targeted, square;
  double aa = 0;
  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

struct EvalReport {
  std::string experiment;
  std::vector<ReportRow> rows;
  /// Seeds, budgets and sizes, in insertion order.
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<std::string> deviations;
};

/// Label of the worst-case column.
inline constexpr const char* kAaLabel = "AA (FAB-t omitted)";

/// Deviations stamped into every experiment report.
std::vector<std::string> standard_deviations();

enum class ReportFormat { csv, json };

/// CSV columns, fixed: model,N,policy,leaked_keys,clean,pgd_ce,pgd_t,square,aa
/// (percent, two decimals; empty when the attack was not run). The JSON
/// variant carries the same rows plus metadata and deviations.
std::string emit_report(const EvalReport& report, ReportFormat format);
std::vector<ReportRow> parse_report_csv(const std::string& csv);

/// Everything the experiment runners share.
struct ExperimentContext {
  const Dataset* test = nullptr;  // evaluation images (plain)
  std::shared_ptr<const VitParams<float>> baseline;
  /// Sub-models for the largest N; smaller N use a prefix.
  const EnsembleModel* pool = nullptr;
  SuiteConfig suite;
  /// Results keyed by row identity, so rows shared between experiments run once.
  std::map<std::string, SuiteResult>* cache = nullptr;
};

/// Baseline (white-box), one encrypted sub-model, simple and random
/// ensembles of n sub-models; gradient attacks on encrypted targets come
/// from the 0-key surrogate.
EvalReport experiment_model_comparison(const ExperimentContext& ctx, std::size_t n);

/// Simple and random ensembles for each N.
EvalReport experiment_submodel_count(const ExperimentContext& ctx,
                                     const std::vector<std::size_t>& ns);

/// Random ensemble of n under pgd_ce with k leaked keys for each k; k = 0
/// uses the plain baseline as surrogate.
EvalReport experiment_key_leak(const ExperimentContext& ctx, std::size_t n,
                               const std::vector<std::size_t>& leak_counts);

}  // namespace encvit
