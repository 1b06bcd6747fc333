#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedmap/analysis.hpp"
#include "fedmap/baselines.hpp"
#include "fedmap/data_synth.hpp"
#include "fedmap/json_io.hpp"

namespace fedmap {

struct ModelConfig {
  std::string preset = "mlp";
  std::vector<Index> hidden{32, 16};
  std::vector<Index> branch_dims;
  double dropout = 0.0;
};

struct FinetuneConfig {
  std::optional<int> epochs;  // defaults to the local epoch count e
  std::optional<double> lr;   // defaults to the optimiser's rate
};

struct TierThresholds {
  Index low = 100;
  Index high = 400;
};

struct FederationConfig {
  StrategyKind strategy = StrategyKind::FedMap;
  /// Further strategies evaluated on the same cohort and splits.
  std::vector<StrategyKind> baselines;
  ModelConfig model;
  std::string loss = "auto";  // "auto", "cross-entropy" or "cox"
  FedMapHyper fedmap;
  PriorHyper prior;
  OptimizerConfig optimizer;
  FinetuneConfig finetune;
  std::optional<PartitionSpec> partition;
  std::string cohort;  // manifest path, used when partition is absent
  TierThresholds tiers;
  std::vector<std::string> metrics;  // empty: task default
  /// Stop T1 early when the mean held-out loss has not improved for `patience` rounds.
  bool round_early_stopping = false;
  int round_patience = 5;
  std::uint64_t seed = 0;
  std::string output_dir;

  void validate() const;
};

/// Per-preset training defaults (batch size, dropout, weight decay, e, T).
void apply_preset_defaults(FederationConfig& config, const std::string& preset);

FederationConfig parse_config(const nlohmann::json& j);
FederationConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const FederationConfig& config);
/// FNV-1a of the canonical JSON serialisation, as 16 hex digits.
std::string config_hash(const FederationConfig& config);

std::vector<std::string> default_metrics(Task task);

// ---------------------------------------------------------------------------
// Data preparation

struct SiteSplit {
  std::vector<Index> train;
  std::vector<Index> test;
};

/// 80/20 split stratified by outcome, keyed only by (seed, site id).
SiteSplit split_site(const SiteDataset& site, std::uint64_t seed, double test_fraction = 0.2);

/// A site's standardised train and test parts.
struct PreparedSite {
  SiteDataset train;
  SiteDataset test;
  Tier tier = Tier::T1;
};
std::vector<PreparedSite> prepare_sites(const std::vector<SiteDataset>& sites, std::uint64_t seed);

ModelPreset build_preset(const FederationConfig& config, Task task, Index input_dim, Index classes);

// ---------------------------------------------------------------------------
// Running

struct MetricRow {
  std::string run_id;
  std::string strategy;
  std::string tier;
  std::string site_id;
  Index n_train = 0;
  Index n_test = 0;
  std::string metric;
  double value = 0.0;
};

/// Named metric values of one model on one test set. NaN when undefined.
std::vector<std::pair<std::string, double>> evaluate_metrics(const ModelPreset& preset, const ParamVector& theta,
                                                             const SiteDataset& test,
                                                             const std::vector<std::string>& metrics);

struct StrategyOutcome {
  StrategyKind kind = StrategyKind::FedMap;
  std::vector<RoundReport> rounds;
  std::optional<PriorState> prior;  // absent for individual training
};

struct RunResult {
  std::string run_id;
  std::string config_hash;
  std::vector<MetricRow> rows;
  std::vector<StrategyOutcome> strategies;
  std::string digest;  // git blob SHA-1 of metrics.csv
  double wall_seconds = 0.0;
};

/// Full tier pipeline for the primary strategy and every baseline; writes
/// metrics.csv, rounds.jsonl, skew.json, checkpoints/ and manifest.json under
/// `out_dir` when it is non-empty.
RunResult run_experiment(const FederationConfig& config, const std::filesystem::path& out_dir = {});

std::string metrics_csv(const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);

/// SHA-1 over "blob <size>\0<content>", as git computes object ids.
std::string git_blob_sha1(const std::string& content);

// ---------------------------------------------------------------------------
// Checkpoints: round_NNNN.json header plus round_NNNN.bin of little-endian f64.

struct Checkpoint {
  int round = 0;
  std::string strategy;
  std::string config_hash;
  std::uint64_t seed = 0;
  PriorState prior;
  std::vector<std::string> site_ids;
  std::vector<ParamVector> thetas;
};

void write_checkpoint(const std::filesystem::path& dir, const Checkpoint& cp);
Checkpoint read_checkpoint(const std::filesystem::path& header);

// ---------------------------------------------------------------------------
// Reports over a finished run directory

/// Writes reports/tier_summary.{csv,json}; returns the CSV path.
std::filesystem::path tier_summary_report(const std::filesystem::path& run_dir);

/// Pairs the run's "individual" rows with a federated strategy's (default: the
/// run's primary strategy) on one metric (default: the first configured) and
/// writes reports/gain_regression.{csv,json}; returns the CSV path.
std::filesystem::path gain_regression_report(const std::filesystem::path& run_dir, const std::string& metric = {},
                                             const std::string& strategy = {});

/// Command-line entry point. 0 success, 1 usage or validation error, 2 runtime failure.
int cli(int argc, char** argv);

}  // namespace fedmap
