#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedmap/models.hpp"

namespace fedmap {

/// Covariate-driven site assignment: the covariate (feature `covariate`,
/// mapped to covariate_mean + covariate_sd * z) is accepted at even-numbered
/// sites with probability f(x; midpoint) and at odd-numbered sites with
/// 1 - f(x; complement_midpoint), where f(x; x0) = L / (1 + exp(-k (x - x0))).
struct LogisticAssignment {
  double amplitude = 1.0;
  double steepness = 0.2;
  double midpoint = 60.0;
  double complement_midpoint = 40.0;
  Index covariate = 0;
  double covariate_mean = 50.0;
  double covariate_sd = 10.0;
};

enum class SizeLaw { LogNormal, Fixed };

struct PartitionSpec {
  Index num_sites = 10;
  SizeLaw size_law = SizeLaw::LogNormal;
  double size_mean = 400.0;
  double size_cv = 1.0;
  std::vector<Index> fixed_sizes{400};  // cycled over sites
  Index min_size = 20;
  /// Dirichlet concentration of per-site class priors around the global prior.
  double dirichlet = 1.0;
  /// Global positive-class rate (classification) or target event fraction (survival).
  double positive_rate = 0.3;
  /// Per-site class rates are clamped into [rate_floor, 1 - rate_floor].
  double rate_floor = 0.0;
  Index num_classes = 2;
  Index num_features = 10;
  Index informative = 5;
  double signal = 1.0;
  /// Scale of the per-site affine map x -> (I + s G_k) x + b_k.
  double feature_skew = 0.5;
  bool survival = false;
  std::optional<LogisticAssignment> logistic;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const PartitionSpec& spec);
/// Strict parse; unknown keys and bad values raise ConfigError with a JSON pointer.
PartitionSpec partition_spec_from_json(const nlohmann::json& j, const std::string& pointer = "");

/// f(x) = L / (1 + exp(-k (x - x0))).
double logistic_assign(double x, double amplitude, double steepness, double midpoint);

std::string site_name(Index k);

/// Deterministic per seed; site k draws from a stream keyed by its id.
std::vector<SiteDataset> generate_cohort(const PartitionSpec& spec);

/// Exact W1 between the empirical distributions of a and b:
/// integral over u in (0,1) of |F_a^-1(u) - F_b^-1(u)|.
double wasserstein_1d(std::span<const double> a, std::span<const double> b);

struct SkewReport {
  std::vector<std::string> site_ids;
  std::vector<Index> sizes;
  double size_cv = 0.0;
  std::vector<double> positive_ratios;
  double positive_ratio_mean = 0.0;
  double positive_ratio_sd = 0.0;
  double positive_ratio_cv = 0.0;
  Index feature = 0;
  MatrixXd wasserstein;
  double wasserstein_mean = 0.0;
  double wasserstein_sd = 0.0;
  std::vector<std::string> single_class_sites;
};

/// Class label (or event flag for survival) of every row.
std::vector<int> outcome_labels(const SiteDataset& site);

/// Feature with the largest pooled |AUROC - 1/2| against the outcome.
Index most_predictive_feature(std::span<const SiteDataset> sites);

/// feature < 0 selects most_predictive_feature. Standard deviations are
/// population; W1 is measured after dividing the feature by its pooled sd.
SkewReport skew_report(std::span<const SiteDataset> sites, Index feature = -1);
nlohmann::json to_json(const SkewReport& report);

/// N > high -> T1, low <= N <= high -> T2, N < low -> T3.
Tier tier_for_size(Index n, Index low, Index high);
void assign_tiers(std::vector<SiteDataset>& sites, Index low, Index high);

/// One CSV per site (features f0.., then label or time,event) and manifest.json.
void write_cohort(const std::filesystem::path& dir, std::span<const SiteDataset> sites, const nlohmann::json& spec);
std::vector<SiteDataset> read_cohort(const std::filesystem::path& manifest);

}  // namespace fedmap
