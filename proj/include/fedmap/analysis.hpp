#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedmap/fedmap_core.hpp"

namespace fedmap {

// ---------------------------------------------------------------------------
// Metrics. Labels are 0/1.

/// P(score of a random positive > score of a random negative), ties count 1/2.
double auroc(std::span<const double> scores, std::span<const int> labels);

struct BinaryRates {
  double sensitivity = 0.0;
  double specificity = 0.0;
  double balanced_accuracy = 0.0;
};
BinaryRates balanced_accuracy(std::span<const int> predictions, std::span<const int> labels);
inline double balanced_accuracy(double sensitivity, double specificity) { return 0.5 * (sensitivity + specificity); }

/// Harrell's concordance: over pairs with t_i < t_j and event_i, the fraction
/// with risk_i > risk_j; ties in risk count 1/2.
double c_index(std::span<const double> risks, std::span<const double> times, std::span<const int> events);

double brier(std::span<const double> probabilities, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Statistics

/// Average ranks (1-based); tied values share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);

struct PairedSample {
  std::vector<std::string> site_ids;
  std::vector<double> a;
  std::vector<double> b;

  void validate() const;
};

enum class WilcoxonMethod { Auto, Exact, Normal };

struct WilcoxonResult {
  double statistic = 0.0;  // W+ : sum of ranks of positive differences b - a
  double p_value = 1.0;    // two-sided
  Index n = 0;             // pairs left after dropping zero differences
  bool exact = false;
};

/// Exact null distribution for n <= 20 under Auto; normal approximation with
/// continuity and tie correction above.
WilcoxonResult wilcoxon_signed_rank(const PairedSample& pairs, WilcoxonMethod method = WilcoxonMethod::Auto);

double spearman(std::span<const double> x, std::span<const double> y);

struct GainRow {
  std::string site_id;
  double baseline = 0.0;
  double federated = 0.0;
  double absolute_gain = 0.0;
  double relative_gain = 0.0;  // (federated - baseline) / baseline
};

struct GainRegression {
  std::vector<GainRow> rows;
  std::vector<std::string> excluded;  // sites with a zero baseline
  double spearman_r = 0.0;            // NaN when undefined
  double slope = 0.0;
  double intercept = 0.0;
};

/// Per-site relative gain of `pairs.b` (federated) over `pairs.a` (individual)
/// and a least-squares fit of gain on baseline.
GainRegression gain_regression(const PairedSample& pairs);

// ---------------------------------------------------------------------------
// Theory verification on convex instances

/// Site k has loss L_k(theta) = N_k * 1/2 |theta - a_k|^2, so the mean loss is
/// 1/2 |theta - a_k|^2 for any batch.
class QuadraticAnchorLoss final : public LocalLoss {
 public:
  QuadraticAnchorLoss(ParamVector anchor, Index count);
  Index size() const override { return count_; }
  Index dim() const override { return anchor_.size(); }
  std::optional<ad::Var> record(ad::Tape& tape, ad::Var theta, std::span<const Index> rows,
                                Rng* dropout_rng) const override;

 private:
  ParamVector anchor_;
  Index count_;
};

struct ConvexInstance {
  std::vector<ParamVector> anchors;
  std::vector<Index> counts;
  double alpha = 0.1;
  double epsilon = 1e-3;
  /// Fixed ICNN term; when set only mu is treated as the outer variable.
  std::optional<IcnnParams> icnn;

  Index dim() const { return anchors.empty() ? 0 : anchors.front().size(); }
  Index num_sites() const { return static_cast<Index>(anchors.size()); }
  double total_count() const;
  void validate() const;
  PriorState prior(const ParamVector& mu) const;
  std::vector<QuadraticAnchorLoss> losses() const;
};

/// Random instance: anchors ~ N(0, scale^2), counts uniform in [lo, hi].
ConvexInstance random_instance(Index q, Index d, double alpha, double epsilon, Rng& rng, Index count_lo = 10,
                               Index count_hi = 200, double scale = 1.0);

struct BilevelSolution {
  ParamVector mu;
  std::vector<ParamVector> thetas;
  double envelope = 0.0;
};

/// Closed form for f_psi == 0: with c = 1 + 2 alpha + 2 eps,
///   theta_k*(mu) = (a_k + 2 alpha mu) / c,
///   mu* = alpha * abar / (c (alpha + eps) - 2 alpha^2),  abar = sum N_k a_k / sum N_k.
BilevelSolution bilevel_oracle(const ConvexInstance& inst);

/// M(mu) = sum_k N_k min_theta [1/2 |theta - a_k|^2 + R(theta; mu)] using
/// inner solves to `inner_tol`; the minimisers are written to `thetas` if given.
double envelope(const ConvexInstance& inst, const ParamVector& mu, double inner_tol,
                std::vector<ParamVector>* thetas = nullptr);

/// sum_k N_k grad_mu R(theta_k*(mu); mu) at inner-solved theta_k*.
ParamVector envelope_gradient(const ConvexInstance& inst, const ParamVector& mu, double inner_tol);

/// Largest step for which theory-mode iterates contract monotonically on a
/// quadratic instance: 1 / (2 S (alpha + eps)), S = sum N_k.
double safe_theory_step(const ConvexInstance& inst);

struct DanskinReport {
  double max_relative_error = 0.0;
  Index worst_point = -1;
  std::vector<double> errors;  // one per point
};

/// max_i |g_i - fd_i| / max(|g|_inf, floor) for each point, g the Danskin
/// gradient and fd central differences of M with step h.
DanskinReport verify_danskin(const ConvexInstance& inst, std::span<const ParamVector> points, double inner_tol,
                             double h, double floor = 1e-8);

/// Minimum over pairs of M(mu1)/2 + M(mu2)/2 - M(mid) - q eps |(mu1 - mu2)/2|^2.
/// Throws NumericalError with the witness pair when it falls below -tolerance.
ConvexityReport verify_m_convexity(const ConvexInstance& inst, const std::vector<ConvexityPair>& pairs,
                                   double inner_tol, double tolerance = 1e-8);

struct TheoryConvergence {
  int rounds = 0;
  double final_mu_error = 0.0;
  double final_theta_error = 0.0;
  bool monotone = true;
  std::vector<double> mu_errors;  // |mu^t - mu*| per iterate
};

/// Theory mode on a quadratic instance against bilevel_oracle.
TheoryConvergence check_theory_convergence(const ConvexInstance& inst, double step, int rounds, double inner_tol);

}  // namespace fedmap
