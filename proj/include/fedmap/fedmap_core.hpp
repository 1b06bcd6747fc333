#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedmap/icnn_prior.hpp"
#include "fedmap/models.hpp"

namespace fedmap {

enum class WeightMode { Posterior, SampleSize, Uniform };
WeightMode weight_mode_from_string(const std::string& s);
std::string to_string(WeightMode mode);

/// How the data term enters log w: the default tempers it by 1/N_k (mean
/// NLL); PaperLiteral uses the full log-likelihood.
enum class LikelihoodScaling { MeanNll, PaperLiteral };

struct FedMapHyper {
  int rounds = 30;
  int local_epochs = 5;
  int aggregation_steps = 5;
  double psi_lr = 0.01;
  /// Step size of the theory-mode prior gradient step.
  double gamma_step = 1.0;
  WeightMode weight_mode = WeightMode::Posterior;
  LikelihoodScaling scaling = LikelihoodScaling::MeanNll;

  void validate() const;
};

struct PriorHyper {
  double alpha = 0.1;
  double epsilon = 1e-3;
  std::vector<Index> icnn_widths{16, 16};
  bool use_icnn = true;
};

struct LocalUpdate {
  std::string site_id;
  ParamVector theta;
  double log_weight = 0.0;
  Index num_samples = 0;
  std::vector<double> epoch_losses;
};

/// Local site: its id, its loss over Z_k and the sample count N_k.
struct SiteTask {
  std::string site_id;
  const LocalLoss* loss = nullptr;
};

double log_weight_from(double mean_nll, Index num_samples, double reg_value, LikelihoodScaling scaling);
/// log w = log P(Z|theta) - R(theta; mu, psi), in the log domain throughout.
double compute_log_weight(const ParamVector& theta, const PriorState& prior, const LocalLoss& loss,
                          LikelihoodScaling scaling = LikelihoodScaling::MeanNll);

/// Minimises (1/N_k) L(theta; Z_k) + R(theta; mu, psi) for `epochs` passes of
/// mini-batch training and attaches the site's log weight.
LocalUpdate local_optimize(const std::string& site_id, const ParamVector& theta_init, const PriorState& prior,
                           const LocalLoss& loss, int epochs, const OptimizerConfig& optimizer, std::uint64_t seed,
                           LikelihoodScaling scaling = LikelihoodScaling::MeanNll);

/// Normalised aggregation weights, summing to one, in update order.
std::vector<double> normalized_weights(std::span<const LocalUpdate> updates, WeightMode mode);

/// mu = sum_k w_k theta_k / sum_j w_j, accumulated in update order.
ParamVector aggregate_mu(std::span<const LocalUpdate> updates, WeightMode mode);

/// sum_k w_k R(theta_k; mu, psi) and its gradient in psi.
ad::ValueAndGradient psi_objective(const IcnnParams& psi, std::span<const LocalUpdate> updates, const ParamVector& mu,
                                   std::span<const double> weights, double alpha, double epsilon);

/// S_agg projected gradient steps on psi_objective. Throws NumericalError
/// naming the step if a gradient turns non-finite.
IcnnParams update_psi(const IcnnParams& psi, std::span<const LocalUpdate> updates, const ParamVector& mu_new,
                      std::span<const double> weights, int steps, double lr, double alpha, double epsilon);

struct RoundReport {
  int round = 0;
  std::vector<std::string> site_ids;
  std::vector<double> local_losses;  // final-epoch objective per site
  std::vector<double> log_weights;
  std::vector<double> weights;
  double aggregate_objective = 0.0;
  double wall_ms = 0.0;  // informational only

  /// Equality on every field except timing.
  bool same_results(const RoundReport& other) const;
};

struct FederatedState {
  PriorState prior;
  std::vector<std::string> site_ids;
  std::vector<ParamVector> thetas;
  std::vector<RoundReport> reports;
  int rounds_completed = 0;
  std::string init_site;
};

class RoundError : public std::runtime_error {
 public:
  RoundError(int round, const std::string& what)
      : std::runtime_error("round " + std::to_string(round) + ": " + what), round_(round) {}
  int round() const { return round_; }

 private:
  int round_;
};

/// Seeds mu^0 and every theta_k^0 from one uniformly chosen site's
/// initialiser, and draws psi^0.
FederatedState initialise_t1(const ModelPreset& preset, const std::vector<std::string>& site_ids,
                             const PriorHyper& prior, std::uint64_t seed);

/// Called after each round; returning false stops training early.
using RoundCallback = std::function<bool(const FederatedState&)>;

/// Runs hyper.rounds rounds of parallel local_optimize followed by global
/// aggregation. On a site failure the state holds the last completed round
/// and RoundError is thrown.
void run_rounds(FederatedState& state, std::span<const SiteTask> sites, const FedMapHyper& hyper,
                const OptimizerConfig& optimizer, std::uint64_t seed, const RoundCallback& on_round = {});

FederatedState run_t1(const ModelPreset& preset, std::span<const SiteTask> sites, const FedMapHyper& hyper,
                      const PriorHyper& prior, const OptimizerConfig& optimizer, std::uint64_t seed,
                      const RoundCallback& on_round = {});

/// Local MAP fine-tuning from theta^0 = mu_T under the frozen learned prior.
/// Takes values only; nothing here can reach a server.
ParamVector finetune_t2(const PriorState& learned_prior, const LocalLoss& loss, int epochs,
                        const OptimizerConfig& optimizer, std::uint64_t seed);

/// phi(x; mu_T) for every row.
MatrixXd infer_t3(const ModelPreset& preset, const ParamVector& mu, const MatrixXd& features);

// ---------------------------------------------------------------------------
// Theory mode: exact inner solves and N_k-weighted prior gradient steps.

/// Deterministic full-batch minimisation of (1/N) L + R until the gradient's
/// max-norm drops below tol. Throws NumericalError if max_iter is reached.
ParamVector solve_local_map(const ParamVector& theta_init, const PriorState& prior, const LocalLoss& loss, double tol,
                            int max_iter = 100000);

/// sum_k N_k grad_gamma R(theta_k; gamma), split into (d_mu, d_psi).
struct PriorGradient {
  ParamVector d_mu;
  ParamVector d_psi;
};
PriorGradient weighted_prior_gradient(const PriorState& prior, std::span<const ParamVector> thetas,
                                      std::span<const double> counts, bool include_psi = true);

/// gamma <- gamma - step * sum_k N_k grad_gamma R(theta_k; gamma); psi is
/// projected back onto the feasible set.
PriorState prior_gradient_step(const PriorState& prior, std::span<const ParamVector> thetas,
                               std::span<const double> counts, double step, bool update_psi = true);

struct TheoryTrace {
  std::vector<ParamVector> mu_history;  // gamma^0 .. gamma^T (mu part)
  std::vector<ParamVector> final_thetas;
  PriorState final_prior;
};

TheoryTrace run_theory_mode(const PriorState& prior0, std::span<const LocalLoss* const> losses, double step,
                            int rounds, double inner_tol, bool update_psi = true);

}  // namespace fedmap
