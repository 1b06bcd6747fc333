#include "fedmap/fedmap_core.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

namespace fedmap {

WeightMode weight_mode_from_string(const std::string& s) {
  if (s == "posterior") return WeightMode::Posterior;
  if (s == "sample-size") return WeightMode::SampleSize;
  if (s == "uniform") return WeightMode::Uniform;
  throw DomainError("unknown weight mode '" + s + "'");
}

std::string to_string(WeightMode mode) {
  switch (mode) {
    case WeightMode::Posterior:
      return "posterior";
    case WeightMode::SampleSize:
      return "sample-size";
    case WeightMode::Uniform:
      return "uniform";
  }
  return "?";
}

void FedMapHyper::validate() const {
  if (rounds < 0) throw DomainError("rounds must be non-negative");
  if (local_epochs < 1) throw DomainError("local_epochs must be at least 1");
  if (aggregation_steps < 0) throw DomainError("aggregation_steps must be non-negative");
  if (!(psi_lr > 0.0)) throw DomainError("psi_lr must be positive");
  if (!(gamma_step > 0.0)) throw DomainError("gamma_step must be positive");
}

// ---------------------------------------------------------------------------
// Local side

double log_weight_from(double mean_nll, Index num_samples, double reg_value, LikelihoodScaling scaling) {
  const double log_lik =
      scaling == LikelihoodScaling::MeanNll ? -mean_nll : -static_cast<double>(num_samples) * mean_nll;
  return log_lik - reg_value;
}

double compute_log_weight(const ParamVector& theta, const PriorState& prior, const LocalLoss& loss,
                          LikelihoodScaling scaling) {
  const double nll = Objective(loss).value_full(theta);
  return log_weight_from(nll, loss.size(), regularizer(prior, theta), scaling);
}

LocalUpdate local_optimize(const std::string& site_id, const ParamVector& theta_init, const PriorState& prior,
                           const LocalLoss& loss, int epochs, const OptimizerConfig& optimizer, std::uint64_t seed,
                           LikelihoodScaling scaling) {
  if (theta_init.size() != prior.dim() || loss.dim() != prior.dim())
    throw ShapeError("local_optimize: theta, mu and model dimensions disagree at site '" + site_id + "'");
  if (loss.size() < 1) throw DomainError("local_optimize: site '" + site_id + "' has no data");
  const Objective objective(loss, [&prior](ad::Tape& tape, ad::Var th) { return record_regularizer(tape, prior, th); });
  TrainResult trained = train_local_sgd(theta_init, objective, optimizer, epochs, seed);
  LocalUpdate up;
  up.site_id = site_id;
  up.theta = std::move(trained.theta);
  up.num_samples = loss.size();
  up.epoch_losses = std::move(trained.epoch_losses);
  up.log_weight = compute_log_weight(up.theta, prior, loss, scaling);
  if (!std::isfinite(up.log_weight) || !up.theta.allFinite())
    throw NumericalError("local_optimize: non-finite result at site '" + site_id + "'");
  return up;
}

// ---------------------------------------------------------------------------
// Server side

namespace {

std::vector<double> raw_weights(std::span<const LocalUpdate> updates, WeightMode mode) {
  std::vector<double> w(updates.size());
  switch (mode) {
    case WeightMode::SampleSize:
      for (std::size_t k = 0; k < updates.size(); ++k) w[k] = static_cast<double>(updates[k].num_samples);
      break;
    case WeightMode::Uniform:
      std::fill(w.begin(), w.end(), 1.0);
      break;
    case WeightMode::Posterior: {
      double top = -std::numeric_limits<double>::infinity();
      for (const auto& u : updates) top = std::max(top, u.log_weight);
      for (std::size_t k = 0; k < updates.size(); ++k) w[k] = std::exp(updates[k].log_weight - top);
      break;
    }
  }
  return w;
}

void check_updates(std::span<const LocalUpdate> updates) {
  if (updates.empty()) throw DomainError("aggregation needs at least one local update");
  for (const auto& u : updates) {
    if (u.theta.size() != updates.front().theta.size())
      throw ShapeError("aggregation: site '" + u.site_id + "' sent a parameter vector of different length");
    if (!std::isfinite(u.log_weight)) throw NumericalError("aggregation: non-finite log weight from '" + u.site_id + "'");
  }
}

}  // namespace

std::vector<double> normalized_weights(std::span<const LocalUpdate> updates, WeightMode mode) {
  check_updates(updates);
  std::vector<double> w = raw_weights(updates, mode);
  double total = 0.0;
  for (double x : w) total += x;
  if (!(total > 0.0)) std::fill(w.begin(), w.end(), 1.0), total = static_cast<double>(w.size());
  for (double& x : w) x /= total;
  return w;
}

ParamVector aggregate_mu(std::span<const LocalUpdate> updates, WeightMode mode) {
  check_updates(updates);
  std::vector<double> w = raw_weights(updates, mode);
  double total = 0.0;
  for (double x : w) total += x;
  if (!(total > 0.0)) std::fill(w.begin(), w.end(), 1.0), total = static_cast<double>(w.size());
  ParamVector acc = ParamVector::Zero(updates.front().theta.size());
  for (std::size_t k = 0; k < updates.size(); ++k) acc += w[k] * updates[k].theta;
  return acc / total;
}

ad::ValueAndGradient psi_objective(const IcnnParams& psi, std::span<const LocalUpdate> updates, const ParamVector& mu,
                                   std::span<const double> weights, double alpha, double epsilon) {
  if (weights.size() != updates.size()) throw ShapeError("psi_objective: one weight per update required");
  ad::Tape tape;
  const ad::Var p = tape.input(psi.values.size());
  const ad::Var m = tape.constant(mu);
  std::optional<ad::Var> total;
  for (std::size_t k = 0; k < updates.size(); ++k) {
    const ad::Var th = tape.constant(updates[k].theta);
    const ad::Var r = tape.scale(record_regularizer(tape, &psi.shape, th, m, p, alpha, epsilon), weights[k]);
    total = total ? tape.add(*total, r) : r;
  }
  if (!total) total = tape.scalar_constant(0.0);
  tape.set_root(*total);
  ad::ValueAndGradient out;
  out.value = tape.forward({psi.values});
  out.gradient = tape.backward().front();
  return out;
}

IcnnParams update_psi(const IcnnParams& psi, std::span<const LocalUpdate> updates, const ParamVector& mu_new,
                      std::span<const double> weights, int steps, double lr, double alpha, double epsilon) {
  IcnnParams cur = psi;
  for (int s = 0; s < steps; ++s) {
    const auto vg = psi_objective(cur, updates, mu_new, weights, alpha, epsilon);
    if (!vg.gradient.allFinite() || !std::isfinite(vg.value))
      throw NumericalError("update_psi: non-finite gradient at step " + std::to_string(s));
    cur.values -= lr * vg.gradient;
    cur = project_nonneg(std::move(cur));
  }
  return cur;
}

// ---------------------------------------------------------------------------
// T1 driver

bool RoundReport::same_results(const RoundReport& o) const {
  return round == o.round && site_ids == o.site_ids && local_losses == o.local_losses &&
         log_weights == o.log_weights && weights == o.weights && aggregate_objective == o.aggregate_objective;
}

FederatedState initialise_t1(const ModelPreset& preset, const std::vector<std::string>& site_ids,
                             const PriorHyper& hyper, std::uint64_t seed) {
  if (site_ids.empty()) throw DomainError("T1 needs at least one site");
  FederatedState state;
  state.site_ids = site_ids;
  Rng pick = make_rng(seed, "init/site");
  std::uniform_int_distribution<std::size_t> choose(0, site_ids.size() - 1);
  state.init_site = site_ids[choose(pick)];
  Rng init = make_rng(seed, "init/" + state.init_site);
  const ParamVector theta0 = init_params(preset, init);
  state.prior.mu = theta0;
  state.prior.alpha = hyper.alpha;
  state.prior.epsilon = hyper.epsilon;
  if (hyper.use_icnn) {
    Rng psi_rng = make_rng(seed, "init/psi");
    state.prior.icnn = IcnnParams::initialise(theta0.size(), hyper.icnn_widths, psi_rng);
  }
  state.prior.validate();
  state.thetas.assign(site_ids.size(), theta0);
  return state;
}

namespace {

/// Runs fn(k) for k in [0, n) on up to hardware_concurrency threads. The
/// first exception (lowest k) is rethrown.
template <typename Fn>
void parallel_for_sites(std::size_t n, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(n, std::thread::hardware_concurrency()));
  auto body = [&](std::size_t w) {
    for (std::size_t k = w; k < n; k += workers) {
      try {
        fn(k);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    body(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(body, w);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

void run_rounds(FederatedState& state, std::span<const SiteTask> sites, const FedMapHyper& hyper,
                const OptimizerConfig& optimizer, std::uint64_t seed, const RoundCallback& on_round) {
  hyper.validate();
  if (sites.size() != state.thetas.size()) throw ShapeError("run_rounds: one task per T1 site required");
  for (int t = 0; t < hyper.rounds; ++t) {
    const int round = state.rounds_completed;
    const auto start = std::chrono::steady_clock::now();
    std::vector<LocalUpdate> updates(sites.size());
    try {
      parallel_for_sites(sites.size(), [&](std::size_t k) {
        const std::uint64_t local_seed = mix_seed(mix_seed(seed, hash_string(sites[k].site_id)), round);
        updates[k] = local_optimize(sites[k].site_id, state.thetas[k], state.prior, *sites[k].loss,
                                    hyper.local_epochs, optimizer, local_seed, hyper.scaling);
      });
    } catch (const std::exception& e) {
      throw RoundError(round, e.what());
    }

    RoundReport rep;
    rep.round = round;
    rep.weights = normalized_weights(updates, hyper.weight_mode);
    PriorState next = state.prior;
    next.mu = aggregate_mu(updates, hyper.weight_mode);
    if (next.icnn && hyper.aggregation_steps > 0) {
      try {
        next.icnn = update_psi(*state.prior.icnn, updates, next.mu, rep.weights, hyper.aggregation_steps,
                               hyper.psi_lr, next.alpha, next.epsilon);
      } catch (const std::exception& e) {
        throw RoundError(round, e.what());
      }
    }
    for (std::size_t k = 0; k < updates.size(); ++k) {
      rep.site_ids.push_back(updates[k].site_id);
      rep.local_losses.push_back(updates[k].epoch_losses.empty() ? 0.0 : updates[k].epoch_losses.back());
      rep.log_weights.push_back(updates[k].log_weight);
      rep.aggregate_objective += rep.weights[k] * regularizer(next, updates[k].theta);
    }
    rep.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();

    state.prior = std::move(next);
    for (std::size_t k = 0; k < updates.size(); ++k) state.thetas[k] = std::move(updates[k].theta);
    state.reports.push_back(std::move(rep));
    state.rounds_completed = round + 1;
    if (on_round && !on_round(state)) break;
  }
}

FederatedState run_t1(const ModelPreset& preset, std::span<const SiteTask> sites, const FedMapHyper& hyper,
                      const PriorHyper& prior, const OptimizerConfig& optimizer, std::uint64_t seed,
                      const RoundCallback& on_round) {
  std::vector<std::string> ids;
  for (const auto& s : sites) ids.push_back(s.site_id);
  FederatedState state = initialise_t1(preset, ids, prior, seed);
  run_rounds(state, sites, hyper, optimizer, seed, on_round);
  return state;
}

ParamVector finetune_t2(const PriorState& learned_prior, const LocalLoss& loss, int epochs,
                        const OptimizerConfig& optimizer, std::uint64_t seed) {
  if (loss.size() < 1) throw DomainError("finetune_t2: empty dataset");
  if (loss.dim() != learned_prior.dim()) throw ShapeError("finetune_t2: model and prior dimensions disagree");
  const Objective objective(
      loss, [&learned_prior](ad::Tape& tape, ad::Var th) { return record_regularizer(tape, learned_prior, th); });
  return train_local_sgd(learned_prior.mu, objective, optimizer, epochs, seed).theta;
}

MatrixXd infer_t3(const ModelPreset& preset, const ParamVector& mu, const MatrixXd& features) {
  return predict_batch(preset, mu, features);
}

// ---------------------------------------------------------------------------
// Theory mode

ParamVector solve_local_map(const ParamVector& theta_init, const PriorState& prior, const LocalLoss& loss, double tol,
                            int max_iter) {
  const Objective objective(loss, [&prior](ad::Tape& tape, ad::Var th) { return record_regularizer(tape, prior, th); });
  ParamVector theta = theta_init;
  ad::ValueAndGradient cur = objective.evaluate_full(theta);
  double step = 1.0;
  for (int it = 0; it < max_iter; ++it) {
    if (cur.gradient.cwiseAbs().maxCoeff() <= tol) return theta;
    const double g2 = cur.gradient.squaredNorm();
    step *= 2.0;
    while (true) {
      ParamVector trial = theta - step * cur.gradient;
      ad::ValueAndGradient next = objective.evaluate_full(trial);
      // Near the optimum the Armijo decrease drops below rounding error in the
      // value; fall back to requiring a smaller gradient there.
      const double decrease = 0.5 * step * g2;
      const bool resolvable = decrease > 1e-13 * std::max(1.0, std::abs(cur.value));
      const bool accept = resolvable ? next.value <= cur.value - decrease
                                     : next.gradient.squaredNorm() < g2 && next.value <= cur.value + 1e-12 * std::max(1.0, std::abs(cur.value));
      if (std::isfinite(next.value) && accept) {
        theta = std::move(trial);
        cur = std::move(next);
        break;
      }
      step *= 0.5;
      if (step < 1e-20) {
        // No representable decrease left; accept if the gradient is already tiny in relative terms.
        if (cur.gradient.cwiseAbs().maxCoeff() <= tol * std::max(1.0, std::abs(cur.value))) return theta;
        throw NumericalError("solve_local_map: line search failed");
      }
    }
  }
  throw NumericalError("solve_local_map: no convergence to tolerance " + std::to_string(tol));
}

PriorGradient weighted_prior_gradient(const PriorState& prior, std::span<const ParamVector> thetas,
                                      std::span<const double> counts, bool include_psi) {
  if (thetas.size() != counts.size()) throw ShapeError("weighted_prior_gradient: one count per site required");
  PriorGradient g;
  g.d_mu = ParamVector::Zero(prior.dim());
  if (prior.icnn && include_psi) g.d_psi = ParamVector::Zero(prior.icnn->values.size());
  for (std::size_t k = 0; k < thetas.size(); ++k) {
    const RegularizerGradient rg = regularizer_gradient(prior, thetas[k]);
    g.d_mu += counts[k] * rg.d_mu;
    if (g.d_psi.size() > 0) g.d_psi += counts[k] * rg.d_psi;
  }
  return g;
}

PriorState prior_gradient_step(const PriorState& prior, std::span<const ParamVector> thetas,
                               std::span<const double> counts, double step, bool update_psi) {
  const PriorGradient g = weighted_prior_gradient(prior, thetas, counts, update_psi);
  PriorState next = prior;
  next.mu -= step * g.d_mu;
  if (next.icnn && update_psi) {
    next.icnn->values -= step * g.d_psi;
    next.icnn = project_nonneg(std::move(*next.icnn));
  }
  return next;
}

TheoryTrace run_theory_mode(const PriorState& prior0, std::span<const LocalLoss* const> losses, double step,
                            int rounds, double inner_tol, bool update_psi) {
  TheoryTrace trace;
  PriorState gamma = prior0;
  std::vector<double> counts;
  for (const LocalLoss* l : losses) counts.push_back(static_cast<double>(l->size()));
  std::vector<ParamVector> thetas(losses.size(), gamma.mu);
  auto solve_all = [&] {
    for (std::size_t k = 0; k < losses.size(); ++k) thetas[k] = solve_local_map(thetas[k], gamma, *losses[k], inner_tol);
  };
  trace.mu_history.push_back(gamma.mu);
  for (int t = 0; t < rounds; ++t) {
    solve_all();
    gamma = prior_gradient_step(gamma, thetas, counts, step, update_psi);
    trace.mu_history.push_back(gamma.mu);
  }
  solve_all();
  trace.final_thetas = thetas;
  trace.final_prior = gamma;
  return trace;
}

}  // namespace fedmap
