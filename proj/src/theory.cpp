#include <cmath>

#include "fedmap/analysis.hpp"

namespace fedmap {

QuadraticAnchorLoss::QuadraticAnchorLoss(ParamVector anchor, Index count) : anchor_(std::move(anchor)), count_(count) {
  if (count_ < 1) throw DomainError("quadratic anchor loss: count must be positive");
}

std::optional<ad::Var> QuadraticAnchorLoss::record(ad::Tape& tape, ad::Var theta, std::span<const Index> rows,
                                                   Rng*) const {
  if (rows.empty()) return std::nullopt;
  return tape.scale(tape.squared_norm(tape.sub(theta, tape.constant(anchor_))), 0.5);
}

double ConvexInstance::total_count() const {
  double s = 0;
  for (Index n : counts) s += static_cast<double>(n);
  return s;
}

void ConvexInstance::validate() const {
  if (anchors.empty()) throw DomainError("convex instance: no sites");
  if (counts.size() != anchors.size()) throw ShapeError("convex instance: one count per anchor required");
  for (const auto& a : anchors)
    if (a.size() != dim()) throw ShapeError("convex instance: anchors differ in length");
  for (Index n : counts)
    if (n < 1) throw DomainError("convex instance: counts must be positive");
  if (!(alpha > 0.0) || !(epsilon > 0.0)) throw DomainError("convex instance: alpha and epsilon must be positive");
}

PriorState ConvexInstance::prior(const ParamVector& mu) const {
  PriorState p;
  p.mu = mu;
  p.icnn = icnn;
  p.alpha = alpha;
  p.epsilon = epsilon;
  p.validate();
  return p;
}

std::vector<QuadraticAnchorLoss> ConvexInstance::losses() const {
  std::vector<QuadraticAnchorLoss> out;
  for (std::size_t k = 0; k < anchors.size(); ++k) out.emplace_back(anchors[k], counts[k]);
  return out;
}

ConvexInstance random_instance(Index q, Index d, double alpha, double epsilon, Rng& rng, Index count_lo,
                               Index count_hi, double scale) {
  ConvexInstance inst;
  inst.alpha = alpha;
  inst.epsilon = epsilon;
  std::normal_distribution<double> normal(0.0, scale);
  std::uniform_int_distribution<Index> count(count_lo, count_hi);
  for (Index k = 0; k < q; ++k) {
    ParamVector a(d);
    for (Index i = 0; i < d; ++i) a(i) = normal(rng);
    inst.anchors.push_back(std::move(a));
    inst.counts.push_back(count(rng));
  }
  inst.validate();
  return inst;
}

BilevelSolution bilevel_oracle(const ConvexInstance& inst) {
  inst.validate();
  if (inst.icnn) throw DomainError("bilevel_oracle: closed form needs f_psi == 0");
  const double a = inst.alpha, e = inst.epsilon;
  const double c = 1 + 2 * a + 2 * e;
  ParamVector abar = ParamVector::Zero(inst.dim());
  for (std::size_t k = 0; k < inst.anchors.size(); ++k) abar += static_cast<double>(inst.counts[k]) * inst.anchors[k];
  abar /= inst.total_count();

  BilevelSolution sol;
  sol.mu = a * abar / (c * (a + e) - 2 * a * a);
  const PriorState prior = inst.prior(sol.mu);
  for (std::size_t k = 0; k < inst.anchors.size(); ++k) {
    ParamVector th = (inst.anchors[k] + 2 * a * sol.mu) / c;
    sol.envelope += static_cast<double>(inst.counts[k]) *
                    (0.5 * (th - inst.anchors[k]).squaredNorm() + regularizer(prior, th));
    sol.thetas.push_back(std::move(th));
  }
  return sol;
}

double envelope(const ConvexInstance& inst, const ParamVector& mu, double inner_tol, std::vector<ParamVector>* thetas) {
  const PriorState prior = inst.prior(mu);
  const auto losses = inst.losses();
  double m = 0;
  if (thetas) thetas->clear();
  for (std::size_t k = 0; k < losses.size(); ++k) {
    const ParamVector th = solve_local_map(mu, prior, losses[k], inner_tol);
    m += static_cast<double>(inst.counts[k]) *
         (0.5 * (th - inst.anchors[k]).squaredNorm() + regularizer(prior, th));
    if (thetas) thetas->push_back(th);
  }
  return m;
}

ParamVector envelope_gradient(const ConvexInstance& inst, const ParamVector& mu, double inner_tol) {
  std::vector<ParamVector> thetas;
  envelope(inst, mu, inner_tol, &thetas);
  std::vector<double> counts(inst.counts.begin(), inst.counts.end());
  return weighted_prior_gradient(inst.prior(mu), thetas, counts, false).d_mu;
}

double safe_theory_step(const ConvexInstance& inst) {
  return 1.0 / (2.0 * inst.total_count() * (inst.alpha + inst.epsilon));
}

DanskinReport verify_danskin(const ConvexInstance& inst, std::span<const ParamVector> points, double inner_tol,
                             double h, double floor) {
  inst.validate();
  DanskinReport rep;
  for (std::size_t p = 0; p < points.size(); ++p) {
    const ParamVector& mu = points[p];
    const ParamVector g = envelope_gradient(inst, mu, inner_tol);
    double worst = 0;
    for (Index i = 0; i < mu.size(); ++i) {
      ParamVector up = mu, dn = mu;
      up(i) += h;
      dn(i) -= h;
      const double fd = (envelope(inst, up, inner_tol) - envelope(inst, dn, inner_tol)) / (2 * h);
      worst = std::max(worst, std::abs(g(i) - fd));
    }
    const double err = worst / std::max(g.cwiseAbs().maxCoeff(), floor);
    rep.errors.push_back(err);
    if (rep.worst_point < 0 || err > rep.max_relative_error) {
      rep.max_relative_error = err;
      rep.worst_point = static_cast<Index>(p);
    }
  }
  return rep;
}

ConvexityReport verify_m_convexity(const ConvexInstance& inst, const std::vector<ConvexityPair>& pairs,
                                   double inner_tol, double tolerance) {
  inst.validate();
  const double modulus = static_cast<double>(inst.num_sites()) * inst.epsilon;
  ConvexityReport rep;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto& p = pairs[k];
    const ParamVector mid = 0.5 * (p.mu1 + p.mu2);
    const double slack = 0.5 * envelope(inst, p.mu1, inner_tol) + 0.5 * envelope(inst, p.mu2, inner_tol) -
                         envelope(inst, mid, inner_tol) - modulus * (0.5 * (p.mu1 - p.mu2)).squaredNorm();
    if (rep.worst_pair < 0 || slack < rep.min_slack) {
      rep.min_slack = slack;
      rep.worst_pair = static_cast<Index>(k);
    }
  }
  if (rep.worst_pair >= 0 && rep.min_slack < -tolerance)
    throw NumericalError("M strong convexity violated at pair " + std::to_string(rep.worst_pair) + " (slack " +
                         std::to_string(rep.min_slack) + ")");
  return rep;
}

TheoryConvergence check_theory_convergence(const ConvexInstance& inst, double step, int rounds, double inner_tol) {
  const BilevelSolution oracle = bilevel_oracle(inst);
  const auto losses = inst.losses();
  std::vector<const LocalLoss*> ptrs;
  for (const auto& l : losses) ptrs.push_back(&l);
  const TheoryTrace trace =
      run_theory_mode(inst.prior(ParamVector::Zero(inst.dim())), ptrs, step, rounds, inner_tol, false);

  TheoryConvergence out;
  out.rounds = rounds;
  for (const auto& mu : trace.mu_history) {
    const double err = (mu - oracle.mu).norm();
    if (!out.mu_errors.empty() && err > out.mu_errors.back() + 1e-12) out.monotone = false;
    out.mu_errors.push_back(err);
  }
  out.final_mu_error = out.mu_errors.back();
  for (std::size_t k = 0; k < oracle.thetas.size(); ++k)
    out.final_theta_error = std::max(out.final_theta_error, (trace.final_thetas[k] - oracle.thetas[k]).norm());
  return out;
}

}  // namespace fedmap
