#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "fedmap/autodiff.hpp"
#include "fedmap/types.hpp"

namespace fedmap {

/// Architecture of an input-convex network on x in R^input_dim:
///   z_1     = softplus(W_0 x + b_0)
///   z_{l+1} = softplus(Wz_l z_l + Wx_l x + b_l),  Wz_l >= 0
///   f(x)    = a^T z_L,                             a >= 0
/// Flat layout: W_0, b_0, then per later layer Wz_l, Wx_l, b_l, then a.
/// Matrices are column-major.
struct IcnnShape {
  Index input_dim = 0;
  std::vector<Index> widths;

  Index num_params() const;
  /// [begin, end) ranges of the entries that must stay non-negative.
  std::vector<std::pair<Index, Index>> constrained_ranges() const;
  void validate() const;
};

struct IcnnParams {
  IcnnShape shape;
  ParamVector values;

  /// Unconstrained weights ~ N(0, 1/fan_in), constrained ~ |N(0, 1/fan_in)|, biases 0.
  static IcnnParams initialise(Index param_dim, const std::vector<Index>& widths, Rng& rng);
  static IcnnParams zeros(Index param_dim, const std::vector<Index>& widths);
  /// Index of the first entry of the non-negative output head.
  Index head_offset() const;
};

/// Records f_psi on a D x n block of inputs (one per column); returns 1 x n.
ad::Var record_icnn(ad::Tape& tape, const IcnnShape& shape, ad::Var psi, ad::Var inputs);

/// f_psi(theta, mu) with x = (theta, mu). Throws DomainError if a constrained
/// weight is negative.
double icnn_forward(const IcnnParams& psi, const ParamVector& theta, const ParamVector& mu);

/// Clamps every constrained weight at zero; all other entries are untouched.
IcnnParams project_nonneg(IcnnParams psi);
bool is_feasible(const IcnnParams& psi);

/// gamma = (mu, psi) with the strong-convexity hyperparameters. An empty icnn
/// means f_psi == 0.
struct PriorState {
  ParamVector mu;
  std::optional<IcnnParams> icnn;
  double alpha = 0.1;
  double epsilon = 1e-3;

  Index dim() const { return mu.size(); }
  void validate() const;
};

/// R(theta; mu, psi) = f_psi(theta, mu) + alpha |theta - mu|^2 + eps (|theta|^2 + |mu|^2).
double regularizer(const PriorState& prior, const ParamVector& theta);

/// Records R on the tape with theta, mu and psi as graph nodes. `psi` is
/// ignored when `shape` is null.
ad::Var record_regularizer(ad::Tape& tape, const IcnnShape* shape, ad::Var theta, ad::Var mu, ad::Var psi,
                           double alpha, double epsilon);

/// Records R(theta; mu, psi) with mu and psi frozen as constants.
ad::Var record_regularizer(ad::Tape& tape, const PriorState& prior, ad::Var theta);

/// Gradient of R with respect to (theta, mu, psi) at a point.
struct RegularizerGradient {
  double value = 0.0;
  ParamVector d_theta;
  ParamVector d_mu;
  ParamVector d_psi;  // empty when f_psi == 0
};
RegularizerGradient regularizer_gradient(const PriorState& prior, const ParamVector& theta);

/// One sampled pair for the strong-convexity test: (theta_1, mu_1), (theta_2, mu_2).
struct ConvexityPair {
  ParamVector theta1, mu1, theta2, mu2;
};

struct ConvexityReport {
  double min_slack = 0.0;
  Index worst_pair = -1;
};

/// Midpoint test of f_psi alone over the pairs; min of
/// (f(x1) + f(x2))/2 - f((x1 + x2)/2).
ConvexityReport check_icnn_convexity(const IcnnParams& psi, const std::vector<ConvexityPair>& pairs,
                                     double tolerance = 1e-9);

/// Minimum over pairs of
///   R1/2 + R2/2 - R(mid) - eps (|dtheta/2|^2 + |dmu/2|^2)
/// with psi held fixed. Throws NumericalError with the witness index if any
/// slack falls below -tolerance.
ConvexityReport check_strong_convexity(const PriorState& prior, const std::vector<ConvexityPair>& pairs,
                                       double tolerance = 1e-9);

/// Gaussian pairs of the given dimension, coordinates ~ N(0, scale^2).
std::vector<ConvexityPair> sample_convexity_pairs(Index dim, Index count, double scale, Rng& rng);

}  // namespace fedmap
