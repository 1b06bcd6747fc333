#include "fedmap/icnn_prior.hpp"

#include <cmath>
#include <string>

namespace fedmap {

Index IcnnShape::num_params() const {
  if (widths.empty()) return 0;
  Index n = widths[0] * input_dim + widths[0];
  for (std::size_t l = 1; l < widths.size(); ++l) n += widths[l] * widths[l - 1] + widths[l] * input_dim + widths[l];
  return n + widths.back();
}

std::vector<std::pair<Index, Index>> IcnnShape::constrained_ranges() const {
  std::vector<std::pair<Index, Index>> out;
  if (widths.empty()) return out;
  Index off = widths[0] * input_dim + widths[0];
  for (std::size_t l = 1; l < widths.size(); ++l) {
    const Index wz = widths[l] * widths[l - 1];
    out.emplace_back(off, off + wz);
    off += wz + widths[l] * input_dim + widths[l];
  }
  out.emplace_back(off, off + widths.back());
  return out;
}

void IcnnShape::validate() const {
  if (input_dim < 1) throw DomainError("ICNN input dimension must be positive");
  if (widths.empty()) throw DomainError("ICNN needs at least one hidden layer");
  for (Index w : widths)
    if (w < 1) throw DomainError("ICNN widths must be positive");
}

IcnnParams IcnnParams::zeros(Index param_dim, const std::vector<Index>& widths) {
  IcnnParams p;
  p.shape = IcnnShape{2 * param_dim, widths};
  p.shape.validate();
  p.values = ParamVector::Zero(p.shape.num_params());
  return p;
}

IcnnParams IcnnParams::initialise(Index param_dim, const std::vector<Index>& widths, Rng& rng) {
  IcnnParams p = zeros(param_dim, widths);
  const Index D = p.shape.input_dim;
  std::normal_distribution<double> normal(0.0, 1.0);
  Index off = 0;
  auto fill = [&](Index count, Index fan_in, bool nonneg) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Index i = 0; i < count; ++i) {
      const double w = sd * normal(rng);
      p.values(off++) = nonneg ? std::abs(w) : w;
    }
  };
  fill(widths[0] * D, D, false);
  off += widths[0];
  for (std::size_t l = 1; l < widths.size(); ++l) {
    fill(widths[l] * widths[l - 1], widths[l - 1], true);
    fill(widths[l] * D, D, false);
    off += widths[l];
  }
  fill(widths.back(), widths.back(), true);
  return p;
}

Index IcnnParams::head_offset() const { return shape.num_params() - shape.widths.back(); }

ad::Var record_icnn(ad::Tape& tape, const IcnnShape& shape, ad::Var psi, ad::Var x) {
  const Index D = shape.input_dim;
  const auto& w = shape.widths;
  Index off = 0;
  ad::Var z = tape.softplus(tape.affine(tape.slice(psi, off, w[0], D), x, tape.slice(psi, off + w[0] * D, w[0])));
  off += w[0] * D + w[0];
  for (std::size_t l = 1; l < w.size(); ++l) {
    const ad::Var wz = tape.slice(psi, off, w[l], w[l - 1]);
    off += w[l] * w[l - 1];
    const ad::Var wx = tape.slice(psi, off, w[l], D);
    off += w[l] * D;
    const ad::Var b = tape.slice(psi, off, w[l]);
    off += w[l];
    z = tape.softplus(tape.add(tape.matmul(wz, z), tape.affine(wx, x, b)));
  }
  return tape.matmul(tape.slice(psi, off, 1, w.back()), z);
}

bool is_feasible(const IcnnParams& psi) {
  for (auto [b, e] : psi.shape.constrained_ranges())
    if ((psi.values.segment(b, e - b).array() < 0.0).any()) return false;
  return true;
}

double icnn_forward(const IcnnParams& psi, const ParamVector& theta, const ParamVector& mu) {
  const Index D = psi.shape.input_dim;
  if (psi.values.size() != psi.shape.num_params()) throw ShapeError("ICNN parameter vector has the wrong length");
  if (theta.size() + mu.size() != D || theta.size() != mu.size())
    throw ShapeError("ICNN expects theta and mu of length " + std::to_string(D / 2));
  for (auto [b, e] : psi.shape.constrained_ranges())
    for (Index i = b; i < e; ++i)
      if (psi.values(i) < 0.0)
        throw DomainError("ICNN structural violation: constrained weight " + std::to_string(i) + " is negative");
  Eigen::VectorXd x(D);
  x << theta, mu;
  const auto& w = psi.shape.widths;
  const double* p = psi.values.data();
  auto sp = [](const Eigen::VectorXd& v) { return v.unaryExpr([](double t) { return ad::softplus(t); }).eval(); };
  Index off = 0;
  Eigen::VectorXd z =
      sp(Eigen::Map<const MatrixXd>(p + off, w[0], D) * x + Eigen::Map<const Eigen::VectorXd>(p + off + w[0] * D, w[0]));
  off += w[0] * D + w[0];
  for (std::size_t l = 1; l < w.size(); ++l) {
    Eigen::Map<const MatrixXd> wz(p + off, w[l], w[l - 1]);
    off += w[l] * w[l - 1];
    Eigen::Map<const MatrixXd> wx(p + off, w[l], D);
    off += w[l] * D;
    Eigen::Map<const Eigen::VectorXd> b(p + off, w[l]);
    off += w[l];
    z = sp(wz * z + wx * x + b);
  }
  return Eigen::Map<const Eigen::VectorXd>(p + off, w.back()).dot(z);
}

IcnnParams project_nonneg(IcnnParams psi) {
  for (auto [b, e] : psi.shape.constrained_ranges()) {
    auto seg = psi.values.segment(b, e - b);
    seg = seg.cwiseMax(0.0);
  }
  return psi;
}

void PriorState::validate() const {
  if (!(alpha > 0.0)) throw DomainError("prior: alpha must be positive");
  if (!(epsilon > 0.0)) throw DomainError("prior: epsilon must be positive");
  if (icnn) {
    if (icnn->shape.input_dim != 2 * mu.size())
      throw ShapeError("prior: ICNN input width " + std::to_string(icnn->shape.input_dim) + " does not match 2 x " +
                       std::to_string(mu.size()));
    if (icnn->values.size() != icnn->shape.num_params()) throw ShapeError("prior: ICNN parameter length mismatch");
  }
}

double regularizer(const PriorState& prior, const ParamVector& theta) {
  if (theta.size() != prior.mu.size())
    throw ShapeError("regularizer: theta has length " + std::to_string(theta.size()) + ", mu has " +
                     std::to_string(prior.mu.size()));
  const double f = prior.icnn ? icnn_forward(*prior.icnn, theta, prior.mu) : 0.0;
  return f + prior.alpha * (theta - prior.mu).squaredNorm() +
         prior.epsilon * (theta.squaredNorm() + prior.mu.squaredNorm());
}

ad::Var record_regularizer(ad::Tape& tape, const IcnnShape* shape, ad::Var theta, ad::Var mu, ad::Var psi,
                           double alpha, double epsilon) {
  ad::Var r = tape.add(tape.scale(tape.squared_norm(tape.sub(theta, mu)), alpha),
                       tape.scale(tape.add(tape.squared_norm(theta), tape.squared_norm(mu)), epsilon));
  if (shape != nullptr) r = tape.add(tape.sum(record_icnn(tape, *shape, psi, tape.concat({theta, mu}))), r);
  return r;
}

ad::Var record_regularizer(ad::Tape& tape, const PriorState& prior, ad::Var theta) {
  const ad::Var mu = tape.constant(prior.mu);
  if (!prior.icnn) return record_regularizer(tape, nullptr, theta, mu, mu, prior.alpha, prior.epsilon);
  const ad::Var psi = tape.constant(prior.icnn->values);
  return record_regularizer(tape, &prior.icnn->shape, theta, mu, psi, prior.alpha, prior.epsilon);
}

RegularizerGradient regularizer_gradient(const PriorState& prior, const ParamVector& theta) {
  if (theta.size() != prior.mu.size()) throw ShapeError("regularizer_gradient: theta/mu length mismatch");
  ad::Tape tape;
  const ad::Var th = tape.input(theta.size());
  const ad::Var mu = tape.input(prior.mu.size());
  RegularizerGradient out;
  if (prior.icnn) {
    const ad::Var psi = tape.input(prior.icnn->values.size());
    record_regularizer(tape, &prior.icnn->shape, th, mu, psi, prior.alpha, prior.epsilon);
    out.value = tape.forward({theta, prior.mu, prior.icnn->values});
  } else {
    record_regularizer(tape, nullptr, th, mu, mu, prior.alpha, prior.epsilon);
    out.value = tape.forward({theta, prior.mu});
  }
  auto grads = tape.backward();
  out.d_theta = grads[0];
  out.d_mu = grads[1];
  if (prior.icnn) out.d_psi = grads[2];
  return out;
}

ConvexityReport check_icnn_convexity(const IcnnParams& psi, const std::vector<ConvexityPair>& pairs,
                                     double tolerance) {
  ConvexityReport rep;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto& p = pairs[k];
    const double mid = icnn_forward(psi, 0.5 * (p.theta1 + p.theta2), 0.5 * (p.mu1 + p.mu2));
    const double slack = 0.5 * icnn_forward(psi, p.theta1, p.mu1) + 0.5 * icnn_forward(psi, p.theta2, p.mu2) - mid;
    if (rep.worst_pair < 0 || slack < rep.min_slack) {
      rep.min_slack = slack;
      rep.worst_pair = static_cast<Index>(k);
    }
  }
  if (rep.worst_pair >= 0 && rep.min_slack < -tolerance)
    throw NumericalError("ICNN midpoint convexity violated at pair " + std::to_string(rep.worst_pair) +
                         " (slack " + std::to_string(rep.min_slack) + ")");
  return rep;
}

ConvexityReport check_strong_convexity(const PriorState& prior, const std::vector<ConvexityPair>& pairs,
                                       double tolerance) {
  ConvexityReport rep;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto& p = pairs[k];
    PriorState g1 = prior, g2 = prior, gm = prior;
    g1.mu = p.mu1;
    g2.mu = p.mu2;
    gm.mu = 0.5 * (p.mu1 + p.mu2);
    const double bound =
        prior.epsilon * ((0.5 * (p.theta1 - p.theta2)).squaredNorm() + (0.5 * (p.mu1 - p.mu2)).squaredNorm());
    const double slack = 0.5 * regularizer(g1, p.theta1) + 0.5 * regularizer(g2, p.theta2) -
                         regularizer(gm, 0.5 * (p.theta1 + p.theta2)) - bound;
    if (rep.worst_pair < 0 || slack < rep.min_slack) {
      rep.min_slack = slack;
      rep.worst_pair = static_cast<Index>(k);
    }
  }
  if (rep.worst_pair >= 0 && rep.min_slack < -tolerance)
    throw NumericalError("strong convexity violated at pair " + std::to_string(rep.worst_pair) + " (slack " +
                         std::to_string(rep.min_slack) + ")");
  return rep;
}

std::vector<ConvexityPair> sample_convexity_pairs(Index dim, Index count, double scale, Rng& rng) {
  std::normal_distribution<double> normal(0.0, scale);
  auto draw = [&] {
    ParamVector v(dim);
    for (Index i = 0; i < dim; ++i) v(i) = normal(rng);
    return v;
  };
  std::vector<ConvexityPair> out;
  out.reserve(static_cast<std::size_t>(count));
  for (Index k = 0; k < count; ++k) {
    ConvexityPair p;
    p.theta1 = draw();
    p.mu1 = draw();
    p.theta2 = draw();
    p.mu2 = draw();
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace fedmap
