#include "fedmap/autodiff.hpp"

#include <numeric>
#include <sstream>
#include <string>

namespace fedmap::ad {

namespace {

std::string shape_str(Index r, Index c) {
  std::ostringstream os;
  os << r << "x" << c;
  return os.str();
}

[[noreturn]] void shape_fail(const char* op, std::size_t node, const std::string& detail) {
  std::ostringstream os;
  os << op << " (node " << node << "): " << detail;
  throw ShapeError(os.str());
}

}  // namespace

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  evaluated_ = false;
  return Var{nodes_.size() - 1};
}

const Tape::Node& Tape::at(Var v) const {
  if (v.id >= nodes_.size()) throw ShapeError("unknown node id " + std::to_string(v.id));
  return nodes_[v.id];
}

Var Tape::input(Index rows, Index cols) {
  if (rows < 0 || cols < 0) shape_fail("input", nodes_.size(), "negative shape");
  Node n = make_node(Op::Input, {}, rows, cols);
  inputs_.push_back(nodes_.size());
  return push(std::move(n));
}

Var Tape::constant(MatrixXd value) {
  Node n = make_node(Op::Constant, {}, value.rows(), value.cols());
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::scalar_constant(double value) { return constant(MatrixXd::Constant(1, 1, value)); }

Var Tape::add(Var a, Var b) {
  const Node &x = at(a), &y = at(b);
  if (x.rows != y.rows || x.cols != y.cols)
    shape_fail("add", nodes_.size(), shape_str(x.rows, x.cols) + " vs " + shape_str(y.rows, y.cols));
  return push(make_node(Op::Add, {a.id, b.id}, x.rows, x.cols));
}

Var Tape::sub(Var a, Var b) {
  const Node &x = at(a), &y = at(b);
  if (x.rows != y.rows || x.cols != y.cols)
    shape_fail("sub", nodes_.size(), shape_str(x.rows, x.cols) + " vs " + shape_str(y.rows, y.cols));
  return push(make_node(Op::Sub, {a.id, b.id}, x.rows, x.cols));
}

Var Tape::mul(Var a, Var b) {
  const Node &x = at(a), &y = at(b);
  if (x.rows != y.rows || x.cols != y.cols)
    shape_fail("mul", nodes_.size(), shape_str(x.rows, x.cols) + " vs " + shape_str(y.rows, y.cols));
  return push(make_node(Op::Mul, {a.id, b.id}, x.rows, x.cols));
}

Var Tape::scale(Var a, double factor) {
  const Node& x = at(a);
  Node n = make_node(Op::Scale, {a.id}, x.rows, x.cols);
  n.scalar = factor;
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
  const Node &x = at(a), &y = at(b);
  if (x.cols != y.rows)
    shape_fail("matmul", nodes_.size(), shape_str(x.rows, x.cols) + " * " + shape_str(y.rows, y.cols));
  return push(make_node(Op::MatMul, {a.id, b.id}, x.rows, y.cols));
}

Var Tape::affine(Var w, Var x, Var b) {
  const Node &W = at(w), &X = at(x), &B = at(b);
  if (W.cols != X.rows)
    shape_fail("affine", nodes_.size(), shape_str(W.rows, W.cols) + " * " + shape_str(X.rows, X.cols));
  if (B.rows != W.rows || B.cols != 1)
    shape_fail("affine", nodes_.size(), "bias " + shape_str(B.rows, B.cols) + " for " + std::to_string(W.rows) + " rows");
  return push(make_node(Op::Affine, {w.id, x.id, b.id}, W.rows, X.cols));
}

Var Tape::relu(Var a) {
  const Node& x = at(a);
  return push(make_node(Op::Relu, {a.id}, x.rows, x.cols));
}

Var Tape::softplus(Var a) {
  const Node& x = at(a);
  return push(make_node(Op::Softplus, {a.id}, x.rows, x.cols));
}

Var Tape::square(Var a) {
  const Node& x = at(a);
  return push(make_node(Op::Square, {a.id}, x.rows, x.cols));
}

Var Tape::log(Var a) {
  const Node& x = at(a);
  return push(make_node(Op::Log, {a.id}, x.rows, x.cols));
}

Var Tape::exp(Var a) {
  const Node& x = at(a);
  return push(make_node(Op::Exp, {a.id}, x.rows, x.cols));
}

Var Tape::sum(Var a) {
  at(a);
  return push(make_node(Op::Sum, {a.id}, 1, 1));
}

Var Tape::mean(Var a) {
  const Node& x = at(a);
  const double n = static_cast<double>(x.rows * x.cols);
  if (n == 0) shape_fail("mean", nodes_.size(), "empty operand");
  return scale(sum(a), 1.0 / n);
}

Var Tape::concat(std::span<const Var> parts) {
  if (parts.empty()) shape_fail("concat", nodes_.size(), "no operands");
  Node n = make_node(Op::Concat, {}, 0, at(parts.front()).cols);
  for (Var p : parts) {
    const Node& x = at(p);
    if (x.cols != n.cols)
      shape_fail("concat", nodes_.size(), "column mismatch " + std::to_string(x.cols) + " vs " + std::to_string(n.cols));
    n.rows += x.rows;
    n.args.push_back(p.id);
  }
  return push(std::move(n));
}

Var Tape::concat(std::initializer_list<Var> parts) {
  return concat(std::span<const Var>(parts.begin(), parts.size()));
}

Var Tape::slice(Var a, Index offset, Index rows, Index cols) {
  const Node& x = at(a);
  if (offset < 0 || rows < 0 || cols < 0 || offset + rows * cols > x.rows * x.cols)
    shape_fail("slice", nodes_.size(),
               "segment [" + std::to_string(offset) + ", " + std::to_string(offset + rows * cols) + ") of " +
                   shape_str(x.rows, x.cols));
  Node n = make_node(Op::Slice, {a.id}, rows, cols);
  n.offset = offset;
  return push(std::move(n));
}

Var Tape::log_sum_exp_cols(Var a) {
  const Node& x = at(a);
  if (x.rows == 0) shape_fail("log_sum_exp_cols", nodes_.size(), "no rows");
  return push(make_node(Op::LogSumExpCols, {a.id}, 1, x.cols));
}

Var Tape::pick(Var a, std::vector<Index> rows) {
  const Node& x = at(a);
  if (static_cast<Index>(rows.size()) != x.cols)
    shape_fail("pick", nodes_.size(), std::to_string(rows.size()) + " indices for " + std::to_string(x.cols) + " columns");
  for (Index r : rows)
    if (r < 0 || r >= x.rows) shape_fail("pick", nodes_.size(), "row index " + std::to_string(r) + " out of range");
  Node n = make_node(Op::Pick, {a.id}, 1, x.cols);
  n.indices = std::move(rows);
  return push(std::move(n));
}

Var Tape::risk_set_log_sum_exp(Var a, Eigen::VectorXd times) {
  const Node& x = at(a);
  if (x.rows != 1 || times.size() != x.cols)
    shape_fail("risk_set_log_sum_exp", nodes_.size(),
               "operand " + shape_str(x.rows, x.cols) + " with " + std::to_string(times.size()) + " times");
  Node n = make_node(Op::RiskSetLogSumExp, {a.id}, 1, x.cols);
  n.aux = std::move(times);
  // Subjects ordered by decreasing time; ties are contiguous.
  n.indices.resize(static_cast<std::size_t>(x.cols));
  std::iota(n.indices.begin(), n.indices.end(), Index{0});
  std::stable_sort(n.indices.begin(), n.indices.end(),
                   [&](Index i, Index j) { return n.aux(i) > n.aux(j); });
  return push(std::move(n));
}

void Tape::set_root(Var v) {
  const Node& n = at(v);
  if (n.rows != 1 || n.cols != 1) shape_fail("set_root", v.id, "root must be 1x1, got " + shape_str(n.rows, n.cols));
  root_ = v.id;
  has_root_ = true;
}

const MatrixXd& Tape::value(Var v) const {
  const Node& n = at(v);
  if (!evaluated_ && n.op != Op::Constant) throw std::logic_error("value() before forward()");
  return n.value;
}

double Tape::root_value() const {
  if (!evaluated_) throw std::logic_error("root_value() before forward()");
  return nodes_[has_root_ ? root_ : nodes_.size() - 1].value(0, 0);
}

void Tape::reset() {
  for (auto& n : nodes_) {
    if (n.op != Op::Constant) n.value.resize(0, 0);
    n.adjoint.resize(0, 0);
  }
  evaluated_ = false;
}

double Tape::forward(std::initializer_list<Eigen::Ref<const MatrixXd>> inputs) {
  std::vector<MatrixXd> owned;
  owned.reserve(inputs.size());
  for (const auto& in : inputs) owned.emplace_back(in);
  return forward(std::span<const MatrixXd>(owned));
}

double Tape::forward(std::span<const MatrixXd> inputs) {
  if (nodes_.empty()) throw std::logic_error("forward() on an empty tape");
  if (inputs.size() != inputs_.size())
    throw ShapeError("forward: expected " + std::to_string(inputs_.size()) + " inputs, got " +
                     std::to_string(inputs.size()));
  const std::size_t root = has_root_ ? root_ : nodes_.size() - 1;
  if (nodes_[root].rows != 1 || nodes_[root].cols != 1)
    shape_fail("forward", root, "root must be 1x1, got " + shape_str(nodes_[root].rows, nodes_[root].cols));
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Node& n = nodes_[inputs_[k]];
    if (inputs[k].rows() != n.rows || inputs[k].cols() != n.cols)
      shape_fail("forward", inputs_[k],
                 "input " + std::to_string(k) + " has shape " + shape_str(inputs[k].rows(), inputs[k].cols()) +
                     ", declared " + shape_str(n.rows, n.cols));
    n.value = inputs[k];
  }
  for (auto& n : nodes_) evaluate(n);
  evaluated_ = true;
  return nodes_[root].value(0, 0);
}

void Tape::evaluate(Node& n) {
  auto arg = [&](std::size_t k) -> const MatrixXd& { return nodes_[n.args[k]].value; };
  switch (n.op) {
    case Op::Input:
    case Op::Constant:
      break;
    case Op::Add:
      n.value = arg(0) + arg(1);
      break;
    case Op::Sub:
      n.value = arg(0) - arg(1);
      break;
    case Op::Mul:
      n.value = arg(0).cwiseProduct(arg(1));
      break;
    case Op::Scale:
      n.value = n.scalar * arg(0);
      break;
    case Op::MatMul:
      n.value.noalias() = arg(0) * arg(1);
      break;
    case Op::Affine:
      n.value.noalias() = arg(0) * arg(1);
      n.value.colwise() += arg(2).col(0);
      break;
    case Op::Relu:
      n.value = arg(0).cwiseMax(0.0);
      break;
    case Op::Softplus:
      n.value = arg(0).unaryExpr([](double x) { return ad::softplus(x); });
      break;
    case Op::Square:
      n.value = arg(0).array().square().matrix();
      break;
    case Op::Log:
      n.value = arg(0).array().log().matrix();
      break;
    case Op::Exp:
      n.value = arg(0).array().exp().matrix();
      break;
    case Op::Sum: {
      // Serial column-major accumulation keeps the result bit-stable.
      const MatrixXd& a = arg(0);
      double s = 0.0;
      for (Index i = 0; i < a.size(); ++i) s += a.data()[i];
      n.value = MatrixXd::Constant(1, 1, s);
      break;
    }
    case Op::Concat: {
      n.value.resize(n.rows, n.cols);
      Index r = 0;
      for (std::size_t k = 0; k < n.args.size(); ++k) {
        const MatrixXd& part = arg(k);
        n.value.middleRows(r, part.rows()) = part;
        r += part.rows();
      }
      break;
    }
    case Op::Slice:
      n.value = Eigen::Map<const MatrixXd>(arg(0).data() + n.offset, n.rows, n.cols);
      break;
    case Op::LogSumExpCols: {
      const MatrixXd& a = arg(0);
      n.value.resize(1, a.cols());
      for (Index j = 0; j < a.cols(); ++j) {
        const double m = a.col(j).maxCoeff();
        n.value(0, j) = m + std::log((a.col(j).array() - m).exp().sum());
      }
      break;
    }
    case Op::Pick: {
      const MatrixXd& a = arg(0);
      n.value.resize(1, a.cols());
      for (Index j = 0; j < a.cols(); ++j) n.value(0, j) = a(n.indices[static_cast<std::size_t>(j)], j);
      break;
    }
    case Op::RiskSetLogSumExp: {
      const MatrixXd& a = arg(0);
      n.value.resize(1, a.cols());
      if (a.cols() == 0) break;
      const double m = a.maxCoeff();
      double running = 0.0;
      std::size_t g = 0;
      while (g < n.indices.size()) {
        std::size_t end = g;
        const double t = n.aux(n.indices[g]);
        while (end < n.indices.size() && n.aux(n.indices[end]) == t) {
          running += std::exp(a(0, n.indices[end]) - m);
          ++end;
        }
        const double out = m + std::log(running);
        for (std::size_t k = g; k < end; ++k) n.value(0, n.indices[k]) = out;
        g = end;
      }
      break;
    }
  }
}

std::vector<MatrixXd> Tape::backward() {
  if (!evaluated_) throw std::logic_error("backward() called before forward()");
  const std::size_t root = has_root_ ? root_ : nodes_.size() - 1;
  for (auto& n : nodes_) n.adjoint = MatrixXd::Zero(n.rows, n.cols);
  nodes_[root].adjoint(0, 0) = 1.0;
  for (std::size_t i = root + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (n.op == Op::Input || n.op == Op::Constant) continue;
    propagate(n);
  }
  std::vector<MatrixXd> grads;
  grads.reserve(inputs_.size());
  for (std::size_t id : inputs_) grads.push_back(nodes_[id].adjoint);
  return grads;
}

void Tape::propagate(const Node& n) {
  const MatrixXd& g = n.adjoint;
  auto val = [&](std::size_t k) -> const MatrixXd& { return nodes_[n.args[k]].value; };
  auto adj = [&](std::size_t k) -> MatrixXd& { return nodes_[n.args[k]].adjoint; };
  switch (n.op) {
    case Op::Input:
    case Op::Constant:
      break;
    case Op::Add:
      adj(0) += g;
      adj(1) += g;
      break;
    case Op::Sub:
      adj(0) += g;
      adj(1) -= g;
      break;
    case Op::Mul:
      adj(0) += g.cwiseProduct(val(1));
      adj(1) += g.cwiseProduct(val(0));
      break;
    case Op::Scale:
      adj(0) += n.scalar * g;
      break;
    case Op::MatMul:
      adj(0).noalias() += g * val(1).transpose();
      adj(1).noalias() += val(0).transpose() * g;
      break;
    case Op::Affine:
      adj(0).noalias() += g * val(1).transpose();
      adj(1).noalias() += val(0).transpose() * g;
      adj(2) += g.rowwise().sum();
      break;
    case Op::Relu:
      adj(0) += (val(0).array() > 0.0).select(g, 0.0);
      break;
    case Op::Softplus:
      adj(0) += g.cwiseProduct(val(0).unaryExpr([](double x) { return sigmoid(x); }));
      break;
    case Op::Square:
      adj(0) += 2.0 * g.cwiseProduct(val(0));
      break;
    case Op::Log:
      adj(0) += g.cwiseQuotient(val(0));
      break;
    case Op::Exp:
      adj(0) += g.cwiseProduct(n.value);
      break;
    case Op::Sum:
      adj(0).array() += g(0, 0);
      break;
    case Op::Concat: {
      Index r = 0;
      for (std::size_t k = 0; k < n.args.size(); ++k) {
        MatrixXd& a = adj(k);
        a += g.middleRows(r, a.rows());
        r += a.rows();
      }
      break;
    }
    case Op::Slice: {
      MatrixXd& a = adj(0);
      Eigen::Map<MatrixXd>(a.data() + n.offset, n.rows, n.cols) += g;
      break;
    }
    case Op::LogSumExpCols: {
      const MatrixXd& a = val(0);
      for (Index j = 0; j < a.cols(); ++j)
        adj(0).col(j).array() += g(0, j) * (a.col(j).array() - n.value(0, j)).exp();
      break;
    }
    case Op::Pick:
      for (Index j = 0; j < n.cols; ++j) adj(0)(n.indices[static_cast<std::size_t>(j)], j) += g(0, j);
      break;
    case Op::RiskSetLogSumExp: {
      // d out_i / d a_j = exp(a_j - out_i) for t_j >= t_i. Walking subjects by
      // increasing time accumulates sum_{i : t_i <= t_j} g_i exp(m - out_i).
      const MatrixXd& a = val(0);
      if (a.cols() == 0) break;
      const double m = a.maxCoeff();
      double acc = 0.0;
      std::size_t end = n.indices.size();
      while (end > 0) {
        std::size_t begin = end;
        const double t = n.aux(n.indices[end - 1]);
        while (begin > 0 && n.aux(n.indices[begin - 1]) == t) {
          const Index i = n.indices[begin - 1];
          acc += g(0, i) * std::exp(m - n.value(0, i));
          --begin;
        }
        for (std::size_t k = begin; k < end; ++k) {
          const Index j = n.indices[k];
          adj(0)(0, j) += std::exp(a(0, j) - m) * acc;
        }
        end = begin;
      }
      break;
    }
  }
}

GradientCheck check_gradient(const GradientFunction& fn, const ParamVector& x, double h, double floor) {
  const ValueAndGradient base = fn(x);
  if (!std::isfinite(base.value)) throw NumericalError("check_gradient: non-finite value at the base point");
  if (base.gradient.size() != x.size())
    throw ShapeError("check_gradient: gradient length " + std::to_string(base.gradient.size()) + " for " +
                     std::to_string(x.size()) + " coordinates");
  GradientCheck result;
  ParamVector probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    probe(i) = x(i) + h;
    const double up = fn(probe).value;
    probe(i) = x(i) - h;
    const double down = fn(probe).value;
    probe(i) = x(i);
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericalError("check_gradient: non-finite value at coordinate " + std::to_string(i));
    const double fd = (up - down) / (2.0 * h);
    const double g = base.gradient(i);
    const double err = std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), floor});
    if (result.worst_index < 0 || err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_index = i;
    }
  }
  return result;
}

}  // namespace fedmap::ad
