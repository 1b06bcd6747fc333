#include "fedmap/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace fedmap {

std::string to_string(Tier tier) {
  switch (tier) {
    case Tier::T1:
      return "T1";
    case Tier::T2:
      return "T2";
    case Tier::T3:
      return "T3";
  }
  return "T?";
}

Tier tier_from_string(const std::string& s) {
  if (s == "T1") return Tier::T1;
  if (s == "T2") return Tier::T2;
  if (s == "T3") return Tier::T3;
  throw DomainError("unknown tier '" + s + "'");
}

// ---------------------------------------------------------------------------
// SiteDataset

Index SiteDataset::num_events() const {
  return static_cast<Index>(std::count(events.begin(), events.end(), 1));
}

void SiteDataset::validate() const {
  const Index n = size();
  if (n < 1) throw DomainError("site '" + site_id + "': dataset is empty");
  for (Index i = 0; i < n; ++i)
    if (!features.row(i).allFinite())
      throw DomainError("site '" + site_id + "': non-finite feature row " + std::to_string(i));
  if (task == Task::Classification) {
    if (static_cast<Index>(labels.size()) != n)
      throw ShapeError("site '" + site_id + "': " + std::to_string(labels.size()) + " labels for " +
                       std::to_string(n) + " rows");
    for (int y : labels)
      if (y < 0) throw DomainError("site '" + site_id + "': negative class label");
  } else {
    if (times.size() != n || static_cast<Index>(events.size()) != n)
      throw ShapeError("site '" + site_id + "': survival outcome length mismatch");
    for (Index i = 0; i < n; ++i) {
      if (!(times(i) > 0.0) || !std::isfinite(times(i)))
        throw DomainError("site '" + site_id + "': survival time must be positive and finite (row " +
                          std::to_string(i) + ")");
      if (events[static_cast<std::size_t>(i)] != 0 && events[static_cast<std::size_t>(i)] != 1)
        throw DomainError("site '" + site_id + "': event indicator must be 0 or 1");
    }
  }
}

SiteDataset SiteDataset::subset(std::span<const Index> rows) const {
  SiteDataset out;
  out.site_id = site_id;
  out.task = task;
  out.tier = tier;
  out.features.resize(static_cast<Index>(rows.size()), features.cols());
  if (task == Task::Survival) {
    out.times.resize(static_cast<Index>(rows.size()));
    out.events.reserve(rows.size());
  } else {
    out.labels.reserve(rows.size());
  }
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const Index r = rows[k];
    out.features.row(static_cast<Index>(k)) = features.row(r);
    if (task == Task::Survival) {
      out.times(static_cast<Index>(k)) = times(r);
      out.events.push_back(events[static_cast<std::size_t>(r)]);
    } else {
      out.labels.push_back(labels[static_cast<std::size_t>(r)]);
    }
  }
  return out;
}

Standardizer Standardizer::fit(const MatrixXd& features) {
  Standardizer s;
  const double n = static_cast<double>(features.rows());
  s.mean = features.colwise().mean().transpose();
  s.scale.resize(features.cols());
  for (Index j = 0; j < features.cols(); ++j) {
    const double var = n > 0 ? (features.col(j).array() - s.mean(j)).square().sum() / n : 0.0;
    const double sd = std::sqrt(var);
    s.scale(j) = sd > 1e-12 ? sd : 1.0;
  }
  return s;
}

MatrixXd Standardizer::apply(const MatrixXd& features) const {
  if (features.cols() != mean.size())
    throw ShapeError("standardizer fitted on " + std::to_string(mean.size()) + " features, got " +
                     std::to_string(features.cols()));
  MatrixXd out = features.rowwise() - mean.transpose();
  return out.array().rowwise() / scale.transpose().array();
}

// ---------------------------------------------------------------------------
// Presets

namespace {

Index layers_params(const std::vector<DenseLayer>& layers) {
  Index n = 0;
  for (const auto& l : layers) n += l.in * l.out + l.out;
  return n;
}

std::vector<DenseLayer> chain(Index in, const std::vector<Index>& widths, Index out, bool last_relu, bool hidden_bn,
                              bool hidden_dropout) {
  std::vector<DenseLayer> layers;
  Index prev = in;
  for (Index w : widths) {
    layers.push_back({prev, w, true, hidden_bn, hidden_dropout});
    prev = w;
  }
  layers.push_back({prev, out, last_relu, false, false});
  return layers;
}

}  // namespace

Index ModelPreset::num_params() const {
  Index n = layers_params(trunk);
  for (const auto& b : branches) n += layers_params(b.layers);
  return n;
}

Index ModelPreset::output_dim() const { return trunk.empty() ? 0 : trunk.back().out; }

void ModelPreset::validate() const {
  if (input_dim < 1) throw DomainError("preset '" + name + "': input_dim must be positive");
  if (trunk.empty()) throw DomainError("preset '" + name + "': no trunk layers");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw DomainError("preset '" + name + "': dropout must lie in [0,1)");
  Index trunk_in = input_dim;
  if (!branches.empty()) {
    trunk_in = 0;
    for (const auto& b : branches) {
      if (b.offset < 0 || b.length < 1 || b.offset + b.length > input_dim)
        throw DomainError("preset '" + name + "': branch slice outside the input");
      if (b.layers.empty() || b.layers.front().in != b.length)
        throw DomainError("preset '" + name + "': branch input width mismatch");
      for (std::size_t i = 1; i < b.layers.size(); ++i)
        if (b.layers[i].in != b.layers[i - 1].out) throw DomainError("preset '" + name + "': branch layer chain broken");
      trunk_in += b.layers.back().out;
    }
  }
  if (trunk.front().in != trunk_in) throw DomainError("preset '" + name + "': trunk input width mismatch");
  for (std::size_t i = 1; i < trunk.size(); ++i)
    if (trunk[i].in != trunk[i - 1].out) throw DomainError("preset '" + name + "': trunk layer chain broken");
  for (const auto& l : trunk)
    if (l.in < 1 || l.out < 1) throw DomainError("preset '" + name + "': layer widths must be positive");
  if (head == Head::LogHazard && output_dim() != 1)
    throw DomainError("preset '" + name + "': log-hazard head must have one output");
  if (head == Head::Logits && output_dim() < 2)
    throw DomainError("preset '" + name + "': logits head needs at least two classes");
}

ModelPreset make_mlp(std::string name, Index input_dim, const std::vector<Index>& hidden, Index outputs, Head head,
                     double dropout) {
  ModelPreset p;
  p.name = std::move(name);
  p.input_dim = input_dim;
  p.head = head;
  p.dropout = dropout;
  p.trunk = chain(input_dim, hidden, outputs, false, false, dropout > 0.0);
  p.validate();
  return p;
}

ModelPreset cprd_surv_preset(Index input_dim, double dropout) {
  ModelPreset p;
  p.name = "cprd-surv";
  p.input_dim = input_dim;
  p.head = Head::LogHazard;
  p.dropout = dropout;
  p.trunk = chain(input_dim, {64, 32, 16}, 1, false, true, true);
  p.validate();
  return p;
}

ModelPreset interval_mlp_preset(Index input_dim, Index classes, double dropout) {
  ModelPreset p;
  p.name = "interval-mlp";
  p.input_dim = input_dim;
  p.head = Head::Logits;
  p.dropout = dropout;
  p.trunk = chain(input_dim, {64, 64}, classes, false, true, true);
  p.validate();
  return p;
}

ModelPreset eicu_multimodal_preset(std::array<Index, 3> dims, double dropout) {
  ModelPreset p;
  p.name = "eicu-multimodal";
  p.input_dim = dims[0] + dims[1] + dims[2];
  p.head = Head::Logits;
  p.dropout = dropout;
  const std::array<std::vector<Index>, 3> widths = {{{100, 50, 10}, {100, 50, 10}, {40, 20, 10}}};
  Index offset = 0;
  for (std::size_t b = 0; b < 3; ++b) {
    p.branches.push_back({offset, dims[b], chain(dims[b], widths[b], 5, false, false, false)});
    offset += dims[b];
  }
  p.trunk = chain(15, {15, 10, 5}, 2, false, false, true);
  p.validate();
  return p;
}

ModelPreset preset_by_name(const std::string& name, Index input_dim, Index classes, double dropout,
                           const std::vector<Index>& hidden, const std::vector<Index>& branch_dims) {
  if (name == "cprd-surv") return cprd_surv_preset(input_dim, dropout);
  if (name == "interval-mlp") return interval_mlp_preset(input_dim, classes, dropout);
  if (name == "eicu-multimodal") {
    std::array<Index, 3> dims{};
    if (branch_dims.empty()) {
      if (input_dim < 3) throw DomainError("eicu-multimodal needs at least 3 input features");
      dims = {input_dim / 3, input_dim / 3, input_dim - 2 * (input_dim / 3)};
    } else {
      if (branch_dims.size() != 3) throw DomainError("eicu-multimodal takes exactly three branch widths");
      dims = {branch_dims[0], branch_dims[1], branch_dims[2]};
      if (dims[0] + dims[1] + dims[2] != input_dim)
        throw DomainError("eicu-multimodal branch widths must sum to input_dim");
    }
    return eicu_multimodal_preset(dims, dropout);
  }
  if (name == "mlp") return make_mlp("mlp", input_dim, hidden, classes, Head::Logits, dropout);
  if (name == "mlp-surv") return make_mlp("mlp-surv", input_dim, hidden, 1, Head::LogHazard, dropout);
  throw DomainError("unknown model preset '" + name + "'");
}

ParamVector init_params(const ModelPreset& preset, Rng& rng) {
  ParamVector theta(preset.num_params());
  Index off = 0;
  auto fill = [&](const std::vector<DenseLayer>& layers) {
    for (const auto& l : layers) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Index i = 0; i < l.in * l.out + l.out; ++i) theta(off++) = u(rng);
    }
  };
  for (const auto& b : preset.branches) fill(b.layers);
  fill(preset.trunk);
  return theta;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

MatrixXd run_layers(const std::vector<DenseLayer>& layers, const ParamVector& theta, Index& off, MatrixXd h) {
  for (const auto& l : layers) {
    Eigen::Map<const MatrixXd> w(theta.data() + off, l.out, l.in);
    Eigen::Map<const Eigen::VectorXd> b(theta.data() + off + l.in * l.out, l.out);
    off += l.in * l.out + l.out;
    MatrixXd z = w * h;
    z.colwise() += b;
    if (l.relu) z = z.cwiseMax(0.0);
    h = std::move(z);
  }
  return h;
}

ad::Var record_layers(ad::Tape& tape, const std::vector<DenseLayer>& layers, ad::Var theta, Index& off, ad::Var h,
                      Index cols, double dropout, Rng* rng) {
  for (const auto& l : layers) {
    const ad::Var w = tape.slice(theta, off, l.out, l.in);
    const ad::Var b = tape.slice(theta, off + l.in * l.out, l.out, 1);
    off += l.in * l.out + l.out;
    h = tape.affine(w, h, b);
    if (l.relu) h = tape.relu(h);
    if (rng != nullptr && l.dropout && dropout > 0.0) {
      std::bernoulli_distribution keep(1.0 - dropout);
      MatrixXd mask(l.out, cols);
      for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? 1.0 / (1.0 - dropout) : 0.0;
      h = tape.mul(h, tape.constant(std::move(mask)));
    }
  }
  return h;
}

MatrixXd gather_columns(const MatrixXd& by_column, std::span<const Index> rows) {
  MatrixXd out(by_column.rows(), static_cast<Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) out.col(static_cast<Index>(k)) = by_column.col(rows[k]);
  return out;
}

}  // namespace

MatrixXd predict_batch(const ModelPreset& preset, const ParamVector& theta, const MatrixXd& features) {
  if (theta.size() != preset.num_params())
    throw ShapeError("predict: theta has length " + std::to_string(theta.size()) + ", preset '" + preset.name +
                     "' needs " + std::to_string(preset.num_params()));
  if (features.cols() != preset.input_dim)
    throw ShapeError("predict: " + std::to_string(features.cols()) + " features, preset expects " +
                     std::to_string(preset.input_dim));
  const MatrixXd x = features.transpose();
  Index off = 0;
  MatrixXd h;
  if (preset.branches.empty()) {
    h = x;
  } else {
    std::vector<MatrixXd> outs;
    Index rows = 0;
    for (const auto& b : preset.branches) {
      outs.push_back(run_layers(b.layers, theta, off, x.middleRows(b.offset, b.length)));
      rows += outs.back().rows();
    }
    h.resize(rows, x.cols());
    Index r = 0;
    for (auto& o : outs) {
      h.middleRows(r, o.rows()) = o;
      r += o.rows();
    }
  }
  MatrixXd out = run_layers(preset.trunk, theta, off, std::move(h)).transpose();
  for (Index i = 0; i < out.rows(); ++i)
    if (!out.row(i).allFinite()) throw NumericalError("predict: non-finite output for input row " + std::to_string(i));
  return out;
}

Eigen::VectorXd predict(const ModelPreset& preset, const ParamVector& theta, const Eigen::VectorXd& x) {
  return predict_batch(preset, theta, x.transpose()).row(0).transpose();
}

Eigen::VectorXd positive_probability(const MatrixXd& logits) {
  if (logits.cols() < 2) throw ShapeError("positive_probability needs at least two logit columns");
  Eigen::VectorXd p(logits.rows());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const double denom = (logits.row(i).array() - m).exp().sum();
    p(i) = std::exp(logits(i, 1) - m) / denom;
  }
  return p;
}

ad::Var record_forward(ad::Tape& tape, const ModelPreset& preset, ad::Var theta, const MatrixXd& x, Rng* rng) {
  if (x.rows() != preset.input_dim)
    throw ShapeError("record_forward: " + std::to_string(x.rows()) + " features, preset expects " +
                     std::to_string(preset.input_dim));
  Index off = 0;
  ad::Var h;
  if (preset.branches.empty()) {
    h = tape.constant(x);
  } else {
    std::vector<ad::Var> outs;
    for (const auto& b : preset.branches)
      outs.push_back(record_layers(tape, b.layers, theta, off, tape.constant(x.middleRows(b.offset, b.length)),
                                   x.cols(), preset.dropout, rng));
    h = tape.concat(outs);
  }
  return record_layers(tape, preset.trunk, theta, off, h, x.cols(), preset.dropout, rng);
}

// ---------------------------------------------------------------------------
// Losses

CrossEntropyLoss::CrossEntropyLoss(ModelPreset preset, const SiteDataset& data)
    : preset_(std::move(preset)), inputs_(data.features.transpose()), labels_(data.labels) {
  if (preset_.head != Head::Logits) throw DomainError("cross-entropy needs a logits head");
  if (data.task != Task::Classification) throw DomainError("cross-entropy needs classification labels");
  data.validate();
  for (int y : labels_)
    if (y >= preset_.num_classes())
      throw DomainError("label " + std::to_string(y) + " outside " + std::to_string(preset_.num_classes()) +
                        " classes");
}

std::optional<ad::Var> CrossEntropyLoss::record(ad::Tape& tape, ad::Var theta, std::span<const Index> rows,
                                                Rng* rng) const {
  if (rows.empty()) return std::nullopt;
  const ad::Var logits = record_forward(tape, preset_, theta, gather_columns(inputs_, rows), rng);
  std::vector<Index> picked(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) picked[k] = labels_[static_cast<std::size_t>(rows[k])];
  const ad::Var nll = tape.sub(tape.log_sum_exp_cols(logits), tape.pick(logits, std::move(picked)));
  return tape.mean(nll);
}

CoxLoss::CoxLoss(ModelPreset preset, const SiteDataset& data)
    : preset_(std::move(preset)), inputs_(data.features.transpose()), times_(data.times), events_(data.events) {
  if (preset_.head != Head::LogHazard) throw DomainError("Cox loss needs a log-hazard head");
  if (data.task != Task::Survival) throw DomainError("Cox loss needs survival outcomes");
  data.validate();
}

std::optional<ad::Var> CoxLoss::record(ad::Tape& tape, ad::Var theta, std::span<const Index> rows, Rng* rng) const {
  MatrixXd event_row(1, static_cast<Index>(rows.size()));
  Eigen::VectorXd t(static_cast<Index>(rows.size()));
  double n_events = 0.0;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto i = static_cast<std::size_t>(rows[k]);
    event_row(0, static_cast<Index>(k)) = events_[i];
    t(static_cast<Index>(k)) = times_(rows[k]);
    n_events += events_[i];
  }
  if (n_events == 0.0) return std::nullopt;
  const ad::Var eta = record_forward(tape, preset_, theta, gather_columns(inputs_, rows), rng);
  const ad::Var per_subject = tape.sub(tape.risk_set_log_sum_exp(eta, std::move(t)), eta);
  return tape.scale(tape.sum(tape.mul(per_subject, tape.constant(std::move(event_row)))), 1.0 / n_events);
}

std::unique_ptr<LocalLoss> make_loss(const ModelPreset& preset, const SiteDataset& data) {
  if (data.task == Task::Survival) return std::make_unique<CoxLoss>(preset, data);
  return std::make_unique<CrossEntropyLoss>(preset, data);
}

namespace {

double full_loss(const LocalLoss& loss, const ParamVector& theta) {
  if (theta.size() != loss.dim())
    throw ShapeError("theta has length " + std::to_string(theta.size()) + ", expected " + std::to_string(loss.dim()));
  std::vector<Index> rows(static_cast<std::size_t>(loss.size()));
  std::iota(rows.begin(), rows.end(), Index{0});
  ad::Tape tape;
  const ad::Var th = tape.input(theta.size());
  if (!loss.record(tape, th, rows, nullptr)) throw DomainError("loss undefined on these rows");
  return tape.forward({theta});
}

}  // namespace

double cross_entropy(const ModelPreset& preset, const ParamVector& theta, const SiteDataset& data) {
  return full_loss(CrossEntropyLoss(preset, data), theta);
}

double cox_loss(const ModelPreset& preset, const ParamVector& theta, const SiteDataset& data) {
  if (data.num_events() == 0) throw DomainError("cox_loss: partial likelihood undefined without events");
  return full_loss(CoxLoss(preset, data), theta);
}

// ---------------------------------------------------------------------------
// Training

ad::ValueAndGradient Objective::evaluate(const ParamVector& theta, std::span<const Index> rows, Rng* rng) const {
  if (theta.size() != loss_->dim())
    throw ShapeError("objective: theta has length " + std::to_string(theta.size()) + ", expected " +
                     std::to_string(loss_->dim()));
  ad::Tape tape;
  const ad::Var th = tape.input(theta.size());
  std::optional<ad::Var> total;
  if (auto data = loss_->record(tape, th, rows, rng)) total = loss_scale_ == 1.0 ? *data : tape.scale(*data, loss_scale_);
  if (extra_) {
    const ad::Var r = extra_(tape, th);
    total = total ? tape.add(*total, r) : r;
  }
  if (!total) total = tape.scalar_constant(0.0);
  tape.set_root(*total);
  ad::ValueAndGradient out;
  out.value = tape.forward({theta});
  out.gradient = tape.backward().front();
  return out;
}

ad::ValueAndGradient Objective::evaluate_full(const ParamVector& theta) const {
  std::vector<Index> rows(static_cast<std::size_t>(loss_->size()));
  std::iota(rows.begin(), rows.end(), Index{0});
  return evaluate(theta, rows, nullptr);
}

TrainResult train_local_sgd(const ParamVector& theta0, const Objective& objective, const OptimizerConfig& cfg,
                            int epochs, std::uint64_t seed) {
  if (cfg.name != "adam" && cfg.name != "sgd") throw DomainError("unknown optimiser '" + cfg.name + "'");
  if (!(cfg.lr > 0.0)) throw DomainError("learning rate must be positive");
  if (cfg.batch_size < 1) throw DomainError("batch size must be positive");
  const Index n = objective.num_samples();
  if (n < 1) throw DomainError("train_local_sgd: empty dataset");

  Rng rng(seed);
  TrainResult result;
  result.theta = theta0;
  ParamVector m = ParamVector::Zero(theta0.size());
  ParamVector v = ParamVector::Zero(theta0.size());
  long step = 0;
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    int batches = 0;
    for (Index start = 0, b = 0; start < n; start += cfg.batch_size, ++b) {
      const Index len = std::min(cfg.batch_size, n - start);
      const std::span<const Index> rows(order.data() + start, static_cast<std::size_t>(len));
      ad::ValueAndGradient vg = objective.evaluate(result.theta, rows, &rng);
      if (!std::isfinite(vg.value) || !vg.gradient.allFinite()) {
        std::ostringstream os;
        os << "non-finite objective at epoch " << epoch << ", batch " << b;
        throw NumericalError(os.str());
      }
      if (cfg.weight_decay != 0.0) vg.gradient += cfg.weight_decay * result.theta;
      ++step;
      if (cfg.name == "adam") {
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * vg.gradient;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * vg.gradient.cwiseAbs2();
        const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
        result.theta.array() -= cfg.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.epsilon);
      } else {
        result.theta -= cfg.lr * vg.gradient;
      }
      epoch_sum += vg.value;
      ++batches;
    }
    const double epoch_loss = epoch_sum / batches;
    result.epoch_losses.push_back(epoch_loss);
    if (cfg.early_stopping) {
      if (epoch_loss < best) {
        best = epoch_loss;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        break;
      }
    }
  }
  return result;
}

}  // namespace fedmap
