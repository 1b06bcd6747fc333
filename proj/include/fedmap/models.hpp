#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedmap/autodiff.hpp"
#include "fedmap/types.hpp"

namespace fedmap {

enum class Task { Classification, Survival };
enum class Tier { T1, T2, T3 };

std::string to_string(Tier tier);
Tier tier_from_string(const std::string& s);

/// One site's local supervised data Z_k. Features are stored one sample per row.
struct SiteDataset {
  std::string site_id;
  Task task = Task::Classification;
  MatrixXd features;
  std::vector<int> labels;  // classification
  Eigen::VectorXd times;    // survival
  std::vector<int> events;  // survival, 0/1
  Tier tier = Tier::T1;

  Index size() const { return features.rows(); }
  Index num_features() const { return features.cols(); }
  Index num_events() const;
  /// Throws DomainError on empty data, non-finite rows or non-positive times.
  void validate() const;
  SiteDataset subset(std::span<const Index> rows) const;
};

/// Per-feature standardisation fitted on one site's training rows and then frozen.
struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;

  static Standardizer fit(const MatrixXd& features);
  MatrixXd apply(const MatrixXd& features) const;
};

enum class Head { Logits, LogHazard };

struct DenseLayer {
  Index in = 0;
  Index out = 0;
  bool relu = true;
  /// Recorded for architecture fidelity; realised as input standardisation.
  bool batch_norm = false;
  bool dropout = false;
};

/// A sub-network applied to a fixed slice of the input vector.
struct Branch {
  Index offset = 0;
  Index length = 0;
  std::vector<DenseLayer> layers;
};

/// Network architecture. Parameters are laid out branch by branch, then the
/// trunk, each layer as a column-major weight matrix (out x in) followed by
/// its bias.
struct ModelPreset {
  std::string name;
  Index input_dim = 0;
  std::vector<Branch> branches;  // empty: the trunk consumes the whole input
  std::vector<DenseLayer> trunk;
  Head head = Head::Logits;
  double dropout = 0.0;

  Index num_params() const;
  Index output_dim() const;
  Index num_classes() const { return head == Head::Logits ? output_dim() : 0; }
  void validate() const;
};

ModelPreset make_mlp(std::string name, Index input_dim, const std::vector<Index>& hidden, Index outputs, Head head,
                     double dropout = 0.0);
/// Linear(in,64)-ReLU-BN-Dropout, 64-32, 32-16, Linear(16,1) log-hazard.
ModelPreset cprd_surv_preset(Index input_dim, double dropout = 0.1);
/// Linear(in,64)-ReLU-BN-Dropout, Linear(64,64)-ReLU-BN-Dropout, Linear(64,classes).
ModelPreset interval_mlp_preset(Index input_dim, Index classes = 2, double dropout = 0.0);
/// Medication, diagnosis and physiology extractors over consecutive input
/// slices, concatenated into a 15-15-10-5-2 trunk.
ModelPreset eicu_multimodal_preset(std::array<Index, 3> branch_dims, double dropout = 0.3);

/// Resolves "cprd-surv", "eicu-multimodal", "interval-mlp" or "mlp".
/// `hidden` applies to "mlp" only; `branch_dims` to "eicu-multimodal" (equal
/// thirds of input_dim when empty).
ModelPreset preset_by_name(const std::string& name, Index input_dim, Index classes, double dropout,
                           const std::vector<Index>& hidden = {}, const std::vector<Index>& branch_dims = {});

/// Default initialiser: every weight and bias ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
ParamVector init_params(const ModelPreset& preset, Rng& rng);

/// Straight-line evaluation of phi_theta on every row of `features`; returns
/// one row of scores per sample. Dropout is off.
MatrixXd predict_batch(const ModelPreset& preset, const ParamVector& theta, const MatrixXd& features);
Eigen::VectorXd predict(const ModelPreset& preset, const ParamVector& theta, const Eigen::VectorXd& x);
/// Softmax probability of class 1 for each row (binary logits heads).
Eigen::VectorXd positive_probability(const MatrixXd& logits);

/// Records phi_theta on the tape for a p x n block of samples (one per column).
/// A non-null rng enables inverted dropout on the flagged layers.
ad::Var record_forward(ad::Tape& tape, const ModelPreset& preset, ad::Var theta, const MatrixXd& inputs_by_column,
                       Rng* dropout_rng = nullptr);

/// A mean local loss (1/|B|) sum_{i in B} loss_i(theta) that can be recorded on a tape.
class LocalLoss {
 public:
  virtual ~LocalLoss() = default;
  virtual Index size() const = 0;
  virtual Index dim() const = 0;
  /// Returns nothing when the rows carry no signal (a Cox batch without events).
  virtual std::optional<ad::Var> record(ad::Tape& tape, ad::Var theta, std::span<const Index> rows,
                                        Rng* dropout_rng) const = 0;
};

class CrossEntropyLoss final : public LocalLoss {
 public:
  CrossEntropyLoss(ModelPreset preset, const SiteDataset& data);
  Index size() const override { return static_cast<Index>(labels_.size()); }
  Index dim() const override { return preset_.num_params(); }
  std::optional<ad::Var> record(ad::Tape& tape, ad::Var theta, std::span<const Index> rows,
                                Rng* dropout_rng) const override;

 private:
  ModelPreset preset_;
  MatrixXd inputs_;  // p x N
  std::vector<int> labels_;
};

/// Breslow negative partial log-likelihood averaged over events; risk sets
/// are {j : t_j >= t_i} within the recorded rows.
class CoxLoss final : public LocalLoss {
 public:
  CoxLoss(ModelPreset preset, const SiteDataset& data);
  Index size() const override { return times_.size(); }
  Index dim() const override { return preset_.num_params(); }
  std::optional<ad::Var> record(ad::Tape& tape, ad::Var theta, std::span<const Index> rows,
                                Rng* dropout_rng) const override;

 private:
  ModelPreset preset_;
  MatrixXd inputs_;  // p x N
  Eigen::VectorXd times_;
  std::vector<int> events_;
};

std::unique_ptr<LocalLoss> make_loss(const ModelPreset& preset, const SiteDataset& data);

/// Mean negative log-likelihood of the labels under softmax(phi_theta(x)).
double cross_entropy(const ModelPreset& preset, const ParamVector& theta, const SiteDataset& data);
/// Mean Breslow negative partial log-likelihood per event. Throws DomainError
/// when the data hold no events.
double cox_loss(const ModelPreset& preset, const ParamVector& theta, const SiteDataset& data);

/// Extra objective term recorded on the same tape as the loss, e.g. a prior.
using TapeTerm = std::function<ad::Var(ad::Tape&, ad::Var theta)>;

/// Scalar training objective: mean loss over a batch of rows plus an optional term.
class Objective {
 public:
  explicit Objective(const LocalLoss& loss, TapeTerm extra = {}, double loss_scale = 1.0)
      : loss_(&loss), extra_(std::move(extra)), loss_scale_(loss_scale) {}

  Index num_samples() const { return loss_->size(); }
  Index dim() const { return loss_->dim(); }
  ad::ValueAndGradient evaluate(const ParamVector& theta, std::span<const Index> rows,
                                Rng* dropout_rng = nullptr) const;
  ad::ValueAndGradient evaluate_full(const ParamVector& theta) const;
  double value_full(const ParamVector& theta) const { return evaluate_full(theta).value; }

 private:
  const LocalLoss* loss_;
  TapeTerm extra_;
  double loss_scale_;
};

struct OptimizerConfig {
  std::string name = "adam";  // "adam" or "sgd"
  double lr = 1e-3;
  Index batch_size = 128;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Stop when the epoch loss has not improved for `patience` epochs.
  bool early_stopping = false;
  int patience = 5;
};

struct TrainResult {
  ParamVector theta;
  std::vector<double> epoch_losses;  // mean batch objective per epoch
};

/// Mini-batch training for `epochs` passes over the data. Batch order and
/// dropout masks come from an RNG seeded by `seed` only. Throws NumericalError
/// naming the epoch and batch if the objective turns non-finite.
TrainResult train_local_sgd(const ParamVector& theta0, const Objective& objective, const OptimizerConfig& config,
                            int epochs, std::uint64_t seed);

}  // namespace fedmap
