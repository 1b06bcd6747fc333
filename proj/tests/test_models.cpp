#include <doctest.h>

#include <cmath>
#include <numeric>

#include "fedmap/analysis.hpp"
#include "fedmap/models.hpp"
#include "oracles.hpp"

using namespace fedmap;

namespace {

SiteDataset random_classification(Index n, Index p, Index classes, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> cls(0, static_cast<int>(classes) - 1);
  SiteDataset d;
  d.site_id = "s";
  d.features = MatrixXd::NullaryExpr(n, p, [&] { return normal(rng); });
  for (Index i = 0; i < n; ++i) d.labels.push_back(cls(rng));
  return d;
}

SiteDataset random_survival(Index n, Index p, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.1, 5.0);
  SiteDataset d;
  d.site_id = "s";
  d.task = Task::Survival;
  d.features = MatrixXd::NullaryExpr(n, p, [&] { return normal(rng); });
  d.times.resize(n);
  for (Index i = 0; i < n; ++i) {
    d.times(i) = std::ceil(unif(rng) * 4) / 4;  // ties on purpose
    d.events.push_back(i % 3 != 2);
  }
  return d;
}

ad::GradientFunction full_objective(const Objective& obj) {
  return [&obj](const ParamVector& th) { return obj.evaluate_full(th); };
}

}  // namespace

TEST_SUITE("models") {
  TEST_CASE("zero parameters give zero logits") {
    const ModelPreset m = make_mlp("m", 4, {8, 8}, 3, Head::Logits);
    Rng rng(1);
    const MatrixXd x = MatrixXd::Random(5, 4);
    CHECK(predict_batch(m, ParamVector::Zero(m.num_params()), x).isZero(0.0));
  }

  TEST_CASE("a single identity layer returns its input") {
    const ModelPreset m = make_mlp("id", 3, {}, 3, Head::Logits);
    ParamVector theta = ParamVector::Zero(m.num_params());
    theta.head(9) = MatrixXd::Identity(3, 3).reshaped();
    const Eigen::VectorXd x(Eigen::Vector3d(0.5, -2.0, 7.0));
    CHECK(predict(m, theta, x) == x);
  }

  TEST_CASE("batched prediction agrees with a straight-line evaluation") {
    const ModelPreset m = make_mlp("m", 5, {7, 4}, 2, Head::Logits);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      const ParamVector theta = init_params(m, rng);
      const MatrixXd x = MatrixXd::Random(6, 5);
      const MatrixXd out = predict_batch(m, theta, x);
      for (Index i = 0; i < x.rows(); ++i) {
        const Eigen::VectorXd ref = oracle::mlp_forward({5, 7, 4, 2}, theta, x.row(i).transpose());
        CHECK((out.row(i).transpose() - ref).cwiseAbs().maxCoeff() <= 1e-12);
      }
    }
  }

  TEST_CASE("tabulated presets reproduce their layer sequences") {
    const ModelPreset cprd = cprd_surv_preset(20);
    REQUIRE(cprd.trunk.size() == 4);
    CHECK(cprd.trunk[0].out == 64);
    CHECK(cprd.trunk[1].out == 32);
    CHECK(cprd.trunk[2].out == 16);
    CHECK(cprd.trunk[3].out == 1);
    CHECK(cprd.head == Head::LogHazard);
    CHECK(cprd.trunk[0].batch_norm);
    CHECK(cprd.dropout == 0.1);

    const ModelPreset interval = interval_mlp_preset(30);
    REQUIRE(interval.trunk.size() == 3);
    CHECK(interval.trunk[0].out == 64);
    CHECK(interval.trunk[1].out == 64);
    CHECK(interval.trunk[2].out == 2);

    const ModelPreset eicu = eicu_multimodal_preset({12, 9, 6});
    REQUIRE(eicu.branches.size() == 3);
    CHECK(eicu.branches[1].offset == 12);
    CHECK(eicu.branches[2].layers.front().out == 40);
    CHECK(eicu.trunk.front().in == 15);
    CHECK(eicu.output_dim() == 2);

    Rng rng(4);
    for (const ModelPreset& m : {cprd, interval, eicu})
      CHECK(init_params(m, rng).size() == m.num_params());
  }

  TEST_CASE("preset lookup by name") {
    CHECK(preset_by_name("cprd-surv", 8, 0, 0.1).name == "cprd-surv");
    CHECK(preset_by_name("eicu-multimodal", 9, 2, 0.3).branches[0].length == 3);
    CHECK_THROWS_AS(preset_by_name("resnet", 8, 2, 0.0), DomainError);
  }

  TEST_CASE("wrong parameter length is rejected") {
    const ModelPreset m = make_mlp("m", 3, {4}, 2, Head::Logits);
    CHECK_THROWS_AS(predict_batch(m, ParamVector::Zero(3), MatrixXd::Zero(1, 3)), ShapeError);
  }

  TEST_CASE("cross-entropy closed forms") {
    const ModelPreset m = make_mlp("m", 3, {4}, 2, Head::Logits);
    Rng rng(2);
    const SiteDataset d = random_classification(10, 3, 2, rng);
    CHECK(cross_entropy(m, ParamVector::Zero(m.num_params()), d) == doctest::Approx(std::log(2.0)).epsilon(1e-14));

    // Single linear layer with a huge margin toward the true class.
    const ModelPreset lin = make_mlp("lin", 1, {}, 2, Head::Logits);
    SiteDataset one;
    one.features = MatrixXd::Constant(1, 1, 1.0);
    one.labels = {1};
    ParamVector theta(4);
    theta << -400.0, 400.0, 0.0, 0.0;
    const double loss = cross_entropy(lin, theta, one);
    CHECK(std::isfinite(loss));
    CHECK(loss <= 1e-300);
    one.labels = {0};
    CHECK(cross_entropy(lin, theta, one) == doctest::Approx(800.0));
  }

  TEST_CASE("cross-entropy equals the per-sample sum") {
    const ModelPreset m = make_mlp("m", 4, {6}, 3, Head::Logits);
    Rng rng(9);
    const SiteDataset d = random_classification(25, 4, 3, rng);
    const ParamVector theta = init_params(m, rng);
    double total = 0;
    for (Index i = 0; i < d.size(); ++i) {
      const Eigen::VectorXd z = oracle::mlp_forward({4, 6, 3}, theta, d.features.row(i).transpose());
      total += std::log(z.array().exp().sum()) - z(d.labels[i]);
    }
    CHECK(cross_entropy(m, theta, d) == doctest::Approx(total / 25).epsilon(1e-10));
  }

  TEST_CASE("cox closed forms") {
    const ModelPreset lin = make_mlp("lin", 1, {}, 1, Head::LogHazard);
    SiteDataset two;
    two.task = Task::Survival;
    two.features = MatrixXd::Constant(2, 1, 1.0);
    two.times = Eigen::Vector2d(1.0, 2.0);
    two.events = {1, 0};
    const ParamVector theta = ParamVector::Constant(2, 0.3);
    CHECK(cox_loss(lin, theta, two) == doctest::Approx(std::log(2.0)).epsilon(1e-14));

    SiteDataset one = two.subset(std::vector<Index>{0});
    CHECK(std::abs(cox_loss(lin, theta, one)) <= 1e-15);

    two.events = {0, 0};
    CHECK_THROWS_AS(cox_loss(lin, theta, two), DomainError);
  }

  TEST_CASE("cox loss equals risk-set enumeration and ignores a common shift") {
    const ModelPreset m = make_mlp("m", 3, {5}, 1, Head::LogHazard);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed);
      const SiteDataset d = random_survival(10, 3, rng);
      ParamVector theta = init_params(m, rng);
      std::vector<double> eta, t(d.times.data(), d.times.data() + 10);
      for (Index i = 0; i < 10; ++i) eta.push_back(oracle::mlp_forward({3, 5, 1}, theta, d.features.row(i).transpose())(0));
      const double loss = cox_loss(m, theta, d);
      CHECK(loss == doctest::Approx(oracle::cox_nll(eta, t, d.events)).epsilon(1e-10));
      theta(theta.size() - 1) += 3.7;  // output bias
      CHECK(std::abs(cox_loss(m, theta, d) - loss) <= 1e-10);
    }
  }

  TEST_CASE("loss gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      const ModelPreset ce = make_mlp("m", 4, {6}, 2, Head::Logits);
      const SiteDataset dc = random_classification(15, 4, 2, rng);
      const CrossEntropyLoss lc(ce, dc);
      const Objective oc(lc);
      CHECK(ad::check_gradient(full_objective(oc), init_params(ce, rng)).max_relative_error <= 1e-5);

      const ModelPreset cx = make_mlp("c", 4, {6}, 1, Head::LogHazard);
      const SiteDataset ds = random_survival(15, 4, rng);
      const CoxLoss ls(cx, ds);
      const Objective os(ls);
      CHECK(ad::check_gradient(full_objective(os), init_params(cx, rng)).max_relative_error <= 1e-5);
    }
  }

  TEST_CASE("multimodal preset gradient") {
    Rng rng(5);
    const ModelPreset m = eicu_multimodal_preset({3, 3, 2});
    const SiteDataset d = random_classification(8, 8, 2, rng);
    const CrossEntropyLoss l(m, d);
    const Objective o(l);
    CHECK(ad::check_gradient(full_objective(o), init_params(m, rng)).max_relative_error <= 1e-5);
  }

  TEST_CASE("training finds the minimiser of a one-dimensional quadratic") {
    const QuadraticAnchorLoss loss(ParamVector::Constant(1, 2.0), 1);
    const Objective obj(loss);
    OptimizerConfig cfg;
    cfg.name = "sgd";
    cfg.lr = 0.1;
    cfg.batch_size = 1;
    const TrainResult r = train_local_sgd(ParamVector::Zero(1), obj, cfg, 500, 1);
    CHECK(std::abs(r.theta(0) - 2.0) <= 1e-6);
    CHECK(r.epoch_losses.size() == 500);
  }

  TEST_CASE("training decreases a convex logistic objective and is deterministic") {
    Rng rng(6);
    const ModelPreset m = make_mlp("lin", 4, {}, 2, Head::Logits);
    const SiteDataset d = random_classification(200, 4, 2, rng);
    const CrossEntropyLoss loss(m, d);
    const Objective obj(loss);
    const ParamVector theta0 = init_params(m, rng);
    OptimizerConfig cfg;
    cfg.batch_size = 32;
    cfg.lr = 0.01;
    const TrainResult a = train_local_sgd(theta0, obj, cfg, 5, 42);
    const TrainResult b = train_local_sgd(theta0, obj, cfg, 5, 42);
    CHECK(obj.value_full(a.theta) <= obj.value_full(theta0));
    CHECK(a.theta == b.theta);
    CHECK(a.epoch_losses == b.epoch_losses);
  }

  TEST_CASE("dropout off makes prediction pure") {
    const ModelPreset m = cprd_surv_preset(6);
    Rng rng(8);
    const ParamVector theta = init_params(m, rng);
    const MatrixXd x = MatrixXd::Random(4, 6);
    CHECK(predict_batch(m, theta, x) == predict_batch(m, theta, x));
  }

  TEST_CASE("standardizer uses training statistics only") {
    MatrixXd train(3, 2);
    train << 1, 10, 2, 10, 3, 10;
    const Standardizer s = Standardizer::fit(train);
    const MatrixXd z = s.apply(train);
    CHECK(std::abs(z.col(0).mean()) <= 1e-15);
    CHECK(z.col(1).isZero(0.0));
    CHECK(std::isfinite(s.apply(MatrixXd::Constant(1, 2, 99.0)).sum()));
  }

  TEST_CASE("site validation") {
    SiteDataset d;
    d.site_id = "x";
    d.task = Task::Survival;
    d.features = MatrixXd::Zero(2, 1);
    d.times = Eigen::Vector2d(1.0, 0.0);
    d.events = {1, 0};
    CHECK_THROWS_AS(d.validate(), DomainError);
    d.times(1) = 2.0;
    CHECK_NOTHROW(d.validate());
    d.features(0, 0) = std::nan("");
    CHECK_THROWS_AS(d.validate(), DomainError);
  }
}
