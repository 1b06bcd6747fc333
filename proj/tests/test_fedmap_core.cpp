#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedmap/analysis.hpp"
#include "fedmap/baselines.hpp"

using namespace fedmap;

namespace {

LocalUpdate update(std::string id, ParamVector theta, double log_weight, Index n) {
  LocalUpdate u;
  u.site_id = std::move(id);
  u.theta = std::move(theta);
  u.log_weight = log_weight;
  u.num_samples = n;
  return u;
}

SiteDataset logistic_site(std::string id, Index n, double shift, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  SiteDataset d;
  d.site_id = std::move(id);
  d.features = MatrixXd::NullaryExpr(n, 3, [&] { return normal(rng); });
  for (Index i = 0; i < n; ++i) d.labels.push_back(d.features(i, 0) + shift + 0.5 * normal(rng) > 0);
  return d;
}

// A site whose loss cannot be evaluated.
class FailingLoss final : public LocalLoss {
 public:
  explicit FailingLoss(Index dim) : dim_(dim) {}
  Index size() const override { return 10; }
  Index dim() const override { return dim_; }
  std::optional<ad::Var> record(ad::Tape&, ad::Var, std::span<const Index>, Rng*) const override {
    throw NumericalError("loss unavailable");
  }

 private:
  Index dim_;
};

PriorState quad_prior_state(Index d, double alpha, double eps) {
  PriorState p;
  p.mu = ParamVector::Zero(d);
  p.alpha = alpha;
  p.epsilon = eps;
  return p;
}

}  // namespace

TEST_SUITE("fedmap_core") {
  TEST_CASE("log weight plug-in values") {
    CHECK(log_weight_from(0.0, 10, 0.0, LikelihoodScaling::MeanNll) == 0.0);
    CHECK(log_weight_from(2.0, 10, 0.6, LikelihoodScaling::MeanNll) == doctest::Approx(-2.6).epsilon(1e-15));
    CHECK(log_weight_from(2.0, 10, 0.6, LikelihoodScaling::PaperLiteral) == doctest::Approx(-20.6).epsilon(1e-15));
    const std::vector<LocalUpdate> u{update("a", ParamVector::Zero(1), -3.0, 5),
                                     update("b", ParamVector::Zero(1), -3.0, 50)};
    const auto w = normalized_weights(u, WeightMode::Posterior);
    CHECK(w[0] == 0.5);
    CHECK(w[1] == 0.5);
  }

  TEST_CASE("log weight stays finite where the raw weight underflows") {
    const std::vector<LocalUpdate> u{update("a", ParamVector::Constant(1, 1.0), -5000.0, 5),
                                     update("b", ParamVector::Constant(1, 3.0), -5001.0, 5)};
    const auto w = normalized_weights(u, WeightMode::Posterior);
    CHECK(w[0] == doctest::Approx(1 / (1 + std::exp(-1.0))).epsilon(1e-14));
    CHECK(std::isfinite(aggregate_mu(u, WeightMode::Posterior)(0)));
  }

  TEST_CASE("weighted mean and identity") {
    ParamVector a(2), b(2);
    a << 1, 1;
    b << 3, 3;
    const std::vector<LocalUpdate> u{update("a", a, 0.0, 1), update("b", b, std::log(3.0), 3)};
    const ParamVector mu = aggregate_mu(u, WeightMode::Posterior);
    CHECK(mu(0) == doctest::Approx(2.5).epsilon(1e-15));
    CHECK(aggregate_mu(u, WeightMode::SampleSize)(1) == doctest::Approx(2.5).epsilon(1e-15));
    CHECK(aggregate_mu(u, WeightMode::Uniform)(1) == doctest::Approx(2.0).epsilon(1e-15));
    const std::vector<LocalUpdate> one{update("a", a, -7.0, 4)};
    CHECK(aggregate_mu(one, WeightMode::Posterior) == a);
  }

  TEST_CASE("sample-size aggregation is bit-identical to the FedAvg baseline") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      Rng rng(seed);
      std::normal_distribution<double> normal(0.0, 3.0);
      std::uniform_int_distribution<int> n(1, 1000);
      std::vector<LocalUpdate> u;
      for (int k = 0; k < 7; ++k)
        u.push_back(update("s" + std::to_string(k), ParamVector::NullaryExpr(9, [&] { return normal(rng); }),
                           normal(rng), n(rng)));
      CHECK(aggregate_mu(u, WeightMode::SampleSize) == fedavg_aggregate(u));
    }
  }

  TEST_CASE("weights sum to one, are permutation-equivariant, and mu stays in the hull") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      Rng rng(seed);
      std::normal_distribution<double> normal(0.0, 5.0);
      std::vector<LocalUpdate> u;
      for (int k = 0; k < 6; ++k)
        u.push_back(update("s" + std::to_string(k), ParamVector::NullaryExpr(4, [&] { return normal(rng); }),
                           normal(rng), 10 + k));
      const auto w = normalized_weights(u, WeightMode::Posterior);
      CHECK(std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0) <= 1e-12);
      std::vector<LocalUpdate> rev(u.rbegin(), u.rend());
      const auto wr = normalized_weights(rev, WeightMode::Posterior);
      for (std::size_t k = 0; k < w.size(); ++k) CHECK(std::abs(w[k] - wr[w.size() - 1 - k]) <= 1e-15);
      const ParamVector mu = aggregate_mu(u, WeightMode::Posterior);
      for (Index i = 0; i < 4; ++i) {
        double lo = INFINITY, hi = -INFINITY;
        for (const auto& x : u) {
          lo = std::min(lo, x.theta(i));
          hi = std::max(hi, x.theta(i));
        }
        CHECK(mu(i) >= lo);
        CHECK(mu(i) <= hi);
      }
    }
  }

  TEST_CASE("local optimisation reaches the stationary point of a scalar toy") {
    // (theta - 2) + 2 alpha theta = 0 with alpha = 0.5 gives theta = 1.
    const QuadraticAnchorLoss loss(ParamVector::Constant(1, 2.0), 1);
    PriorState prior = quad_prior_state(1, 0.5, 1e-12);
    OptimizerConfig cfg;
    cfg.name = "sgd";
    cfg.lr = 0.1;
    cfg.batch_size = 1;
    const LocalUpdate u = local_optimize("toy", ParamVector::Zero(1), prior, loss, 400, cfg, 1);
    CHECK(std::abs(u.theta(0) - 1.0) <= 1e-6);
    CHECK(u.epoch_losses.size() == 400);
    CHECK(std::isfinite(u.log_weight));
    CHECK(std::abs(solve_local_map(ParamVector::Zero(1), prior, loss, 1e-12)(0) - 1.0) <= 1e-10);
  }

  TEST_CASE("vanishing prior reduces to plain local training") {
    Rng rng(3);
    const SiteDataset d = logistic_site("a", 120, 0.0, rng);
    const ModelPreset m = make_mlp("lin", 3, {}, 2, Head::Logits);
    const CrossEntropyLoss loss(m, d);
    const ParamVector theta0 = init_params(m, rng);
    OptimizerConfig cfg;
    cfg.lr = 0.05;
    cfg.batch_size = 16;
    PriorState prior = quad_prior_state(theta0.size(), 1e-14, 1e-14);
    const LocalUpdate a = local_optimize("a", theta0, prior, loss, 3, cfg, 9);
    const LocalUpdate b = local_train("a", theta0, loss, 3, cfg, 9);
    CHECK((a.theta - b.theta).cwiseAbs().maxCoeff() <= 1e-9);
    const Objective plain(loss);
    CHECK(plain.value_full(a.theta) <= plain.value_full(theta0));
  }

  TEST_CASE("psi aggregation gradient and descent") {
    Rng rng(5);
    const Index d = 3;
    const IcnnParams psi = IcnnParams::initialise(d, {4, 4}, rng);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<LocalUpdate> u;
    for (int k = 0; k < 3; ++k)
      u.push_back(update("s" + std::to_string(k), ParamVector::NullaryExpr(d, [&] { return normal(rng); }), 0.0, 10));
    const ParamVector mu = ParamVector::NullaryExpr(d, [&] { return normal(rng); });
    const std::vector<double> w{0.2, 0.3, 0.5};
    const auto fn = [&](const ParamVector& v) {
      IcnnParams p = psi;
      p.values = v;
      return psi_objective(p, u, mu, w, 0.1, 0.01);
    };
    CHECK(ad::check_gradient(fn, psi.values).max_relative_error <= 1e-5);

    CHECK(update_psi(psi, u, mu, w, 0, 0.01, 0.1, 0.01).values == psi.values);
    const IcnnParams after = update_psi(psi, u, mu, w, 10, 1e-3, 0.1, 0.01);
    CHECK(fn(after.values).value <= fn(psi.values).value);
    CHECK(is_feasible(after));
  }

  TEST_CASE("T2 fine-tuning") {
    Rng rng(6);
    const SiteDataset d = logistic_site("a", 80, 0.5, rng);
    const ModelPreset m = make_mlp("m", 3, {4}, 2, Head::Logits);
    const CrossEntropyLoss loss(m, d);
    PriorState prior = quad_prior_state(m.num_params(), 0.1, 1e-3);
    prior.mu = init_params(m, rng);
    prior.icnn = IcnnParams::initialise(m.num_params(), {4, 4}, rng);
    OptimizerConfig cfg;
    cfg.lr = 0.01;
    cfg.batch_size = 16;
    CHECK(finetune_t2(prior, loss, 0, cfg, 1) == prior.mu);

    const ParamVector tuned = finetune_t2(prior, loss, 5, cfg, 1);
    const Objective obj(loss, [&](ad::Tape& t, ad::Var th) { return record_regularizer(t, prior, th); });
    CHECK(obj.value_full(tuned) <= obj.value_full(prior.mu));

    // Larger alpha pulls the fine-tuned model toward mu.
    prior.icnn.reset();
    double last = INFINITY;
    for (double alpha : {0.001, 0.01, 0.1, 1.0}) {
      prior.alpha = alpha;
      const double dist = (finetune_t2(prior, loss, 5, cfg, 1) - prior.mu).norm();
      CHECK(dist <= last);
      last = dist;
    }
    prior.alpha = 1e4;
    CHECK((finetune_t2(prior, loss, 5, cfg, 1) - prior.mu).norm() <= 1e-2);
  }

  TEST_CASE("T3 inference is pure and equals row-wise prediction") {
    const ModelPreset m = make_mlp("m", 3, {4}, 2, Head::Logits);
    Rng rng(7);
    const ParamVector mu = init_params(m, rng);
    const MatrixXd x = MatrixXd::Random(5, 3);
    const MatrixXd a = infer_t3(m, mu, x);
    CHECK(a == infer_t3(m, mu, x));
    for (Index i = 0; i < 5; ++i) CHECK((a.row(i).transpose() - predict(m, mu, x.row(i).transpose())).isZero(1e-15));
    const MatrixXd zero = infer_t3(m, ParamVector::Zero(m.num_params()), x);
    CHECK((positive_probability(zero).array() == 0.5).all());
  }

  TEST_CASE("T1 driver") {
    Rng rng(8);
    std::vector<SiteDataset> data;
    for (int k = 0; k < 3; ++k) data.push_back(logistic_site("site_" + std::to_string(k), 60 + 20 * k, 0.3 * k, rng));
    const ModelPreset m = make_mlp("m", 3, {4}, 2, Head::Logits);
    std::vector<std::unique_ptr<LocalLoss>> losses;
    std::vector<SiteTask> sites;
    for (const auto& d : data) {
      losses.push_back(make_loss(m, d));
      sites.push_back({d.site_id, losses.back().get()});
    }
    FedMapHyper hyper;
    hyper.local_epochs = 2;
    PriorHyper ph;
    ph.icnn_widths = {4, 4};
    OptimizerConfig cfg;
    cfg.batch_size = 16;
    cfg.lr = 0.01;

    SUBCASE("zero rounds return the initial state") {
      hyper.rounds = 0;
      const FederatedState s = run_t1(m, sites, hyper, ph, cfg, 3);
      const FederatedState init = initialise_t1(m, {"site_0", "site_1", "site_2"}, ph, 3);
      CHECK(s.prior.mu == init.prior.mu);
      CHECK(s.prior.icnn->values == init.prior.icnn->values);
      CHECK(s.reports.empty());
      for (const auto& th : s.thetas) CHECK(th == init.prior.mu);
    }
    SUBCASE("repeat runs are bit-identical and respect constraints") {
      hyper.rounds = 3;
      const FederatedState a = run_t1(m, sites, hyper, ph, cfg, 3);
      const FederatedState b = run_t1(m, sites, hyper, ph, cfg, 3);
      REQUIRE(a.reports.size() == 3);
      for (std::size_t r = 0; r < 3; ++r) CHECK(a.reports[r].same_results(b.reports[r]));
      CHECK(a.prior.mu == b.prior.mu);
      CHECK(is_feasible(*a.prior.icnn));
      for (const auto& rep : a.reports) {
        CHECK(std::abs(std::accumulate(rep.weights.begin(), rep.weights.end(), 0.0) - 1.0) <= 1e-12);
        CHECK(rep.site_ids == std::vector<std::string>{"site_0", "site_1", "site_2"});
      }
    }
    SUBCASE("callback can stop training") {
      hyper.rounds = 5;
      int seen = 0;
      const FederatedState s = run_t1(m, sites, hyper, ph, cfg, 3, [&](const FederatedState&) { return ++seen < 2; });
      CHECK(s.rounds_completed == 2);
    }
    SUBCASE("a failing site surfaces the round and keeps the last good state") {
      hyper.rounds = 2;
      const FailingLoss bad_loss(m.num_params());
      std::vector<SiteTask> with_bad = sites;
      with_bad.push_back({"bad", &bad_loss});
      FederatedState s = initialise_t1(m, {"site_0", "site_1", "site_2", "bad"}, ph, 3);
      const ParamVector mu0 = s.prior.mu;
      try {
        run_rounds(s, with_bad, hyper, cfg, 3);
        FAIL("expected a RoundError");
      } catch (const RoundError& e) {
        CHECK(e.round() == 0);
      }
      CHECK(s.prior.mu == mu0);
      CHECK(s.rounds_completed == 0);
    }
  }

  TEST_CASE("theory mode converges on a two-site quadratic instance") {
    Rng rng(9);
    const ConvexInstance inst = random_instance(2, 3, 0.5, 0.05, rng);
    const BilevelSolution oracle = bilevel_oracle(inst);
    const auto losses = inst.losses();
    std::vector<const LocalLoss*> ptrs;
    for (const auto& l : losses) ptrs.push_back(&l);
    const TheoryTrace tr = run_theory_mode(inst.prior(ParamVector::Zero(3)), ptrs, safe_theory_step(inst), 300, 1e-12);
    CHECK((tr.final_prior.mu - oracle.mu).norm() <= 1e-6);
    for (std::size_t k = 0; k < 2; ++k) CHECK((tr.final_thetas[k] - oracle.thetas[k]).norm() <= 1e-6);
    // Successive steps shrink.
    double last = INFINITY;
    for (std::size_t t = 1; t < tr.mu_history.size(); ++t) {
      const double step = (tr.mu_history[t] - tr.mu_history[t - 1]).norm();
      CHECK(step <= last + 1e-14);
      last = step;
    }
  }

  TEST_CASE("hyperparameter validation") {
    FedMapHyper h;
    h.psi_lr = 0;
    CHECK_THROWS(h.validate());
    CHECK_THROWS(weight_mode_from_string("geometric"));
    CHECK(weight_mode_from_string(to_string(WeightMode::SampleSize)) == WeightMode::SampleSize);
  }
}
