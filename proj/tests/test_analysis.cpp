#include <doctest.h>

#include <cmath>
#include <numeric>

#include "fedmap/analysis.hpp"
#include "oracles.hpp"

using namespace fedmap;

namespace {

std::vector<double> draws(std::size_t n, Rng& rng, bool coarse) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = coarse ? std::round(normal(rng) * 2) / 2 : normal(rng);
  return v;
}

std::vector<int> bits(std::size_t n, Rng& rng) {
  std::bernoulli_distribution b(0.4);
  std::vector<int> v(n);
  for (auto& x : v) x = b(rng);
  v[0] = 1;
  v[1] = 0;
  return v;
}

PairedSample paired(const std::vector<double>& a, const std::vector<double>& b) {
  PairedSample p;
  for (std::size_t i = 0; i < a.size(); ++i) p.site_ids.push_back("s" + std::to_string(i));
  p.a = a;
  p.b = b;
  return p;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("AUROC closed forms and oracle") {
    const std::vector<int> y{0, 0, 1, 1};
    CHECK(auroc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, y) == 1.0);
    CHECK(auroc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, y) == 0.5);
    CHECK_THROWS_AS(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), DomainError);
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      Rng rng(seed);
      const std::size_t n = 2 + seed % 199;
      const auto s = draws(n, rng, seed % 2);
      const auto l = bits(n, rng);
      CHECK(std::abs(auroc(s, l) - oracle::auroc(s, l)) <= 1e-12);
    }
  }

  TEST_CASE("balanced accuracy") {
    CHECK(balanced_accuracy(0.737, 0.748) == doctest::Approx(0.7425).epsilon(1e-15));
    const std::vector<int> y{0, 1, 1, 0, 1};
    CHECK(balanced_accuracy(y, y).balanced_accuracy == 1.0);
    const BinaryRates constant = balanced_accuracy(std::vector<int>(5, 1), y);
    CHECK(constant.balanced_accuracy == 0.5);
    CHECK(constant.sensitivity == 1.0);
    CHECK(constant.specificity == 0.0);
    CHECK_THROWS_AS(balanced_accuracy(std::vector<int>{1, 0}, std::vector<int>{0, 0}), DomainError);
  }

  TEST_CASE("C-index closed forms and oracle") {
    const std::vector<double> t{1, 2, 3, 4};
    const std::vector<int> e{1, 1, 1, 0};
    CHECK(c_index(std::vector<double>{4, 3, 2, 1}, t, e) == 1.0);
    CHECK(c_index(std::vector<double>{1, 2, 3, 4}, t, e) == 0.0);
    CHECK_THROWS_AS(c_index(std::vector<double>{1, 2}, std::vector<double>{1, 2}, std::vector<int>{0, 0}), DomainError);
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      Rng rng(seed);
      const std::size_t n = 2 + seed % 199;
      const auto r = draws(n, rng, seed % 2);
      auto times = draws(n, rng, true);  // ties in time
      times[0] = -10;
      const auto ev = bits(n, rng);
      CHECK(std::abs(c_index(r, times, ev) - oracle::c_index(r, times, ev)) <= 1e-12);
    }
  }

  TEST_CASE("Brier score") {
    const std::vector<int> y{0, 1, 1};
    CHECK(brier(std::vector<double>{0, 1, 1}, y) == 0.0);
    CHECK(brier(std::vector<double>{0.5, 0.5, 0.5}, y) == 0.25);
    const std::vector<double> p{0.1, 0.7, 0.4};
    CHECK(brier(p, y) == doctest::Approx((0.01 + 0.09 + 0.36) / 3).epsilon(1e-15));
    CHECK_THROWS_AS(brier(std::vector<double>{1.5, 0, 0}, y), DomainError);
  }
}

TEST_SUITE("statistics") {
  TEST_CASE("exact Wilcoxon at n = 3, all positive") {
    const auto w = wilcoxon_signed_rank(paired({0, 0, 0}, {1, 2, 3}));
    CHECK(w.exact);
    CHECK(w.n == 3);
    CHECK(w.statistic == 6.0);
    CHECK(w.p_value == 0.25);
  }

  TEST_CASE("symmetric differences give p = 1") {
    const auto w = wilcoxon_signed_rank(paired({0, 0, 0, 0}, {1, -1, 2, -2}));
    CHECK(w.p_value == 1.0);
  }

  TEST_CASE("all-zero differences are rejected") {
    CHECK_THROWS_AS(wilcoxon_signed_rank(paired({1, 2}, {1, 2})), DomainError);
  }

  TEST_CASE("exact p matches sign-pattern enumeration") {
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
      Rng rng(seed);
      const std::size_t n = 1 + seed % 14;
      const auto a = draws(n, rng, true), b = draws(n, rng, true);
      std::vector<double> d(n);
      for (std::size_t i = 0; i < n; ++i) d[i] = b[i] - a[i];
      if (std::all_of(d.begin(), d.end(), [](double x) { return x == 0; })) continue;
      const auto ref = oracle::wilcoxon_enumerate(d);
      const auto w = wilcoxon_signed_rank(paired(a, b), WilcoxonMethod::Exact);
      CHECK(w.statistic == doctest::Approx(ref.w_plus).epsilon(1e-14));
      CHECK(std::abs(w.p_value - ref.p) <= 1e-12);
    }
  }

  TEST_CASE("exact and normal approximations agree at n = 15") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      const auto a = draws(15, rng, false), b = draws(15, rng, false);
      const double exact = wilcoxon_signed_rank(paired(a, b), WilcoxonMethod::Exact).p_value;
      const double normal = wilcoxon_signed_rank(paired(a, b), WilcoxonMethod::Normal).p_value;
      CHECK(std::abs(exact - normal) <= 0.02);
    }
  }

  TEST_CASE("Spearman closed forms and oracle") {
    const std::vector<double> x{1, 2, 3, 4};
    CHECK(spearman(x, std::vector<double>{1, 4, 9, 16}) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(spearman(x, std::vector<double>{4, 3, 2, 1}) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK_THROWS_AS(spearman(x, std::vector<double>{1, 1, 1, 1}), DomainError);
    CHECK_THROWS_AS(spearman(std::vector<double>{1, 2}, std::vector<double>{2, 1}), DomainError);
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      Rng rng(seed);
      const std::size_t n = 3 + seed % 198;
      const auto a = draws(n, rng, seed % 2), b = draws(n, rng, seed % 3 == 0);
      CHECK(std::abs(spearman(a, b) - oracle::spearman(a, b)) <= 1e-12);
    }
  }

  TEST_CASE("average ranks") {
    CHECK(average_ranks(std::vector<double>{3, 1, 3, 2}) == std::vector<double>{3.5, 1, 3.5, 2});
  }

  TEST_CASE("gain regression") {
    const std::vector<double> a{0.6, 0.7, 0.8, 0.9};
    const GainRegression same = gain_regression(paired(a, a));
    for (const auto& r : same.rows) CHECK(r.relative_gain == 0.0);
    CHECK(same.slope == 0.0);

    std::vector<double> b = a;
    for (auto& x : b) x += 0.05;
    const GainRegression shift = gain_regression(paired(a, b));
    CHECK(shift.spearman_r == doctest::Approx(-1.0).epsilon(1e-15));
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(shift.rows[i].absolute_gain == doctest::Approx(0.05).epsilon(1e-12));
      CHECK(shift.rows[i].relative_gain == doctest::Approx(0.05 / a[i]).epsilon(1e-12));
    }
    // Least squares by hand on (a, 0.05 / a).
    double ma = 0, mg = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      ma += a[i] / 4;
      mg += 0.05 / a[i] / 4;
    }
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      sxy += (a[i] - ma) * (0.05 / a[i] - mg);
      sxx += (a[i] - ma) * (a[i] - ma);
    }
    CHECK(shift.slope == doctest::Approx(sxy / sxx).epsilon(1e-12));
    CHECK(shift.intercept == doctest::Approx(mg - sxy / sxx * ma).epsilon(1e-12));

    const GainRegression zero = gain_regression(paired({0.0, 0.5, 0.6, 0.7}, {0.1, 0.6, 0.6, 0.9}));
    CHECK(zero.excluded == std::vector<std::string>{"s0"});
    CHECK(zero.rows.size() == 3);
  }

  TEST_CASE("paired sample validation") {
    CHECK_THROWS(paired({1, 2}, {1}).validate());
    CHECK_THROWS(paired({1, std::nan("")}, {1, 2}).validate());
  }
}

TEST_SUITE("theory") {
  TEST_CASE("oracle agrees with a long gradient-descent solve") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(seed);
      const ConvexInstance inst = random_instance(4, 3, 0.3, 0.02, rng);
      const BilevelSolution s = bilevel_oracle(inst);
      // Descend on M directly using its Danskin gradient.
      ParamVector mu = ParamVector::Zero(3);
      const double step = safe_theory_step(inst);
      for (int t = 0; t < 2000; ++t) mu -= step * envelope_gradient(inst, mu, 1e-12);
      CHECK((mu - s.mu).norm() <= 1e-10);
      CHECK(envelope(inst, s.mu, 1e-12) == doctest::Approx(s.envelope).epsilon(1e-10));
      // Inner stationarity of the closed-form local models.
      const double c = 1 + 2 * inst.alpha + 2 * inst.epsilon;
      for (std::size_t k = 0; k < inst.anchors.size(); ++k)
        CHECK((c * s.thetas[k] - inst.anchors[k] - 2 * inst.alpha * s.mu).norm() <= 1e-12);
    }
  }

  TEST_CASE("oracle special cases") {
    ConvexInstance inst;
    inst.alpha = 0.4;
    inst.epsilon = 0.05;
    ParamVector a(2);
    a << 1.0, -2.0;
    inst.anchors = {a, a};
    inst.counts = {10, 30};
    const BilevelSolution same = bilevel_oracle(inst);
    CHECK((same.thetas[0] - same.thetas[1]).norm() == 0.0);
    const ParamVector& abar = same.thetas[0];
    CHECK((same.mu - inst.alpha * abar / (inst.alpha + inst.epsilon)).norm() <= 1e-12);

    inst.anchors = {a, -a};
    inst.counts = {20, 20};
    CHECK(bilevel_oracle(inst).mu.norm() <= 1e-15);

    // eps -> 0: mu approaches the N-weighted mean of the local models.
    inst.anchors = {a, ParamVector::Constant(2, 3.0)};
    inst.counts = {10, 30};
    double last = INFINITY;
    for (double eps : {1e-1, 1e-2, 1e-3, 1e-4, 1e-5}) {
      inst.epsilon = eps;
      const BilevelSolution s = bilevel_oracle(inst);
      const ParamVector mean = (10 * s.thetas[0] + 30 * s.thetas[1]) / 40;
      const double gap = (s.mu - mean).norm();
      CHECK(gap < last);
      last = gap;
    }
    CHECK(last <= 1e-3);
  }

  TEST_CASE("Danskin identity on quadratic instances") {
    Rng rng(1);
    for (Index q : {2, 5})
      for (Index d : {2, 4}) {
        const ConvexInstance inst = random_instance(q, d, 0.5, 0.05, rng);
        std::vector<ParamVector> pts{ParamVector::Zero(d), ParamVector::Ones(d)};
        CHECK(verify_danskin(inst, pts, 1e-10, 1e-4).max_relative_error <= 1e-6);
      }
  }

  TEST_CASE("Danskin identity with a fixed network") {
    Rng rng(2);
    ConvexInstance inst = random_instance(3, 3, 0.5, 0.05, rng);
    inst.icnn = IcnnParams::initialise(3, {6, 6}, rng);
    std::vector<ParamVector> pts{ParamVector::Constant(3, 0.4)};
    CHECK(verify_danskin(inst, pts, 1e-10, 1e-3).max_relative_error <= 1e-4);
    CHECK_THROWS(bilevel_oracle(inst));
  }

  TEST_CASE("M is strongly convex") {
    Rng rng(3);
    const ConvexInstance inst = random_instance(3, 2, 0.5, 0.05, rng);
    const auto pairs = sample_convexity_pairs(2, 1000, 1.0, rng);
    CHECK(verify_m_convexity(inst, pairs, 1e-10).min_slack >= -1e-8);

    ConvexityPair same{ParamVector::Zero(2), ParamVector::Ones(2), ParamVector::Zero(2), ParamVector::Ones(2)};
    CHECK(std::abs(verify_m_convexity(inst, {same}, 1e-12).min_slack) <= 1e-9);

    std::vector<ConvexityPair> few(pairs.begin(), pairs.begin() + 50);
    double last = -INFINITY;
    for (double eps : {0.01, 0.05, 0.2, 1.0}) {
      ConvexInstance e = inst;
      e.epsilon = eps;
      const double slack = verify_m_convexity(e, few, 1e-11).min_slack;
      CHECK(slack >= last - 1e-8);
      last = slack;
    }
  }

  TEST_CASE("theory iterates contract monotonically to the oracle") {
    Rng rng(4);
    const ConvexInstance inst = random_instance(5, 3, 0.5, 0.05, rng);
    const TheoryConvergence c = check_theory_convergence(inst, safe_theory_step(inst), 300, 1e-12);
    CHECK(c.monotone);
    CHECK(c.final_mu_error <= 1e-6);
    CHECK(c.final_theta_error <= 1e-6);
  }

  TEST_CASE("instance validation") {
    ConvexInstance inst;
    inst.anchors = {ParamVector::Zero(2)};
    inst.counts = {5};
    inst.epsilon = 0;
    CHECK_THROWS(inst.validate());
  }
}
