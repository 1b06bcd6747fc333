#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "fedmap/harness.hpp"

namespace fedmap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool report_line(bool ok, const std::string& what) {
  std::cout << (ok ? "ok   " : "FAIL ") << what << '\n';
  return ok;
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

bool verify_danskin_suite(std::uint64_t seed) {
  bool ok = true;
  Rng rng = make_rng(seed, "verify/danskin");
  for (Index q : {2, 5})
    for (Index d : {2, 4}) {
      const ConvexInstance inst = random_instance(q, d, 0.5, 0.05, rng);
      std::vector<ParamVector> pts;
      std::normal_distribution<double> normal(0.0, 1.0);
      for (int i = 0; i < 3; ++i) pts.push_back(ParamVector::NullaryExpr(d, [&] { return normal(rng); }));
      const double err = verify_danskin(inst, pts, 1e-10, 1e-4).max_relative_error;
      ok &= report_line(err <= 1e-4, "quadratic q=" + std::to_string(q) + " d=" + std::to_string(d) +
                                         ": relative error " + sci(err));
    }
  ConvexInstance inst = random_instance(3, 3, 0.5, 0.05, rng);
  inst.icnn = IcnnParams::initialise(3, {8, 8}, rng);
  std::vector<ParamVector> pts{ParamVector::Constant(3, 0.3), ParamVector::Constant(3, -0.2)};
  const double err = verify_danskin(inst, pts, 1e-10, 1e-3).max_relative_error;
  ok &= report_line(err <= 1e-4, "icnn q=3 d=3: relative error " + sci(err));
  return ok;
}

bool verify_bilevel_suite(std::uint64_t seed) {
  bool ok = true;
  Rng rng = make_rng(seed, "verify/bilevel");
  for (Index q : {2, 5})
    for (Index d : {2, 4}) {
      const ConvexInstance inst = random_instance(q, d, 0.5, 0.05, rng);
      const TheoryConvergence c = check_theory_convergence(inst, safe_theory_step(inst), 200, 1e-11);
      ok &= report_line(c.monotone && c.final_mu_error <= 1e-6 && c.final_theta_error <= 1e-6,
                        "q=" + std::to_string(q) + " d=" + std::to_string(d) + ": |mu - mu*| " +
                            sci(c.final_mu_error) + ", max |theta - theta*| " + sci(c.final_theta_error) +
                            (c.monotone ? ", monotone" : ", not monotone"));
    }
  return ok;
}

bool verify_convexity_suite(std::uint64_t seed) {
  Rng rng = make_rng(seed, "verify/convexity");
  const Index d = 8;
  PriorState prior;
  prior.mu = ParamVector::Zero(d);
  prior.alpha = 0.1;
  prior.epsilon = 0.1;
  prior.icnn = IcnnParams::initialise(d, {16, 16}, rng);
  const auto pairs = sample_convexity_pairs(d, 10000, 1.0, rng);
  bool ok = true;
  try {
    const auto a = check_icnn_convexity(*prior.icnn, pairs, 1e-9);
    ok &= report_line(true, "icnn midpoint convexity over 10000 pairs: min slack " + sci(a.min_slack));
    const auto b = check_strong_convexity(prior, pairs, 1e-9);
    ok &= report_line(true, "regulariser eps-strong convexity over 10000 pairs: min slack " + sci(b.min_slack));
  } catch (const NumericalError& e) {
    ok = report_line(false, e.what());
  }
  return ok;
}

bool verify_wilcoxon_suite() {
  PairedSample p{{"a", "b", "c"}, {0.70, 0.71, 0.65}, {0.72, 0.74, 0.69}};
  const auto w = wilcoxon_signed_rank(p);
  return report_line(w.exact && w.p_value == 0.25,
                     "n=3, all differences positive: exact two-sided p = " + std::to_string(w.p_value));
}

}  // namespace

int cli(int argc, char** argv) {
  CLI::App app{"Personalised federated learning with a learned convex prior"};
  app.require_subcommand(1);

  std::string config_path, out_dir, spec_path, suite, run_dir, report, metric, strategy;
  std::uint64_t seed = 0;
  Index tier_low = 100, tier_high = 400;

  auto* run = app.add_subcommand("run", "train and evaluate every tier for a configured experiment");
  run->add_option("--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out_dir, "output directory");
  auto* seed_opt = run->add_option("--seed", seed, "override the config seed");

  auto* part = app.add_subcommand("partition", "generate a synthetic cohort");
  part->add_option("--spec", spec_path, "partition spec (JSON)")->required()->check(CLI::ExistingFile);
  part->add_option("--out", out_dir, "output directory")->required();
  part->add_option("--tier-low", tier_low, "smallest T2 site size");
  part->add_option("--tier-high", tier_high, "largest T2 site size");

  auto* verify = app.add_subcommand("verify", "run a numerical verification suite");
  verify->add_option("--suite", suite, "suite name")
      ->required()
      ->check(CLI::IsMember({"danskin", "bilevel", "convexity", "wilcoxon"}));
  verify->add_option("--seed", seed, "seed for the sampled instances");

  auto* analyze = app.add_subcommand("analyze", "summarise a finished run");
  analyze->add_option("--run", run_dir, "run directory")->required()->check(CLI::ExistingDirectory);
  analyze->add_option("--report", report, "report name")
      ->required()
      ->check(CLI::IsMember({"gain-regression", "tier-summary"}));
  analyze->add_option("--metric", metric, "metric for gain-regression");
  analyze->add_option("--strategy", strategy, "federated strategy for gain-regression");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*run) {
      FederationConfig cfg = load_config(config_path);
      if (*seed_opt) cfg.seed = seed;
      if (out_dir.empty()) out_dir = cfg.output_dir;
      if (out_dir.empty()) {
        std::cerr << "run: no output directory (pass --out or set output_dir)\n\n" << run->help();
        return 1;
      }
      const RunResult r = run_experiment(cfg, out_dir);
      std::cout << "run " << r.run_id << ": " << r.rows.size() << " metric rows, metrics.csv " << r.digest << '\n';
      return 0;
    }
    if (*part) {
      std::ifstream in(spec_path);
      json j;
      try {
        j = json::parse(in);
      } catch (const json::exception& e) {
        throw ConfigError("", std::string("not valid JSON: ") + e.what());
      }
      const PartitionSpec spec = partition_spec_from_json(j);
      auto sites = generate_cohort(spec);
      assign_tiers(sites, tier_low, tier_high);
      write_cohort(out_dir, sites, to_json(spec));
      if (sites.size() >= 2)
        std::ofstream(fs::path(out_dir) / "skew.json", std::ios::binary) << to_json(skew_report(sites)).dump(2) << '\n';
      std::cout << "wrote " << sites.size() << " sites to " << out_dir << '\n';
      return 0;
    }
    if (*verify) {
      bool ok = false;
      if (suite == "danskin") ok = verify_danskin_suite(seed);
      if (suite == "bilevel") ok = verify_bilevel_suite(seed);
      if (suite == "convexity") ok = verify_convexity_suite(seed);
      if (suite == "wilcoxon") ok = verify_wilcoxon_suite();
      return ok ? 0 : 2;
    }
    if (*analyze) {
      const fs::path p = report == "tier-summary" ? tier_summary_report(run_dir)
                                                  : gain_regression_report(run_dir, metric, strategy);
      std::cout << "wrote " << p.string() << '\n';
      return 0;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace fedmap
