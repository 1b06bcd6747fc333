#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedmap/harness.hpp"

using namespace fedmap;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json small_config() {
  return json{{"strategy", "fedmap"},
              {"baselines", {"fedavg", "individual"}},
              {"model", {{"preset", "mlp"}, {"hidden", {8}}}},
              {"fedmap", {{"rounds", 2}, {"local_epochs", 1}}},
              {"prior", {{"icnn_widths", {4, 4}}}},
              {"optimizer", {{"lr", 0.01}, {"batch_size", 32}}},
              {"partition", {{"num_sites", 6}, {"size_mean", 250}, {"seed", 3}}},
              {"seed", 3}};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fedmap_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "fedmap");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("minimal config gets preset defaults") {
    const FederationConfig c = parse_config(json{{"model", {{"preset", "cprd-surv"}}},
                                                 {"partition", {{"survival", true}}},
                                                 {"seed", 1}});
    CHECK(c.optimizer.batch_size == 128);
    CHECK(c.model.dropout == 0.1);
    CHECK(c.fedmap.local_epochs == 10);
    CHECK(c.fedmap.rounds == 100);
    CHECK(c.optimizer.lr == 1e-3);
    CHECK(c.optimizer.patience == 5);
    CHECK(c.prior.alpha == 0.1);
    CHECK(c.prior.epsilon == 1e-3);

    const FederationConfig e = parse_config(json{{"model", {{"preset", "eicu-multimodal"}}}, {"partition", json::object()}, {"seed", 1}});
    CHECK(e.optimizer.batch_size == 32);
    CHECK(e.model.dropout == 0.3);
    CHECK(e.optimizer.weight_decay == 1e-5);
    CHECK(e.fedmap.local_epochs == 5);
    CHECK(e.fedmap.rounds == 30);

    const FederationConfig i = parse_config(json{{"model", {{"preset", "interval-mlp"}}}, {"partition", json::object()}, {"seed", 1}});
    CHECK(i.optimizer.batch_size == 128);
    CHECK(i.optimizer.weight_decay == 1e-5);
    CHECK(i.fedmap.local_epochs == 2);
    CHECK(i.fedmap.rounds == 50);
  }

  TEST_CASE("validation errors carry a JSON pointer") {
    json j = small_config();
    j["prior"]["alpha"] = -0.1;
    try {
      parse_config(j);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(e.pointer() == "/prior/alpha");
    }
    j = small_config();
    j["optimiser"] = json::object();
    CHECK_THROWS_AS(parse_config(j), ConfigError);
    j = small_config();
    j.erase("seed");
    CHECK_THROWS_AS(parse_config(j), ConfigError);
    j = small_config();
    j["metrics"] = {"auroc", "f1"};
    try {
      parse_config(j);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(e.pointer() == "/metrics/1");
    }
  }

  TEST_CASE("serialise then parse keeps the hash") {
    const FederationConfig c = parse_config(small_config());
    const FederationConfig back = parse_config(to_json(c));
    CHECK(config_hash(back) == config_hash(c));
    CHECK(to_json(back) == to_json(c));
    FederationConfig moved = c;
    moved.output_dir = "/elsewhere";
    CHECK(config_hash(moved) == config_hash(c));
    moved.seed = 4;
    CHECK(config_hash(moved) != config_hash(c));
  }

  TEST_CASE("splits are stratified and depend only on seed and site") {
    PartitionSpec spec;
    spec.num_sites = 3;
    spec.seed = 2;
    const auto sites = generate_cohort(spec);
    for (const auto& s : sites) {
      const SiteSplit a = split_site(s, 9), b = split_site(s, 9);
      CHECK(a.train == b.train);
      CHECK(a.test == b.test);
      CHECK(a.train.size() + a.test.size() == static_cast<std::size_t>(s.size()));
      const double target = 0.2 * static_cast<double>(s.size());
      CHECK(std::abs(static_cast<double>(a.test.size()) - target) <= 2.0);
      int pos_all = 0, pos_test = 0;
      for (int y : s.labels) pos_all += y;
      for (Index i : a.test) pos_test += s.labels[i];
      CHECK(std::abs(pos_test - 0.2 * pos_all) <= 1.0);
    }
  }

  TEST_CASE("metrics CSV round-trips and the digest is git's blob id") {
    CHECK(git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    CHECK(git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
    std::vector<MetricRow> rows{{"r", "fedmap", "T1", "site_000", 100, 25, "auroc", 0.1},
                                {"r", "fedmap", "T1", "site_000", 100, 25, "brier", std::nan("")}};
    const fs::path dir = scratch("csv");
    std::ofstream(dir / "m.csv", std::ios::binary) << metrics_csv(rows);
    const auto back = read_metrics_csv(dir / "m.csv");
    REQUIRE(back.size() == 2);
    CHECK(back[0].value == 0.1);
    CHECK(std::isnan(back[1].value));
    CHECK(metrics_csv(back) == metrics_csv(rows));
  }

  TEST_CASE("checkpoints round-trip bit-exactly") {
    Rng rng(1);
    Checkpoint cp;
    cp.round = 7;
    cp.strategy = "fedmap";
    cp.config_hash = "0123456789abcdef";
    cp.seed = 42;
    cp.prior.mu = ParamVector::Random(5);
    cp.prior.alpha = 0.2;
    cp.prior.epsilon = 0.01;
    cp.prior.icnn = IcnnParams::initialise(5, {3, 2}, rng);
    cp.site_ids = {"a", "b"};
    cp.thetas = {ParamVector::Random(5), ParamVector::Random(5)};
    const fs::path dir = scratch("ckpt");
    write_checkpoint(dir, cp);
    const Checkpoint back = read_checkpoint(dir / "round_0007.json");
    CHECK(back.round == 7);
    CHECK(back.seed == 42);
    CHECK(back.prior.mu == cp.prior.mu);
    CHECK(back.prior.icnn->values == cp.prior.icnn->values);
    CHECK(back.prior.icnn->shape.widths == cp.prior.icnn->shape.widths);
    CHECK(back.thetas[1] == cp.thetas[1]);
    CHECK(back.site_ids == cp.site_ids);
  }

  TEST_CASE("one site trained alone equals plain local training") {
    json j = small_config();
    j["strategy"] = "individual";
    j["baselines"] = json::array();
    j["partition"]["num_sites"] = 1;
    j["partition"]["size_law"] = "fixed";
    j["partition"]["fixed_sizes"] = {500};
    const FederationConfig c = parse_config(j);
    const RunResult r = run_experiment(c);
    auto sites = generate_cohort(*c.partition);
    assign_tiers(sites, c.tiers.low, c.tiers.high);
    const auto prepared = prepare_sites(sites, c.seed);
    const ModelPreset preset = build_preset(c, Task::Classification, 10, 2);
    const auto loss = make_loss(preset, prepared[0].train);
    const std::vector<SiteTask> tasks{{sites[0].site_id, loss.get()}};
    const int epochs = c.fedmap.rounds * c.fedmap.local_epochs;
    const auto theta = run_individual(preset, tasks, epochs, c.optimizer, c.seed)[0];
    const auto expected = evaluate_metrics(preset, theta, prepared[0].test, default_metrics(Task::Classification));
    for (const auto& [name, value] : expected) {
      const auto it = std::find_if(r.rows.begin(), r.rows.end(), [&](const MetricRow& m) { return m.metric == name; });
      REQUIRE(it != r.rows.end());
      CHECK(it->value == value);
    }
  }

  TEST_CASE("every strategy sees the same splits and every site appears once") {
    const FederationConfig c = parse_config(small_config());
    const RunResult r = run_experiment(c);
    std::map<std::string, std::pair<Index, Index>> sizes;
    std::map<std::string, std::map<std::string, int>> seen;
    for (const auto& row : r.rows) {
      if (row.metric != "auroc") continue;
      auto [it, fresh] = sizes.emplace(row.site_id, std::pair{row.n_train, row.n_test});
      if (!fresh) CHECK(it->second == std::pair{row.n_train, row.n_test});
      ++seen[row.strategy][row.site_id];
    }
    CHECK(seen.size() == 3);
    for (const auto& [strategy, counts] : seen) {
      CHECK(counts.size() == 6);
      for (const auto& [site, n] : counts) CHECK(n == 1);
    }
  }

  TEST_CASE("re-running gives identical bytes") {
    FederationConfig c = parse_config(small_config());
    const fs::path a = scratch("det_a"), b = scratch("det_b");
    const RunResult ra = run_experiment(c, a);
    const RunResult rb = run_experiment(c, b);
    CHECK(ra.digest == rb.digest);
    CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
    CHECK(git_blob_sha1(slurp(a / "metrics.csv")) == ra.digest);
    CHECK(fs::exists(a / "rounds.jsonl"));
    CHECK(fs::exists(a / "manifest.json"));
    CHECK(fs::exists(a / "checkpoints" / "fedmap" / "round_0001.json"));
  }

  TEST_CASE("command line") {
    const fs::path dir = scratch("cli");
    std::ofstream(dir / "config.json") << small_config().dump(2);
    CHECK(run_cli({"run"}) == 1);
    CHECK(run_cli({"run", "--config", (dir / "config.json").string(), "--bogus"}) == 1);
    CHECK(run_cli({"frobnicate"}) == 1);
    CHECK(run_cli({"verify", "--suite", "convexity"}) == 0);
    CHECK(run_cli({"verify", "--suite", "wilcoxon"}) == 0);

    json bad = small_config();
    bad["prior"]["epsilon"] = 0;
    std::ofstream(dir / "bad.json") << bad.dump();
    CHECK(run_cli({"run", "--config", (dir / "bad.json").string(), "--out", (dir / "bad").string()}) == 1);

    CHECK(run_cli({"run", "--config", (dir / "config.json").string(), "--out", (dir / "run").string()}) == 0);
    CHECK(run_cli({"analyze", "--run", (dir / "run").string(), "--report", "tier-summary"}) == 0);
    CHECK(fs::exists(dir / "run" / "reports" / "tier_summary.csv"));
    CHECK(run_cli({"analyze", "--run", (dir / "run").string(), "--report", "gain-regression"}) == 0);
    CHECK(fs::exists(dir / "run" / "reports" / "gain_regression.json"));
    CHECK(run_cli({"analyze", "--run", dir.string(), "--report", "tier-summary"}) == 1);

    std::ofstream(dir / "spec.json") << json{{"num_sites", 3}, {"seed", 1}}.dump();
    CHECK(run_cli({"partition", "--spec", (dir / "spec.json").string(), "--out", (dir / "cohort").string()}) == 0);
    CHECK(fs::exists(dir / "cohort" / "manifest.json"));

    // A cohort manifest works as the data source.
    json from_cohort = small_config();
    from_cohort.erase("partition");
    from_cohort["cohort"] = (dir / "cohort" / "manifest.json").string();
    from_cohort["tiers"] = {{"low", 10}, {"high", 20}};
    std::ofstream(dir / "cohort.json") << from_cohort.dump();
    CHECK(run_cli({"run", "--config", (dir / "cohort.json").string(), "--out", (dir / "run2").string()}) == 0);
  }
}
