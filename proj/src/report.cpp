#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

#include "fedmap/harness.hpp"

namespace fedmap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json read_manifest(const fs::path& run_dir) {
  std::ifstream in(run_dir / "manifest.json");
  if (!in) throw DomainError(run_dir.string() + " has no manifest.json; is it a run directory?");
  return json::parse(in);
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

fs::path tier_summary_report(const fs::path& run_dir) {
  read_manifest(run_dir);
  const auto rows = read_metrics_csv(run_dir / "metrics.csv");
  using Key = std::tuple<std::string, std::string, std::string>;
  std::vector<Key> order;
  std::map<Key, std::vector<double>> groups;
  for (const auto& r : rows) {
    Key k{r.strategy, r.tier, r.metric};
    if (!groups.count(k)) order.push_back(k);
    auto& g = groups[k];
    if (std::isfinite(r.value)) g.push_back(r.value);
  }
  fs::create_directories(run_dir / "reports");
  const fs::path csv_path = run_dir / "reports" / "tier_summary.csv";
  std::ofstream csv(csv_path, std::ios::binary);
  csv << "strategy,tier,metric,n,median,mean,sd\n";
  json out = json::array();
  for (const auto& k : order) {
    const auto& v = groups[k];
    const double n = static_cast<double>(v.size());
    const double mean = v.empty() ? std::numeric_limits<double>::quiet_NaN() : std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = v.empty() ? std::numeric_limits<double>::quiet_NaN() : std::sqrt(ss / n);
    const double med = median(v);
    const auto& [strategy, tier, metric] = k;
    csv << strategy << ',' << tier << ',' << metric << ',' << v.size() << ',' << fmt(med) << ',' << fmt(mean) << ','
        << fmt(sd) << '\n';
    out.push_back({{"strategy", strategy},
                   {"tier", tier},
                   {"metric", metric},
                   {"n", v.size()},
                   {"median", num(med)},
                   {"mean", num(mean)},
                   {"sd", num(sd)}});
  }
  std::ofstream(run_dir / "reports" / "tier_summary.json", std::ios::binary) << out.dump(2) << '\n';
  return csv_path;
}

fs::path gain_regression_report(const fs::path& run_dir, const std::string& metric_in, const std::string& strategy_in) {
  const json manifest = read_manifest(run_dir);
  std::string metric = metric_in;
  if (metric.empty()) metric = manifest.at("metrics").at(0).get<std::string>();
  std::string strategy = strategy_in;
  if (strategy.empty())
    for (const auto& s : manifest.at("strategies"))
      if (s.get<std::string>() != "individual") {
        strategy = s.get<std::string>();
        break;
      }
  if (strategy.empty()) throw DomainError("run has no federated strategy to compare");

  const auto rows = read_metrics_csv(run_dir / "metrics.csv");
  std::map<std::string, double> base;
  bool has_individual = false;
  for (const auto& r : rows)
    if (r.strategy == "individual" && r.metric == metric) {
      base[r.site_id] = r.value;
      has_individual = true;
    }
  if (!has_individual) throw DomainError("run has no 'individual' rows for metric '" + metric + "'");

  PairedSample pairs;
  std::vector<std::string> tiers;
  for (const auto& r : rows) {
    if (r.strategy != strategy || r.metric != metric) continue;
    auto it = base.find(r.site_id);
    if (it == base.end() || !std::isfinite(it->second) || !std::isfinite(r.value)) continue;
    pairs.site_ids.push_back(r.site_id);
    pairs.a.push_back(it->second);
    pairs.b.push_back(r.value);
    tiers.push_back(r.tier);
  }
  if (pairs.a.empty()) throw DomainError("no site has finite '" + metric + "' values in both runs");
  const GainRegression g = gain_regression(pairs);

  fs::create_directories(run_dir / "reports");
  const fs::path csv_path = run_dir / "reports" / "gain_regression.csv";
  std::ofstream csv(csv_path, std::ios::binary);
  csv << "site_id,tier,baseline,federated,absolute_gain,relative_gain\n";
  std::map<std::string, std::string> tier_of;
  for (std::size_t i = 0; i < pairs.site_ids.size(); ++i) tier_of[pairs.site_ids[i]] = tiers[i];
  for (const auto& r : g.rows)
    csv << r.site_id << ',' << tier_of[r.site_id] << ',' << fmt(r.baseline) << ',' << fmt(r.federated) << ','
        << fmt(r.absolute_gain) << ',' << fmt(r.relative_gain) << '\n';

  json summary = {{"metric", metric},
                  {"baseline_strategy", "individual"},
                  {"federated_strategy", strategy},
                  {"n", g.rows.size()},
                  {"excluded", g.excluded},
                  {"spearman_r", num(g.spearman_r)},
                  {"slope", num(g.slope)},
                  {"intercept", num(g.intercept)}};
  try {
    const WilcoxonResult w = wilcoxon_signed_rank(pairs);
    summary["wilcoxon"] = {{"statistic", w.statistic}, {"p_value", w.p_value}, {"n", w.n}, {"exact", w.exact}};
  } catch (const DomainError&) {
    summary["wilcoxon"] = nullptr;
  }
  std::ofstream(run_dir / "reports" / "gain_regression.json", std::ios::binary) << summary.dump(2) << '\n';
  return csv_path;
}

}  // namespace fedmap
