#include "fedmap/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fedmap/analysis.hpp"
#include "fedmap/json_io.hpp"

namespace fedmap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Violation {
  std::string field;  // JSON pointer below the spec
  std::string message;
};

std::optional<Violation> first_violation(const PartitionSpec& s) {
  if (s.num_sites < 1) return Violation{"/num_sites", "must be at least 1"};
  if (s.size_law == SizeLaw::LogNormal) {
    if (!(s.size_mean > 0)) return Violation{"/size_mean", "must be positive"};
    if (!(s.size_cv >= 0)) return Violation{"/size_cv", "must be non-negative"};
  }
  if (s.size_law == SizeLaw::Fixed) {
    if (s.fixed_sizes.empty()) return Violation{"/fixed_sizes", "is empty"};
    for (std::size_t i = 0; i < s.fixed_sizes.size(); ++i)
      if (s.fixed_sizes[i] < 1) return Violation{"/fixed_sizes/" + std::to_string(i), "must be positive"};
  }
  if (s.min_size < 1) return Violation{"/min_size", "must be positive"};
  if (!(s.dirichlet > 0)) return Violation{"/dirichlet", "concentration must be positive"};
  if (!(s.positive_rate > 0 && s.positive_rate < 1)) return Violation{"/positive_rate", "must lie strictly between 0 and 1"};
  if (!(s.rate_floor >= 0 && s.rate_floor < 0.5)) return Violation{"/rate_floor", "must lie in [0, 0.5)"};
  if (s.num_classes < 2) return Violation{"/num_classes", "at least 2 classes"};
  if (s.num_features < 1) return Violation{"/num_features", "must be positive"};
  if (s.informative < 0 || s.informative > s.num_features) return Violation{"/informative", "out of range"};
  if (!(s.feature_skew >= 0)) return Violation{"/feature_skew", "must be non-negative"};
  if (s.logistic) {
    if (!(s.logistic->amplitude > 0 && s.logistic->amplitude <= 1))
      return Violation{"/logistic/amplitude", "must lie in (0, 1]"};
    if (s.logistic->covariate < 0 || s.logistic->covariate >= s.num_features)
      return Violation{"/logistic/covariate", "out of range"};
  }
  return std::nullopt;
}

}  // namespace

void PartitionSpec::validate() const {
  if (const auto v = first_violation(*this)) throw DomainError("partition" + v->field + ": " + v->message);
}

json to_json(const PartitionSpec& s) {
  json j = {{"num_sites", s.num_sites},
            {"size_law", s.size_law == SizeLaw::LogNormal ? "lognormal" : "fixed"},
            {"size_mean", s.size_mean},
            {"size_cv", s.size_cv},
            {"fixed_sizes", s.fixed_sizes},
            {"min_size", s.min_size},
            {"dirichlet", s.dirichlet},
            {"positive_rate", s.positive_rate},
            {"rate_floor", s.rate_floor},
            {"num_classes", s.num_classes},
            {"num_features", s.num_features},
            {"informative", s.informative},
            {"signal", s.signal},
            {"feature_skew", s.feature_skew},
            {"survival", s.survival},
            {"seed", s.seed}};
  if (s.logistic) {
    const auto& l = *s.logistic;
    j["logistic"] = {{"amplitude", l.amplitude},
                     {"steepness", l.steepness},
                     {"midpoint", l.midpoint},
                     {"complement_midpoint", l.complement_midpoint},
                     {"covariate", l.covariate},
                     {"covariate_mean", l.covariate_mean},
                     {"covariate_sd", l.covariate_sd}};
  }
  return j;
}

PartitionSpec partition_spec_from_json(const json& j, const std::string& pointer) {
  PartitionSpec s;
  StrictObject o(j, pointer);
  o.get("num_sites", s.num_sites);
  std::string law = "lognormal";
  if (o.get("size_law", law)) {
    if (law == "lognormal")
      s.size_law = SizeLaw::LogNormal;
    else if (law == "fixed")
      s.size_law = SizeLaw::Fixed;
    else
      throw ConfigError(o.path("size_law"), "expected \"lognormal\" or \"fixed\"");
  }
  o.get("size_mean", s.size_mean);
  o.get("size_cv", s.size_cv);
  o.get("fixed_sizes", s.fixed_sizes);
  o.get("min_size", s.min_size);
  o.get("dirichlet", s.dirichlet);
  o.get("positive_rate", s.positive_rate);
  o.get("rate_floor", s.rate_floor);
  o.get("num_classes", s.num_classes);
  o.get("num_features", s.num_features);
  o.get("informative", s.informative);
  o.get("signal", s.signal);
  o.get("feature_skew", s.feature_skew);
  o.get("survival", s.survival);
  o.get("seed", s.seed);
  if (const json* l = o.child("logistic")) {
    LogisticAssignment la;
    StrictObject lo(*l, o.path("logistic"));
    lo.get("amplitude", la.amplitude);
    lo.get("steepness", la.steepness);
    lo.get("midpoint", la.midpoint);
    lo.get("complement_midpoint", la.complement_midpoint);
    lo.get("covariate", la.covariate);
    lo.get("covariate_mean", la.covariate_mean);
    lo.get("covariate_sd", la.covariate_sd);
    lo.finish();
    s.logistic = la;
  }
  o.finish();
  if (const auto v = first_violation(s)) throw ConfigError(pointer + v->field, v->message);
  return s;
}

double logistic_assign(double x, double amplitude, double steepness, double midpoint) {
  return amplitude / (1.0 + std::exp(-steepness * (x - midpoint)));
}

std::string site_name(Index k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "site_%03lld", static_cast<long long>(k));
  return buf;
}

namespace {

std::vector<double> dirichlet_draw(const std::vector<double>& alpha, Rng& rng) {
  std::vector<double> g(alpha.size());
  double total = 0;
  for (std::size_t c = 0; c < alpha.size(); ++c) {
    std::gamma_distribution<double> gamma(alpha[c], 1.0);
    total += g[c] = gamma(rng);
  }
  if (!(total > 0)) {
    // Every component underflowed: put all mass on one class drawn from the prior.
    std::discrete_distribution<std::size_t> pick(alpha.begin(), alpha.end());
    std::fill(g.begin(), g.end(), 0.0);
    g[pick(rng)] = 1.0;
    return g;
  }
  for (double& x : g) x /= total;
  return g;
}

struct SiteShape {
  MatrixXd A;
  Eigen::VectorXd b;
};

}  // namespace

std::vector<SiteDataset> generate_cohort(const PartitionSpec& spec) {
  spec.validate();
  const Index q = spec.num_sites, p = spec.num_features, C = spec.num_classes;

  // Shared structure: class means, hazard coefficients.
  Rng cohort = make_rng(spec.seed, "cohort");
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd class_means = MatrixXd::Zero(p, C);
  for (Index c = 0; c < C; ++c)
    for (Index j = 0; j < spec.informative; ++j) class_means(j, c) = spec.signal * normal(cohort);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  for (Index j = 0; j < spec.informative; ++j)
    beta(j) = spec.signal / std::sqrt(static_cast<double>(std::max<Index>(1, spec.informative))) * normal(cohort);

  // Sizes.
  std::vector<Index> sizes(q);
  Rng size_rng = make_rng(spec.seed, "sizes");
  if (spec.size_law == SizeLaw::Fixed) {
    for (Index k = 0; k < q; ++k) sizes[k] = spec.fixed_sizes[static_cast<std::size_t>(k) % spec.fixed_sizes.size()];
  } else {
    const double s2 = std::log1p(spec.size_cv * spec.size_cv);
    std::lognormal_distribution<double> law(std::log(spec.size_mean) - 0.5 * s2, std::sqrt(s2));
    for (Index k = 0; k < q; ++k) sizes[k] = std::max<Index>(spec.min_size, std::llround(law(size_rng)));
  }

  // Label skew: per-site class priors, or hazard multipliers in survival mode.
  std::vector<double> prior(C, (1.0 - spec.positive_rate) / static_cast<double>(C - 1));
  if (C == 2)
    prior = {1.0 - spec.positive_rate, spec.positive_rate};
  std::vector<std::vector<double>> site_prior(q);
  std::vector<double> hazard_mult(q, 1.0);
  Rng label_rng = make_rng(spec.seed, "labels");
  for (Index k = 0; k < q; ++k) {
    if (spec.survival) {
      std::gamma_distribution<double> gamma(spec.dirichlet, 1.0 / spec.dirichlet);
      hazard_mult[k] = std::max(gamma(label_rng), 1e-12);
      continue;
    }
    std::vector<double> a(C);
    for (Index c = 0; c < C; ++c) a[c] = spec.dirichlet * prior[c];
    site_prior[k] = dirichlet_draw(a, label_rng);
    if (spec.rate_floor > 0) {
      double total = 0;
      for (double& v : site_prior[k]) total += v = std::clamp(v, spec.rate_floor, 1.0 - spec.rate_floor);
      for (double& v : site_prior[k]) v /= total;
    }
  }

  std::vector<SiteDataset> sites(q);
  std::vector<Eigen::VectorXd> event_times(q);
  for (Index k = 0; k < q; ++k) {
    SiteDataset& s = sites[k];
    s.site_id = site_name(k);
    s.task = spec.survival ? Task::Survival : Task::Classification;
    Rng rng = make_rng(spec.seed, "site/" + s.site_id);

    SiteShape shape{MatrixXd::Identity(p, p), Eigen::VectorXd::Zero(p)};
    if (spec.feature_skew > 0) {
      for (Index i = 0; i < p; ++i)
        for (Index j = 0; j < p; ++j) shape.A(i, j) += spec.feature_skew / std::sqrt(static_cast<double>(p)) * normal(rng);
      for (Index i = 0; i < p; ++i) shape.b(i) = spec.feature_skew * normal(rng);
    }

    const Index n = sizes[k];
    s.features.resize(n, p);
    if (spec.survival) {
      event_times[k].resize(n);
      s.events.assign(n, 0);
    } else {
      s.labels.resize(n);
    }
    std::discrete_distribution<int> cls(spec.survival ? prior.begin() : site_prior[k].begin(),
                                        spec.survival ? prior.end() : site_prior[k].end());
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (Index i = 0; i < n; ++i) {
      Eigen::VectorXd z(p);
      int y = 0;
      for (int attempt = 0;; ++attempt) {
        if (attempt == 10000)
          throw DomainError("partition: logistic assignment rejected every draw at " + s.site_id);
        if (!spec.survival) y = cls(rng);
        for (Index j = 0; j < p; ++j) z(j) = normal(rng);
        if (!spec.survival) z += class_means.col(y);
        if (!spec.logistic) break;
        const auto& la = *spec.logistic;
        const double x = la.covariate_mean + la.covariate_sd * z(la.covariate);
        const double accept = k % 2 == 0 ? logistic_assign(x, la.amplitude, la.steepness, la.midpoint)
                                         : 1.0 - logistic_assign(x, la.amplitude, la.steepness, la.complement_midpoint);
        if (unif(rng) < accept) break;
      }
      if (spec.survival) {
        const double rate = hazard_mult[k] * std::exp(beta.dot(z));
        std::exponential_distribution<double> expo(rate);
        event_times[k](i) = expo(rng);
      } else {
        s.labels[i] = y;
      }
      s.features.row(i) = (shape.A * z + shape.b).transpose();
    }
  }

  if (spec.survival) {
    // Administrative censoring at the pooled positive_rate quantile of event times.
    std::vector<double> pooled;
    for (const auto& t : event_times) pooled.insert(pooled.end(), t.data(), t.data() + t.size());
    std::sort(pooled.begin(), pooled.end());
    const std::size_t qi =
        std::min(pooled.size() - 1, static_cast<std::size_t>(spec.positive_rate * static_cast<double>(pooled.size())));
    const double tau = pooled[qi];
    for (Index k = 0; k < q; ++k) {
      SiteDataset& s = sites[k];
      s.times.resize(s.size());
      for (Index i = 0; i < s.size(); ++i) {
        s.events[i] = event_times[k](i) <= tau ? 1 : 0;
        s.times(i) = std::min(event_times[k](i), tau);
      }
      if (s.num_events() == 0)
        throw DomainError("partition: " + s.site_id + " has no events; raise positive_rate or site sizes");
    }
  }
  for (const auto& s : sites) s.validate();
  return sites;
}

double wasserstein_1d(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw DomainError("wasserstein_1d: empty sample");
  std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  // Quantile positions in units of 1 / (n m) keep the breakpoints exact.
  const unsigned long long n = x.size(), m = y.size();
  unsigned long long pos = 0;
  std::size_t i = 0, j = 0;
  long double total = 0;
  while (i < n && j < m) {
    const unsigned long long next_x = (i + 1) * m, next_y = (j + 1) * n;
    const unsigned long long next = std::min(next_x, next_y);
    total += static_cast<long double>(next - pos) * std::abs(static_cast<long double>(x[i]) - y[j]);
    pos = next;
    if (next_x == next) ++i;
    if (next_y == next) ++j;
  }
  return static_cast<double>(total / (static_cast<long double>(n) * static_cast<long double>(m)));
}

std::vector<int> outcome_labels(const SiteDataset& site) {
  return site.task == Task::Survival ? site.events : site.labels;
}

Index most_predictive_feature(std::span<const SiteDataset> sites) {
  if (sites.empty()) throw DomainError("most_predictive_feature: no sites");
  const Index p = sites.front().num_features();
  std::vector<int> y;
  for (const auto& s : sites) {
    auto l = outcome_labels(s);
    for (int v : l) y.push_back(v == 1 ? 1 : 0);
  }
  Index best = 0;
  double best_score = -1;
  for (Index j = 0; j < p; ++j) {
    std::vector<double> col;
    for (const auto& s : sites) col.insert(col.end(), s.features.col(j).data(), s.features.col(j).data() + s.size());
    double score;
    try {
      score = std::abs(auroc(col, y) - 0.5);
    } catch (const DomainError&) {
      return 0;
    }
    if (score > best_score) {
      best_score = score;
      best = j;
    }
  }
  return best;
}

namespace {

std::pair<double, double> mean_sd(const std::vector<double>& v) {
  if (v.empty()) return {0, 0};
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size()))};
}

}  // namespace

SkewReport skew_report(std::span<const SiteDataset> sites, Index feature) {
  if (sites.size() < 2) throw DomainError("skew_report: need at least 2 sites");
  SkewReport r;
  r.feature = feature < 0 ? most_predictive_feature(sites) : feature;
  std::vector<double> sizes;
  for (const auto& s : sites) {
    if (r.feature >= s.num_features()) throw ShapeError("skew_report: feature index out of range");
    r.site_ids.push_back(s.site_id);
    r.sizes.push_back(s.size());
    sizes.push_back(static_cast<double>(s.size()));
    const auto y = outcome_labels(s);
    const double pos = static_cast<double>(std::count(y.begin(), y.end(), 1));
    r.positive_ratios.push_back(pos / static_cast<double>(y.size()));
    if (pos == 0 || pos == static_cast<double>(y.size())) r.single_class_sites.push_back(s.site_id);
  }
  const auto [sm, ssd] = mean_sd(sizes);
  r.size_cv = ssd / sm;
  std::tie(r.positive_ratio_mean, r.positive_ratio_sd) = mean_sd(r.positive_ratios);
  r.positive_ratio_cv = r.positive_ratio_mean > 0 ? r.positive_ratio_sd / r.positive_ratio_mean : 0.0;

  const std::size_t q = sites.size();
  r.wasserstein = MatrixXd::Zero(q, q);
  std::vector<std::vector<double>> cols(q);
  for (std::size_t k = 0; k < q; ++k) {
    const auto c = sites[k].features.col(r.feature);
    cols[k].assign(c.data(), c.data() + c.size());
  }
  // Distances are reported in units of the pooled standard deviation so they
  // do not depend on the feature's scale.
  std::vector<double> pooled;
  for (const auto& c : cols) pooled.insert(pooled.end(), c.begin(), c.end());
  const double pooled_sd = mean_sd(pooled).second;
  if (pooled_sd > 0)
    for (auto& c : cols)
      for (double& v : c) v /= pooled_sd;
  std::vector<double> off;
  for (std::size_t a = 0; a < q; ++a)
    for (std::size_t b = a + 1; b < q; ++b) {
      r.wasserstein(a, b) = r.wasserstein(b, a) = wasserstein_1d(cols[a], cols[b]);
      off.push_back(r.wasserstein(a, b));
    }
  std::tie(r.wasserstein_mean, r.wasserstein_sd) = mean_sd(off);
  return r;
}

json to_json(const SkewReport& r) {
  json w = json::array();
  for (Index i = 0; i < r.wasserstein.rows(); ++i) {
    json row = json::array();
    for (Index j = 0; j < r.wasserstein.cols(); ++j) row.push_back(r.wasserstein(i, j));
    w.push_back(row);
  }
  return {{"site_ids", r.site_ids},
          {"sizes", r.sizes},
          {"size_cv", r.size_cv},
          {"positive_ratios", r.positive_ratios},
          {"positive_ratio_mean", r.positive_ratio_mean},
          {"positive_ratio_sd", r.positive_ratio_sd},
          {"positive_ratio_cv", r.positive_ratio_cv},
          {"feature", r.feature},
          {"wasserstein", w},
          {"wasserstein_mean", r.wasserstein_mean},
          {"wasserstein_sd", r.wasserstein_sd},
          {"single_class_sites", r.single_class_sites}};
}

Tier tier_for_size(Index n, Index low, Index high) {
  if (n > high) return Tier::T1;
  if (n >= low) return Tier::T2;
  return Tier::T3;
}

void assign_tiers(std::vector<SiteDataset>& sites, Index low, Index high) {
  if (!(low < high)) throw DomainError("assign_tiers: need low < high");
  for (auto& s : sites) s.tier = tier_for_size(s.size(), low, high);
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_cohort(const fs::path& dir, std::span<const SiteDataset> sites, const json& spec) {
  fs::create_directories(dir);
  json manifest = {{"spec", spec}, {"sites", json::array()}};
  for (const auto& s : sites) {
    const std::string file = s.site_id + ".csv";
    std::ofstream out(dir / file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir / file).string());
    for (Index j = 0; j < s.num_features(); ++j) out << 'f' << j << ',';
    out << (s.task == Task::Survival ? "time,event\n" : "label\n");
    for (Index i = 0; i < s.size(); ++i) {
      for (Index j = 0; j < s.num_features(); ++j) out << fmt(s.features(i, j)) << ',';
      if (s.task == Task::Survival)
        out << fmt(s.times(i)) << ',' << s.events[i] << '\n';
      else
        out << s.labels[i] << '\n';
    }
    manifest["sites"].push_back({{"site_id", s.site_id},
                                 {"file", file},
                                 {"n", s.size()},
                                 {"tier", to_string(s.tier)},
                                 {"task", s.task == Task::Survival ? "survival" : "classification"}});
  }
  std::ofstream(dir / "manifest.json", std::ios::binary) << manifest.dump(2) << '\n';
}

std::vector<SiteDataset> read_cohort(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot read " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("", std::string("manifest is not valid JSON: ") + e.what());
  }
  const fs::path dir = manifest_path.parent_path();
  std::vector<SiteDataset> sites;
  if (!manifest.contains("sites") || !manifest["sites"].is_array()) throw ConfigError("/sites", "expected an array");
  for (std::size_t k = 0; k < manifest["sites"].size(); ++k) {
    const json& e = manifest["sites"][k];
    const std::string ptr = "/sites/" + std::to_string(k);
    SiteDataset s;
    std::string file, task = "classification", tier = "T1";
    try {
      s.site_id = e.at("site_id").get<std::string>();
      file = e.at("file").get<std::string>();
      if (e.contains("task")) task = e["task"].get<std::string>();
      if (e.contains("tier")) tier = e["tier"].get<std::string>();
    } catch (const json::exception& ex) {
      throw ConfigError(ptr, ex.what());
    }
    s.task = task == "survival" ? Task::Survival : Task::Classification;
    s.tier = tier_from_string(tier);
    std::ifstream csv(dir / file);
    if (!csv) throw std::runtime_error("cannot read " + (dir / file).string());
    std::string line;
    std::getline(csv, line);
    const Index cols = static_cast<Index>(std::count(line.begin(), line.end(), ',')) + 1;
    const Index p = cols - (s.task == Task::Survival ? 2 : 1);
    std::vector<std::vector<double>> rows;
    while (std::getline(csv, line)) {
      if (line.empty()) continue;
      std::vector<double> v;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) v.push_back(std::strtod(cell.c_str(), nullptr));
      if (static_cast<Index>(v.size()) != cols)
        throw DomainError(file + ": row " + std::to_string(rows.size() + 1) + " has the wrong number of cells");
      rows.push_back(std::move(v));
    }
    const Index n = static_cast<Index>(rows.size());
    s.features.resize(n, p);
    if (s.task == Task::Survival) {
      s.times.resize(n);
      s.events.resize(n);
    } else {
      s.labels.resize(n);
    }
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < p; ++j) s.features(i, j) = rows[i][j];
      if (s.task == Task::Survival) {
        s.times(i) = rows[i][p];
        s.events[i] = static_cast<int>(rows[i][p + 1]);
      } else {
        s.labels[i] = static_cast<int>(rows[i][p]);
      }
    }
    s.validate();
    sites.push_back(std::move(s));
  }
  return sites;
}

}  // namespace fedmap
