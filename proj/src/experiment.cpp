#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <openssl/evp.h>

#include "fedmap/harness.hpp"

namespace fedmap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Data preparation

SiteSplit split_site(const SiteDataset& site, std::uint64_t seed, double test_fraction) {
  const auto y = outcome_labels(site);
  std::set<int> classes(y.begin(), y.end());
  Rng rng = make_rng(seed, "split/" + site.site_id);
  SiteSplit split;
  for (int c : classes) {
    std::vector<Index> idx;
    for (Index i = 0; i < site.size(); ++i)
      if (y[i] == c) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    const Index n = static_cast<Index>(idx.size());
    Index n_test = std::llround(test_fraction * static_cast<double>(n));
    if (n >= 2) n_test = std::clamp<Index>(n_test, 1, n - 1);
    else n_test = 0;
    split.test.insert(split.test.end(), idx.begin(), idx.begin() + n_test);
    split.train.insert(split.train.end(), idx.begin() + n_test, idx.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

std::vector<PreparedSite> prepare_sites(const std::vector<SiteDataset>& sites, std::uint64_t seed) {
  std::vector<PreparedSite> out;
  for (const auto& s : sites) {
    const SiteSplit split = split_site(s, seed);
    PreparedSite p;
    p.tier = s.tier;
    p.train = s.subset(split.train);
    p.test = s.subset(split.test);
    const Standardizer z = Standardizer::fit(p.train.features);
    p.train.features = z.apply(p.train.features);
    if (p.test.size() > 0) p.test.features = z.apply(p.test.features);
    out.push_back(std::move(p));
  }
  return out;
}

ModelPreset build_preset(const FederationConfig& config, Task task, Index input_dim, Index classes) {
  std::string name = config.model.preset;
  if (task == Task::Survival && name == "mlp") name = "mlp-surv";
  const ModelPreset preset =
      preset_by_name(name, input_dim, classes, config.model.dropout, config.model.hidden, config.model.branch_dims);
  if ((preset.head == Head::LogHazard) != (task == Task::Survival))
    throw DomainError("model preset '" + name + "' does not match the cohort's task");
  if (config.loss == "cox" && task != Task::Survival) throw DomainError("cox loss needs survival data");
  if (config.loss == "cross-entropy" && task != Task::Classification)
    throw DomainError("cross-entropy loss needs classification data");
  return preset;
}

// ---------------------------------------------------------------------------
// Metrics

std::vector<std::pair<std::string, double>> evaluate_metrics(const ModelPreset& preset, const ParamVector& theta,
                                                             const SiteDataset& test,
                                                             const std::vector<std::string>& metrics) {
  std::vector<std::pair<std::string, double>> out;
  if (test.size() == 0) {
    for (const auto& m : metrics) out.emplace_back(m, kNaN);
    return out;
  }
  const MatrixXd scores = predict_batch(preset, theta, test.features);
  std::vector<double> prob, risk;
  std::vector<int> pred, y;
  if (test.task == Task::Classification) {
    const Eigen::VectorXd p = positive_probability(scores);
    prob.assign(p.data(), p.data() + p.size());
    for (Index i = 0; i < scores.rows(); ++i) {
      Index arg;
      scores.row(i).maxCoeff(&arg);
      pred.push_back(static_cast<int>(arg));
    }
    for (int l : test.labels) y.push_back(l == 1 ? 1 : 0);
  } else {
    risk.assign(scores.col(0).data(), scores.col(0).data() + scores.rows());
  }
  std::vector<int> pred_pos;
  for (int v : pred) pred_pos.push_back(v == 1 ? 1 : 0);

  for (const auto& m : metrics) {
    double v = kNaN;
    try {
      if (m == "auroc") {
        v = auroc(prob, y);
      } else if (m == "balanced_accuracy") {
        v = balanced_accuracy(pred_pos, y).balanced_accuracy;
      } else if (m == "sensitivity") {
        v = balanced_accuracy(pred_pos, y).sensitivity;
      } else if (m == "specificity") {
        v = balanced_accuracy(pred_pos, y).specificity;
      } else if (m == "brier") {
        v = brier(prob, y);
      } else if (m == "accuracy") {
        double hit = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test.labels[i];
        v = hit / static_cast<double>(pred.size());
      } else if (m == "nll") {
        v = cross_entropy(preset, theta, test);
      } else if (m == "c_index") {
        v = c_index(risk, std::span<const double>(test.times.data(), test.times.size()), test.events);
      } else if (m == "cox_nll") {
        v = cox_loss(preset, theta, test);
      } else {
        throw DomainError("unknown metric '" + m + "'");
      }
    } catch (const DomainError& e) {
      if (std::string(e.what()).starts_with("unknown metric")) throw;
      v = kNaN;
    } catch (const ShapeError&) {
      v = kNaN;
    }
    out.emplace_back(m, v);
  }
  return out;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  os << "run_id,strategy,tier,site_id,n_train,n_test,metric,value\n";
  for (const auto& r : rows)
    os << r.run_id << ',' << r.strategy << ',' << r.tier << ',' << r.site_id << ',' << r.n_train << ',' << r.n_test
       << ',' << r.metric << ',' << fmt(r.value) << '\n';
  return os.str();
}

std::vector<MetricRow> read_metrics_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "run_id,strategy,tier,site_id,n_train,n_test,metric,value")
    throw DomainError(path.string() + ": unexpected header");
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 8) throw DomainError(path.string() + ": malformed row '" + line + "'");
    MetricRow r;
    r.run_id = cells[0];
    r.strategy = cells[1];
    r.tier = cells[2];
    r.site_id = cells[3];
    r.n_train = std::stoll(cells[4]);
    r.n_test = std::stoll(cells[5]);
    r.metric = cells[6];
    r.value = cells[7] == "nan" ? kNaN : std::strtod(cells[7].c_str(), nullptr);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string git_blob_sha1(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx, content.data(), content.size()) != 1 || EVP_DigestFinal_ex(ctx, md, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("SHA-1 digest failed");
  }
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

// ---------------------------------------------------------------------------
// Running

namespace {

json round_json(const std::string& strategy, const RoundReport& r) {
  return {{"strategy", strategy},
          {"round", r.round},
          {"site_ids", r.site_ids},
          {"local_losses", r.local_losses},
          {"log_weights", r.log_weights},
          {"weights", r.weights},
          {"aggregate_objective", r.aggregate_objective},
          {"wall_ms", r.wall_ms}};
}

/// Held-out loss of a model on one site; NaN when undefined.
double heldout_loss(const ModelPreset& preset, const ParamVector& theta, const SiteDataset& test) {
  if (test.size() == 0) return kNaN;
  try {
    return test.task == Task::Survival ? cox_loss(preset, theta, test) : cross_entropy(preset, theta, test);
  } catch (const DomainError&) {
    return kNaN;
  }
}

}  // namespace

RunResult run_experiment(const FederationConfig& config, const fs::path& out_dir) {
  const auto started = std::chrono::steady_clock::now();
  config.validate();
  RunResult result;
  result.config_hash = config_hash(config);
  result.run_id = result.config_hash.substr(0, 12);

  std::vector<SiteDataset> cohort = config.partition ? generate_cohort(*config.partition) : read_cohort(config.cohort);
  if (cohort.empty()) throw DomainError("cohort has no sites");
  assign_tiers(cohort, config.tiers.low, config.tiers.high);
  const Task task = cohort.front().task;
  Index classes = 2;
  for (const auto& s : cohort) {
    if (s.task != task) throw DomainError("cohort mixes survival and classification sites");
    if (s.num_features() != cohort.front().num_features()) throw DomainError("sites differ in feature count");
    for (int l : s.labels) classes = std::max<Index>(classes, l + 1);
  }
  const std::vector<PreparedSite> sites = prepare_sites(cohort, config.seed);
  const ModelPreset preset = build_preset(config, task, cohort.front().num_features(), classes);
  const std::vector<std::string> metrics = config.metrics.empty() ? default_metrics(task) : config.metrics;

  std::vector<std::unique_ptr<LocalLoss>> losses;
  std::vector<std::size_t> t1, t2;
  for (std::size_t k = 0; k < sites.size(); ++k) {
    losses.push_back(make_loss(preset, sites[k].train));
    if (sites[k].tier == Tier::T1) t1.push_back(k);
    if (sites[k].tier == Tier::T2) t2.push_back(k);
  }
  if (t1.empty()) throw DomainError("no site is large enough for T1; lower tiers.high");

  std::vector<StrategyKind> kinds{config.strategy};
  for (auto k : config.baselines)
    if (std::find(kinds.begin(), kinds.end(), k) == kinds.end()) kinds.push_back(k);
  if (task == Task::Survival)
    for (std::size_t k = 0; k < sites.size(); ++k) {
      const bool trains = sites[k].tier != Tier::T3 ||
                          std::find(kinds.begin(), kinds.end(), StrategyKind::Individual) != kinds.end();
      if (trains && sites[k].train.num_events() == 0)
        throw DomainError("site '" + sites[k].train.site_id + "' has no events in its training split");
    }

  std::ofstream rounds_out;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    rounds_out.open(out_dir / "rounds.jsonl", std::ios::binary);
    if (cohort.size() >= 2) {
      std::ofstream(out_dir / "skew.json", std::ios::binary) << to_json(skew_report(cohort)).dump(2) << '\n';
    }
  }

  OptimizerConfig ft_opt = config.optimizer;
  if (config.finetune.lr) ft_opt.lr = *config.finetune.lr;
  const int ft_epochs = config.finetune.epochs.value_or(config.fedmap.local_epochs);

  std::string failure;
  for (StrategyKind kind : kinds) {
    const std::string name = to_string(kind);
    StrategyOutcome outcome;
    outcome.kind = kind;
    std::vector<ParamVector> model(sites.size());
    std::optional<ParamVector> global;

    std::vector<SiteTask> tasks;
    for (std::size_t k : t1) tasks.push_back({sites[k].train.site_id, losses[k].get()});

    double best_val = std::numeric_limits<double>::infinity();
    int stale = 0;
    auto on_round = [&](const FederatedState& st) {
      const RoundReport& rep = st.reports.back();
      outcome.rounds.push_back(rep);
      if (rounds_out.is_open()) rounds_out << round_json(name, rep).dump() << '\n';
      if (!out_dir.empty()) {
        Checkpoint cp{rep.round, name, result.config_hash, config.seed, st.prior, st.site_ids, st.thetas};
        write_checkpoint(out_dir / "checkpoints" / name, cp);
      }
      if (!config.round_early_stopping) return true;
      double sum = 0;
      int n = 0;
      for (std::size_t j = 0; j < t1.size(); ++j) {
        const ParamVector& th = kind == StrategyKind::FedAvg ? st.prior.mu : st.thetas[j];
        const double l = heldout_loss(preset, th, sites[t1[j]].test);
        if (std::isfinite(l)) sum += l, ++n;
      }
      const double val = n ? sum / n : kNaN;
      if (val < best_val) {
        best_val = val;
        stale = 0;
        return true;
      }
      return ++stale < config.round_patience;
    };

    try {
      switch (kind) {
        case StrategyKind::FedMap:
        case StrategyKind::FedMapQuad: {
          const bool quad = kind == StrategyKind::FedMapQuad;
          const FedMapHyper hyper = quad ? quad_hyper(config.fedmap) : config.fedmap;
          const PriorHyper prior = quad ? quad_prior(config.prior) : config.prior;
          const FederatedState st = run_t1(preset, tasks, hyper, prior, config.optimizer, config.seed, on_round);
          for (std::size_t j = 0; j < t1.size(); ++j) model[t1[j]] = st.thetas[j];
          for (std::size_t k : t2)
            model[k] = finetune_t2(st.prior, *losses[k], ft_epochs, ft_opt,
                                   mix_seed(config.seed, hash_string("finetune/" + sites[k].train.site_id)));
          global = st.prior.mu;
          outcome.prior = st.prior;
          break;
        }
        case StrategyKind::FedAvg: {
          const FederatedState st = run_fedavg(preset, tasks, config.fedmap, config.optimizer, config.seed, on_round);
          for (std::size_t k : t1) model[k] = st.prior.mu;
          for (std::size_t k : t2)
            model[k] = local_train(sites[k].train.site_id, st.prior.mu, *losses[k], ft_epochs, ft_opt,
                                   mix_seed(config.seed, hash_string("finetune/" + sites[k].train.site_id)))
                           .theta;
          global = st.prior.mu;
          outcome.prior = st.prior;
          break;
        }
        case StrategyKind::Individual: {
          std::vector<SiteTask> all;
          for (std::size_t k = 0; k < sites.size(); ++k) all.push_back({sites[k].train.site_id, losses[k].get()});
          model = run_individual(preset, all, config.fedmap.rounds * config.fedmap.local_epochs, config.optimizer,
                                 config.seed);
          break;
        }
      }
    } catch (const std::exception& e) {
      failure = name + ": " + e.what();
      break;
    }
    for (std::size_t k = 0; k < sites.size(); ++k) {
      const PreparedSite& s = sites[k];
      const ParamVector& theta = model[k].size() > 0 ? model[k] : *global;
      auto emit = [&](const std::string& prefix, const ParamVector& th) {
        for (const auto& [m, v] : evaluate_metrics(preset, th, s.test, metrics))
          result.rows.push_back(
              {result.run_id, name, to_string(s.tier), s.train.site_id, s.train.size(), s.test.size(), prefix + m, v});
      };
      emit("", theta);
      if (global) emit("global_", *global);
    }
    result.strategies.push_back(std::move(outcome));
  }

  const std::string csv = metrics_csv(result.rows);
  result.digest = git_blob_sha1(csv);
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  if (!out_dir.empty()) {
    std::ofstream(out_dir / "metrics.csv", std::ios::binary) << csv;
    json site_list = json::array();
    for (const auto& s : sites)
      site_list.push_back({{"site_id", s.train.site_id},
                           {"tier", to_string(s.tier)},
                           {"n", s.train.size() + s.test.size()},
                           {"n_train", s.train.size()},
                           {"n_test", s.test.size()}});
    std::vector<std::string> names;
    for (auto k : kinds) names.push_back(to_string(k));
    json manifest = {{"run_id", result.run_id},
                     {"config_hash", result.config_hash},
                     {"config", to_json(config)},
                     {"seed", config.seed},
                     {"strategies", names},
                     {"metrics", metrics},
                     {"model", {{"preset", preset.name}, {"num_params", preset.num_params()}}},
                     {"sites", site_list},
                     {"metrics_digest", result.digest},
                     {"wall_seconds", result.wall_seconds},
                     {"status", failure.empty() ? "complete" : "failed"}};
    if (!failure.empty()) manifest["error"] = failure;
    std::ofstream(out_dir / "manifest.json", std::ios::binary) << manifest.dump(2) << '\n';
  }
  if (!failure.empty()) throw std::runtime_error(failure);
  return result;
}

}  // namespace fedmap
