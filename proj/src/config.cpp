#include <algorithm>
#include <cstdio>
#include <fstream>

#include "fedmap/harness.hpp"

namespace fedmap {

using nlohmann::json;

namespace {

const std::vector<std::string> kClassificationMetrics{"auroc", "balanced_accuracy", "sensitivity", "specificity",
                                                      "brier", "accuracy", "nll"};
const std::vector<std::string> kSurvivalMetrics{"c_index", "cox_nll"};

bool known_metric(const std::string& m) {
  return std::find(kClassificationMetrics.begin(), kClassificationMetrics.end(), m) != kClassificationMetrics.end() ||
         std::find(kSurvivalMetrics.begin(), kSurvivalMetrics.end(), m) != kSurvivalMetrics.end();
}

std::string scaling_name(LikelihoodScaling s) { return s == LikelihoodScaling::MeanNll ? "mean-nll" : "paper-literal"; }

template <typename Fn>
void at_path(const std::string& pointer, Fn&& check) {
  try {
    check();
  } catch (const DomainError& e) {
    throw ConfigError(pointer, e.what());
  }
}

}  // namespace

std::vector<std::string> default_metrics(Task task) {
  if (task == Task::Survival) return {"c_index"};
  return {"auroc", "balanced_accuracy", "brier"};
}

void apply_preset_defaults(FederationConfig& c, const std::string& preset) {
  c.model.preset = preset;
  if (preset == "cprd-surv") {
    c.optimizer.batch_size = 128;
    c.model.dropout = 0.1;
    c.fedmap.local_epochs = 10;
    c.fedmap.rounds = 100;
    c.loss = "cox";
  } else if (preset == "eicu-multimodal") {
    c.optimizer.batch_size = 32;
    c.model.dropout = 0.3;
    c.optimizer.weight_decay = 1e-5;
    c.fedmap.local_epochs = 5;
    c.fedmap.rounds = 30;
  } else if (preset == "interval-mlp") {
    c.optimizer.batch_size = 128;
    c.optimizer.weight_decay = 1e-5;
    c.fedmap.local_epochs = 2;
    c.fedmap.rounds = 50;
  } else if (preset == "mlp-surv") {
    c.loss = "cox";
  }
  c.optimizer.name = "adam";
  c.optimizer.lr = 1e-3;
  c.optimizer.patience = 5;
}

void FederationConfig::validate() const {
  fedmap.validate();
  if (fedmap.rounds < 1) throw DomainError("fedmap.rounds must be at least 1");
  if (!(prior.alpha > 0)) throw DomainError("prior.alpha must be positive");
  if (!(prior.epsilon > 0)) throw DomainError("prior.epsilon must be positive");
  for (Index w : prior.icnn_widths)
    if (w < 1) throw DomainError("prior.icnn_widths must be positive");
  if (prior.use_icnn && prior.icnn_widths.empty()) throw DomainError("prior.icnn_widths is empty");
  if (optimizer.name != "adam" && optimizer.name != "sgd") throw DomainError("optimizer.name must be adam or sgd");
  if (!(optimizer.lr > 0)) throw DomainError("optimizer.lr must be positive");
  if (optimizer.batch_size < 1) throw DomainError("optimizer.batch_size must be positive");
  if (optimizer.weight_decay < 0) throw DomainError("optimizer.weight_decay must be non-negative");
  if (optimizer.patience < 1) throw DomainError("optimizer.patience must be positive");
  if (!(model.dropout >= 0 && model.dropout < 1)) throw DomainError("model.dropout must lie in [0, 1)");
  if (finetune.epochs && *finetune.epochs < 0) throw DomainError("finetune.epochs must be non-negative");
  if (finetune.lr && !(*finetune.lr > 0)) throw DomainError("finetune.lr must be positive");
  if (!(tiers.low < tiers.high)) throw DomainError("tiers.low must be below tiers.high");
  if (loss != "auto" && loss != "cross-entropy" && loss != "cox") throw DomainError("unknown loss '" + loss + "'");
  for (const auto& m : metrics)
    if (!known_metric(m)) throw DomainError("unknown metric '" + m + "'");
  if (!partition && cohort.empty()) throw DomainError("either partition or cohort must be given");
  if (partition) partition->validate();
  if (round_patience < 1) throw DomainError("round_patience must be positive");
}

FederationConfig parse_config(const json& j) {
  FederationConfig c;
  StrictObject o(j, "");

  // The preset comes first so that explicit fields override its defaults.
  std::string preset = "mlp";
  const json* model = o.child("model");
  if (model) {
    if (!model->is_object()) throw ConfigError("/model", "expected an object");
    if (model->contains("preset")) {
      if (!(*model)["preset"].is_string()) throw ConfigError("/model/preset", "expected a string");
      preset = (*model)["preset"].get<std::string>();
    }
  }
  apply_preset_defaults(c, preset);
  if (model) {
    StrictObject m(*model, "/model");
    m.get("preset", c.model.preset);
    m.get("hidden", c.model.hidden);
    m.get("branch_dims", c.model.branch_dims);
    m.get("dropout", c.model.dropout);
    m.finish();
    at_path("/model/preset", [&] {
      if (c.model.preset != "mlp" && c.model.preset != "mlp-surv" && c.model.preset != "cprd-surv" &&
          c.model.preset != "eicu-multimodal" && c.model.preset != "interval-mlp")
        throw DomainError("unknown model preset '" + c.model.preset + "'");
    });
    at_path("/model/dropout", [&] {
      if (!(c.model.dropout >= 0 && c.model.dropout < 1)) throw DomainError("dropout must lie in [0, 1)");
    });
  }

  std::string s;
  if (o.get("strategy", s)) at_path("/strategy", [&] { c.strategy = strategy_from_string(s); });
  std::vector<std::string> bl;
  if (o.get("baselines", bl))
    for (std::size_t i = 0; i < bl.size(); ++i)
      at_path("/baselines/" + std::to_string(i), [&] { c.baselines.push_back(strategy_from_string(bl[i])); });
  o.get("loss", c.loss);
  at_path("/loss", [&] {
    if (c.loss != "auto" && c.loss != "cross-entropy" && c.loss != "cox") throw DomainError("unknown loss '" + c.loss + "'");
  });

  if (const json* f = o.child("fedmap")) {
    StrictObject fo(*f, "/fedmap");
    fo.get("rounds", c.fedmap.rounds);
    fo.get("local_epochs", c.fedmap.local_epochs);
    fo.get("aggregation_steps", c.fedmap.aggregation_steps);
    fo.get("psi_lr", c.fedmap.psi_lr);
    fo.get("gamma_step", c.fedmap.gamma_step);
    if (fo.get("weight_mode", s)) at_path("/fedmap/weight_mode", [&] { c.fedmap.weight_mode = weight_mode_from_string(s); });
    if (fo.get("likelihood_scaling", s)) {
      if (s == "mean-nll")
        c.fedmap.scaling = LikelihoodScaling::MeanNll;
      else if (s == "paper-literal")
        c.fedmap.scaling = LikelihoodScaling::PaperLiteral;
      else
        throw ConfigError("/fedmap/likelihood_scaling", "expected \"mean-nll\" or \"paper-literal\"");
    }
    fo.finish();
    if (c.fedmap.rounds < 1) throw ConfigError("/fedmap/rounds", "must be at least 1");
    if (c.fedmap.local_epochs < 1) throw ConfigError("/fedmap/local_epochs", "must be at least 1");
    if (c.fedmap.aggregation_steps < 0) throw ConfigError("/fedmap/aggregation_steps", "must be non-negative");
    if (!(c.fedmap.psi_lr > 0)) throw ConfigError("/fedmap/psi_lr", "must be positive");
    if (!(c.fedmap.gamma_step > 0)) throw ConfigError("/fedmap/gamma_step", "must be positive");
  }

  if (const json* p = o.child("prior")) {
    StrictObject po(*p, "/prior");
    po.get("alpha", c.prior.alpha);
    po.get("epsilon", c.prior.epsilon);
    po.get("icnn_widths", c.prior.icnn_widths);
    po.get("use_icnn", c.prior.use_icnn);
    po.finish();
    if (!(c.prior.alpha > 0)) throw ConfigError("/prior/alpha", "must be positive");
    if (!(c.prior.epsilon > 0)) throw ConfigError("/prior/epsilon", "must be positive");
    for (std::size_t i = 0; i < c.prior.icnn_widths.size(); ++i)
      if (c.prior.icnn_widths[i] < 1) throw ConfigError("/prior/icnn_widths/" + std::to_string(i), "must be positive");
  }

  if (const json* p = o.child("optimizer")) {
    StrictObject po(*p, "/optimizer");
    po.get("name", c.optimizer.name);
    po.get("lr", c.optimizer.lr);
    po.get("batch_size", c.optimizer.batch_size);
    po.get("weight_decay", c.optimizer.weight_decay);
    po.get("beta1", c.optimizer.beta1);
    po.get("beta2", c.optimizer.beta2);
    po.get("epsilon", c.optimizer.epsilon);
    po.get("early_stopping", c.optimizer.early_stopping);
    po.get("patience", c.optimizer.patience);
    po.finish();
    if (c.optimizer.name != "adam" && c.optimizer.name != "sgd") throw ConfigError("/optimizer/name", "expected adam or sgd");
    if (!(c.optimizer.lr > 0)) throw ConfigError("/optimizer/lr", "must be positive");
    if (c.optimizer.batch_size < 1) throw ConfigError("/optimizer/batch_size", "must be positive");
    if (c.optimizer.weight_decay < 0) throw ConfigError("/optimizer/weight_decay", "must be non-negative");
    if (c.optimizer.patience < 1) throw ConfigError("/optimizer/patience", "must be positive");
  }

  if (const json* p = o.child("finetune")) {
    StrictObject po(*p, "/finetune");
    int e = 0;
    double lr = 0;
    if (po.get("epochs", e)) c.finetune.epochs = e;
    if (po.get("lr", lr)) c.finetune.lr = lr;
    po.finish();
    if (c.finetune.epochs && *c.finetune.epochs < 0) throw ConfigError("/finetune/epochs", "must be non-negative");
    if (c.finetune.lr && !(*c.finetune.lr > 0)) throw ConfigError("/finetune/lr", "must be positive");
  }

  if (const json* p = o.child("partition")) c.partition = partition_spec_from_json(*p, "/partition");
  o.get("cohort", c.cohort);
  if (c.partition && !c.cohort.empty()) throw ConfigError("/cohort", "give either partition or cohort, not both");
  if (!c.partition && c.cohort.empty()) throw ConfigError("/partition", "either partition or cohort is required");

  if (const json* p = o.child("tiers")) {
    StrictObject po(*p, "/tiers");
    po.get("low", c.tiers.low);
    po.get("high", c.tiers.high);
    po.finish();
    if (!(c.tiers.low < c.tiers.high)) throw ConfigError("/tiers", "low must be below high");
  }

  o.get("metrics", c.metrics);
  for (std::size_t i = 0; i < c.metrics.size(); ++i)
    if (!known_metric(c.metrics[i])) throw ConfigError("/metrics/" + std::to_string(i), "unknown metric");
  o.get("round_early_stopping", c.round_early_stopping);
  o.get("round_patience", c.round_patience);
  if (c.round_patience < 1) throw ConfigError("/round_patience", "must be positive");
  o.require("seed", c.seed);
  o.get("output_dir", c.output_dir);
  o.finish();
  at_path("", [&] { c.validate(); });
  return c;
}

FederationConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("", std::string("not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

json to_json(const FederationConfig& c) {
  std::vector<std::string> bl;
  for (auto k : c.baselines) bl.push_back(to_string(k));
  json j = {
      {"strategy", to_string(c.strategy)},
      {"baselines", bl},
      {"model",
       {{"preset", c.model.preset},
        {"hidden", c.model.hidden},
        {"branch_dims", c.model.branch_dims},
        {"dropout", c.model.dropout}}},
      {"loss", c.loss},
      {"fedmap",
       {{"rounds", c.fedmap.rounds},
        {"local_epochs", c.fedmap.local_epochs},
        {"aggregation_steps", c.fedmap.aggregation_steps},
        {"psi_lr", c.fedmap.psi_lr},
        {"gamma_step", c.fedmap.gamma_step},
        {"weight_mode", to_string(c.fedmap.weight_mode)},
        {"likelihood_scaling", scaling_name(c.fedmap.scaling)}}},
      {"prior",
       {{"alpha", c.prior.alpha},
        {"epsilon", c.prior.epsilon},
        {"icnn_widths", c.prior.icnn_widths},
        {"use_icnn", c.prior.use_icnn}}},
      {"optimizer",
       {{"name", c.optimizer.name},
        {"lr", c.optimizer.lr},
        {"batch_size", c.optimizer.batch_size},
        {"weight_decay", c.optimizer.weight_decay},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"epsilon", c.optimizer.epsilon},
        {"early_stopping", c.optimizer.early_stopping},
        {"patience", c.optimizer.patience}}},
      {"finetune", json::object()},
      {"tiers", {{"low", c.tiers.low}, {"high", c.tiers.high}}},
      {"metrics", c.metrics},
      {"round_early_stopping", c.round_early_stopping},
      {"round_patience", c.round_patience},
      {"seed", c.seed},
      {"output_dir", c.output_dir},
  };
  if (c.finetune.epochs) j["finetune"]["epochs"] = *c.finetune.epochs;
  if (c.finetune.lr) j["finetune"]["lr"] = *c.finetune.lr;
  if (c.partition)
    j["partition"] = to_json(*c.partition);
  else
    j["cohort"] = c.cohort;
  return j;
}

std::string config_hash(const FederationConfig& config) {
  // output_dir names where results go, not what they are.
  json j = to_json(config);
  j.erase("output_dir");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_string(j.dump())));
  return buf;
}

}  // namespace fedmap
