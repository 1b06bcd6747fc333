#include "fedmap/baselines.hpp"

namespace fedmap {

StrategyKind strategy_from_string(const std::string& s) {
  if (s == "fedmap") return StrategyKind::FedMap;
  if (s == "fedmap-quad") return StrategyKind::FedMapQuad;
  if (s == "fedavg") return StrategyKind::FedAvg;
  if (s == "individual") return StrategyKind::Individual;
  throw DomainError("unknown strategy '" + s + "'");
}

std::string to_string(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::FedMap:
      return "fedmap";
    case StrategyKind::FedMapQuad:
      return "fedmap-quad";
    case StrategyKind::FedAvg:
      return "fedavg";
    case StrategyKind::Individual:
      return "individual";
  }
  return "?";
}

ParamVector fedavg_aggregate(std::span<const LocalUpdate> updates) {
  if (updates.empty()) throw DomainError("fedavg_aggregate: no updates");
  const Index d = updates.front().theta.size();
  double total = 0.0;
  for (const auto& u : updates) {
    if (u.theta.size() != d) throw ShapeError("fedavg_aggregate: site '" + u.site_id + "' has a different length");
    total += static_cast<double>(u.num_samples);
  }
  ParamVector acc = ParamVector::Zero(d);
  for (const auto& u : updates) acc += static_cast<double>(u.num_samples) * u.theta;
  return acc / total;
}

LocalUpdate local_train(const std::string& site_id, const ParamVector& theta_init, const LocalLoss& loss, int epochs,
                        const OptimizerConfig& optimizer, std::uint64_t seed) {
  if (loss.size() < 1) throw DomainError("local_train: site '" + site_id + "' has no data");
  TrainResult r = train_local_sgd(theta_init, Objective(loss), optimizer, epochs, seed);
  LocalUpdate up;
  up.site_id = site_id;
  up.theta = std::move(r.theta);
  up.num_samples = loss.size();
  up.epoch_losses = std::move(r.epoch_losses);
  return up;
}

FederatedState run_fedavg(const ModelPreset& preset, std::span<const SiteTask> sites, const FedMapHyper& hyper,
                          const OptimizerConfig& optimizer, std::uint64_t seed, const RoundCallback& on_round) {
  hyper.validate();
  std::vector<std::string> ids;
  for (const auto& s : sites) ids.push_back(s.site_id);
  PriorHyper ph;
  ph.use_icnn = false;
  FederatedState state = initialise_t1(preset, ids, ph, seed);
  for (int t = 0; t < hyper.rounds; ++t) {
    const int round = state.rounds_completed;
    std::vector<LocalUpdate> updates;
    try {
      for (const auto& s : sites) {
        const std::uint64_t local_seed = mix_seed(mix_seed(seed, hash_string(s.site_id)), round);
        updates.push_back(local_train(s.site_id, state.prior.mu, *s.loss, hyper.local_epochs, optimizer, local_seed));
      }
    } catch (const std::exception& e) {
      throw RoundError(round, e.what());
    }
    RoundReport rep;
    rep.round = round;
    rep.weights = normalized_weights(updates, WeightMode::SampleSize);
    for (const auto& u : updates) {
      rep.site_ids.push_back(u.site_id);
      rep.local_losses.push_back(u.epoch_losses.empty() ? 0.0 : u.epoch_losses.back());
      rep.log_weights.push_back(0.0);
    }
    state.prior.mu = fedavg_aggregate(updates);
    for (std::size_t k = 0; k < updates.size(); ++k) state.thetas[k] = std::move(updates[k].theta);
    state.reports.push_back(std::move(rep));
    state.rounds_completed = round + 1;
    if (on_round && !on_round(state)) break;
  }
  return state;
}

std::vector<ParamVector> run_individual(const ModelPreset& preset, std::span<const SiteTask> sites, int epochs,
                                        const OptimizerConfig& optimizer, std::uint64_t seed) {
  std::vector<ParamVector> out;
  for (const auto& s : sites) {
    Rng init = make_rng(seed, "init/" + s.site_id);
    const ParamVector theta0 = init_params(preset, init);
    out.push_back(local_train(s.site_id, theta0, *s.loss, epochs, optimizer,
                              mix_seed(seed, hash_string("individual/" + s.site_id)))
                      .theta);
  }
  return out;
}

FedMapHyper quad_hyper(FedMapHyper hyper) {
  hyper.aggregation_steps = 0;
  return hyper;
}

PriorHyper quad_prior(PriorHyper prior) {
  prior.use_icnn = false;
  return prior;
}

}  // namespace fedmap
