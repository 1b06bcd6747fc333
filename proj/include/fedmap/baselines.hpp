#pragma once

#include <span>
#include <string>
#include <vector>

#include "fedmap/fedmap_core.hpp"

namespace fedmap {

enum class StrategyKind { FedMap, FedMapQuad, FedAvg, Individual };
StrategyKind strategy_from_string(const std::string& s);
std::string to_string(StrategyKind kind);

/// mu = sum_k N_k theta_k / sum_k N_k, in update order.
ParamVector fedavg_aggregate(std::span<const LocalUpdate> updates);

/// Unregularised local training; log_weight is left at zero.
LocalUpdate local_train(const std::string& site_id, const ParamVector& theta_init, const LocalLoss& loss, int epochs,
                        const OptimizerConfig& optimizer, std::uint64_t seed);

/// FedAvg with the same initialisation and per-site seed streams as run_t1.
/// The returned state has no ICNN and its thetas are the last local updates.
FederatedState run_fedavg(const ModelPreset& preset, std::span<const SiteTask> sites, const FedMapHyper& hyper,
                          const OptimizerConfig& optimizer, std::uint64_t seed, const RoundCallback& on_round = {});

/// Local-only training. Each site starts from its own default initialiser and
/// seed stream keyed by its id, so results do not depend on site order.
std::vector<ParamVector> run_individual(const ModelPreset& preset, std::span<const SiteTask> sites, int epochs,
                                        const OptimizerConfig& optimizer, std::uint64_t seed);

/// The fedmap-quad ablation: f_psi == 0 and no psi steps.
FedMapHyper quad_hyper(FedMapHyper hyper);
PriorHyper quad_prior(PriorHyper prior);

}  // namespace fedmap
