#pragma once

#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "fedcrfd/federation.hpp"
#include "fedcrfd/model.hpp"

namespace fedcrfd {

enum class Method { kFedCrfd, kFedAvg, kSolo, kCentralized };

Method parse_method(std::string_view name);
std::string_view method_name(Method m);

struct BaselineResult {
  /// One model for fedavg/centralized, one per client for solo.
  std::vector<PlainModel> models;
  std::vector<RoundLogRecord> log;
  MessageCounters messages;
  std::size_t rounds_completed = 0;
  std::size_t training_samples = 0;
};

struct BaselineHooks {
  /// Called after every round (1-based) with the current model(s).
  std::function<void(std::size_t round, std::span<const PlainModel> models)> on_round_end;
};

/// Solo: a plain model per client, no communication. Centralized: one model on the pooled
/// data. FedAvg: plain models averaged with p_k = n_k / sum n. All follow the same per-round
/// schedule as Fed-CRFD (Q epochs, horizontal batches then vertical batches).
BaselineResult run_baseline(Method kind, const FederationConfig& config, const FederatedData& data,
                            const BaselineHooks& hooks = {});

/// One Adam step of the plain model on a batch; returns the l1 reconstruction loss.
double plain_step(PlainModel& model, std::span<const SliceSample> samples, std::span<const std::size_t> batch,
                  const FederationConfig& config, std::size_t round, std::size_t client);

}  // namespace fedcrfd
