#include "fedcrfd/baselines.hpp"

#include <cmath>

#include "fedcrfd/errors.hpp"

namespace fedcrfd {

namespace {

struct PlainAccumulator {
  double recon = 0.0;
  std::size_t steps = 0;

  RoundLogRecord record(std::size_t round, std::size_t client) const {
    return {round, client, steps == 0 ? 0.0 : recon / static_cast<double>(steps), 0.0, 0.0, 0.0, 0.0};
  }
};

void train_epochs(PlainModel& model, const ClientData& data, std::size_t client, std::size_t round,
                  const FederationConfig& cfg, PlainAccumulator& acc) {
  for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
    for (const auto& b : horizontal_batches(data.horizontal.size(), cfg.batch_size, cfg.seed, round, e, client)) {
      acc.recon += plain_step(model, data.horizontal, b, cfg, round, client);
      ++acc.steps;
    }
    for (const auto& b : vertical_batches(data.vertical.size(), cfg.batch_size, cfg.seed, round, e)) {
      acc.recon += plain_step(model, data.vertical, b, cfg, round, client);
      ++acc.steps;
    }
  }
}

ParamSet joined(const PlainModel& m) {
  ParamSet out;
  for (const Parameter& p : m.encoder) out.add(p.name, p.value);
  for (const Parameter& p : m.decoder) out.add(p.name, p.value);
  return out;
}

ClientData pooled(const FederatedData& data) {
  ClientData all;
  for (const ClientData& c : data.clients) {
    all.horizontal.insert(all.horizontal.end(), c.horizontal.begin(), c.horizontal.end());
    all.vertical.insert(all.vertical.end(), c.vertical.begin(), c.vertical.end());
  }
  return all;
}

}  // namespace

Method parse_method(std::string_view name) {
  if (name == "fedcrfd") return Method::kFedCrfd;
  if (name == "fedavg") return Method::kFedAvg;
  if (name == "solo") return Method::kSolo;
  if (name == "centralized") return Method::kCentralized;
  throw ConfigError("unknown method '" + std::string(name) + "' (expected fedcrfd, fedavg, solo, centralized)");
}

std::string_view method_name(Method m) {
  switch (m) {
    case Method::kFedCrfd: return "fedcrfd";
    case Method::kFedAvg: return "fedavg";
    case Method::kSolo: return "solo";
    case Method::kCentralized: return "centralized";
  }
  return "?";
}

double plain_step(PlainModel& model, std::span<const SliceSample> samples, std::span<const std::size_t> batch,
                  const FederationConfig& config, std::size_t round, std::size_t client) {
  Graph g;
  Var x = g.constant(stack_inputs(samples, batch));
  Var y = g.constant(stack_targets(samples, batch));
  Var loss = recon_loss(reconstruct_plain(g, model, x), y);
  const double value = loss.value()[0];
  if (!std::isfinite(value)) {
    throw NumericError("non-finite loss (round=" + std::to_string(round) + " client=" + std::to_string(client) + ")");
  }
  g.backward(loss);
  adam_step(model.all(), config.adam());
  return value;
}

BaselineResult run_baseline(Method kind, const FederationConfig& config, const FederatedData& data,
                            const BaselineHooks& hooks) {
  config.validate();
  if (config.arch.image_size != data.config.image_size) {
    throw ConfigError("model image size differs from the dataset's");
  }
  if (data.clients.empty()) throw ConfigError("dataset has no clients");
  const std::size_t K = data.clients.size();
  BaselineResult result;
  for (const ClientData& c : data.clients) result.training_samples += c.train_size();

  switch (kind) {
    case Method::kSolo: {
      result.models.assign(K, PlainModel::init(config.arch, config.seed));
      for (std::size_t t = 1; t <= config.rounds; ++t) {
        for (std::size_t k = 0; k < K; ++k) {
          PlainAccumulator acc;
          train_epochs(result.models[k], data.clients[k], k, t, config, acc);
          result.log.push_back(acc.record(t, k));
        }
        result.rounds_completed = t;
        if (hooks.on_round_end) hooks.on_round_end(t, result.models);
      }
      break;
    }
    case Method::kCentralized: {
      const ClientData all = pooled(data);
      result.models.push_back(PlainModel::init(config.arch, config.seed));
      for (std::size_t t = 1; t <= config.rounds; ++t) {
        PlainAccumulator acc;
        train_epochs(result.models[0], all, 0, t, config, acc);
        result.log.push_back(acc.record(t, 0));
        result.rounds_completed = t;
        if (hooks.on_round_end) hooks.on_round_end(t, result.models);
      }
      break;
    }
    case Method::kFedAvg: {
      std::vector<std::size_t> counts;
      for (const ClientData& c : data.clients) counts.push_back(c.train_size());
      const auto weights = compute_weights(counts);
      result.models.push_back(PlainModel::init(config.arch, config.seed));
      PlainModel& global = result.models[0];
      std::vector<PlainModel> locals(K, global);
      for (std::size_t t = 1; t <= config.rounds; ++t) {
        for (std::size_t k = 0; k < K; ++k) {
          copy_values(global.encoder, locals[k].encoder);
          copy_values(global.decoder, locals[k].decoder);
          ++result.messages.model_broadcasts;
          PlainAccumulator acc;
          train_epochs(locals[k], data.clients[k], k, t, config, acc);
          result.log.push_back(acc.record(t, k));
        }
        std::vector<ParamSet> uploads;
        std::vector<const ParamSet*> ptrs;
        for (std::size_t k = 0; k < K; ++k) {
          uploads.push_back(joined(locals[k]));
          ++result.messages.model_uploads;
        }
        for (const ParamSet& u : uploads) ptrs.push_back(&u);
        const ParamSet avg = aggregate(ptrs, weights);
        copy_values(avg, global.encoder);
        copy_values(avg, global.decoder);
        result.rounds_completed = t;
        if (hooks.on_round_end) hooks.on_round_end(t, result.models);
      }
      break;
    }
    case Method::kFedCrfd:
      throw ConfigError("run_baseline: fedcrfd is not a baseline; use run_training");
  }
  return result;
}

}  // namespace fedcrfd
