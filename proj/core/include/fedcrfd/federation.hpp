#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fedcrfd/autograd.hpp"
#include "fedcrfd/model.hpp"
#include "fedcrfd/optim.hpp"
#include "fedcrfd/partition.hpp"

namespace fedcrfd {

enum class ExecutionMode { kSequential, kConcurrent };

ExecutionMode parse_execution_mode(std::string_view name);
std::string_view execution_mode_name(ExecutionMode mode);

struct FederationConfig {
  std::size_t rounds = 50;
  std::size_t local_epochs = 2;
  double learning_rate = 1e-4;
  std::size_t batch_size = 16;
  double mu1 = 0.01;  // auxiliary classification
  double mu2 = 0.01;  // intra-client disentanglement
  double mu3 = 0.01;  // cross-client consistency
  Distance measure = Distance::kL1;
  double cap = 10.0;
  bool use_fusion = true;
  bool enable_cross = true;
  /// Cross gradients include the other clients' loss terms instead of stopping at the server.
  bool joint_cross_gradient = false;
  ExecutionMode mode = ExecutionMode::kSequential;
  std::chrono::milliseconds barrier_timeout{std::chrono::minutes(10)};
  std::uint64_t seed = 0;
  ArchConfig arch;

  void validate() const;
  AdamOptions adam() const { return {learning_rate, 0.9, 0.999, 1e-8}; }
};

/// p_k = n_k / sum n.
std::vector<double> compute_weights(std::span<const std::size_t> counts);

/// Weighted sum of same-named parameters. Throws ProtocolError on name or shape mismatch.
ParamSet aggregate(std::span<const ParamSet* const> locals, std::span<const double> weights);

/// Overwrites values of `dst` with same-named values of `src`; Adam state is left alone.
void copy_values(const ParamSet& src, ParamSet& dst);

/// Identifies one exchange: (round, epoch, batch index); clients share it for vertical batches.
struct BarrierKey {
  std::size_t round = 0;
  std::size_t epoch = 0;
  std::size_t batch = 0;

  friend auto operator<=>(const BarrierKey&, const BarrierKey&) = default;
};

/// Upload of latents or the gradient sent back for them.
struct LatentExchange {
  enum class Direction { kUpload, kGradientReturn };
  Direction direction = Direction::kUpload;
  LatentKind kind = LatentKind::kSpecific;
  BarrierKey key;
  std::size_t client = 0;
  Tensor payload;                 // N x d latents or their gradient
  std::vector<SampleKey> samples; // vertical uploads only, canonical aligned order
  std::size_t modality = 0;       // specific uploads only
  double loss = 0.0;              // gradient returns: the client's loss term
  std::size_t correct = 0;        // specific returns: classifier hits before the update
};

struct MessageCounters {
  std::size_t aux_uploads = 0;
  std::size_t aux_returns = 0;
  std::size_t cross_uploads = 0;
  std::size_t cross_returns = 0;
  std::size_t model_uploads = 0;
  std::size_t model_broadcasts = 0;

  std::size_t total() const {
    return aux_uploads + aux_returns + cross_uploads + cross_returns + model_uploads + model_broadcasts;
  }
  friend bool operator==(const MessageCounters&, const MessageCounters&) = default;
};

/// Per-(round, client) record written to the JSONL round log.
struct RoundLogRecord {
  std::size_t round = 0;
  std::size_t client = 0;
  double l_recon = 0.0;
  double l_aux = 0.0;
  double l_intra = 0.0;
  double l_cross = 0.0;
  double aux_accuracy = 0.0;

  friend bool operator==(const RoundLogRecord&, const RoundLogRecord&) = default;
};

std::string to_jsonl(const RoundLogRecord& r);
std::string to_jsonl(std::span<const RoundLogRecord> records);

/// Loss terms of one local step.
struct LossBreakdown {
  double recon = 0.0;
  double aux = 0.0;
  double intra = 0.0;
  double cross = 0.0;
  double total = 0.0;
  std::size_t aux_correct = 0;
  std::size_t aux_count = 0;
};

/// Shuffled index batches. Horizontal order is private per client; vertical order is shared.
std::vector<std::vector<std::size_t>> horizontal_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                         std::size_t round, std::size_t epoch, std::size_t client);
std::vector<std::vector<std::size_t>> vertical_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                       std::size_t round, std::size_t epoch);

/// Stacks x (or y) of the selected samples into N x 1 x H x W.
Tensor stack_inputs(std::span<const SliceSample> samples, std::span<const std::size_t> indices);
Tensor stack_targets(std::span<const SliceSample> samples, std::span<const std::size_t> indices);

/// Server: global aggregable parameters, the shared classifier, and the latent pool.
class Server {
 public:
  Server(const FederationConfig& config, std::size_t clients);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  ParamSet& global() { return global_; }
  const ParamSet& global() const { return global_; }
  ClassifierParams& classifier() { return classifier_; }
  const ClassifierParams& classifier() const { return classifier_; }
  MessageCounters counters() const;
  std::size_t clients() const { return clients_; }

  /// Scores z^S against the client's modality, updates the classifier with mu1 * grad, and
  /// returns dL_aux/dz^S. Serialized across callers.
  LatentExchange auxiliary(const LatentExchange& upload);

  /// Deposits z^I for a vertical batch. In sequential use call submit for every client, then
  /// collect; in concurrent use call exchange, which blocks until all K clients arrived.
  void submit(const LatentExchange& upload);
  LatentExchange collect(const BarrierKey& key, std::size_t client);
  LatentExchange exchange(const LatentExchange& upload);

  /// Wakes every waiter with a ProtocolError; used when a client fails mid-round.
  void abort(const std::string& reason);
  void reset_abort();

  void count_model_upload();
  void count_broadcast();
  /// Latent pool entries currently held (keys awaiting collection).
  std::size_t pending_keys() const;

 private:
  struct Pool;
  void resolve(Pool& pool);

  FederationConfig config_;
  std::size_t clients_;
  ParamSet global_;
  ClassifierParams classifier_;
  struct Sync;
  std::unique_ptr<Sync> sync_;
};

/// Server-side cross loss for every client of one vertical batch. Returns per-client
/// (loss, dL/dz^I_k) with other clients' latents held constant, or the joint gradient.
std::vector<std::pair<double, Tensor>> cross_gradients(std::span<const Tensor> latents, Distance measure, bool joint);

/// The whole client objective (recon + mu1 aux + mu2 intra + mu3 cross) in a single graph, with
/// the classifier bound as parameters and the other clients' z^I as constants. The protocol
/// splits this across client and server; this form is the reference for gradient checks.
Var local_objective(Graph& g, ModelParams& params, ClassifierParams& classifier, const Tensor& x, const Tensor& y,
                    std::size_t modality, std::span<const Tensor> other_latents, const FederationConfig& config);

struct ClientState {
  std::size_t index = 0;
  std::size_t modality = 0;
  ModelParams params;
  const ClientData* data = nullptr;
  double weight = 0.0;
};

/// Running sums for a client's round log.
struct LossAccumulator {
  double recon = 0.0, aux = 0.0, intra = 0.0, cross = 0.0;
  std::size_t steps = 0, aux_steps = 0, cross_steps = 0, aux_correct = 0, aux_count = 0;

  void add(const LossBreakdown& b, bool has_aux, bool has_cross);
  RoundLogRecord record(std::size_t round, std::size_t client) const;
};

/// One horizontal step: recon + mu1 aux + mu2 intra, one Adam step on the client's parameters.
LossBreakdown local_step_horizontal(ClientState& client, std::span<const std::size_t> batch, const BarrierKey& key,
                                    Server& server, const FederationConfig& config);

/// One vertical step for every client on the same aligned batch (sequential mode).
std::vector<LossBreakdown> local_step_vertical(std::span<ClientState> clients, std::span<const std::size_t> batch,
                                               const BarrierKey& key, Server& server, const FederationConfig& config);

/// Snapshot handed to round callbacks.
struct FedCrfdState {
  const Server* server = nullptr;
  std::span<const ClientState> clients;
};

struct TrainingResult {
  ParamSet global;                  // E_I + D
  std::vector<ParamSet> specific;   // E_S per client
  ClassifierParams classifier;
  std::vector<RoundLogRecord> log;
  MessageCounters messages;
  std::size_t rounds_completed = 0;
};

struct TrainingHooks {
  /// Called after aggregation of every round (1-based).
  std::function<void(std::size_t round, const FedCrfdState&)> on_round_end;
};

/// Initializes the federation from the config seed.
std::vector<ClientState> make_clients(const FederationConfig& config, const FederatedData& data);

/// Broadcast, Q local epochs per client (horizontal then vertical), aggregate.
std::vector<RoundLogRecord> run_round(Server& server, std::span<ClientState> clients, std::size_t round,
                                      const FederationConfig& config);

TrainingResult run_training(const FederationConfig& config, const FederatedData& data, const TrainingHooks& hooks = {});

/// Modality accuracy of the classifier on every training sample's z^S.
double auxiliary_accuracy(const TrainingResult& result, const FederationConfig& config, const FederatedData& data);

}  // namespace fedcrfd
