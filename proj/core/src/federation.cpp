#include "fedcrfd/federation.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "fedcrfd/errors.hpp"
#include "fedcrfd/rng.hpp"

namespace fedcrfd {

namespace {

void require_finite(double v, const char* what, std::size_t round, std::size_t client) {
  if (!std::isfinite(v)) {
    throw NumericError(std::string("non-finite ") + what + " (round=" + std::to_string(round) +
                       " client=" + std::to_string(client) + ")");
  }
}

std::vector<std::vector<std::size_t>> chunk(std::vector<std::size_t> order, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const auto end = std::min(order.size(), i + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

// Vertical batch indices are offset so their keys never collide with horizontal ones.
constexpr std::size_t kVerticalBatchBase = std::size_t{1} << 20;

bool uses_specific(const FederationConfig& c) { return c.use_fusion || c.mu1 > 0.0 || c.mu2 > 0.0; }
bool uses_aux(const FederationConfig& c) { return c.mu1 > 0.0; }
bool uses_cross(const FederationConfig& c) { return c.enable_cross && c.mu3 > 0.0; }

std::size_t argmax_row(const Tensor& t, std::size_t row) {
  const std::size_t J = t.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < J; ++j) {
    if (t[row * J + j] > t[row * J + best]) best = j;
  }
  return best;
}

// Forward pass of one client on one batch; the graph stays alive until the step completes.
struct ClientForward {
  std::unique_ptr<Graph> graph = std::make_unique<Graph>();
  Var recon_loss;
  Var intra_loss;
  Var z_specific;
  Var z_invariant;
  std::vector<SampleKey> keys;
};

ClientForward client_forward(ClientState& c, std::span<const SliceSample> samples, std::span<const std::size_t> batch,
                             const FederationConfig& cfg) {
  ClientForward f;
  Graph& g = *f.graph;
  Var x = g.constant(stack_inputs(samples, batch));
  Var y = g.constant(stack_targets(samples, batch));
  EncoderOutput ei = encode(g, c.params.invariant_encoder, x);
  f.z_invariant = ei.latent;
  Var feat_s;
  if (uses_specific(cfg)) {
    EncoderOutput es = encode(g, c.params.specific_encoder, x);
    feat_s = es.features;
    f.z_specific = es.latent;
    f.intra_loss = intra_loss(f.z_invariant, f.z_specific, cfg.measure, cfg.cap);
  }
  Var out = fuse_and_decode(g, c.params.decoder, ei.features, feat_s, ei.skips, x, cfg.use_fusion);
  f.recon_loss = recon_loss(out, y);
  for (std::size_t i : batch) f.keys.push_back(samples[i].key());
  return f;
}

LatentExchange specific_upload(const ClientForward& f, const ClientState& c, const BarrierKey& key) {
  LatentExchange up;
  up.direction = LatentExchange::Direction::kUpload;
  up.kind = LatentKind::kSpecific;
  up.key = key;
  up.client = c.index;
  up.modality = c.modality;
  up.payload = f.z_specific.value();
  return up;
}

LatentExchange invariant_upload(const ClientForward& f, const ClientState& c, const BarrierKey& key) {
  LatentExchange up;
  up.direction = LatentExchange::Direction::kUpload;
  up.kind = LatentKind::kInvariant;
  up.key = key;
  up.client = c.index;
  up.payload = f.z_invariant.value();
  up.samples = f.keys;
  return up;
}

// Assembles the client objective from the forward graph and the server's returned gradients, then steps.
LossBreakdown finish_step(ClientState& c, ClientForward& f, const std::optional<LatentExchange>& aux,
                          const std::optional<LatentExchange>& cross, const BarrierKey& key,
                          const FederationConfig& cfg) {
  LossBreakdown b;
  b.recon = f.recon_loss.value()[0];
  Var loss = f.recon_loss;
  if (f.intra_loss.valid()) {
    b.intra = f.intra_loss.value()[0];
    if (cfg.mu2 > 0.0) loss = add(loss, scale(f.intra_loss, cfg.mu2));
  }
  if (aux) {
    b.aux = aux->loss;
    b.aux_correct = aux->correct;
    b.aux_count = aux->payload.dim(0);
    Tensor g = aux->payload;
    g *= cfg.mu1;
    loss = add(loss, dot_const(f.z_specific, g));
  }
  if (cross) {
    b.cross = cross->loss;
    Tensor g = cross->payload;
    g *= cfg.mu3;
    loss = add(loss, dot_const(f.z_invariant, g));
  }
  b.total = b.recon + cfg.mu1 * b.aux + cfg.mu2 * b.intra + cfg.mu3 * b.cross;
  require_finite(b.total, "loss", key.round, c.index);
  f.graph->backward(loss);
  auto params = c.params.all();
  for (Parameter* p : params) {
    if (!p->grad.all_finite()) {
      throw NumericError("non-finite gradient for " + p->name + " (round=" + std::to_string(key.round) +
                         " client=" + std::to_string(c.index) + ")");
    }
  }
  adam_step(params, cfg.adam());
  return b;
}

}  // namespace

// ---- config --------------------------------------------------------------------

ExecutionMode parse_execution_mode(std::string_view name) {
  if (name == "sequential") return ExecutionMode::kSequential;
  if (name == "concurrent") return ExecutionMode::kConcurrent;
  throw ConfigError("unknown execution mode '" + std::string(name) + "'");
}

std::string_view execution_mode_name(ExecutionMode mode) {
  return mode == ExecutionMode::kSequential ? "sequential" : "concurrent";
}

void FederationConfig::validate() const {
  if (local_epochs == 0) throw ConfigError("federation.local_epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("federation.batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("federation.learning_rate must be positive");
  if (!(mu1 >= 0.0) || !(mu2 >= 0.0) || !(mu3 >= 0.0)) throw ConfigError("federation.mu1..mu3 must be >= 0");
  if (!(cap > 0.0)) throw ConfigError("federation.cap must be positive");
  fedcrfd::validate(arch);
}

// ---- aggregation -----------------------------------------------------------------

std::vector<double> compute_weights(std::span<const std::size_t> counts) {
  if (counts.empty()) throw ConfigError("compute_weights: no clients");
  std::size_t total = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] == 0) throw ConfigError("compute_weights: client " + std::to_string(i) + " has no samples");
    total += counts[i];
  }
  std::vector<double> p;
  p.reserve(counts.size());
  for (std::size_t n : counts) p.push_back(static_cast<double>(n) / static_cast<double>(total));
  return p;
}

ParamSet aggregate(std::span<const ParamSet* const> locals, std::span<const double> weights) {
  if (locals.empty()) throw ProtocolError("aggregate: no parameter sets");
  if (locals.size() != weights.size()) throw ProtocolError("aggregate: weight count does not match client count");
  const ParamSet& first = *locals[0];
  for (const ParamSet* ps : locals) {
    if (ps->size() != first.size()) throw ProtocolError("aggregate: clients hold different parameter sets");
  }
  ParamSet out;
  for (std::size_t i = 0; i < first.size(); ++i) {
    const Parameter& ref = first[i];
    Tensor acc(ref.value.shape());
    for (std::size_t k = 0; k < locals.size(); ++k) {
      const Parameter* p = locals[k]->find(ref.name);
      if (p == nullptr) throw ProtocolError("aggregate: client " + std::to_string(k) + " lacks " + ref.name);
      if (p->value.shape() != ref.value.shape()) {
        throw ProtocolError("aggregate: shape mismatch for " + ref.name + ": " + shape_str(p->value.shape()) +
                            " vs " + shape_str(ref.value.shape()));
      }
      const double w = weights[k];
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += w * p->value[j];
    }
    out.add(ref.name, std::move(acc));
  }
  return out;
}

void copy_values(const ParamSet& src, ParamSet& dst) {
  for (Parameter& p : dst) {
    const Parameter* s = src.find(p.name);
    if (s == nullptr) throw ProtocolError("copy_values: source lacks " + p.name);
    if (s->value.shape() != p.value.shape()) throw ProtocolError("copy_values: shape mismatch for " + p.name);
    p.value = s->value;
  }
}

// ---- logs ------------------------------------------------------------------------

std::string to_jsonl(const RoundLogRecord& r) {
  const nlohmann::ordered_json j = {{"round", r.round},     {"client", r.client},   {"l_recon", r.l_recon},
                                    {"l_aux", r.l_aux},     {"l_intra", r.l_intra}, {"l_cross", r.l_cross},
                                    {"aux_accuracy", r.aux_accuracy}};
  return j.dump();
}

std::string to_jsonl(std::span<const RoundLogRecord> records) {
  std::string out;
  for (const RoundLogRecord& r : records) {
    out += to_jsonl(r);
    out += '\n';
  }
  return out;
}

void LossAccumulator::add(const LossBreakdown& b, bool has_aux, bool has_cross) {
  recon += b.recon;
  intra += b.intra;
  ++steps;
  if (has_aux) {
    aux += b.aux;
    ++aux_steps;
    aux_correct += b.aux_correct;
    aux_count += b.aux_count;
  }
  if (has_cross) {
    cross += b.cross;
    ++cross_steps;
  }
}

RoundLogRecord LossAccumulator::record(std::size_t round, std::size_t client) const {
  auto avg = [](double s, std::size_t n) { return n == 0 ? 0.0 : s / static_cast<double>(n); };
  return {round,
          client,
          avg(recon, steps),
          avg(aux, aux_steps),
          avg(intra, steps),
          avg(cross, cross_steps),
          aux_count == 0 ? 0.0 : static_cast<double>(aux_correct) / static_cast<double>(aux_count)};
}

// ---- batching --------------------------------------------------------------------

std::vector<std::vector<std::size_t>> horizontal_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                         std::size_t round, std::size_t epoch, std::size_t client) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  auto order = iota(n);
  Rng rng(derive_seed(seed, {0x48ULL, round, epoch, client}));
  rng.shuffle(order);
  return chunk(std::move(order), batch_size);
}

std::vector<std::vector<std::size_t>> vertical_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                       std::size_t round, std::size_t epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  auto order = iota(n);
  Rng rng(derive_seed(seed, {0x56ULL, round, epoch}));
  rng.shuffle(order);
  return chunk(std::move(order), batch_size);
}

namespace {

Tensor stack(std::span<const SliceSample> samples, std::span<const std::size_t> indices, bool target) {
  if (indices.empty()) throw ShapeError("stack: empty batch");
  const Tensor& first = target ? samples[indices[0]].y : samples[indices[0]].x;
  const std::size_t H = first.dim(0), W = first.dim(1);
  Tensor out({indices.size(), 1, H, W});
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const Tensor& t = target ? samples[indices[n]].y : samples[indices[n]].x;
    if (t.shape() != first.shape()) throw ShapeError("stack: samples of different sizes in one batch");
    std::copy(t.data().begin(), t.data().end(), out.ptr() + n * H * W);
  }
  return out;
}

}  // namespace

Tensor stack_inputs(std::span<const SliceSample> samples, std::span<const std::size_t> indices) {
  return stack(samples, indices, false);
}

Tensor stack_targets(std::span<const SliceSample> samples, std::span<const std::size_t> indices) {
  return stack(samples, indices, true);
}

// ---- server ----------------------------------------------------------------------

struct Server::Pool {
  std::vector<std::optional<LatentExchange>> uploads;
  std::vector<std::optional<LatentExchange>> returns;
  std::size_t arrived = 0;
  std::size_t collected = 0;
  bool resolved = false;
};

struct Server::Sync {
  mutable std::mutex mutex;
  std::condition_variable cv;
  std::map<BarrierKey, Pool> pools;
  MessageCounters counters;
  bool aborted = false;
  std::string abort_reason;
};

Server::Server(const FederationConfig& config, std::size_t clients)
    : config_(config), clients_(clients), sync_(std::make_unique<Sync>()) {
  if (clients == 0) throw ConfigError("federation needs at least one client");
  config_.validate();
  ModelParams init = ModelParams::init(config_.arch, config_.seed, config_.seed);
  for (const Parameter& p : init.invariant_encoder) global_.add(p.name, p.value);
  for (const Parameter& p : init.decoder) global_.add(p.name, p.value);
  classifier_ = ClassifierParams::init(config_.arch, config_.seed);
}

Server::~Server() = default;

MessageCounters Server::counters() const {
  std::lock_guard lock(sync_->mutex);
  return sync_->counters;
}

void Server::count_model_upload() {
  std::lock_guard lock(sync_->mutex);
  ++sync_->counters.model_uploads;
}

void Server::count_broadcast() {
  std::lock_guard lock(sync_->mutex);
  ++sync_->counters.model_broadcasts;
}

std::size_t Server::pending_keys() const {
  std::lock_guard lock(sync_->mutex);
  return sync_->pools.size();
}

LatentExchange Server::auxiliary(const LatentExchange& upload) {
  if (upload.kind != LatentKind::kSpecific || upload.direction != LatentExchange::Direction::kUpload) {
    throw ProtocolError("auxiliary: expected a z^S upload");
  }
  std::lock_guard lock(sync_->mutex);
  ++sync_->counters.aux_uploads;
  const std::size_t N = upload.payload.dim(0);
  Graph g;
  Var z = g.input(upload.payload);
  Var logits = classify(g, classifier_, z);
  Var loss = softmax_cross_entropy(logits, modality_one_hot(upload.modality, classifier_.num_modalities, N));
  LatentExchange ret;
  ret.direction = LatentExchange::Direction::kGradientReturn;
  ret.kind = LatentKind::kSpecific;
  ret.key = upload.key;
  ret.client = upload.client;
  ret.modality = upload.modality;
  ret.loss = loss.value()[0];
  for (std::size_t n = 0; n < N; ++n) ret.correct += argmax_row(logits.value(), n) == upload.modality ? 1 : 0;
  g.backward(loss);
  ret.payload = z.grad();
  for (Parameter& p : classifier_.mlp) p.grad *= config_.mu1;
  adam_step(classifier_.mlp, config_.adam());
  ++sync_->counters.aux_returns;
  return ret;
}

void Server::resolve(Pool& pool) {
  std::vector<Tensor> latents;
  latents.reserve(clients_);
  for (const auto& u : pool.uploads) latents.push_back(u->payload);
  auto grads = cross_gradients(latents, config_.measure, config_.joint_cross_gradient);
  pool.returns.resize(clients_);
  for (std::size_t k = 0; k < clients_; ++k) {
    LatentExchange r;
    r.direction = LatentExchange::Direction::kGradientReturn;
    r.kind = LatentKind::kInvariant;
    r.key = pool.uploads[k]->key;
    r.client = k;
    r.loss = grads[k].first;
    r.payload = std::move(grads[k].second);
    r.samples = pool.uploads[k]->samples;
    pool.returns[k] = std::move(r);
  }
  pool.resolved = true;
}

void Server::submit(const LatentExchange& upload) {
  if (upload.kind != LatentKind::kInvariant || upload.direction != LatentExchange::Direction::kUpload) {
    throw ProtocolError("submit: expected a z^I upload");
  }
  if (upload.client >= clients_) throw ProtocolError("submit: unknown client " + std::to_string(upload.client));
  std::lock_guard lock(sync_->mutex);
  if (sync_->aborted) throw ProtocolError("round aborted: " + sync_->abort_reason);
  Pool& pool = sync_->pools[upload.key];
  if (pool.uploads.empty()) pool.uploads.resize(clients_);
  if (pool.uploads[upload.client]) {
    throw ProtocolError("submit: client " + std::to_string(upload.client) + " uploaded twice for one batch");
  }
  for (const auto& other : pool.uploads) {
    if (!other) continue;
    if (other->samples != upload.samples) throw ProtocolError("submit: vertical batch key order differs between clients");
    if (other->payload.shape() != upload.payload.shape()) throw ProtocolError("submit: latent shapes differ");
  }
  pool.uploads[upload.client] = upload;
  ++pool.arrived;
  ++sync_->counters.cross_uploads;
  if (pool.arrived == clients_) {
    resolve(pool);
    sync_->cv.notify_all();
  }
}

LatentExchange Server::collect(const BarrierKey& key, std::size_t client) {
  std::lock_guard lock(sync_->mutex);
  auto it = sync_->pools.find(key);
  if (it == sync_->pools.end() || !it->second.resolved) {
    throw ProtocolError("collect: not every client has reached the barrier");
  }
  Pool& pool = it->second;
  if (client >= clients_ || !pool.returns[client]) throw ProtocolError("collect: nothing to collect");
  LatentExchange r = std::move(*pool.returns[client]);
  pool.returns[client].reset();
  ++sync_->counters.cross_returns;
  if (++pool.collected == clients_) sync_->pools.erase(it);
  return r;
}

LatentExchange Server::exchange(const LatentExchange& upload) {
  submit(upload);
  {
    std::unique_lock lock(sync_->mutex);
    const bool ok = sync_->cv.wait_for(lock, config_.barrier_timeout, [&] {
      if (sync_->aborted) return true;
      auto it = sync_->pools.find(upload.key);
      return it != sync_->pools.end() && it->second.resolved;
    });
    if (sync_->aborted) throw ProtocolError("round aborted: " + sync_->abort_reason);
    if (!ok) throw ProtocolError("barrier timeout: a client did not reach the vertical exchange");
  }
  return collect(upload.key, upload.client);
}

void Server::abort(const std::string& reason) {
  std::lock_guard lock(sync_->mutex);
  if (!sync_->aborted) sync_->abort_reason = reason;
  sync_->aborted = true;
  sync_->pools.clear();
  sync_->cv.notify_all();
}

void Server::reset_abort() {
  std::lock_guard lock(sync_->mutex);
  sync_->aborted = false;
  sync_->abort_reason.clear();
  sync_->pools.clear();
}

std::vector<std::pair<double, Tensor>> cross_gradients(std::span<const Tensor> latents, Distance measure, bool joint) {
  const std::size_t K = latents.size();
  std::vector<std::pair<double, Tensor>> out(K);
  if (!joint) {
    for (std::size_t k = 0; k < K; ++k) {
      Graph g;
      Var z = g.input(latents[k]);
      std::vector<Tensor> others;
      for (std::size_t i = 0; i < K; ++i) {
        if (i != k) others.push_back(latents[i]);
      }
      Var l = cross_loss(z, others, measure);
      if (!others.empty()) g.backward(l);
      out[k] = {l.value()[0], z.grad()};
    }
    return out;
  }
  Graph g;
  std::vector<Var> z;
  for (const Tensor& t : latents) z.push_back(g.input(t));
  Var total;
  for (std::size_t k = 0; k < K; ++k) {
    Var acc;
    for (std::size_t i = 0; i < K; ++i) {
      if (i == k) continue;
      Var d = row_distance(z[k], z[i], measure);
      acc = acc.valid() ? add(acc, d) : d;
    }
    if (!acc.valid()) continue;
    Var lk = mean(acc);
    out[k].first = lk.value()[0];
    total = total.valid() ? add(total, lk) : lk;
  }
  if (total.valid()) g.backward(total);
  for (std::size_t k = 0; k < K; ++k) out[k].second = z[k].grad();
  return out;
}

Var local_objective(Graph& g, ModelParams& params, ClassifierParams& classifier, const Tensor& x, const Tensor& y,
                    std::size_t modality, std::span<const Tensor> other_latents, const FederationConfig& config) {
  Var xv = g.constant(x);
  EncoderOutput ei = encode(g, params.invariant_encoder, xv);
  Var loss;
  Var feat_s;
  if (uses_specific(config)) {
    EncoderOutput es = encode(g, params.specific_encoder, xv);
    feat_s = es.features;
    if (config.mu1 > 0.0) {
      Var logits = classify(g, classifier, es.latent);
      loss = scale(softmax_cross_entropy(logits, modality_one_hot(modality, classifier.num_modalities, x.dim(0))),
                   config.mu1);
    }
    if (config.mu2 > 0.0) {
      Var intra = scale(intra_loss(ei.latent, es.latent, config.measure, config.cap), config.mu2);
      loss = loss.valid() ? add(loss, intra) : intra;
    }
  }
  if (uses_cross(config) && !other_latents.empty()) {
    Var cross = scale(cross_loss(ei.latent, other_latents, config.measure), config.mu3);
    loss = loss.valid() ? add(loss, cross) : cross;
  }
  Var out = fuse_and_decode(g, params.decoder, ei.features, feat_s, ei.skips, xv, config.use_fusion);
  Var recon = recon_loss(out, g.constant(y));
  return loss.valid() ? add(recon, loss) : recon;
}

// ---- client steps ----------------------------------------------------------------

LossBreakdown local_step_horizontal(ClientState& client, std::span<const std::size_t> batch, const BarrierKey& key,
                                    Server& server, const FederationConfig& config) {
  ClientForward f = client_forward(client, client.data->horizontal, batch, config);
  std::optional<LatentExchange> aux;
  if (uses_aux(config)) aux = server.auxiliary(specific_upload(f, client, key));
  return finish_step(client, f, aux, std::nullopt, key, config);
}

std::vector<LossBreakdown> local_step_vertical(std::span<ClientState> clients, std::span<const std::size_t> batch,
                                               const BarrierKey& key, Server& server, const FederationConfig& config) {
  const std::size_t K = clients.size();
  std::vector<ClientForward> fwd;
  std::vector<std::optional<LatentExchange>> aux(K);
  fwd.reserve(K);
  for (std::size_t k = 0; k < K; ++k) {
    fwd.push_back(client_forward(clients[k], clients[k].data->vertical, batch, config));
    if (uses_aux(config)) aux[k] = server.auxiliary(specific_upload(fwd[k], clients[k], key));
  }
  std::vector<std::optional<LatentExchange>> cross(K);
  if (uses_cross(config)) {
    for (std::size_t k = 0; k < K; ++k) server.submit(invariant_upload(fwd[k], clients[k], key));
    for (std::size_t k = 0; k < K; ++k) cross[k] = server.collect(key, clients[k].index);
  }
  std::vector<LossBreakdown> out;
  out.reserve(K);
  for (std::size_t k = 0; k < K; ++k) out.push_back(finish_step(clients[k], fwd[k], aux[k], cross[k], key, config));
  return out;
}

namespace {

LossBreakdown vertical_step_concurrent(ClientState& client, std::span<const std::size_t> batch, const BarrierKey& key,
                                       Server& server, const FederationConfig& config) {
  ClientForward f = client_forward(client, client.data->vertical, batch, config);
  std::optional<LatentExchange> aux;
  std::optional<LatentExchange> cross;
  if (uses_aux(config)) aux = server.auxiliary(specific_upload(f, client, key));
  if (uses_cross(config)) cross = server.exchange(invariant_upload(f, client, key));
  return finish_step(client, f, aux, cross, key, config);
}

void run_client_epochs_concurrent(ClientState& c, Server& server, std::size_t round, const FederationConfig& cfg,
                                  LossAccumulator& acc) {
  for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
    auto hb = horizontal_batches(c.data->horizontal.size(), cfg.batch_size, cfg.seed, round, e, c.index);
    for (std::size_t b = 0; b < hb.size(); ++b) {
      acc.add(local_step_horizontal(c, hb[b], {round, e, b}, server, cfg), uses_aux(cfg), false);
    }
    auto vb = vertical_batches(c.data->vertical.size(), cfg.batch_size, cfg.seed, round, e);
    for (std::size_t b = 0; b < vb.size(); ++b) {
      acc.add(vertical_step_concurrent(c, vb[b], {round, e, kVerticalBatchBase + b}, server, cfg), uses_aux(cfg),
              uses_cross(cfg));
    }
  }
}

}  // namespace

// ---- rounds ------------------------------------------------------------------------

std::vector<ClientState> make_clients(const FederationConfig& config, const FederatedData& data) {
  if (data.clients.empty()) throw ConfigError("dataset has no clients");
  std::vector<std::size_t> counts;
  for (const ClientData& cd : data.clients) counts.push_back(cd.train_size());
  const auto weights = compute_weights(counts);
  std::vector<ClientState> clients(data.clients.size());
  for (std::size_t k = 0; k < clients.size(); ++k) {
    ClientState& c = clients[k];
    c.index = k;
    c.modality = data.clients[k].modality;
    c.data = &data.clients[k];
    c.weight = weights[k];
    c.params = ModelParams::init(config.arch, config.seed, derive_seed(config.seed, {0x4553ULL, k}));
  }
  return clients;
}

std::vector<RoundLogRecord> run_round(Server& server, std::span<ClientState> clients, std::size_t round,
                                      const FederationConfig& cfg) {
  const std::size_t K = clients.size();
  if (K != server.clients()) throw ProtocolError("run_round: client count differs from the server's");
  for (ClientState& c : clients) {
    copy_values(server.global(), c.params.invariant_encoder);
    copy_values(server.global(), c.params.decoder);
    server.count_broadcast();
  }
  std::vector<LossAccumulator> acc(K);

  if (cfg.mode == ExecutionMode::kSequential) {
    for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
      std::size_t horizontal_count = 0;
      for (ClientState& c : clients) {
        auto hb = horizontal_batches(c.data->horizontal.size(), cfg.batch_size, cfg.seed, round, e, c.index);
        horizontal_count = std::max(horizontal_count, hb.size());
        for (std::size_t b = 0; b < hb.size(); ++b) {
          acc[c.index].add(local_step_horizontal(c, hb[b], {round, e, b}, server, cfg), uses_aux(cfg), false);
        }
      }
      const std::size_t nv = clients[0].data->vertical.size();
      for (const ClientState& c : clients) {
        if (c.data->vertical.size() != nv) throw ProtocolError("run_round: clients hold different vertical set sizes");
      }
      auto vb = vertical_batches(nv, cfg.batch_size, cfg.seed, round, e);
      for (std::size_t b = 0; b < vb.size(); ++b) {
        auto parts = local_step_vertical(clients, vb[b], {round, e, kVerticalBatchBase + b}, server, cfg);
        for (std::size_t k = 0; k < K; ++k) acc[k].add(parts[k], uses_aux(cfg), uses_cross(cfg));
      }
    }
  } else {
    server.reset_abort();
    std::vector<std::exception_ptr> errors(K);
    std::vector<std::thread> threads;
    threads.reserve(K);
    for (std::size_t k = 0; k < K; ++k) {
      threads.emplace_back([&, k] {
        try {
          run_client_epochs_concurrent(clients[k], server, round, cfg, acc[k]);
        } catch (...) {
          errors[k] = std::current_exception();
          server.abort("client " + std::to_string(k) + " failed");
        }
      });
    }
    for (std::thread& t : threads) t.join();
    // Prefer the root cause over the ProtocolErrors it triggered in other clients.
    std::exception_ptr first;
    for (auto& err : errors) {
      if (!err) continue;
      try {
        std::rethrow_exception(err);
      } catch (const ProtocolError&) {
        if (!first) first = err;
      } catch (...) {
        std::rethrow_exception(err);
      }
    }
    if (first) std::rethrow_exception(first);
  }

  std::vector<ParamSet> uploads(K);
  std::vector<const ParamSet*> ptrs;
  std::vector<double> weights;
  for (std::size_t k = 0; k < K; ++k) {
    for (const Parameter& p : clients[k].params.invariant_encoder) uploads[k].add(p.name, p.value);
    for (const Parameter& p : clients[k].params.decoder) uploads[k].add(p.name, p.value);
    server.count_model_upload();
    ptrs.push_back(&uploads[k]);
    weights.push_back(clients[k].weight);
  }
  copy_values(aggregate(ptrs, weights), server.global());

  std::vector<RoundLogRecord> log;
  for (std::size_t k = 0; k < K; ++k) log.push_back(acc[k].record(round, k));
  return log;
}

TrainingResult run_training(const FederationConfig& config, const FederatedData& data, const TrainingHooks& hooks) {
  config.validate();
  if (config.arch.image_size != data.config.image_size) {
    throw ConfigError("model image size " + std::to_string(config.arch.image_size) + " differs from dataset size " +
                      std::to_string(data.config.image_size));
  }
  if (config.arch.num_modalities != data.config.num_modalities) {
    throw ConfigError("classifier modality count differs from the dataset's");
  }
  Server server(config, data.clients.size());
  std::vector<ClientState> clients = make_clients(config, data);
  TrainingResult result;
  for (std::size_t t = 1; t <= config.rounds; ++t) {
    auto log = run_round(server, clients, t, config);
    result.log.insert(result.log.end(), log.begin(), log.end());
    result.rounds_completed = t;
    if (hooks.on_round_end) hooks.on_round_end(t, FedCrfdState{&server, clients});
  }
  for (const Parameter& p : server.global()) result.global.add(p.name, p.value);
  for (ClientState& c : clients) {
    ParamSet s;
    for (const Parameter& p : c.params.specific_encoder) s.add(p.name, p.value);
    result.specific.push_back(std::move(s));
  }
  result.classifier = server.classifier();
  result.messages = server.counters();
  return result;
}

double auxiliary_accuracy(const TrainingResult& result, const FederationConfig& config, const FederatedData& data) {
  ClassifierParams classifier = result.classifier;
  std::size_t correct = 0, total = 0;
  for (std::size_t k = 0; k < data.clients.size(); ++k) {
    ParamSet encoder;
    for (const Parameter& p : result.specific.at(k)) encoder.add(p.name, p.value);
    const ClientData& cd = data.clients[k];
    for (const auto* set : {&cd.horizontal, &cd.vertical}) {
      for (const auto& batch : chunk(iota(set->size()), std::max<std::size_t>(1, config.batch_size))) {
        Graph g;
        Var x = g.constant(stack_inputs(*set, batch));
        Var logits = classify(g, classifier, encode(g, encoder, x).latent);
        for (std::size_t n = 0; n < batch.size(); ++n) correct += argmax_row(logits.value(), n) == cd.modality ? 1 : 0;
        total += batch.size();
      }
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace fedcrfd
