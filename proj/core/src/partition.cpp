#include "fedcrfd/partition.hpp"

#include <sodium.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <mutex>
#include <set>

#include "fedcrfd/errors.hpp"
#include "fedcrfd/phantom.hpp"
#include "fedcrfd/rng.hpp"

namespace fedcrfd {

namespace {

void store_le(std::uint64_t v, unsigned char* out) {
  for (int i = 0; i < 8; ++i) out[i] = static_cast<unsigned char>(v >> (8 * i));
}

std::uint64_t load_le(const unsigned char* in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[i]) << (8 * i);
  return v;
}

std::uint64_t siphash(std::uint64_t salt, const unsigned char* msg, std::size_t len) {
  static std::once_flag once;
  std::call_once(once, [] {
    if (sodium_init() < 0) throw Error(ErrorCode::kInternal, "libsodium failed to initialize");
  });
  std::array<unsigned char, crypto_shorthash_siphash24_KEYBYTES> key{};
  store_le(salt, key.data());
  store_le(splitmix64(salt), key.data() + 8);
  std::array<unsigned char, crypto_shorthash_siphash24_BYTES> out{};
  crypto_shorthash_siphash24(out.data(), msg, len, key.data());
  return load_le(out.data());
}

}  // namespace

EntityToken entity_token(std::uint64_t patient, std::uint64_t salt) {
  unsigned char msg[8];
  store_le(patient, msg);
  return siphash(salt, msg, sizeof msg);
}

std::uint64_t salt_fingerprint(std::uint64_t salt) {
  static constexpr unsigned char kTag[] = "fedcrfd-salt-fingerprint";
  return siphash(salt, kTag, sizeof kTag - 1);
}

ClientTokens make_client_tokens(std::span<const std::uint64_t> patients, std::size_t slices, std::uint64_t salt) {
  ClientTokens t{salt_fingerprint(salt), slices, {}};
  t.entries.reserve(patients.size());
  for (std::uint64_t p : patients) t.entries.emplace_back(entity_token(p, salt), p);
  return t;
}

std::vector<SampleKey> align_entities(std::span<const ClientTokens> clients) {
  if (clients.empty()) return {};
  for (const ClientTokens& c : clients) {
    if (c.salt_fingerprint != clients[0].salt_fingerprint) {
      throw ProtocolError("align_entities: salt fingerprint mismatch between clients");
    }
    if (c.slices != clients[0].slices) throw ProtocolError("align_entities: clients disagree on slice count");
  }
  std::map<EntityToken, std::uint64_t> common;
  for (const auto& [token, patient] : clients[0].entries) common.emplace(token, patient);
  for (std::size_t k = 1; k < clients.size(); ++k) {
    std::set<EntityToken> mine;
    for (const auto& e : clients[k].entries) mine.insert(e.first);
    std::erase_if(common, [&](const auto& kv) { return !mine.contains(kv.first); });
  }
  // The simulation uses global patient IDs, so client 0's mapping resolves keys for everyone.
  std::vector<SampleKey> keys;
  keys.reserve(common.size() * clients[0].slices);
  for (const auto& [token, patient] : common) {
    for (std::size_t s = 0; s < clients[0].slices; ++s) keys.push_back({patient, s});
  }
  return keys;
}

FederationPartition partition(std::span<const std::uint64_t> patients, std::size_t clients, double beta,
                              std::span<const std::size_t> modalities, std::span<const MaskSpec> masks,
                              std::uint64_t seed) {
  if (clients == 0) throw ConfigError("partition: need at least one client");
  if (!(beta >= 0.0 && beta <= 0.5)) throw ConfigError("partition: beta must be in [0, 0.5]");
  if (modalities.size() != clients || masks.size() != clients) {
    throw ConfigError("partition: expected " + std::to_string(clients) + " modality and mask assignments");
  }
  std::vector<std::uint64_t> order(patients.begin(), patients.end());
  {
    std::vector<std::uint64_t> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw ConfigError("partition: duplicate patient IDs");
    }
  }
  const auto n_vertical =
      static_cast<std::size_t>(std::ceil(beta * static_cast<double>(order.size()) - 1e-9));
  if (order.size() < n_vertical + clients) {
    throw ConfigError("partition: " + std::to_string(order.size()) + " patients are too few for " +
                      std::to_string(n_vertical) + " vertical and " + std::to_string(clients) + " clients");
  }
  Rng rng(derive_seed(seed, "partition"));
  rng.shuffle(order);

  FederationPartition part;
  part.vertical_patients.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_vertical));
  std::sort(part.vertical_patients.begin(), part.vertical_patients.end());
  part.clients.resize(clients);
  for (std::size_t k = 0; k < clients; ++k) {
    part.clients[k].modality = modalities[k];
    part.clients[k].mask = masks[k];
    part.clients[k].vertical_patients = part.vertical_patients;
  }
  for (std::size_t i = n_vertical; i < order.size(); ++i) {
    part.clients[(i - n_vertical) % clients].horizontal_patients.push_back(order[i]);
  }
  for (ClientPartition& c : part.clients) std::sort(c.horizontal_patients.begin(), c.horizontal_patients.end());
  return part;
}

void DataConfig::validate() const {
  if (client_modalities.empty()) throw ConfigError("data: at least one client is required");
  if (masks.size() != client_modalities.size()) {
    throw ConfigError("data: " + std::to_string(masks.size()) + " masks for " +
                      std::to_string(client_modalities.size()) + " clients");
  }
  if (num_modalities == 0 || num_modalities > kMaxModalities) {
    throw ConfigError("data: modalities must be in 1.." + std::to_string(kMaxModalities));
  }
  for (std::size_t m : client_modalities) {
    if (m >= num_modalities) throw ConfigError("data: client modality " + std::to_string(m) + " out of range");
  }
  if (slices == 0) throw ConfigError("data: slices must be positive");
  if (train_patients == 0 || test_patients == 0) throw ConfigError("data: patient counts must be positive");
  if (image_size < 32 || image_size % 8 != 0) throw ConfigError("data: image size must be >= 32 and divisible by 8");
  if (!(beta >= 0.0 && beta <= 0.5)) throw ConfigError("data: beta must be in [0, 0.5]");
}

UndersampleMask client_mask(const DataConfig& config, std::size_t client) {
  const MaskSpec& spec = config.masks.at(client);
  return make_mask(spec.kind, spec.acceleration, config.image_size, config.center_fraction,
                   derive_seed(config.seed, {0x6d61736bULL, client}));
}

SliceSample make_sample(const DataConfig& config, std::uint64_t patient, std::size_t slice, std::size_t modality,
                        const UndersampleMask& mask) {
  const AnatomyPhantom ph = generate_phantom(config.seed, config.image_size, patient, slice);
  SliceSample s;
  s.y = render_modality(ph, modality, derive_seed(config.seed, {0x6e6f6973ULL, patient, slice}));
  s.x = undersample(s.y, mask);
  s.patient = patient;
  s.slice = slice;
  s.modality = modality;
  s.mask_id = mask_spec_str({mask.kind, mask.acceleration});
  return s;
}

FederatedData build_dataset(const DataConfig& config) {
  config.validate();
  FederatedData data;
  data.config = config;
  std::vector<std::uint64_t> train(config.train_patients);
  for (std::size_t i = 0; i < train.size(); ++i) train[i] = i;
  for (std::size_t i = 0; i < config.test_patients; ++i) data.test_patients.push_back(config.train_patients + i);

  data.partition = partition(train, config.clients(), config.beta, config.client_modalities, config.masks, config.seed);

  std::vector<ClientTokens> tokens;
  for (const ClientPartition& c : data.partition.clients) {
    tokens.push_back(make_client_tokens(c.vertical_patients, config.slices, config.salt));
  }
  data.aligned_keys = align_entities(tokens);

  data.clients.resize(config.clients());
  for (std::size_t k = 0; k < config.clients(); ++k) {
    ClientData& cd = data.clients[k];
    const ClientPartition& cp = data.partition.clients[k];
    cd.modality = cp.modality;
    cd.mask = client_mask(config, k);
    for (std::uint64_t p : cp.horizontal_patients) {
      for (std::size_t s = 0; s < config.slices; ++s) cd.horizontal.push_back(make_sample(config, p, s, cd.modality, cd.mask));
    }
    for (const SampleKey& key : data.aligned_keys) {
      cd.vertical.push_back(make_sample(config, key.patient, key.slice, cd.modality, cd.mask));
    }
    for (std::uint64_t p : data.test_patients) {
      for (std::size_t s = 0; s < config.slices; ++s) cd.test.push_back(make_sample(config, p, s, cd.modality, cd.mask));
    }
  }
  return data;
}

std::vector<double> volume_max(std::span<const SliceSample> samples) {
  std::map<std::uint64_t, double> per_patient;
  for (const SliceSample& s : samples) {
    double m = 0.0;
    for (double v : s.y.data()) m = std::max(m, v);
    auto [it, inserted] = per_patient.emplace(s.patient, m);
    if (!inserted) it->second = std::max(it->second, m);
  }
  std::vector<double> out;
  out.reserve(samples.size());
  for (const SliceSample& s : samples) out.push_back(per_patient[s.patient]);
  return out;
}

}  // namespace fedcrfd
