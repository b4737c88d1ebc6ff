#pragma once

#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedcrfd/kspace.hpp"
#include "fedcrfd/tensor.hpp"

namespace fedcrfd {

/// (patient, slice) identity of one sample.
struct SampleKey {
  std::uint64_t patient = 0;
  std::size_t slice = 0;

  friend auto operator<=>(const SampleKey&, const SampleKey&) = default;
};

/// One training or test pair.
struct SliceSample {
  Tensor x;  // zero-filled undersampled magnitude image, H x W
  Tensor y;  // ground truth, H x W
  std::uint64_t patient = 0;
  std::size_t slice = 0;
  std::size_t modality = 0;
  std::string mask_id;

  SampleKey key() const { return {patient, slice}; }
};

using EntityToken = std::uint64_t;

/// SipHash-2-4 of the patient ID keyed by the federation salt.
EntityToken entity_token(std::uint64_t patient, std::uint64_t salt);
/// Public fingerprint of the salt; equal fingerprints mean clients share the salt.
std::uint64_t salt_fingerprint(std::uint64_t salt);

/// What one client contributes to alignment: its tokens and the local patient each came from.
struct ClientTokens {
  std::uint64_t salt_fingerprint = 0;
  std::size_t slices = 0;
  std::vector<std::pair<EntityToken, std::uint64_t>> entries;
};

ClientTokens make_client_tokens(std::span<const std::uint64_t> patients, std::size_t slices, std::uint64_t salt);

/// Sorted token intersection expanded to (patient, slice) keys in token-then-slice order.
/// Throws ProtocolError on a salt fingerprint or slice-count mismatch.
std::vector<SampleKey> align_entities(std::span<const ClientTokens> clients);

struct ClientPartition {
  std::size_t modality = 0;
  MaskSpec mask;
  std::vector<std::uint64_t> horizontal_patients;
  std::vector<std::uint64_t> vertical_patients;

  friend bool operator==(const ClientPartition&, const ClientPartition&) = default;
};

struct FederationPartition {
  std::vector<ClientPartition> clients;
  std::vector<std::uint64_t> vertical_patients;  // sorted

  friend bool operator==(const FederationPartition&, const FederationPartition&) = default;
};

/// ceil(beta * P) patients become vertical (shared by every client); the rest are dealt
/// round-robin after a seeded shuffle so horizontal sets are disjoint.
FederationPartition partition(std::span<const std::uint64_t> patients, std::size_t clients, double beta,
                              std::span<const std::size_t> modalities, std::span<const MaskSpec> masks,
                              std::uint64_t seed);

/// Synthetic dataset parameters.
struct DataConfig {
  std::size_t image_size = 64;
  std::size_t train_patients = 60;
  std::size_t test_patients = 20;
  std::size_t slices = 8;
  std::size_t num_modalities = 2;
  std::vector<std::size_t> client_modalities{0, 1};
  std::vector<MaskSpec> masks{{MaskKind::kUniform1d, 5.0}, {MaskKind::kRandom2d, 3.0}};
  double center_fraction = 0.08;
  double beta = 0.1;
  std::uint64_t salt = 0x5a17c0ffee;
  std::uint64_t seed = 0;

  std::size_t clients() const { return client_modalities.size(); }
  void validate() const;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct ClientData {
  std::size_t modality = 0;
  UndersampleMask mask;
  std::vector<SliceSample> horizontal;
  std::vector<SliceSample> vertical;  // canonical aligned order
  std::vector<SliceSample> test;      // every test patient in this client's modality and mask

  std::size_t train_size() const { return horizontal.size() + vertical.size(); }
};

struct FederatedData {
  DataConfig config;
  FederationPartition partition;
  std::vector<SampleKey> aligned_keys;
  std::vector<std::uint64_t> test_patients;
  std::vector<ClientData> clients;
};

/// Renders one sample of `patient` for a client.
SliceSample make_sample(const DataConfig& config, std::uint64_t patient, std::size_t slice, std::size_t modality,
                        const UndersampleMask& mask);

UndersampleMask client_mask(const DataConfig& config, std::size_t client);

/// Generates phantoms, renders, undersamples, partitions, and aligns. Train patient IDs are
/// 0..P-1, test patients follow.
FederatedData build_dataset(const DataConfig& config);

/// For each sample, the ground-truth maximum over every sample of the same patient.
std::vector<double> volume_max(std::span<const SliceSample> samples);

}  // namespace fedcrfd
