#pragma once

#include <span>
#include <string>
#include <vector>

#include "fedcrfd/model.hpp"
#include "fedcrfd/partition.hpp"

namespace fedcrfd {

/// A set of latent vectors (rows of an N x d tensor) from one encoder kind and modality.
struct LatentGroup {
  LatentKind kind = LatentKind::kInvariant;
  std::size_t modality = 0;
  Tensor vectors;
};

struct ProjectedPoint {
  double x = 0.0;
  double y = 0.0;
  LatentKind kind = LatentKind::kInvariant;
  std::size_t modality = 0;
};

/// PCA of the pooled vectors onto the top two principal axes. Each axis is signed so its
/// largest-magnitude loading is positive. Missing components (rank < 2) project to 0.
std::vector<ProjectedPoint> latent_projection(std::span<const LatentGroup> groups);

/// Columns: x,y,kind,modality with kind in {invariant, specific}.
std::string projection_csv(std::span<const ProjectedPoint> points);

struct DisentanglementScore {
  double invariant_gap = 0.0;
  double specific_gap = 0.0;
  std::size_t pairs = 0;
};

/// Mean l1-mean distance between latents of the same key in different modalities.
/// `invariant[k]` and `specific[k]` are N x d latents of client k over a shared key order.
DisentanglementScore disentanglement_gaps(std::span<const Tensor> invariant, std::span<const Tensor> specific,
                                          std::span<const std::size_t> modalities);

/// Encodes every client's vertical samples with the given encoders (global E_I, each client's E_S).
struct ProbeLatents {
  std::vector<Tensor> invariant;
  std::vector<Tensor> specific;
  std::vector<std::size_t> modalities;
};
ProbeLatents probe_latents(const ParamSet& invariant_encoder, std::span<const ParamSet> specific_encoders,
                           const FederatedData& data, std::size_t batch_size = 32);

DisentanglementScore disentanglement_score(const ParamSet& invariant_encoder, std::span<const ParamSet> specific_encoders,
                                           const FederatedData& data);

/// Groups for latent_projection: z^I and z^S per client modality.
std::vector<LatentGroup> latent_groups(const ProbeLatents& probe);

}  // namespace fedcrfd
