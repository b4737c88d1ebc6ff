#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedcrfd/autograd.hpp"
#include "fedcrfd/optim.hpp"

namespace fedcrfd {

/// Shape of the reconstruction network and the server classifier.
///
/// Encoders have one 3x3 conv + ReLU per level with 2x average pooling between levels; the
/// last level is the bottleneck, whose channel count is the latent dimension. The decoder
/// mirrors the encoder: nearest 2x upsampling + 1x1 conv, additive skip from the invariant
/// encoder, 3x3 conv + ReLU, and a final 1x1 conv added to the input image.
struct ArchConfig {
  std::size_t image_size = 64;
  std::vector<std::size_t> channels{8, 16, 32};
  std::size_t classifier_hidden = 64;
  std::size_t num_modalities = 2;

  std::size_t levels() const { return channels.size(); }
  std::size_t latent_dim() const { return channels.back(); }
  /// Spatial dims must be divisible by this factor.
  std::size_t size_multiple() const { return std::size_t{1} << (levels() - 1); }

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

void validate(const ArchConfig& arch);

/// Which latent a LatentVector batch came from.
enum class LatentKind { kSpecific, kInvariant };

/// Parameter groups of one client's local model. Only the invariant encoder and the decoder are
/// averaged across clients; the specific encoder stays local.
struct ModelParams {
  ParamSet invariant_encoder;  // "E_I.*"
  ParamSet specific_encoder;   // "E_S.*"
  ParamSet decoder;            // "D.*"

  /// `seed` drives the shared E_I/D initialization; `specific_seed` the local E_S.
  static ModelParams init(const ArchConfig& arch, std::uint64_t seed, std::uint64_t specific_seed);

  std::vector<Parameter*> aggregable();
  std::vector<Parameter*> all();
};

/// Single-encoder reconstruction model used by the Solo/Centralized/FedAvg baselines.
/// Its encoder and decoder are initialized from the same streams as E_I and D, so for a given
/// seed it starts from exactly the Fed-CRFD invariant path.
struct PlainModel {
  ParamSet encoder;  // "E.*"
  ParamSet decoder;  // "D.*"

  static PlainModel init(const ArchConfig& arch, std::uint64_t seed);
  std::vector<Parameter*> all();
};

/// MLP d -> hidden -> hidden -> J with ReLU, held by the server.
struct ClassifierParams {
  ParamSet mlp;  // "C.*"
  std::size_t latent_dim = 0;
  std::size_t num_modalities = 0;

  static ClassifierParams init(const ArchConfig& arch, std::uint64_t seed);
};

ParamSet make_encoder(const ArchConfig& arch, const std::string& prefix, std::uint64_t stream_seed);
ParamSet make_decoder(const ArchConfig& arch, const std::string& prefix, std::uint64_t stream_seed);

struct EncoderOutput {
  Var features;             // bottleneck feature map
  std::vector<Var> skips;   // per-level features above the bottleneck, finest first
  Var latent;               // N x d, global average pool of `features`
};

/// Runs an encoder on x (N x 1 x H x W). Used for both E_S and E_I (identical layer shapes).
EncoderOutput encode(Graph& g, ParamSet& encoder, Var x);
EncoderOutput encode_specific(Graph& g, ModelParams& params, Var x);
EncoderOutput encode_invariant(Graph& g, ModelParams& params, Var x);

/// Decodes feat_I (+ feat_S when use_fusion) with the invariant skips; output has x's shape.
Var fuse_and_decode(Graph& g, ParamSet& decoder, Var feat_invariant, Var feat_specific, const std::vector<Var>& skips,
                    Var input, bool use_fusion);

/// Full forward of the plain model.
Var reconstruct_plain(Graph& g, PlainModel& model, Var x);

Var classify(Graph& g, ClassifierParams& params, Var latent);

/// -mean_n min(dist(zI_n, zS_n), cap); cap must be positive.
Var intra_loss(Var z_invariant, Var z_specific, Distance measure, double cap);
Var recon_loss(Var reconstruction, Var target);
/// mean_n sum_i dist(z_n, others_i,n) with the other clients' latents held constant.
Var cross_loss(Var z, std::span<const Tensor> others, Distance measure);

/// N x J one-hot rows for a single modality.
Tensor modality_one_hot(std::size_t modality, std::size_t num_modalities, std::size_t batch);

}  // namespace fedcrfd
