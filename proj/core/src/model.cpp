#include "fedcrfd/model.hpp"

#include <cmath>

#include "fedcrfd/errors.hpp"
#include "fedcrfd/rng.hpp"

namespace fedcrfd {

namespace {

// Each tensor draws from its own stream keyed by the module seed and the name without its
// prefix, so "E.level0.conv" and "E_I.level0.conv" get equal values for equal module seeds.
Rng tensor_rng(std::uint64_t stream_seed, const std::string& name) {
  return Rng(derive_seed(stream_seed, name.substr(name.find('.') + 1)));
}

// Kaiming-uniform fan-in weights with the a = sqrt(5) gain (bound 1/sqrt(fan_in)), zero bias.
void add_conv(ParamSet& ps, const std::string& name, std::size_t out_ch, std::size_t in_ch, std::size_t k,
              std::uint64_t stream_seed) {
  Rng rng = tensor_rng(stream_seed, name);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * k * k));
  Tensor w({out_ch, in_ch, k, k});
  for (double& v : w.data()) v = rng.uniform(-bound, bound);
  ps.add(name + ".weight", std::move(w));
  ps.add(name + ".bias", Tensor({out_ch}));
}

void add_linear(ParamSet& ps, const std::string& name, std::size_t out_dim, std::size_t in_dim,
                std::uint64_t stream_seed) {
  Rng rng = tensor_rng(stream_seed, name);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
  Tensor w({out_dim, in_dim});
  for (double& v : w.data()) v = rng.uniform(-bound, bound);
  ps.add(name + ".weight", std::move(w));
  ps.add(name + ".bias", Tensor({out_dim}));
}

// Name prefix of a set, taken from its first parameter ("E_I.level0.conv.weight" -> "E_I").
std::string prefix_of(const ParamSet& ps) {
  if (ps.empty()) throw ConfigError("empty parameter set");
  const std::string& n = ps[0].name;
  return n.substr(0, n.find('.'));
}

struct Binder {
  Graph& g;
  ParamSet& ps;
  std::string prefix;
  Var operator()(const std::string& rest) { return g.param(ps.get(prefix + "." + rest)); }
};

Var conv_block(Binder& b, const std::string& name, Var x, std::size_t padding) {
  return conv2d(x, b(name + ".weight"), b(name + ".bias"), PrimitiveAttrs{1, padding});
}

}  // namespace

void validate(const ArchConfig& arch) {
  if (arch.channels.empty()) throw ConfigError("architecture needs at least one encoder level");
  for (std::size_t c : arch.channels) {
    if (c == 0) throw ConfigError("channel widths must be positive");
  }
  if (arch.num_modalities == 0) throw ConfigError("num_modalities must be positive");
  if (arch.image_size == 0 || arch.image_size % arch.size_multiple() != 0) {
    throw ConfigError("image size " + std::to_string(arch.image_size) + " not divisible by " +
                      std::to_string(arch.size_multiple()));
  }
}

ParamSet make_encoder(const ArchConfig& arch, const std::string& prefix, std::uint64_t stream_seed) {
  ParamSet ps;
  std::size_t in_ch = 1;
  for (std::size_t l = 0; l < arch.levels(); ++l) {
    add_conv(ps, prefix + ".level" + std::to_string(l) + ".conv", arch.channels[l], in_ch, 3, stream_seed);
    in_ch = arch.channels[l];
  }
  return ps;
}

ParamSet make_decoder(const ArchConfig& arch, const std::string& prefix, std::uint64_t stream_seed) {
  ParamSet ps;
  for (std::size_t l = arch.levels() - 1; l-- > 0;) {
    const std::string lv = std::to_string(l);
    add_conv(ps, prefix + ".up" + lv + ".conv", arch.channels[l], arch.channels[l + 1], 1, stream_seed);
    add_conv(ps, prefix + ".level" + lv + ".conv", arch.channels[l], arch.channels[l], 3, stream_seed);
  }
  add_conv(ps, prefix + ".out.conv", 1, arch.channels[0], 1, stream_seed);
  return ps;
}

ModelParams ModelParams::init(const ArchConfig& arch, std::uint64_t seed, std::uint64_t specific_seed) {
  validate(arch);
  ModelParams m;
  m.invariant_encoder = make_encoder(arch, "E_I", derive_seed(seed, "E_I"));
  m.specific_encoder = make_encoder(arch, "E_S", derive_seed(specific_seed, "E_S"));
  m.decoder = make_decoder(arch, "D", derive_seed(seed, "D"));
  return m;
}

std::vector<Parameter*> ModelParams::aggregable() {
  auto out = invariant_encoder.pointers();
  for (Parameter* p : decoder.pointers()) out.push_back(p);
  return out;
}

std::vector<Parameter*> ModelParams::all() {
  auto out = aggregable();
  for (Parameter* p : specific_encoder.pointers()) out.push_back(p);
  return out;
}

PlainModel PlainModel::init(const ArchConfig& arch, std::uint64_t seed) {
  validate(arch);
  PlainModel m;
  // Same stream as E_I so a plain model and a Fed-CRFD model start from identical weights.
  m.encoder = make_encoder(arch, "E", derive_seed(seed, "E_I"));
  m.decoder = make_decoder(arch, "D", derive_seed(seed, "D"));
  return m;
}

std::vector<Parameter*> PlainModel::all() {
  auto out = encoder.pointers();
  for (Parameter* p : decoder.pointers()) out.push_back(p);
  return out;
}

ClassifierParams ClassifierParams::init(const ArchConfig& arch, std::uint64_t seed) {
  validate(arch);
  ClassifierParams c;
  c.latent_dim = arch.latent_dim();
  c.num_modalities = arch.num_modalities;
  const std::uint64_t s = derive_seed(seed, "C");
  add_linear(c.mlp, "C.fc0", arch.classifier_hidden, arch.latent_dim(), s);
  add_linear(c.mlp, "C.fc1", arch.classifier_hidden, arch.classifier_hidden, s);
  add_linear(c.mlp, "C.fc2", arch.num_modalities, arch.classifier_hidden, s);
  return c;
}

EncoderOutput encode(Graph& g, ParamSet& encoder, Var x) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != 1) throw ShapeError("encode: expected N x 1 x H x W input, got " + shape_str(s));
  Binder b{g, encoder, prefix_of(encoder)};
  std::size_t levels = 0;
  while (encoder.find(b.prefix + ".level" + std::to_string(levels) + ".conv.weight") != nullptr) ++levels;
  const std::size_t mult = std::size_t{1} << (levels - 1);
  if (s[2] % mult != 0 || s[3] % mult != 0) {
    throw ShapeError("encode: input size " + shape_str(s) + " not divisible by " + std::to_string(mult));
  }
  EncoderOutput out;
  Var h = x;
  for (std::size_t l = 0; l < levels; ++l) {
    if (l > 0) h = avg_pool_2x(h);
    h = relu(conv_block(b, "level" + std::to_string(l) + ".conv", h, 1));
    if (l + 1 < levels) out.skips.push_back(h);
  }
  out.features = h;
  out.latent = global_avg_pool_flatten(h);
  return out;
}

EncoderOutput encode_specific(Graph& g, ModelParams& params, Var x) { return encode(g, params.specific_encoder, x); }

EncoderOutput encode_invariant(Graph& g, ModelParams& params, Var x) { return encode(g, params.invariant_encoder, x); }

Var fuse_and_decode(Graph& g, ParamSet& decoder, Var feat_invariant, Var feat_specific, const std::vector<Var>& skips,
                    Var input, bool use_fusion) {
  if (feat_specific.valid() && feat_specific.shape() != feat_invariant.shape()) {
    throw ShapeError("fuse_and_decode: feature shapes differ " + shape_str(feat_invariant.shape()) + " vs " +
                     shape_str(feat_specific.shape()));
  }
  if (use_fusion && !feat_specific.valid()) throw ShapeError("fuse_and_decode: fusion requested without E_S features");
  Binder b{g, decoder, prefix_of(decoder)};
  Var h = use_fusion ? add(feat_invariant, feat_specific) : feat_invariant;
  for (std::size_t l = skips.size(); l-- > 0;) {
    const std::string lv = std::to_string(l);
    // A 1x1 conv commutes with nearest upsampling; running it first is exact and 4x cheaper.
    Var u = upsample_2x(conv_block(b, "up" + lv + ".conv", h, 0));
    h = relu(add(u, skips[l]));
    h = relu(conv_block(b, "level" + lv + ".conv", h, 1));
  }
  Var out = conv_block(b, "out.conv", h, 0);
  if (out.shape() != input.shape()) {
    throw ShapeError("fuse_and_decode: output " + shape_str(out.shape()) + " does not match input " +
                     shape_str(input.shape()));
  }
  return add(out, input);
}

Var reconstruct_plain(Graph& g, PlainModel& model, Var x) {
  EncoderOutput e = encode(g, model.encoder, x);
  return fuse_and_decode(g, model.decoder, e.features, Var(), e.skips, x, false);
}

Var classify(Graph& g, ClassifierParams& params, Var latent) {
  const Shape& s = latent.shape();
  if (s.size() != 2 || s[1] != params.latent_dim) {
    throw ShapeError("classify: expected N x " + std::to_string(params.latent_dim) + " latents, got " + shape_str(s));
  }
  Binder b{g, params.mlp, "C"};
  Var h = relu(linear(latent, b("fc0.weight"), b("fc0.bias")));
  h = relu(linear(h, b("fc1.weight"), b("fc1.bias")));
  return linear(h, b("fc2.weight"), b("fc2.bias"));
}

Var intra_loss(Var z_invariant, Var z_specific, Distance measure, double cap) {
  if (!(cap > 0.0)) throw ConfigError("intra_loss: cap must be positive");
  Var d = row_distance(z_invariant, z_specific, measure);
  return scale(mean(clamp_max(d, cap)), -1.0);
}

Var recon_loss(Var reconstruction, Var target) { return l1_loss(reconstruction, target); }

Var cross_loss(Var z, std::span<const Tensor> others, Distance measure) {
  Graph& g = *z.graph();
  Var total;
  for (const Tensor& o : others) {
    Var d = row_distance(z, g.constant(o), measure);
    total = total.valid() ? add(total, d) : d;
  }
  if (!total.valid()) return g.constant(Tensor({1}, 0.0));
  return mean(total);
}

Tensor modality_one_hot(std::size_t modality, std::size_t num_modalities, std::size_t batch) {
  if (modality >= num_modalities) {
    throw ConfigError("modality " + std::to_string(modality) + " out of range for J=" + std::to_string(num_modalities));
  }
  Tensor t({batch, num_modalities});
  for (std::size_t n = 0; n < batch; ++n) t[n * num_modalities + modality] = 1.0;
  return t;
}

}  // namespace fedcrfd
