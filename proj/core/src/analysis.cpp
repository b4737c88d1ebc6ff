#include "fedcrfd/analysis.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "fedcrfd/errors.hpp"
#include "fedcrfd/federation.hpp"

namespace fedcrfd {

namespace {

ParamSet clone_set(const ParamSet& ps) {
  ParamSet out;
  for (const Parameter& p : ps) out.add(p.name, p.value);
  return out;
}

Tensor encode_all(ParamSet& encoder, std::span<const SliceSample> samples, std::size_t batch_size) {
  std::vector<double> rows;
  std::size_t d = 0;
  for (std::size_t i = 0; i < samples.size(); i += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t j = i; j < std::min(samples.size(), i + batch_size); ++j) idx.push_back(j);
    Graph g;
    const Tensor& z = encode(g, encoder, g.constant(stack_inputs(samples, idx))).latent.value();
    d = z.dim(1);
    rows.insert(rows.end(), z.data().begin(), z.data().end());
  }
  return Tensor({samples.size(), d}, std::move(rows));
}

}  // namespace

std::vector<ProjectedPoint> latent_projection(std::span<const LatentGroup> groups) {
  std::size_t total = 0, d = 0;
  for (const LatentGroup& g : groups) {
    if (g.vectors.rank() != 2) throw ShapeError("latent_projection: groups must be N x d");
    if (d == 0) d = g.vectors.dim(1);
    if (g.vectors.dim(1) != d) throw ShapeError("latent_projection: groups differ in dimension");
    if (g.vectors.dim(0) < 3) throw ConfigError("latent_projection: each group needs at least 3 vectors");
    total += g.vectors.dim(0);
  }
  if (total == 0) return {};
  Eigen::MatrixXd X(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(d));
  Eigen::Index r = 0;
  for (const LatentGroup& g : groups) {
    for (std::size_t n = 0; n < g.vectors.dim(0); ++n, ++r) {
      for (std::size_t j = 0; j < d; ++j) X(r, static_cast<Eigen::Index>(j)) = g.vectors[n * d + j];
    }
  }
  const Eigen::RowVectorXd mu = X.colwise().mean();
  X.rowwise() -= mu;
  const Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(total);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  // Eigenvalues ascend; take the last two columns.
  Eigen::MatrixXd axes = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), 2);
  const double top = es.eigenvalues().size() > 0 ? es.eigenvalues()(es.eigenvalues().size() - 1) : 0.0;
  for (int c = 0; c < 2 && c < es.eigenvalues().size(); ++c) {
    const Eigen::Index col = es.eigenvalues().size() - 1 - c;
    if (es.eigenvalues()(col) <= 1e-12 * std::max(1.0, top)) continue;
    Eigen::VectorXd v = es.eigenvectors().col(col);
    Eigen::Index imax = 0;
    v.cwiseAbs().maxCoeff(&imax);
    if (v(imax) < 0) v = -v;
    axes.col(c) = v;
  }
  const Eigen::MatrixXd P = X * axes;
  std::vector<ProjectedPoint> out;
  out.reserve(total);
  r = 0;
  for (const LatentGroup& g : groups) {
    for (std::size_t n = 0; n < g.vectors.dim(0); ++n, ++r) out.push_back({P(r, 0), P(r, 1), g.kind, g.modality});
  }
  return out;
}

std::string projection_csv(std::span<const ProjectedPoint> points) {
  std::ostringstream out;
  out << "x,y,kind,modality\n";
  char buf[96];
  for (const ProjectedPoint& p : points) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g", p.x, p.y);
    out << buf << ',' << (p.kind == LatentKind::kInvariant ? "invariant" : "specific") << ',' << p.modality << '\n';
  }
  return out.str();
}

DisentanglementScore disentanglement_gaps(std::span<const Tensor> invariant, std::span<const Tensor> specific,
                                          std::span<const std::size_t> modalities) {
  const std::size_t K = invariant.size();
  if (specific.size() != K || modalities.size() != K) throw ConfigError("disentanglement: inconsistent client counts");
  DisentanglementScore s;
  double gi = 0.0, gs = 0.0;
  for (std::size_t a = 0; a < K; ++a) {
    for (std::size_t b = a + 1; b < K; ++b) {
      if (modalities[a] == modalities[b]) continue;
      require_same_shape("disentanglement", invariant[a], invariant[b]);
      require_same_shape("disentanglement", specific[a], specific[b]);
      const std::size_t N = invariant[a].dim(0), d = invariant[a].dim(1);
      for (std::size_t n = 0; n < N; ++n) {
        double di = 0.0, ds = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          di += std::abs(invariant[a][n * d + j] - invariant[b][n * d + j]);
          ds += std::abs(specific[a][n * d + j] - specific[b][n * d + j]);
        }
        gi += di / static_cast<double>(d);
        gs += ds / static_cast<double>(d);
        ++s.pairs;
      }
    }
  }
  if (s.pairs == 0) throw ConfigError("disentanglement: no cross-modality pairs in the probe set");
  s.invariant_gap = gi / static_cast<double>(s.pairs);
  s.specific_gap = gs / static_cast<double>(s.pairs);
  return s;
}

ProbeLatents probe_latents(const ParamSet& invariant_encoder, std::span<const ParamSet> specific_encoders,
                           const FederatedData& data, std::size_t batch_size) {
  if (specific_encoders.size() != data.clients.size()) throw ConfigError("probe: one E_S per client is required");
  ProbeLatents out;
  ParamSet ei;
  for (const Parameter& p : invariant_encoder) {
    if (p.name.starts_with("E_I.") || p.name.starts_with("E.")) ei.add(p.name, p.value);
  }
  for (std::size_t k = 0; k < data.clients.size(); ++k) {
    ParamSet es = clone_set(specific_encoders[k]);
    out.invariant.push_back(encode_all(ei, data.clients[k].vertical, batch_size));
    out.specific.push_back(encode_all(es, data.clients[k].vertical, batch_size));
    out.modalities.push_back(data.clients[k].modality);
  }
  return out;
}

DisentanglementScore disentanglement_score(const ParamSet& invariant_encoder, std::span<const ParamSet> specific_encoders,
                                           const FederatedData& data) {
  const ProbeLatents p = probe_latents(invariant_encoder, specific_encoders, data);
  if (!p.invariant.empty() && p.invariant[0].dim(0) == 0) throw ConfigError("disentanglement: probe set is empty");
  return disentanglement_gaps(p.invariant, p.specific, p.modalities);
}

std::vector<LatentGroup> latent_groups(const ProbeLatents& probe) {
  std::vector<LatentGroup> out;
  for (std::size_t k = 0; k < probe.invariant.size(); ++k) {
    out.push_back({LatentKind::kInvariant, probe.modalities[k], probe.invariant[k]});
    out.push_back({LatentKind::kSpecific, probe.modalities[k], probe.specific[k]});
  }
  return out;
}

}  // namespace fedcrfd
