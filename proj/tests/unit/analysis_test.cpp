#include <gtest/gtest.h>

#include <cmath>

#include "fedcrfd/analysis.hpp"
#include "fedcrfd/errors.hpp"
#include "support.hpp"

namespace fedcrfd {
namespace {

using testing::Gen;

TEST(LatentProjection, TwoDimensionalDataIsOnlyRotated) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Gen gen(seed);
    const std::size_t n = gen.size(3, 20);
    const Tensor v = gen.tensor({n, 2}, -3, 3);
    const std::vector<LatentGroup> groups{{LatentKind::kInvariant, 0, v}};
    const auto pts = latent_projection(groups);
    ASSERT_EQ(pts.size(), n);
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b) {
        const double orig = std::hypot(v[a * 2] - v[b * 2], v[a * 2 + 1] - v[b * 2 + 1]);
        EXPECT_NEAR(std::hypot(pts[a].x - pts[b].x, pts[a].y - pts[b].y), orig, 1e-9);
      }
  }
}

TEST(LatentProjection, FirstAxisCarriesMostVariance) {
  Gen gen(4);
  Tensor v({40, 5});
  for (std::size_t i = 0; i < 40; ++i) {
    v[i * 5 + 2] = gen.real(-10, 10);
    v[i * 5 + 4] = gen.real(-1, 1);
  }
  const std::vector<LatentGroup> groups{{LatentKind::kSpecific, 1, v}};
  const auto pts = latent_projection(groups);
  double vx = 0, vy = 0, mx = 0, my = 0;
  for (const auto& p : pts) {
    mx += p.x / 40;
    my += p.y / 40;
  }
  for (const auto& p : pts) {
    vx += (p.x - mx) * (p.x - mx);
    vy += (p.y - my) * (p.y - my);
  }
  EXPECT_GT(vx, vy);
  EXPECT_NEAR(mx, 0.0, 1e-9);
  EXPECT_EQ(pts[0].kind, LatentKind::kSpecific);
  EXPECT_EQ(pts[0].modality, 1u);
}

TEST(LatentProjection, IdenticalVectorsCoincide) {
  Gen gen(5);
  const Tensor row = gen.tensor({1, 6});
  Tensor a({3, 6}), b({3, 6});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 6; ++j) a[i * 6 + j] = row[j];
  for (std::size_t j = 0; j < 6; ++j) b[j] = row[j], b[6 + j] = -row[j], b[12 + j] = row[j];
  const std::vector<LatentGroup> groups{{LatentKind::kInvariant, 0, a}, {LatentKind::kInvariant, 1, b}};
  const auto pts = latent_projection(groups);
  ASSERT_EQ(pts.size(), 6u);
  for (std::size_t i : {1, 2, 3, 5}) {
    EXPECT_NEAR(pts[i].x, pts[0].x, 1e-12);
    EXPECT_NEAR(pts[i].y, pts[0].y, 1e-12);
  }
  // Rank one: the second axis is empty.
  for (const auto& p : pts) EXPECT_NEAR(p.y, 0.0, 1e-9);
  const std::string csv = projection_csv(pts);
  EXPECT_EQ(csv.rfind("x,y,kind,modality\n", 0), 0u);
  EXPECT_NE(csv.find("invariant"), std::string::npos);
}

TEST(Gaps, ExampleAndSkipsSameModality) {
  const std::vector<Tensor> inv{Tensor({1, 2}, {0.0, 0.0}), Tensor({1, 2}, {1.0, 3.0}), Tensor({1, 2}, {9.0, 9.0})};
  const std::vector<Tensor> spec{Tensor({1, 2}, {0.0, 0.0}), Tensor({1, 2}, {2.0, 2.0}), Tensor({1, 2}, {9.0, 9.0})};
  const std::vector<std::size_t> mods{0, 1, 0};
  const DisentanglementScore s = disentanglement_gaps(inv, spec, mods);
  // Pairs (0,1) and (1,2); (0,2) share a modality.
  EXPECT_EQ(s.pairs, 2u);
  EXPECT_DOUBLE_EQ(s.invariant_gap, (2.0 + 7.0) / 2.0);
  EXPECT_DOUBLE_EQ(s.specific_gap, (2.0 + 7.0) / 2.0);
  const std::vector<std::size_t> same{0, 0, 0};
  EXPECT_THROW(disentanglement_gaps(inv, spec, same), ConfigError);
}

TEST(GapsProperty, NonNegativeAndEqualForEqualLatents) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Gen gen(seed);
    const std::size_t k = gen.size(2, 3), n = gen.size(1, 5), d = gen.size(1, 6);
    std::vector<Tensor> inv, spec;
    std::vector<std::size_t> mods;
    for (std::size_t i = 0; i < k; ++i) {
      inv.push_back(gen.tensor({n, d}));
      spec.push_back(gen.tensor({n, d}));
      mods.push_back(i);
    }
    const DisentanglementScore s = disentanglement_gaps(inv, spec, mods);
    EXPECT_GE(s.invariant_gap, 0.0);
    EXPECT_GE(s.specific_gap, 0.0);
    const DisentanglementScore same = disentanglement_gaps(inv, inv, mods);
    EXPECT_EQ(same.invariant_gap, same.specific_gap);
  }
}

TEST(Probe, EncodesEveryVerticalSample) {
  const FederatedData data = build_dataset(testing::tiny_data());
  FederationConfig f = testing::tiny_federation();
  const ModelParams m0 = ModelParams::init(f.arch, 0, 1), m1 = ModelParams::init(f.arch, 0, 2);
  const std::vector<ParamSet> specific{m0.specific_encoder, m1.specific_encoder};
  const ProbeLatents p = probe_latents(m0.invariant_encoder, specific, data, 3);
  ASSERT_EQ(p.invariant.size(), 2u);
  EXPECT_EQ(p.invariant[0].dim(0), data.aligned_keys.size());
  EXPECT_EQ(p.invariant[0].dim(1), f.arch.latent_dim());
  EXPECT_EQ(p.modalities, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(probe_latents(m0.invariant_encoder, specific, data, 32).invariant[1], p.invariant[1]);
  EXPECT_EQ(latent_groups(p).size(), 4u);
}

}  // namespace
}  // namespace fedcrfd
