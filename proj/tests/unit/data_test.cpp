#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>

#include "fedcrfd/dataset_io.hpp"
#include "fedcrfd/errors.hpp"
#include "fedcrfd/partition.hpp"
#include "fedcrfd/phantom.hpp"
#include "support.hpp"

namespace fedcrfd {
namespace {

using testing::Gen;

// Reference SipHash-2-4.
std::uint64_t rotl(std::uint64_t x, int b) { return (x << b) | (x >> (64 - b)); }

std::uint64_t le64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t siphash24(const unsigned char key[16], const unsigned char* msg, std::size_t len) {
  const std::uint64_t k0 = le64(key), k1 = le64(key + 8);
  std::uint64_t v0 = k0 ^ 0x736f6d6570736575ULL, v1 = k1 ^ 0x646f72616e646f6dULL;
  std::uint64_t v2 = k0 ^ 0x6c7967656e657261ULL, v3 = k1 ^ 0x7465646279746573ULL;
  auto round = [&] {
    v0 += v1; v1 = rotl(v1, 13); v1 ^= v0; v0 = rotl(v0, 32);
    v2 += v3; v3 = rotl(v3, 16); v3 ^= v2;
    v0 += v3; v3 = rotl(v3, 21); v3 ^= v0;
    v2 += v1; v1 = rotl(v1, 17); v1 ^= v2; v2 = rotl(v2, 32);
  };
  const std::size_t full = len / 8 * 8;
  for (std::size_t i = 0; i < full; i += 8) {
    const std::uint64_t m = le64(msg + i);
    v3 ^= m;
    round();
    round();
    v0 ^= m;
  }
  std::uint64_t b = static_cast<std::uint64_t>(len) << 56;
  for (std::size_t i = full; i < len; ++i) b |= static_cast<std::uint64_t>(msg[i]) << (8 * (i - full));
  v3 ^= b;
  round();
  round();
  v0 ^= b;
  v2 ^= 0xff;
  for (int i = 0; i < 4; ++i) round();
  return v0 ^ v1 ^ v2 ^ v3;
}

void put_le(std::uint64_t v, unsigned char* out) {
  for (int i = 0; i < 8; ++i) out[i] = static_cast<unsigned char>(v >> (8 * i));
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TEST(SipHash, ReferenceMatchesPublishedVector) {
  unsigned char key[16];
  for (int i = 0; i < 16; ++i) key[i] = static_cast<unsigned char>(i);
  EXPECT_EQ(siphash24(key, nullptr, 0), 0x726fdb47dd0e0e31ULL);
  unsigned char msg[15];
  for (int i = 0; i < 15; ++i) msg[i] = static_cast<unsigned char>(i);
  EXPECT_EQ(siphash24(key, msg, 15), 0xa129ca6149be45e5ULL);
}

TEST(EntityToken, MatchesReferenceKeyedBySalt) {
  Gen gen(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::uint64_t salt = gen.rng.next_u64(), patient = gen.rng.next_u64() % 100000;
    unsigned char key[16], msg[8];
    put_le(salt, key);
    put_le(splitmix64(salt), key + 8);
    put_le(patient, msg);
    EXPECT_EQ(entity_token(patient, salt), siphash24(key, msg, 8));
  }
}

TEST(EntityToken, DependsOnSalt) {
  EXPECT_EQ(entity_token(42, 7), entity_token(42, 7));
  EXPECT_NE(entity_token(42, 7), entity_token(42, 8));
  EXPECT_NE(entity_token(42, 7), entity_token(43, 7));
  EXPECT_NE(salt_fingerprint(7), salt_fingerprint(8));
}

TEST(Alignment, MatchesPlainIdIntersection) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Gen gen(seed);
    const std::size_t k = gen.size(1, 4), slices = gen.size(1, 3);
    const std::uint64_t salt = gen.rng.next_u64();
    std::vector<std::vector<std::uint64_t>> ids(k);
    std::vector<ClientTokens> tokens;
    for (auto& v : ids) {
      for (std::uint64_t p = 0; p < 40; ++p)
        if (gen.real(0, 1) < 0.6) v.push_back(p);
      tokens.push_back(make_client_tokens(v, slices, salt));
    }
    std::set<std::uint64_t> common(ids[0].begin(), ids[0].end());
    for (const auto& v : ids) {
      std::set<std::uint64_t> next;
      for (std::uint64_t p : v)
        if (common.contains(p)) next.insert(p);
      common = next;
    }
    std::vector<std::uint64_t> by_token(common.begin(), common.end());
    std::sort(by_token.begin(), by_token.end(),
              [&](auto a, auto b) { return entity_token(a, salt) < entity_token(b, salt); });
    std::vector<SampleKey> expected;
    for (std::uint64_t p : by_token)
      for (std::size_t s = 0; s < slices; ++s) expected.push_back({p, s});
    EXPECT_EQ(align_entities(tokens), expected);
  }
}

TEST(Alignment, DisjointAndIdentical) {
  const std::vector<std::uint64_t> a{1, 2, 3}, b{4, 5}, c{3, 1, 2};
  const std::vector<ClientTokens> disjoint{make_client_tokens(a, 2, 9), make_client_tokens(b, 2, 9)};
  EXPECT_TRUE(align_entities(disjoint).empty());
  const std::vector<ClientTokens> same{make_client_tokens(a, 1, 9), make_client_tokens(c, 1, 9)};
  EXPECT_EQ(align_entities(same).size(), 3u);
}

TEST(Alignment, RejectsSaltOrSliceMismatch) {
  const std::vector<std::uint64_t> a{1, 2, 3};
  const std::vector<ClientTokens> salts{make_client_tokens(a, 2, 9), make_client_tokens(a, 2, 10)};
  EXPECT_THROW(align_entities(salts), ProtocolError);
  const std::vector<ClientTokens> slices{make_client_tokens(a, 2, 9), make_client_tokens(a, 3, 9)};
  EXPECT_THROW(align_entities(slices), ProtocolError);
}

TEST(Phantom, DeterministicAndPatientSpecific) {
  EXPECT_EQ(generate_phantom(0, 64, 5, 2), generate_phantom(0, 64, 5, 2));
  for (std::uint64_t p = 0; p < 10; ++p) {
    const AnatomyPhantom a = generate_phantom(0, 64, p, 0), b = generate_phantom(0, 64, p + 1, 0);
    std::size_t differ = 0;
    for (std::size_t i = 0; i < a.labels.size(); ++i) differ += a.labels[i] != b.labels[i];
    EXPECT_GE(static_cast<double>(differ), 0.01 * static_cast<double>(a.labels.size()));
  }
}

TEST(Phantom, LabelsInRangeAndSizeChecked) {
  const AnatomyPhantom a = generate_phantom(3, 96, 1, 7);
  EXPECT_EQ(a.labels.size(), 96u * 96u);
  for (std::uint8_t l : a.labels) EXPECT_LE(l, kNumTissueLabels);
  EXPECT_THROW(generate_phantom(0, 24, 0, 0), ConfigError);
  EXPECT_THROW(generate_phantom(0, 60, 0, 0), ConfigError);
}

TEST(Phantom, ModalitiesShareSupportAndStayInRange) {
  const AnatomyPhantom ph = generate_phantom(1, 64, 3, 4);
  const Tensor a = render_modality(ph, 0, 5), b = render_modality(ph, 1, 5);
  EXPECT_EQ(render_modality(ph, 0, 5), a);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i] > 0.0, b[i] > 0.0);
    EXPECT_GE(a[i], 0.0);
    EXPECT_LE(a[i], 1.0);
  }
  EXPECT_NE(a, b);
}

TEST(Partition, HundredPatientSplitArithmetic) {
  std::vector<std::uint64_t> ids(100);
  for (std::size_t i = 0; i < 100; ++i) ids[i] = i;
  const std::vector<std::size_t> mods{0, 1};
  const std::vector<MaskSpec> masks{{MaskKind::kUniform1d, 5}, {MaskKind::kRandom2d, 3}};
  const FederationPartition p = partition(ids, 2, 0.1, mods, masks, 0);
  EXPECT_EQ(p.vertical_patients.size(), 10u);
  for (const ClientPartition& c : p.clients) {
    EXPECT_EQ(c.vertical_patients.size(), 10u);
    EXPECT_EQ(c.horizontal_patients.size(), 45u);
  }
  const FederationPartition none = partition(ids, 2, 0.0, mods, masks, 0);
  for (const ClientPartition& c : none.clients) EXPECT_TRUE(c.vertical_patients.empty());
}

TEST(PartitionProperty, InvariantsHoldOverRandomSeeds) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Gen gen(seed + 1000);
    const std::size_t k = gen.size(1, 3);
    const std::size_t patients = gen.size(2 * k + 2, 80);
    const double beta = gen.real(0.0, 0.5);
    std::vector<std::uint64_t> ids;
    for (std::size_t i = 0; i < patients; ++i) ids.push_back(gen.rng.next_u64() % 1000000);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    std::vector<std::size_t> mods(k);
    for (std::size_t i = 0; i < k; ++i) mods[i] = i;
    const std::vector<MaskSpec> masks(k, MaskSpec{MaskKind::kCartesian1d, 4});
    const auto n_v = static_cast<std::size_t>(std::ceil(beta * static_cast<double>(ids.size()) - 1e-9));
    if (ids.size() < n_v + k) {
      EXPECT_THROW(partition(ids, k, beta, mods, masks, seed), ConfigError);
      continue;
    }
    const FederationPartition p = partition(ids, k, beta, mods, masks, seed);
    ASSERT_EQ(p.clients.size(), k);
    EXPECT_EQ(p.vertical_patients.size(), n_v);
    EXPECT_TRUE(std::is_sorted(p.vertical_patients.begin(), p.vertical_patients.end()));
    std::multiset<std::uint64_t> seen(p.vertical_patients.begin(), p.vertical_patients.end());
    std::set<std::size_t> modalities;
    std::size_t smallest = ids.size(), largest = 0;
    for (const ClientPartition& c : p.clients) {
      EXPECT_EQ(c.vertical_patients, p.vertical_patients);
      modalities.insert(c.modality);
      seen.insert(c.horizontal_patients.begin(), c.horizontal_patients.end());
      smallest = std::min(smallest, c.horizontal_patients.size());
      largest = std::max(largest, c.horizontal_patients.size());
    }
    EXPECT_EQ(modalities.size(), k);
    EXPECT_LE(largest - smallest, 1u);
    // Every patient exactly once across the vertical set and all horizontal sets.
    EXPECT_EQ(std::vector<std::uint64_t>(seen.begin(), seen.end()), ids);
    EXPECT_EQ(partition(ids, k, beta, mods, masks, seed), p);
  }
}

TEST(Partition, RejectsBadInputs) {
  const std::vector<std::uint64_t> ids{1, 2, 3};
  const std::vector<std::size_t> mods{0, 1};
  const std::vector<MaskSpec> masks(2, MaskSpec{});
  EXPECT_THROW(partition(ids, 2, 0.6, mods, masks, 0), ConfigError);
  EXPECT_THROW(partition(ids, 2, 0.5, mods, masks, 0), ConfigError);
  const std::vector<std::uint64_t> dup{1, 1, 2, 3};
  EXPECT_THROW(partition(dup, 2, 0.0, mods, masks, 0), ConfigError);
}

TEST(Dataset, VerticalSamplesShareAnatomyAcrossClients) {
  const FederatedData data = build_dataset(testing::tiny_data());
  ASSERT_EQ(data.clients.size(), 2u);
  ASSERT_FALSE(data.aligned_keys.empty());
  for (std::size_t i = 0; i < data.aligned_keys.size(); ++i) {
    const SliceSample& a = data.clients[0].vertical[i];
    const SliceSample& b = data.clients[1].vertical[i];
    EXPECT_EQ(a.key(), data.aligned_keys[i]);
    EXPECT_EQ(b.key(), data.aligned_keys[i]);
    EXPECT_NE(a.modality, b.modality);
    for (std::size_t j = 0; j < a.y.size(); ++j) ASSERT_EQ(a.y[j] > 0.0, b.y[j] > 0.0);
  }
}

TEST(Dataset, SampleInvariants) {
  const FederatedData data = build_dataset(testing::tiny_data());
  for (const ClientData& c : data.clients) {
    EXPECT_EQ(c.train_size(), c.horizontal.size() + c.vertical.size());
    for (const auto* set : {&c.horizontal, &c.vertical, &c.test}) {
      for (const SliceSample& s : *set) {
        EXPECT_EQ(s.x.shape(), s.y.shape());
        EXPECT_EQ(s.modality, c.modality);
        EXPECT_LT(s.modality, data.config.num_modalities);
        for (double v : s.x.data()) ASSERT_GE(v, 0.0);
        for (double v : s.y.data()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
      }
    }
    EXPECT_EQ(c.test.size(), data.test_patients.size() * data.config.slices);
  }
}

TEST(Dataset, VolumeMaxIsPerPatient) {
  const FederatedData data = build_dataset(testing::tiny_data());
  const auto& test = data.clients[0].test;
  const std::vector<double> mx = volume_max(test);
  for (std::size_t i = 0; i < test.size(); ++i) {
    double expect = 0.0;
    for (const SliceSample& s : test)
      if (s.patient == test[i].patient)
        for (double v : s.y.data()) expect = std::max(expect, v);
    EXPECT_EQ(mx[i], expect);
  }
}

TEST(DatasetIo, RoundTripIsBitIdentical) {
  const auto dir = testing::scratch_dir("dataset_io");
  const FederatedData data = build_dataset(testing::tiny_data());
  save_dataset(dir, data);
  const FederatedData back = load_dataset(dir);
  EXPECT_EQ(back.partition, data.partition);
  EXPECT_EQ(back.aligned_keys, data.aligned_keys);
  EXPECT_EQ(back.test_patients, data.test_patients);
  EXPECT_EQ(back.config.salt, 0u);
  ASSERT_EQ(back.clients.size(), data.clients.size());
  for (std::size_t k = 0; k < data.clients.size(); ++k) {
    EXPECT_EQ(back.clients[k].mask.grid, data.clients[k].mask.grid);
    for (auto member : {&ClientData::horizontal, &ClientData::vertical, &ClientData::test}) {
      const auto& a = data.clients[k].*member;
      const auto& b = back.clients[k].*member;
      ASSERT_EQ(a.size(), b.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].x, b[i].x);
        EXPECT_EQ(a[i].y, b[i].y);
        EXPECT_EQ(a[i].key(), b[i].key());
        EXPECT_EQ(a[i].mask_id, b[i].mask_id);
      }
    }
  }
}

TEST(DatasetIo, RewriteIsByteIdentical) {
  const auto a = testing::scratch_dir("dataset_a"), b = testing::scratch_dir("dataset_b");
  save_dataset(a, build_dataset(testing::tiny_data()));
  save_dataset(b, build_dataset(testing::tiny_data()));
  std::size_t files = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    EXPECT_EQ(file_bytes(e.path()), file_bytes(b / std::filesystem::relative(e.path(), a))) << e.path();
  }
  EXPECT_GT(files, 10u);
}

TEST(DatasetIo, MissingOrIncompleteInputs) {
  const auto dir = testing::scratch_dir("dataset_missing");
  EXPECT_THROW(load_dataset(dir / "nope"), MissingInputError);
  save_dataset(dir, build_dataset(testing::tiny_data()));
  std::filesystem::remove(sample_path(dir, 1, build_dataset(testing::tiny_data()).test_patients[0], 0, 'x'));
  EXPECT_THROW(load_dataset(dir), Error);
}

TEST(Dataset, ZeroBetaHasNoVerticalData) {
  DataConfig dc = testing::tiny_data();
  dc.beta = 0.0;
  const FederatedData data = build_dataset(dc);
  EXPECT_TRUE(data.aligned_keys.empty());
  for (const ClientData& c : data.clients) EXPECT_TRUE(c.vertical.empty());
}

}  // namespace
}  // namespace fedcrfd
