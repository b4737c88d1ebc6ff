#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "fedcrfd/baselines.hpp"
#include "fedcrfd/errors.hpp"
#include "fedcrfd/federation.hpp"
#include "support.hpp"

namespace fedcrfd {
namespace {

using testing::Gen;

std::string strip_prefix(const std::string& name) { return name.substr(name.find('.')); }

double max_param_diff(const ParamSet& a, const ParamSet& b) {
  double worst = 0.0;
  std::size_t matched = 0;
  for (const Parameter& p : a) {
    for (const Parameter& q : b) {
      if (strip_prefix(p.name) != strip_prefix(q.name) || p.name.substr(0, 2) != q.name.substr(0, 2)) continue;
      worst = std::max(worst, max_abs_diff(p.value, q.value));
      ++matched;
    }
  }
  EXPECT_EQ(matched, a.size());
  return worst;
}

ParamSet merged(const PlainModel& m) {
  ParamSet out;
  for (const Parameter& p : m.encoder) out.add("E_I" + strip_prefix(p.name), p.value);
  for (const Parameter& p : m.decoder) out.add(p.name, p.value);
  return out;
}

std::size_t batches(std::size_t n, std::size_t bs) { return (n + bs - 1) / bs; }

TEST(Weights, ProportionalToSampleCounts) {
  const std::vector<std::size_t> counts{10, 30};
  EXPECT_EQ(compute_weights(counts), (std::vector<double>{0.25, 0.75}));
  const std::vector<std::size_t> one{7};
  EXPECT_EQ(compute_weights(one), std::vector<double>{1.0});
  const std::vector<std::size_t> zero{0, 0};
  EXPECT_THROW(compute_weights(zero), Error);
}

TEST(WeightsProperty, SumToOneAndPreserveOrder) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Gen gen(seed);
    std::vector<std::size_t> counts(gen.size(1, 8));
    for (auto& c : counts) c = gen.size(1, 1000);
    const auto w = compute_weights(counts);
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
    for (std::size_t i = 0; i < w.size(); ++i)
      for (std::size_t j = 0; j < w.size(); ++j)
        if (counts[i] < counts[j]) EXPECT_LT(w[i], w[j]);
  }
}

TEST(Aggregate, WeightedAverageExample) {
  ParamSet a, b;
  a.add("w", Tensor::from({1.0, 2.0}));
  b.add("w", Tensor::from({3.0, 6.0}));
  const std::vector<const ParamSet*> locals{&a, &b};
  const std::vector<double> w{0.25, 0.75};
  const ParamSet out = aggregate(locals, w);
  EXPECT_DOUBLE_EQ(out.get("w").value[0], 2.5);
  EXPECT_DOUBLE_EQ(out.get("w").value[1], 5.0);
}

TEST(AggregateProperty, IdenticalModelsAreAFixedPoint) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Gen gen(seed);
    ParamSet p;
    p.add("a", gen.tensor({3, 4}));
    p.add("b", gen.tensor({5}));
    const std::size_t k = gen.size(1, 5);
    std::vector<const ParamSet*> locals(k, &p);
    std::vector<std::size_t> counts(k);
    for (auto& c : counts) c = gen.size(1, 50);
    const ParamSet out = aggregate(locals, compute_weights(counts));
    EXPECT_LT(max_abs_diff(out.get("a").value, p.get("a").value), 1e-12);
    EXPECT_LT(max_abs_diff(out.get("b").value, p.get("b").value), 1e-12);
    if (k == 1) EXPECT_EQ(out.get("a").value, p.get("a").value);
  }
}

TEST(Aggregate, RejectsMismatchedModels) {
  ParamSet a, b, c;
  a.add("w", Tensor({2}));
  b.add("v", Tensor({2}));
  c.add("w", Tensor({3}));
  const std::vector<double> w{0.5, 0.5};
  const std::vector<const ParamSet*> names{&a, &b}, shapes{&a, &c};
  EXPECT_THROW(aggregate(names, w), ProtocolError);
  EXPECT_THROW(aggregate(shapes, w), ProtocolError);
}

TEST(CrossGradients, IdenticalLatentsGiveZero) {
  Gen gen(3);
  const Tensor z = gen.tensor({4, 6});
  const std::vector<Tensor> latents{z, z, z};
  for (Distance d : {Distance::kL1, Distance::kL2}) {
    for (const auto& [loss, grad] : cross_gradients(latents, d, false)) {
      EXPECT_EQ(loss, 0.0);
      EXPECT_EQ(grad.max_abs(), 0.0);
    }
  }
}

TEST(CrossGradients, TwoClientL1Example) {
  const std::vector<Tensor> latents{Tensor({1, 2}, {1.0, 2.0}), Tensor({1, 2}, {3.0, 0.0})};
  const auto out = cross_gradients(latents, Distance::kL1, false);
  EXPECT_DOUBLE_EQ(out[0].first, 2.0);
  EXPECT_DOUBLE_EQ(out[1].first, 2.0);
  EXPECT_EQ(out[0].second, Tensor({1, 2}, {-0.5, 0.5}));
  EXPECT_EQ(out[1].second, Tensor({1, 2}, {0.5, -0.5}));
  // The joint form also differentiates the other client's term, doubling the gradient.
  const auto joint = cross_gradients(latents, Distance::kL1, true);
  EXPECT_EQ(joint[0].second, Tensor({1, 2}, {-1.0, 1.0}));
}

TEST(CrossGradients, SingleClientHasNoPartner) {
  const std::vector<Tensor> latents{Tensor({2, 3}, 1.0)};
  const auto out = cross_gradients(latents, Distance::kL1, false);
  EXPECT_EQ(out[0].first, 0.0);
  EXPECT_EQ(out[0].second.max_abs(), 0.0);
}

TEST(CrossGradientsProperty, LossIsZeroExactlyWhenLatentsAgree) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Gen gen(seed);
    const std::size_t k = gen.size(2, 4), n = gen.size(1, 4), d = gen.size(1, 8);
    std::vector<Tensor> latents(k, gen.tensor({n, d}));
    EXPECT_EQ(cross_gradients(latents, Distance::kL1, false)[0].first, 0.0);
    latents[gen.size(0, k - 1)][gen.size(0, n * d - 1)] += gen.real(0.01, 1.0);
    for (const auto& [loss, grad] : cross_gradients(latents, Distance::kL1, false)) {
      EXPECT_GT(loss, 0.0);
      EXPECT_GT(grad.max_abs(), 0.0);
    }
  }
}

TEST(Batching, CoversEveryIndexOnce) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Gen gen(seed);
    const std::size_t n = gen.size(0, 50), bs = gen.size(1, 9);
    const auto hb = horizontal_batches(n, bs, seed, 1, 0, 2);
    EXPECT_EQ(hb.size(), batches(n, bs));
    std::vector<std::size_t> all;
    for (const auto& b : hb) {
      EXPECT_LE(b.size(), bs);
      all.insert(all.end(), b.begin(), b.end());
    }
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> want(n);
    std::iota(want.begin(), want.end(), 0);
    EXPECT_EQ(all, want);
    EXPECT_EQ(vertical_batches(n, bs, seed, 3, 1), vertical_batches(n, bs, seed, 3, 1));
  }
}

class TinyFederation : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { data_ = new FederatedData(build_dataset(testing::tiny_data())); }
  static void TearDownTestSuite() { delete data_; }
  static const FederatedData& data() { return *data_; }
  static FederationConfig config() {
    FederationConfig f = testing::tiny_federation();
    f.arch.num_modalities = data().config.num_modalities;
    return f;
  }

 private:
  static FederatedData* data_;
};
FederatedData* TinyFederation::data_ = nullptr;

TEST_F(TinyFederation, ZeroMuWithoutFusionReproducesFedAvg) {
  FederationConfig f = config();
  f.mu1 = f.mu2 = f.mu3 = 0.0;
  f.use_fusion = false;
  const TrainingResult ours = run_training(f, data());
  const BaselineResult avg = run_baseline(Method::kFedAvg, f, data());
  EXPECT_LT(max_param_diff(ours.global, merged(avg.models[0])), 1e-12);
}

TEST_F(TinyFederation, SingleClientFedAvgIsCentralized) {
  const FederatedData one = build_dataset(testing::tiny_single_client());
  FederationConfig f = config();
  const BaselineResult avg = run_baseline(Method::kFedAvg, f, one);
  const BaselineResult central = run_baseline(Method::kCentralized, f, one);
  EXPECT_LT(max_param_diff(merged(avg.models[0]), merged(central.models[0])), 1e-12);
}

TEST_F(TinyFederation, MessageCountsFollowTheSchedule) {
  const FederationConfig f = config();
  const TrainingResult r = run_training(f, data());
  const std::size_t K = data().clients.size();
  const std::size_t vb = batches(data().aligned_keys.size(), f.batch_size);
  std::size_t steps = 0;
  for (const ClientData& c : data().clients) steps += batches(c.horizontal.size(), f.batch_size) + vb;
  const std::size_t T = f.rounds * f.local_epochs;
  EXPECT_EQ(r.messages.model_broadcasts, f.rounds * K);
  EXPECT_EQ(r.messages.model_uploads, f.rounds * K);
  EXPECT_EQ(r.messages.aux_uploads, T * steps);
  EXPECT_EQ(r.messages.aux_returns, T * steps);
  EXPECT_EQ(r.messages.cross_uploads, T * vb * K);
  EXPECT_EQ(r.messages.cross_returns, T * vb * K);
  EXPECT_EQ(r.log.size(), f.rounds * K);
}

TEST_F(TinyFederation, WithoutCrossNoLatentsAreExchanged) {
  FederationConfig f = config();
  f.enable_cross = false;
  f.rounds = 1;
  const TrainingResult r = run_training(f, data());
  EXPECT_EQ(r.messages.cross_uploads, 0u);
  for (const RoundLogRecord& rec : r.log) EXPECT_EQ(rec.l_cross, 0.0);
}

TEST_F(TinyFederation, ZeroRoundsLeavesTheInitialization) {
  FederationConfig f = config();
  f.rounds = 0;
  const TrainingResult r = run_training(f, data());
  const ModelParams init = ModelParams::init(f.arch, f.seed, 0);
  ParamSet expected;
  for (const Parameter& p : init.invariant_encoder) expected.add(p.name, p.value);
  for (const Parameter& p : init.decoder) expected.add(p.name, p.value);
  EXPECT_EQ(max_param_diff(r.global, expected), 0.0);
  EXPECT_EQ(r.messages.total(), 0u);
  EXPECT_TRUE(r.log.empty());
}

TEST_F(TinyFederation, TrainingIsDeterministic) {
  FederationConfig f = config();
  f.rounds = 1;
  const TrainingResult a = run_training(f, data()), b = run_training(f, data());
  EXPECT_EQ(max_param_diff(a.global, b.global), 0.0);
  EXPECT_EQ(a.log, b.log);
  f.seed = 1;
  const TrainingResult c = run_training(f, data());
  EXPECT_GT(max_param_diff(a.global, c.global), 0.0);
}

TEST_F(TinyFederation, ConcurrentFollowsTheSameProtocol) {
  // Classifier updates land in arrival order, so concurrent runs agree closely but not bitwise.
  FederationConfig f = config();
  f.rounds = 1;
  const TrainingResult seq = run_training(f, data());
  f.mode = ExecutionMode::kConcurrent;
  const TrainingResult conc = run_training(f, data());
  EXPECT_LT(max_param_diff(seq.global, conc.global), 1e-4);
  for (std::size_t k = 0; k < seq.specific.size(); ++k)
    EXPECT_LT(max_param_diff(seq.specific[k], conc.specific[k]), 1e-3);
  ASSERT_EQ(seq.log.size(), conc.log.size());
  for (std::size_t i = 0; i < seq.log.size(); ++i) EXPECT_NEAR(seq.log[i].l_recon, conc.log[i].l_recon, 1e-4);
  EXPECT_EQ(seq.messages, conc.messages);
}

TEST_F(TinyFederation, LossesAreFiniteAndLogged) {
  const TrainingResult r = run_training(config(), data());
  for (const RoundLogRecord& rec : r.log) {
    EXPECT_TRUE(std::isfinite(rec.l_recon));
    EXPECT_GT(rec.l_recon, 0.0);
    EXPECT_LE(rec.l_intra, 0.0);
    EXPECT_GE(rec.l_cross, 0.0);
    EXPECT_GE(rec.aux_accuracy, 0.0);
    EXPECT_LE(rec.aux_accuracy, 1.0);
  }
  const std::string line = to_jsonl(r.log[0]);
  EXPECT_NE(line.find("\"l_recon\""), std::string::npos);
  EXPECT_EQ(line.front(), '{');
  EXPECT_EQ(line.find('\n'), std::string::npos);
}

TEST_F(TinyFederation, SoloKeepsOneModelPerClient) {
  FederationConfig f = config();
  f.rounds = 1;
  const BaselineResult solo = run_baseline(Method::kSolo, f, data());
  EXPECT_EQ(solo.models.size(), data().clients.size());
  EXPECT_EQ(solo.messages.total(), 0u);
  EXPECT_GT(max_param_diff(merged(solo.models[0]), merged(solo.models[1])), 0.0);
}

TEST(Methods, ParseNames) {
  for (Method m : {Method::kFedCrfd, Method::kFedAvg, Method::kSolo, Method::kCentralized})
    EXPECT_EQ(parse_method(method_name(m)), m);
  EXPECT_THROW(parse_method("fedprox"), ConfigError);
  EXPECT_EQ(parse_execution_mode("concurrent"), ExecutionMode::kConcurrent);
}

TEST(FederationConfig, Validation) {
  FederationConfig f;
  f.mu2 = -1.0;
  EXPECT_THROW(f.validate(), ConfigError);
  f = FederationConfig{};
  f.batch_size = 0;
  EXPECT_THROW(f.validate(), ConfigError);
  f = FederationConfig{};
  f.learning_rate = 0.0;
  EXPECT_THROW(f.validate(), ConfigError);
}

}  // namespace
}  // namespace fedcrfd
