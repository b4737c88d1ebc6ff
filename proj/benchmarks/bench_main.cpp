#include <benchmark/benchmark.h>

#include <vector>

#include "fedcrfd/autograd.hpp"
#include "fedcrfd/federation.hpp"
#include "fedcrfd/kspace.hpp"
#include "fedcrfd/metrics.hpp"
#include "fedcrfd/rng.hpp"

namespace fedcrfd {
namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto c = static_cast<std::size_t>(state.range(1));
  Parameter w("w", random_tensor({c, c, 3, 3}, 1)), b("b", Tensor({c}));
  const Tensor x = random_tensor({2, c, n, n}, 2);
  for (auto _ : state) {
    Graph g;
    Var y = conv2d(g.constant(x), g.param(w), g.param(b));
    g.backward(sum(y));
    benchmark::DoNotOptimize(w.grad.ptr());
  }
  state.SetItemsProcessed(state.iterations() * 2 * static_cast<std::int64_t>(n * n));
}
BENCHMARK(BM_Conv2dForwardBackward)->Args({32, 8})->Args({64, 8})->Args({64, 16});

void BM_Fft2RoundTrip(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor img = random_tensor({n, n}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(ifft2(fft2(img)));
}
BENCHMARK(BM_Fft2RoundTrip)->Arg(64)->Arg(128)->Arg(256);

void BM_Undersample(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor img = random_tensor({n, n}, 4);
  const UndersampleMask mask = make_mask(MaskKind::kRandom2d, 4.0, n, 0.08, 7);
  for (auto _ : state) benchmark::DoNotOptimize(undersample(img, mask));
}
BENCHMARK(BM_Undersample)->Arg(64)->Arg(128);

void BM_Ssim(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor({n, n}, 5), b = random_tensor({n, n}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(ssim(a, b, 2.0));
}
BENCHMARK(BM_Ssim)->Arg(64)->Arg(128);

// Full client objective on a 2-sample aligned batch, forward and backward.
void BM_LocalObjective(benchmark::State& state) {
  FederationConfig cfg;
  DataConfig dc;
  dc.train_patients = 12;
  dc.test_patients = 2;
  dc.slices = 2;
  dc.beta = 0.2;
  const FederatedData data = build_dataset(dc);
  const std::vector<std::size_t> idx{0, 1};
  const Tensor x = stack_inputs(data.clients[0].vertical, idx);
  const Tensor y = stack_targets(data.clients[0].vertical, idx);
  std::vector<ClientState> clients = make_clients(cfg, data);
  ClassifierParams classifier = ClassifierParams::init(cfg.arch, cfg.seed);
  Tensor partner;
  {
    Graph g;
    partner = encode(g, clients[1].params.invariant_encoder, g.constant(stack_inputs(data.clients[1].vertical, idx)))
                  .latent.value();
  }
  const std::vector<Tensor> others{partner};
  for (auto _ : state) {
    Graph g;
    Var loss = local_objective(g, clients[0].params, classifier, x, y, clients[0].modality, others, cfg);
    g.backward(loss);
    benchmark::DoNotOptimize(loss.value()[0]);
  }
}
BENCHMARK(BM_LocalObjective)->Unit(benchmark::kMillisecond);

void BM_Aggregate(benchmark::State& state) {
  const auto k = static_cast<std::size_t>(state.range(0));
  std::vector<ParamSet> sets(k);
  for (std::size_t i = 0; i < k; ++i) {
    sets[i].add("w", random_tensor({64, 64, 3, 3}, 10 + i));
    sets[i].add("b", random_tensor({64}, 20 + i));
  }
  std::vector<const ParamSet*> ptrs;
  for (const ParamSet& s : sets) ptrs.push_back(&s);
  const std::vector<double> weights(k, 1.0 / static_cast<double>(k));
  for (auto _ : state) benchmark::DoNotOptimize(aggregate(ptrs, weights));
}
BENCHMARK(BM_Aggregate)->Arg(2)->Arg(6);

}  // namespace
}  // namespace fedcrfd

BENCHMARK_MAIN();
