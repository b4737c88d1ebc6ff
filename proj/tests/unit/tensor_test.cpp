#include <gtest/gtest.h>

#include <cstdint>

#include <cmath>
#include <sstream>

#include "fedcrfd/errors.hpp"
#include "fedcrfd/optim.hpp"
#include "fedcrfd/rng.hpp"
#include "fedcrfd/tensor.hpp"
#include "fedcrfd/tensor_io.hpp"
#include "support.hpp"

namespace fedcrfd {
namespace {

using testing::Gen;

TEST(Tensor, ShapeAndFill) {
  Tensor t({2, 3, 4, 5}, 1.5);
  EXPECT_EQ(t.size(), 120u);
  EXPECT_EQ(t.rank(), 4u);
  EXPECT_DOUBLE_EQ(t.sum(), 180.0);
  t.at(1, 2, 3, 4) = -7.0;
  EXPECT_DOUBLE_EQ(t[119], -7.0);
  EXPECT_DOUBLE_EQ(t.max_abs(), 7.0);
}

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor({1, 2, 3, 4, 5}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  Tensor a({2, 2});
  EXPECT_THROW(a.reshaped({3}), ShapeError);
  Tensor b({4});
  EXPECT_THROW(a += b, ShapeError);
}

TEST(Tensor, StorageIsCacheLineAligned) {
  for (std::size_t n : {1u, 3u, 17u, 1000u}) {
    const Tensor t({n}, 1.0);
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(t.ptr()) % 64, 0u);
    const Tensor r = t.reshaped({1, n});
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(r.ptr()) % 64, 0u);
  }
}

TEST(Tensor, FiniteCheck) {
  Tensor t = Tensor::from({1.0, 2.0});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::nan("");
  EXPECT_FALSE(t.all_finite());
}

TEST(TensorIo, RoundTripIsBitExact) {
  Gen gen(3);
  for (int trial = 0; trial < 20; ++trial) {
    Shape s;
    const std::size_t rank = gen.size(1, 4);
    for (std::size_t i = 0; i < rank; ++i) s.push_back(gen.size(1, 5));
    Tensor t = gen.tensor(s, -1e6, 1e6);
    std::stringstream buf;
    write_tensor(buf, t);
    EXPECT_EQ(buf.str().size(), encoded_size(t));
    EXPECT_EQ(read_tensor(buf), t);
  }
}

TEST(TensorIo, RejectsCorruptHeader) {
  std::stringstream buf("XXXX garbage");
  EXPECT_THROW(read_tensor(buf), IoError);
}

TEST(Rng, StreamsAreDeterministicAndDistinct) {
  Rng a(derive_seed(7, "x")), b(derive_seed(7, "x")), c(derive_seed(7, "y"));
  for (int i = 0; i < 10; ++i) {
    const auto va = a.next_u64();
    EXPECT_EQ(va, b.next_u64());
    EXPECT_NE(va, c.next_u64());
  }
  EXPECT_NE(derive_seed(1, {2, 3}), derive_seed(1, {3, 2}));
}

TEST(Rng, BelowStaysInRange) {
  Rng r(11);
  for (std::uint64_t n : {1ull, 2ull, 7ull, 1000ull}) {
    for (int i = 0; i < 200; ++i) EXPECT_LT(r.below(n), n);
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // Bias-corrected first step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
  for (double g : {3.0, -0.25, 1e-3}) {
    ParamSet ps;
    Parameter& p = ps.add("w", Tensor::from({1.0}));
    p.grad[0] = g;
    adam_step(ps, {1e-4, 0.9, 0.999, 1e-8});
    const double expected = 1.0 - 1e-4 * g / (std::abs(g) + 1e-8);
    EXPECT_NEAR(p.value[0], expected, 1e-15);
    EXPECT_EQ(p.step, 1);
  }
}

TEST(Adam, ConstantGradientMovesMonotonically) {
  ParamSet ps;
  Parameter& p = ps.add("w", Tensor::from({0.0, 0.0}));
  double prev0 = 0.0, prev1 = 0.0;
  for (int i = 0; i < 50; ++i) {
    p.grad[0] = 2.0;
    p.grad[1] = -0.5;
    adam_step(ps, {});
    EXPECT_LT(p.value[0], prev0);
    EXPECT_GT(p.value[1], prev1);
    prev0 = p.value[0];
    prev1 = p.value[1];
  }
}

TEST(Adam, ZeroGradientLeavesParameterAndStateUntouched) {
  ParamSet ps;
  Parameter& p = ps.add("w", Tensor::from({0.5, -2.0}));
  adam_step(ps, {});
  EXPECT_EQ(p.value, Tensor::from({0.5, -2.0}));
  EXPECT_EQ(p.step, 0);
  EXPECT_EQ(p.first_moment.max_abs(), 0.0);
}

TEST(ParamSet, LookupAndDuplicates) {
  ParamSet ps;
  ps.add("a", Tensor({2}));
  EXPECT_THROW(ps.add("a", Tensor({2})), ConfigError);
  EXPECT_EQ(ps.find("b"), nullptr);
  EXPECT_EQ(ps.get("a").numel(), 2u);
  EXPECT_THROW(ps.get("b"), ConfigError);
}

}  // namespace
}  // namespace fedcrfd
