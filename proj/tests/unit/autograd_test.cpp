#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "fedcrfd/autograd.hpp"
#include "fedcrfd/errors.hpp"
#include "fedcrfd/gradcheck.hpp"
#include "support.hpp"

namespace fedcrfd {
namespace {

using testing::Gen;

GradCheckOptions strict() {
  GradCheckOptions o;
  o.tolerance = 1e-5;
  o.samples = 200;
  return o;
}

// Reduces an arbitrary output to a scalar with fixed random weights so every element matters.
Var project(Var v, std::uint64_t seed) {
  Gen gen(seed);
  return dot_const(v, gen.tensor(v.shape()));
}

TEST(Primitives, IdentityConvCopiesInput) {
  Gen gen(1);
  Graph g;
  Tensor x = gen.tensor({2, 3, 5, 4});
  Tensor w({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) w.at(c, c, 0, 0) = 1.0;
  Var y = conv2d(g.input(x), g.constant(w), g.constant(Tensor({3})));
  EXPECT_EQ(y.value(), x);
}

TEST(Primitives, SamePaddingPreservesSpatialDims) {
  Gen gen(2);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t h = gen.size(3, 9), w = gen.size(3, 9), cin = gen.size(1, 3), cout = gen.size(1, 3);
    Graph g;
    Var y = conv2d(g.input(gen.tensor({1, cin, h, w})), g.constant(gen.tensor({cout, cin, 3, 3})),
                   g.constant(gen.tensor({cout})), {1, 1});
    EXPECT_EQ(y.shape(), (Shape{1, cout, h, w}));
  }
}

TEST(Primitives, ConvMatchesDirectSum) {
  Gen gen(3);
  const Tensor x = gen.tensor({2, 2, 6, 5}), w = gen.tensor({3, 2, 3, 3}), b = gen.tensor({3});
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      Graph g;
      const Tensor& y = conv2d(g.input(x), g.constant(w), g.constant(b), {stride, pad}).value();
      for (std::size_t n = 0; n < y.dim(0); ++n)
        for (std::size_t o = 0; o < y.dim(1); ++o)
          for (std::size_t i = 0; i < y.dim(2); ++i)
            for (std::size_t j = 0; j < y.dim(3); ++j) {
              double acc = b[o];
              for (std::size_t c = 0; c < 2; ++c)
                for (std::size_t ki = 0; ki < 3; ++ki)
                  for (std::size_t kj = 0; kj < 3; ++kj) {
                    const auto r = static_cast<long>(i * stride + ki) - static_cast<long>(pad);
                    const auto s = static_cast<long>(j * stride + kj) - static_cast<long>(pad);
                    if (r < 0 || s < 0 || r >= 6 || s >= 5) continue;
                    acc += w.at(o, c, ki, kj) * x.at(n, c, static_cast<std::size_t>(r), static_cast<std::size_t>(s));
                  }
              EXPECT_NEAR(y.at(n, o, i, j), acc, 1e-12);
            }
    }
  }
}

TEST(Primitives, ReluExample) {
  Graph g;
  EXPECT_EQ(relu(g.input(Tensor::from({-1.0, 0.0, 2.0}))).value(), Tensor::from({0.0, 0.0, 2.0}));
}

TEST(Primitives, GlobalAvgPoolIsChannelMean) {
  Gen gen(4);
  Graph g;
  const Tensor x = gen.tensor({1, 8, 16, 16});
  const Tensor& z = global_avg_pool_flatten(g.input(x)).value();
  ASSERT_EQ(z.shape(), (Shape{1, 8}));
  for (std::size_t c = 0; c < 8; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < 256; ++i) s += x[c * 256 + i];
    EXPECT_NEAR(z[c], s / 256.0, 1e-14);
  }
}

TEST(Primitives, PoolAndUpsampleShapes) {
  Graph g;
  Var x = g.input(Tensor({2, 3, 8, 6}, 1.0));
  EXPECT_EQ(avg_pool_2x(x).shape(), (Shape{2, 3, 4, 3}));
  EXPECT_EQ(upsample_2x(x).shape(), (Shape{2, 3, 16, 12}));
  EXPECT_THROW(avg_pool_2x(g.input(Tensor({1, 1, 3, 4}))), ShapeError);
}

TEST(Primitives, ParseNames) {
  for (Primitive p : {Primitive::kConv2d, Primitive::kRelu, Primitive::kLinear, Primitive::kAdd, Primitive::kAvgPool2x,
                      Primitive::kUpsample2x, Primitive::kGlobalAvgPoolFlatten}) {
    EXPECT_EQ(parse_primitive(primitive_name(p)), p);
  }
  EXPECT_THROW(parse_primitive("softmax"), ConfigError);
}

TEST(Losses, L1Examples) {
  Graph g;
  Var a = g.input(Tensor::from({1.0, 2.0}));
  EXPECT_DOUBLE_EQ(l1_loss(a, a).value()[0], 0.0);
  EXPECT_DOUBLE_EQ(l1_loss(a, g.constant(Tensor::from({3.0, 5.0}))).value()[0], 2.5);
}

TEST(Losses, L1SubgradientIsHalfSign) {
  ParamSet ps;
  Parameter& p = ps.add("a", Tensor::from({2.0, -3.0}));
  Graph g;
  Var loss = l1_loss(g.param(p), g.constant(Tensor::from({0.0, 0.0})));
  g.backward(loss);
  EXPECT_EQ(p.grad, Tensor::from({0.5, -0.5}));
}

TEST(Losses, CrossEntropyExamples) {
  Graph g;
  Tensor one_hot({1, 2});
  one_hot[0] = 1.0;
  EXPECT_NEAR(softmax_cross_entropy(g.input(Tensor({1, 2}, std::vector<double>{0, 0})), one_hot).value()[0],
              std::log(2.0), 1e-12);
  EXPECT_LT(softmax_cross_entropy(g.input(Tensor({1, 2}, std::vector<double>{20, -20})), one_hot).value()[0], 1e-8);
}

TEST(Losses, CrossEntropyGradientIsSoftmaxMinusOneHotOverN) {
  Gen gen(5);
  ParamSet ps;
  Parameter& p = ps.add("logits", gen.tensor({4, 3}, -3, 3));
  Tensor one_hot({4, 3});
  for (std::size_t n = 0; n < 4; ++n) one_hot[n * 3 + n % 3] = 1.0;
  Graph g;
  g.backward(softmax_cross_entropy(g.param(p), one_hot));
  const Tensor sm = softmax_rows(p.value);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(p.grad[i], (sm[i] - one_hot[i]) / 4.0, 1e-15);
}

TEST(Backward, SumGivesOnes) {
  ParamSet ps;
  Parameter& p = ps.add("p", Tensor({3, 2}, 0.7));
  Graph g;
  g.backward(sum(g.param(p)));
  EXPECT_EQ(p.grad, Tensor({3, 2}, 1.0));
}

TEST(Backward, ParameterOffGraphKeepsZeroGradient) {
  ParamSet ps;
  Parameter& on = ps.add("on", Tensor({2}, 1.0));
  Parameter& off = ps.add("off", Tensor({2}, 1.0));
  Graph g;
  g.backward(sum(g.param(on)));
  EXPECT_EQ(off.grad.max_abs(), 0.0);
}

TEST(Backward, RejectsNonScalarRoot) {
  Graph g;
  Var x = g.input(Tensor({2}, 1.0));
  EXPECT_THROW(g.backward(x), ShapeError);
}

// Central differences on every primitive and loss, with random shapes and values.
struct Case {
  const char* name;
  std::function<Var(Graph&, std::vector<Parameter>&)> build;
  std::vector<Shape> shapes;
};

TEST(GradientProperty, EveryOpMatchesFiniteDifferences) {
  const std::vector<Case> cases = {
      {"conv_same", [](Graph& g, auto& p) { return conv2d(g.param(p[0]), g.param(p[1]), g.param(p[2]), {1, 1}); },
       {{2, 2, 5, 6}, {3, 2, 3, 3}, {3}}},
      {"conv_stride2", [](Graph& g, auto& p) { return conv2d(g.param(p[0]), g.param(p[1]), g.param(p[2]), {2, 0}); },
       {{1, 2, 7, 6}, {2, 2, 3, 3}, {2}}},
      {"relu", [](Graph& g, auto& p) { return relu(g.param(p[0])); }, {{3, 7}}},
      {"linear", [](Graph& g, auto& p) { return linear(g.param(p[0]), g.param(p[1]), g.param(p[2])); },
       {{3, 5}, {4, 5}, {4}}},
      {"add", [](Graph& g, auto& p) { return add(g.param(p[0]), g.param(p[1])); }, {{2, 3}, {2, 3}}},
      {"avg_pool", [](Graph& g, auto& p) { return avg_pool_2x(g.param(p[0])); }, {{2, 2, 6, 4}}},
      {"upsample", [](Graph& g, auto& p) { return upsample_2x(g.param(p[0])); }, {{1, 2, 3, 2}}},
      {"gap", [](Graph& g, auto& p) { return global_avg_pool_flatten(g.param(p[0])); }, {{2, 3, 4, 4}}},
      {"l1", [](Graph& g, auto& p) { return l1_loss(g.param(p[0]), g.param(p[1])); }, {{4, 3}, {4, 3}}},
      {"ce",
       [](Graph& g, auto& p) {
         Tensor oh({3, 4});
         oh[1] = oh[6] = oh[11] = 1.0;
         return softmax_cross_entropy(g.param(p[0]), oh);
       },
       {{3, 4}}},
      {"dist_l1", [](Graph& g, auto& p) { return row_distance(g.param(p[0]), g.param(p[1]), Distance::kL1); },
       {{3, 5}, {3, 5}}},
      {"dist_l2", [](Graph& g, auto& p) { return row_distance(g.param(p[0]), g.param(p[1]), Distance::kL2); },
       {{3, 5}, {3, 5}}},
      {"dist_cos", [](Graph& g, auto& p) { return row_distance(g.param(p[0]), g.param(p[1]), Distance::kCosine); },
       {{3, 5}, {3, 5}}},
      {"clamp", [](Graph& g, auto& p) { return clamp_max(g.param(p[0]), 0.2); }, {{4, 4}}},
      {"scale_sub_mean", [](Graph& g, auto& p) { return mean(scale(sub(g.param(p[0]), g.param(p[1])), -1.7)); },
       {{2, 5}, {2, 5}}},
  };
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (const Case& c : cases) {
      Gen gen(seed * 101 + 7);
      std::vector<Parameter> params;
      for (std::size_t i = 0; i < c.shapes.size(); ++i) params.emplace_back("p" + std::to_string(i), gen.tensor(c.shapes[i]));
      std::vector<Parameter*> ptrs;
      for (Parameter& p : params) ptrs.push_back(&p);
      const auto closure = [&](Graph& g) {
        Var out = c.build(g, params);
        return out.value().size() == 1 ? out : project(out, seed);
      };
      const GradCheckReport r = finite_diff_check(closure, ptrs, strict());
      EXPECT_TRUE(r.passed) << c.name << " seed " << seed << ": " << r.notes << " max " << r.max_rel_error;
    }
  }
}

TEST(GradientProperty, BackwardIsLinear) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Gen gen(seed);
    const double alpha = gen.real(-2, 2), beta = gen.real(-2, 2);
    ParamSet ps;
    Parameter& w = ps.add("w", gen.tensor({3, 2, 3, 3}));
    const Tensor x = gen.tensor({2, 2, 6, 6});
    const Tensor y = gen.tensor({2, 3, 6, 6});
    auto l1 = [&](Graph& g) { return l1_loss(relu(conv2d(g.input(x), g.param(w), g.constant(Tensor({3})), {1, 1})), g.constant(y)); };
    auto l2 = [&](Graph& g) { return project(conv2d(g.input(x), g.param(w), g.constant(Tensor({3})), {1, 1}), seed); };
    auto grad_of = [&](auto f) {
      w.zero_grad();
      Graph g;
      g.backward(f(g));
      return w.grad;
    };
    const Tensor g1 = grad_of(l1), g2 = grad_of(l2);
    const Tensor gc = grad_of([&](Graph& g) { return add(scale(l1(g), alpha), scale(l2(g), beta)); });
    for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], alpha * g1[i] + beta * g2[i], 1e-12);
  }
}

TEST(GradientProperty, ForwardIsDeterministic) {
  Gen gen(9);
  const Tensor x = gen.tensor({2, 3, 8, 8}), w = gen.tensor({4, 3, 3, 3});
  Graph a, b;
  const Tensor ya = relu(conv2d(a.input(x), a.constant(w), a.constant(Tensor({4})), {1, 1})).value();
  const Tensor yb = relu(conv2d(b.input(x), b.constant(w), b.constant(Tensor({4})), {1, 1})).value();
  EXPECT_EQ(ya, yb);
}

TEST(GradCheck, QuadraticIsExact) {
  ParamSet ps;
  Gen gen(12);
  Parameter& p = ps.add("p", gen.tensor({1, 10}));
  auto ptrs = ps.pointers();
  // |p|^2 as a 1x1 linear layer whose input and weight are both p.
  const auto closure = [&](Graph& g) {
    Var v = g.param(p);
    return linear(v, v, g.constant(Tensor({1})));
  };
  const GradCheckReport r = finite_diff_check(closure, ptrs, strict());
  EXPECT_TRUE(r.passed) << r.notes;
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, ExcludesReluKinks) {
  ParamSet ps;
  Parameter& p = ps.add("p", Tensor::from({1e-8, -1e-8, 0.5, -0.5}));
  auto ptrs = ps.pointers();
  const GradCheckReport r = finite_diff_check([&](Graph& g) { return sum(relu(g.param(p))); }, ptrs, strict());
  EXPECT_EQ(r.excluded, 2u);
  EXPECT_EQ(r.checked, 2u);
  EXPECT_TRUE(r.passed);
  EXPECT_NE(r.notes.find("excluded 2"), std::string::npos);
}

}  // namespace
}  // namespace fedcrfd
