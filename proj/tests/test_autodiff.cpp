#include <gtest/gtest.h>

#include <cmath>

#include "graph_zoo.hpp"
#include "vlpa/autodiff.hpp"
#include "vlpa/grad_check.hpp"

using namespace vlpa;

namespace {

Tensor t2(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor(Shape{r, c}, std::move(v)); }

}  // namespace

TEST(Autodiff, CosineOfVectorWithItselfIsOne) {
  Tape t;
  Var v = t.constant(Tensor(Shape{4}, {0.3, -1.2, 2.0, 0.5}));
  EXPECT_NEAR(cosine_similarity(v, v).item(), 1.0, 1e-15);
}

TEST(Autodiff, SoftmaxOfZerosIsUniform) {
  Tape t;
  Var s = softmax(t.constant(Tensor(Shape{3}, 0.0)));
  for (double v : s.value().values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Autodiff, MatmulMatchesHandComputedProduct) {
  Tape t;
  Var a = t.constant(t2(2, 3, {1, 2, 3, 4, 5, 6}));
  Var b = t.constant(t2(3, 4, {1, 0, -1, 2, 0, 1, 1, 0, 2, -1, 0, 1}));
  Var c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 4}));
  // row0 = 1*[1,0,-1,2] + 2*[0,1,1,0] + 3*[2,-1,0,1] = [7,-1,1,5]
  // row1 = 4*[1,0,-1,2] + 5*[0,1,1,0] + 6*[2,-1,0,1] = [16,-1,1,14]
  const std::vector<double> want = {7, -1, 1, 5, 16, -1, 1, 14};
  EXPECT_EQ(c.value().data(), want);
}

TEST(Autodiff, SumOfSquaresGradientIsTwiceInput) {
  Tape t;
  Tensor xv(Shape{5}, {1.5, -2.0, 0.0, 3.25, -0.5});
  Var x = t.leaf(xv);
  t.backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * xv[i]);
}

TEST(Autodiff, CosineGradientVanishesAtMaximum) {
  Tensor c(Shape{3}, {0.6, 0.0, 0.8});
  Tape t;
  Var x = t.leaf(c);
  t.backward(cosine_similarity(x, t.constant(c)));
  for (double g : x.grad()) EXPECT_NEAR(g, 0.0, 1e-15);

  // Finite differences agree away from the maximum as well.
  auto rep = grad_check(
      [](Tape&, std::span<const Var> v) { return cosine_similarity(v[0], v[1]); },
      {Tensor(Shape{3}, {0.1, 0.7, -0.4}), c}, 1e-6);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(Autodiff, ShapeMismatchNamesPrimitiveAndShapes) {
  Tape t;
  Var a = t.constant(Tensor(Shape{2, 3}));
  Var b = t.constant(Tensor(Shape{4, 4}));
  try {
    matmul(a, b);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4,4]"), std::string::npos);
  }
  EXPECT_THROW(add(a, b), ConfigError);
  EXPECT_THROW(cosine_similarity(a, b), ConfigError);
}

TEST(Autodiff, UnknownPrimitiveIsConfigError) {
  Tape t;
  Var a = t.constant(Tensor(Shape{2}));
  EXPECT_THROW(forward_op("frobnicate", {a}), ConfigError);
  EXPECT_NO_THROW(forward_op("tanh", {a}));
}

TEST(Autodiff, BackwardRequiresScalarLoss) {
  Tape t;
  Var x = t.leaf(Tensor(Shape{3}, 1.0));
  EXPECT_THROW(t.backward(tanh(x)), UsageError);
}

TEST(Autodiff, SecondBackwardOnSameTapeIsRejected) {
  Tape t;
  Var x = t.leaf(Tensor(Shape{3}, 1.0));
  Var l = sum(x);
  t.backward(l);
  EXPECT_THROW(t.backward(l), UsageError);
}

TEST(Autodiff, LogOfNonPositiveIsNumericError) {
  Tape t;
  EXPECT_THROW(log(t.constant(Tensor(Shape{2}, {1.0, 0.0}))), NumericError);
}

TEST(GradCheck, LinearGraphIsExact) {
  Rng rng(1);
  auto rep = grad_check(
      [](Tape&, std::span<const Var> v) { return sum(add(scale(matmul(v[0], v[1]), 2.5), v[2])); },
      {testkit::random_tensor(rng, {3, 4}), testkit::random_tensor(rng, {4, 2}),
       testkit::random_tensor(rng, {3, 2})},
      1e-10);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(GradCheck, SoftmaxLogGraph) {
  Rng rng(2);
  Tensor w = testkit::random_tensor(rng, {2, 5});
  auto rep = grad_check(
      [w](Tape& t, std::span<const Var> v) { return sum(mul(log(softmax(v[0])), t.constant(w))); },
      {testkit::random_tensor(rng, {2, 5})}, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(GradCheck, BilinearSampleAtInteriorPoints) {
  Rng rng(3);
  Tensor grid(Shape{4, 4, 2});
  for (std::size_t i = 0; i < grid.size(); ++i)
    grid[i] = 1.0 + static_cast<double>(rng.below(5)) + rng.uniform(0.2, 0.8);
  auto rep = grad_check(
      [](Tape&, std::span<const Var> v) { return sum(tanh(bilinear_sample(v[0], v[1]))); },
      {testkit::random_tensor(rng, {3, 8, 8}), grid}, 1e-3);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(GradCheck, RandomFiveOpGraphs) {
  for (std::size_t i = 0; i < testkit::zoo_primitives().size(); ++i) {
    auto z = testkit::make_zoo_graph(i, 99);
    auto rep = grad_check(z.build, z.leaves, z.tolerance);
    EXPECT_TRUE(rep.passed) << z.primitive << " rel err " << rep.max_rel_error;
  }
}

TEST(AutodiffProperties, SoftmaxJacobianRowsSumToZero) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Tape t;
    Var x = t.leaf(testkit::random_tensor(rng, {3, 6}, 3.0));
    Var w = t.constant(testkit::random_tensor(rng, {3, 6}));
    t.backward(sum(mul(softmax(x), w)));
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 6; ++j) s += x.grad()[r * 6 + j];
      EXPECT_NEAR(s, 0.0, 1e-10);
    }
  }
}

TEST(AutodiffProperties, L2NormalizeYieldsUnitNorm) {
  Rng rng(5);
  for (double mag : {1e-11, 1e-6, 1.0, 1e6}) {
    Tape t;
    Var y = l2_normalize(t.constant(testkit::random_tensor(rng, {4, 7}, mag)));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) s += y.value()[r * 7 + j] * y.value()[r * 7 + j];
      EXPECT_NEAR(std::sqrt(s), 1.0, 1e-9) << "magnitude " << mag;
    }
  }
  Tape t;
  Var z = l2_normalize(t.constant(Tensor(Shape{3}, 0.0)));
  EXPECT_TRUE(z.value().all_finite());
}

TEST(AutodiffProperties, DeterministicValuesAndGradients) {
  auto run = [] {
    auto z = testkit::make_zoo_graph(21, 7);
    Tape t;
    std::vector<Var> vars;
    for (auto& l : z.leaves) vars.push_back(t.leaf(l));
    Var loss = z.build(t, vars);
    t.backward(loss);
    std::vector<double> out{loss.item()};
    for (auto& v : vars) out.insert(out.end(), v.grad().begin(), v.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(AutodiffProperties, FiniteOutputsAndGradientsForEveryPrimitive) {
  for (std::size_t i = 0; i < testkit::zoo_primitives().size(); ++i) {
    auto z = testkit::make_zoo_graph(i, 1234);
    Tape t;
    std::vector<Var> vars;
    for (auto& l : z.leaves) vars.push_back(t.leaf(l));
    Var loss = z.build(t, vars);
    t.backward(loss);
    EXPECT_TRUE(std::isfinite(loss.item()));
    for (auto& v : vars) EXPECT_TRUE(v.grad_tensor().all_finite()) << z.primitive;
  }
}

TEST(Autodiff, BilinearSampleIdentityGridReproducesImage) {
  Rng rng(6);
  Tensor img = testkit::random_tensor(rng, {2, 4, 5});
  Tensor grid(Shape{4, 5, 2});
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 5; ++x) {
      grid[(y * 5 + x) * 2] = static_cast<double>(x);
      grid[(y * 5 + x) * 2 + 1] = static_cast<double>(y);
    }
  Tape t;
  Var out = bilinear_sample(t.constant(img), t.constant(grid));
  EXPECT_EQ(out.value().data(), img.data());
}

TEST(Autodiff, BilinearSampleZeroPadsOutside) {
  Tape t;
  Tensor grid(Shape{1, 1, 2}, {-5.0, -5.0});
  Var out = bilinear_sample(t.constant(Tensor(Shape{1, 2, 2}, 1.0)), t.constant(grid));
  EXPECT_EQ(out.value()[0], 0.0);
}
