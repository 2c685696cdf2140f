#include <gtest/gtest.h>

#include <cmath>

#include "dscl/autograd.hpp"
#include "dscl/gradcheck.hpp"
#include "dscl/rng.hpp"

using namespace dscl;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

}  // namespace

TEST(Autograd, MatmulIdentity) {
  Var eye(Tensor({2, 2}, {1, 0, 0, 1}));
  Var a(Tensor({2, 2}, {1.5, -2, 3, 4}));
  EXPECT_EQ(matmul(eye, a).value(), a.value());
}

TEST(Autograd, ReluDefinition) {
  Var x(Tensor({2}, {-1, 2}));
  EXPECT_EQ(relu(x).value(), Tensor({2}, {0, 2}));
}

TEST(Autograd, SoftmaxSymmetric) {
  Var x(Tensor({2}, {0, 0}));
  const Tensor p = softmax(x).value();
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Autograd, SumGradientIsOnes) {
  Var x = Var::parameter(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  sum(x).backward();
  EXPECT_EQ(x.grad(), Tensor({2, 3}, 1.0));
}

TEST(Autograd, SelfDotGradientIsTwiceInput) {
  Var x = Var::parameter(Tensor({3}, {1, -2, 0.5}));
  dot(x, x).backward();
  EXPECT_EQ(x.grad(), Tensor({3}, {2, -4, 1}));
}

TEST(Autograd, RepeatedBackwardAccumulates) {
  Var x = Var::parameter(Tensor({2}, {1, 2}));
  Var root = sum(mul(x, x));
  root.backward();
  root.backward();
  EXPECT_EQ(x.grad(), Tensor({2}, {4, 8}));
  x.zero_grad();
  root.backward();
  EXPECT_EQ(x.grad(), Tensor({2}, {2, 4}));
}

TEST(Autograd, BackwardOnNonScalarRootIsContractError) {
  Var x = Var::parameter(Tensor({2}, {1, 2}));
  EXPECT_THROW(relu(x).backward(), ContractError);
}

TEST(Autograd, ShapeMismatchNamesBothShapes) {
  Var a(Tensor({2, 3}));
  Var b(Tensor({2, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected StructuralError";
  } catch (const StructuralError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[2x2]"), std::string::npos);
  }
  EXPECT_THROW(add(a, b), StructuralError);
}

TEST(Autograd, SharedSubexpressionVisitedOnce) {
  Var x = Var::parameter(Tensor({2}, {1, 3}));
  Var y = mul(x, x);
  sum(add(y, y)).backward();
  EXPECT_EQ(x.grad(), Tensor({2}, {4, 12}));
}

TEST(L2Normalize, ThreeFourFive) {
  const Tensor y = l2_normalize(Var(Tensor({2}, {3, 4}))).value();
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 0.8, 1e-15);
}

TEST(L2Normalize, UnitVectorIsFixed) {
  Rng rng(3);
  Tensor v = random_tensor({7}, rng);
  const double n = l2_norm(v.values());
  for (double& x : v.values()) x /= n;
  const Tensor y = l2_normalize(Var(v)).value();
  EXPECT_LT(max_abs_diff(y, v), 1e-15);
  EXPECT_NEAR(l2_norm(y.values()), 1.0, 1e-9);
}

TEST(L2Normalize, NearZeroNormRaises) {
  EXPECT_THROW(l2_normalize(Var(Tensor({3}, {1e-14, 0, 0})), 1e-12), DegenerateInputError);
}

TEST(L2Normalize, ProbeGradientMatchesFiniteDifferences) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Var a(random_tensor({5}, rng));
    Var v = Var::parameter(random_tensor({5}, rng));
    auto res = finite_difference_check([&] { return dot(a, l2_normalize(v)); }, {v}, 1e-6);
    EXPECT_LT(res.max_relative_error, 1e-5);
  }
}

TEST(L2Normalize, GradientIsTangentToOutput) {
  Rng rng(5);
  Var v = Var::parameter(random_tensor({6}, rng));
  Var a(random_tensor({6}, rng));
  dot(a, l2_normalize(v)).backward();
  EXPECT_NEAR(dscl::dot(v.grad().values(), v.value().values()), 0.0, 1e-12);
}

TEST(FiniteDifference, QuadraticIsExact) {
  Var x = Var::parameter(Tensor({1}, {3.0}));
  auto res = finite_difference_check([&] { return sum(mul(x, x)); }, {x});
  EXPECT_NEAR(res.analytic, 6.0, 1e-12);
  EXPECT_NEAR(res.numeric, 6.0, 1e-8);
  EXPECT_LT(res.max_relative_error, 1e-8);
}

TEST(FiniteDifference, SoftmaxSumHasZeroGradient) {
  Rng rng(2);
  Var x = Var::parameter(random_tensor({6}, rng));
  auto res = finite_difference_check([&] { return sum(softmax(x)); }, {x});
  EXPECT_LT(res.max_relative_error, 1e-9);
  for (double g : x.grad().values()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(FiniteDifference, NonFiniteEvaluationIsOracleFailure) {
  Var x = Var::parameter(Tensor({1}, {0.0}));
  EXPECT_THROW(finite_difference_check([&] { return sum(log(x)); }, {x}), NumericalError);
}

TEST(Softmax, NormalizedForBoundedLogits) {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor logits({3, 17});
    for (double& v : logits.values()) v = rng.uniform(-50.0, 50.0);
    const Tensor p = softmax(Var(logits)).value();
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (double v : p.row(r)) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Softmax, TemperatureScalesLogits) {
  const Tensor a = softmax(Var(Tensor({3}, {1.4, 0.7, 0})), 0.07).value();
  const Tensor b = softmax(Var(Tensor({3}, {20, 10, 0}))).value();
  EXPECT_LT(max_abs_diff(a, b), 1e-15);
  const Tensor la = log_softmax(Var(Tensor({3}, {1.4, 0.7, 0})), 0.07).value();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(std::exp(la[i]), b[i], 1e-12);
  EXPECT_THROW(softmax(Var(Tensor({2})), 0.0), ConfigError);
}

TEST(Conv2d, MatchesDirectConvolution) {
  Rng rng(4);
  Var x(random_tensor({2, 3, 5, 6}, rng));
  Var w(random_tensor({4, 3, 3, 3}, rng));
  Var b(random_tensor({4}, rng));
  const Tensor y = conv2d(x, w, b, {2, 1}).value();
  ASSERT_EQ(y.shape(), (Shape{2, 4, 3, 3}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t oh = 0; oh < 3; ++oh)
        for (std::size_t ow = 0; ow < 3; ++ow) {
          double s = b.value()[o];
          for (std::size_t c = 0; c < 3; ++c)
            for (int ki = 0; ki < 3; ++ki)
              for (int kj = 0; kj < 3; ++kj) {
                const int ih = static_cast<int>(oh) * 2 + ki - 1;
                const int iw = static_cast<int>(ow) * 2 + kj - 1;
                if (ih < 0 || ih >= 5 || iw < 0 || iw >= 6) continue;
                s += w.value()[((o * 3 + c) * 3 + ki) * 3 + kj] * x.value()[((n * 3 + c) * 5 + ih) * 6 + iw];
              }
          EXPECT_NEAR(y[((n * 4 + o) * 3 + oh) * 3 + ow], s, 1e-12);
        }
}

TEST(RoiPool, FullBoxIsBitIdenticalToMeanPool) {
  Rng rng(8);
  Var u(random_tensor({3, 5, 4, 4}, rng));
  const std::vector<Roi> rois{{0, PatchBox::full()}, {1, PatchBox::full()}, {2, PatchBox::full()}};
  EXPECT_EQ(roi_average_pool(u, rois).value(), mean_pool(u).value());
}

TEST(RoiPool, TwoCellBoxIsCellMean) {
  Rng rng(12);
  Var u(random_tensor({1, 3, 4, 4}, rng));
  const std::vector<Roi> rois{{0, PatchBox{0.25, 0.125, 0.5, 0.25}}};
  const Tensor pooled = roi_average_pool(u, rois).value();
  for (std::size_t c = 0; c < 3; ++c) {
    const double expect = 0.5 * (u.value()[c * 16 + 0] + u.value()[c * 16 + 1]);
    EXPECT_NEAR(pooled[c], expect, 1e-15);
  }
}

TEST(RoiPool, CellSelectionRules) {
  // Box covering 60% of cell (1,1) only.
  EXPECT_EQ(roi_cells(PatchBox{0.375, 0.375, 0.25, 0.15}, 4, 4), (std::vector<std::size_t>{5}));
  // Small box straddling four cells: no cell reaches half, fall back to the largest overlap.
  EXPECT_EQ(roi_cells(PatchBox{0.26, 0.26, 0.2, 0.2}, 4, 4), (std::vector<std::size_t>{5}));
  EXPECT_THROW(roi_cells(PatchBox{0.5, 0.5, 0.0, 0.3}, 4, 4), DegenerateInputError);
}

// Property: every differentiable op agrees with central differences on random inputs.
TEST(AutogradProperty, OpsMatchFiniteDifferencesOverSeeds) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed + 1000);
    Var a = Var::parameter(random_tensor({3, 4}, rng));
    Var b = Var::parameter(random_tensor({3, 4}, rng));
    Var m = Var::parameter(random_tensor({4, 2}, rng));
    Var bias = Var::parameter(random_tensor({2}, rng));
    Var pos = Var::parameter(Tensor({3, 4}));
    for (double& v : pos.value_mut().values()) v = rng.uniform(0.5, 2.0);
    Var img = Var::parameter(random_tensor({2, 2, 5, 5}, rng));
    Var kern = Var::parameter(random_tensor({3, 2, 3, 3}, rng, 0.5));
    Var kb = Var::parameter(random_tensor({3}, rng));
    Var probe(random_tensor({3, 6}, rng));
    Var probe2(random_tensor({2, 3, 3, 3}, rng));
    Var probe3(random_tensor({2, 3}, rng));
    const double tau = rng.uniform(0.2, 2.0);
    const std::vector<Roi> rois{{0, PatchBox{0.3, 0.4, 0.5, 0.6}}, {1, PatchBox::full()}};

    auto f = [&] {
      Var h = add_row(matmul(relu(add(a, scale(b, 0.7))), m), bias);         // [3,2]
      Var e = concat_cols(h, rowdot(a, mul(b, a)));                         // [3,3]
      Var e2 = concat_cols(e, matmul(l2_normalize(a), b, true));            // [3,6]
      Var ls = log_softmax(e2, tau);
      Var sm = softmax(e2, tau);
      Var feat = relu(conv2d(img, kern, kb, {2, 1}));                        // [2,3,3,3]
      Var pooled = add(mean_pool(feat), roi_average_pool(feat, rois));       // [2,3]
      return weighted_sum({sum(mul(probe, ls)), sum(mul(probe, sm)), sum(log(pos)), sum(exp(scale(a, 0.3))),
                           sum(mul(probe2, feat)), sum(mul(probe3, pooled)), sum(sub(a, b))},
                          {1.0, 2.0, 0.5, 0.1, 0.3, 1.0, 0.2});
    };
    auto res = finite_difference_check(f, {a, b, m, bias, pos, img, kern, kb}, 1e-6);
    worst = std::max(worst, res.max_relative_error);
  }
  // relu kinks can land inside the difference stencil; at 1e-6 on gaussian inputs this is rare.
  EXPECT_LT(worst, 1e-4);
}
