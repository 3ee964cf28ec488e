#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"

namespace poi {
namespace {

using test::probe;
using test::probe_coeffs;
using test::random_tensor;

TEST(Tensor, RejectsInconsistentShape) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  EXPECT_THROW(Tensor({0, 3}, {}), DimensionError);
  Tensor t({2, 2}, {1, 2, 3, 4}, true);
  EXPECT_EQ(t.grad.size(), 4u);
}

TEST(Linear, IdentityAndBias) {
  Tape t;
  Var y = linear(t.constant({1, 2}, {1, 2}), t.constant({2, 2}, {1, 0, 0, 1}), t.constant({2}, {0, 0}));
  EXPECT_EQ(std::vector<double>(y.value().begin(), y.value().end()), (std::vector<double>{1, 2}));
  Var z = linear(t.constant({1, 2}, {1, 1}), t.constant({1, 2}, {0, 0}), t.constant({1}, {3}));
  EXPECT_DOUBLE_EQ(z.value()[0], 3.0);
}

TEST(Linear, MatchesTripleLoop) {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({3, 4}, rng), W = random_tensor({5, 4}, rng), b = random_tensor({5}, rng);
  Tape t;
  Var y = linear(t.constant(x), t.constant(W), t.constant(b));
  double worst = 0.0;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = b.data[j];
      for (std::size_t k = 0; k < 4; ++k) s += W.data[j * 4 + k] * x.data[i * 4 + k];
      worst = std::max(worst, std::abs(s - y.value()[i * 5 + j]));
    }
  EXPECT_LT(worst, 1e-12);
}

TEST(Linear, ShapeMismatch) {
  Tape t;
  EXPECT_THROW(linear(t.constant({1, 3}, {1, 2, 3}), t.constant({2, 2}, {1, 0, 0, 1}), t.constant({2}, {0, 0})),
               DimensionError);
}

TEST(Conv, IdentityKernelAndConstantBias) {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({1, 1, 4, 5}, rng);
  Tape t;
  std::vector<double> k(9, 0.0);
  k[4] = 1.0;
  Var y = conv2d_3x3(t.constant(x), t.constant({1, 1, 3, 3}, k), t.constant({1}, {0.0}));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y.value()[i], x.data[i]);
  Var z = conv2d_3x3(t.constant(x), t.constant({1, 1, 3, 3}, std::vector<double>(9, 0.0)), t.constant({1}, {0.7}));
  for (double v : z.value()) EXPECT_DOUBLE_EQ(v, 0.7);
}

TEST(Conv, MatchesNestedLoopCrossCorrelation) {
  std::mt19937_64 rng(3);
  const std::size_t Ci = 2, Co = 3, H = 5, W = 5;
  const Tensor x = random_tensor({1, Ci, H, W}, rng), K = random_tensor({Co, Ci, 3, 3}, rng),
               b = random_tensor({Co}, rng);
  Tape t;
  Var y = conv2d_3x3(t.constant(x), t.constant(K), t.constant(b));
  double worst = 0.0;
  for (std::size_t co = 0; co < Co; ++co)
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        double s = b.data[co];
        for (std::size_t ci = 0; ci < Ci; ++ci)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const long rr = static_cast<long>(r) + ky - 1, cc = static_cast<long>(c) + kx - 1;
              if (rr < 0 || cc < 0 || rr >= static_cast<long>(H) || cc >= static_cast<long>(W)) continue;
              s += K.data[((co * Ci + ci) * 3 + static_cast<std::size_t>(ky)) * 3 + static_cast<std::size_t>(kx)] *
                   x.data[(ci * H + static_cast<std::size_t>(rr)) * W + static_cast<std::size_t>(cc)];
            }
        worst = std::max(worst, std::abs(s - y.value()[(co * H + r) * W + c]));
      }
  EXPECT_LT(worst, 1e-12);
}

TEST(Conv, ChannelMismatch) {
  Tape t;
  EXPECT_THROW(conv2d_3x3(t.constant(Tensor::zeros({1, 2, 3, 3})), t.constant(Tensor::zeros({1, 3, 3, 3})),
                          t.constant(Tensor::zeros({1}))),
               DimensionError);
}

TEST(Activations, ClosedForms) {
  Tape t;
  Var r = relu(t.constant({2}, {-1.0, 2.0}));
  EXPECT_EQ(r.value()[0], 0.0);
  EXPECT_EQ(r.value()[1], 2.0);
  Var s = sigmoid(t.constant({3}, {0.0, std::log(9.0), -std::log(9.0)}));
  EXPECT_DOUBLE_EQ(s.value()[0], 0.5);
  EXPECT_NEAR(s.value()[1], 0.9, 1e-15);
  EXPECT_NEAR(s.value()[2], 0.1, 1e-15);
}

TEST(Softmax, ClosedFormsAndScaleInvariance) {
  Tape t;
  Var u = softmax_t(t.constant({1, 2}, {0, 0}), 2.5);
  EXPECT_DOUBLE_EQ(u.value()[0], 0.5);
  Var a = softmax_t(t.constant({1, 2}, {1, 0}), 1.0);
  const double e = std::exp(1.0);
  EXPECT_NEAR(a.value()[0], e / (1 + e), 1e-15);
  EXPECT_NEAR(a.value()[1], 1 / (1 + e), 1e-15);
  EXPECT_NEAR(a.value()[0], 0.7311, 5e-5);
  Var b = softmax_t(t.constant({1, 2}, {3, 0}), 3.0);
  EXPECT_NEAR(b.value()[0], a.value()[0], 1e-15);
  EXPECT_THROW(softmax_t(t.constant({1, 2}, {1, 0}), 0.0), ParameterError);
  EXPECT_THROW(softmax_t(t.constant({1, 2}, {1, 0}), -1.0), ParameterError);
}

TEST(Softmax, SimplexAndTemperatureIdentity) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> T(0.1, 10.0);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor z = random_tensor({3, 7}, rng, -30.0, 30.0, false);
    const double temp = T(rng);
    Tape t;
    Var p = softmax_t(t.constant(z), temp);
    std::vector<double> scaled(z.data);
    for (double& v : scaled) v /= temp;
    Var q = softmax_t(t.constant(z.shape, scaled), 1.0);
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GE(p.value()[i * 7 + c], 0.0);
        EXPECT_NEAR(p.value()[i * 7 + c], q.value()[i * 7 + c], 1e-12);
        s += p.value()[i * 7 + c];
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Pooling, GlobalAverage) {
  Tape t;
  Var c = global_avg_pool(t.constant({1, 1, 2, 3}, std::vector<double>(6, 1.75)));
  EXPECT_DOUBLE_EQ(c.value()[0], 1.75);
  Var m = global_avg_pool(t.constant({1, 1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_DOUBLE_EQ(m.value()[0], 2.5);

  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({2, 3, 4, 5}, rng);
  Var g = global_avg_pool(t.constant(x));
  double worst = 0.0;
  for (std::size_t p = 0; p < 6; ++p) {
    double s = 0.0;
    for (std::size_t k = 0; k < 20; ++k) s += x.data[p * 20 + k];
    worst = std::max(worst, std::abs(s / 20.0 - g.value()[p]));
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(Pooling, AverageWindows) {
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor({1, 2, 4, 6}, rng);
  Tape t;
  Var y = avg_pool2d(t.constant(x), 2);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 2, 3}));
  double worst = 0.0;
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t q = 0; q < 3; ++q) {
        double s = 0.0;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) s += x.data[(c * 4 + 2 * r + dy) * 6 + 2 * q + dx];
        worst = std::max(worst, std::abs(s / 4.0 - y.value()[(c * 2 + r) * 3 + q]));
      }
  EXPECT_LT(worst, 1e-12);
}

TEST(Crop, CornersFlipAndErrors) {
  std::vector<double> grid(16);
  for (std::size_t i = 0; i < 16; ++i) grid[i] = static_cast<double>(i);  // value = 4 * row + col
  Tape t;
  Var x = t.constant({1, 1, 4, 4}, grid);
  Var ul = crop2d(x, Corner::UpperLeft, 2);
  EXPECT_EQ(std::vector<double>(ul.value().begin(), ul.value().end()), (std::vector<double>{0, 1, 4, 5}));
  Var lr = crop2d(x, Corner::LowerRight, 2);
  EXPECT_EQ(std::vector<double>(lr.value().begin(), lr.value().end()), (std::vector<double>{10, 11, 14, 15}));
  Var whole = crop2d(x, Corner::UpperRight, 4);
  EXPECT_EQ(std::vector<double>(whole.value().begin(), whole.value().end()), grid);
  Var f = hflip2d(ul);
  EXPECT_EQ(std::vector<double>(f.value().begin(), f.value().end()), (std::vector<double>{1, 0, 5, 4}));
  Var ff = hflip2d(hflip2d(x));
  EXPECT_EQ(std::vector<double>(ff.value().begin(), ff.value().end()), grid);
  EXPECT_THROW(crop2d(x, Corner::LowerLeft, 5), DimensionError);
}

TEST(Crop, GradientLandsInWindow) {
  Tensor x = Tensor::zeros({1, 1, 4, 4}, true);
  Tape t;
  Var y = crop2d(t.leaf(x), Corner::LowerLeft, 2);
  t.backward(sum(y));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(x.grad[r * 4 + c], (r >= 2 && c < 2) ? 1.0 : 0.0);
}

TEST(Backward, SumQuadraticAndScalarContract) {
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({2, 3}, rng);
  {
    Tape t;
    t.backward(sum(t.leaf(x)));
    for (double g : x.grad) EXPECT_EQ(g, 1.0);
  }
  x.zero_grad();
  {
    Tape t;
    Var v = t.leaf(x);
    t.backward(scale(sum(mul(v, v)), 0.5));
    for (std::size_t k = 0; k < x.size(); ++k) EXPECT_NEAR(x.grad[k], x.data[k], 1e-15);
  }
  Tape t;
  EXPECT_THROW(t.backward(t.leaf(x)), ContractError);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor x({2}, {1.5, -2.0}, true);
  Tape t;
  Var v = t.leaf(x);
  Var loss = sum(mul(v, v));
  t.backward(loss);
  t.backward(loss);
  EXPECT_DOUBLE_EQ(x.grad[0], 2 * 2 * 1.5);
  EXPECT_DOUBLE_EQ(x.grad[1], 2 * 2 * -2.0);
}

TEST(Backward, FanOutSumsContributions) {
  Tensor x({3}, {0.5, -1.0, 2.0}, true);
  Tape t;
  Var v = t.leaf(x);
  t.backward(weighted_sum(std::vector<Var>{sum(scale(v, 3.0)), sum(sigmoid(v))}, std::vector<double>{1.0, 1.0}));
  for (std::size_t k = 0; k < 3; ++k) {
    const double s = 1.0 / (1.0 + std::exp(-x.data[k]));
    EXPECT_NEAR(x.grad[k], 3.0 + s * (1 - s), 1e-14);
  }
}

TEST(Backward, NonFiniteForwardIsAnError) {
  Tape t;
  EXPECT_THROW(scale(t.constant({1}, {1e308}), 1e10), NumericError);
}

TEST(GradCheck, QuadraticAndNonFinite) {
  Tensor th({3}, {1, 2, 3}, true);
  const auto r = grad_check([&](Tape& t) { Var v = t.leaf(th); return sum(mul(v, v)); }, {&th});
  EXPECT_LT(r.max_rel_error, 1e-9);
  EXPECT_EQ(r.coordinates, 3u);
  Tensor big({1}, {1e300}, true);
  EXPECT_THROW(grad_check([&](Tape& t) { Var v = t.leaf(big); return sum(mul(v, v)); }, {&big}), NumericError);
}

// Every differentiable op on random inputs in [-2, 2].
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  std::mt19937_64 rng(100 + static_cast<std::uint64_t>(GetParam()));
  const auto coeffs = probe_coeffs(512);
  Tensor a = random_tensor({2, 3}, rng), b = random_tensor({2, 3}, rng);
  Tensor W = random_tensor({4, 3}, rng), bias = random_tensor({4}, rng);
  Tensor img = random_tensor({2, 2, 4, 4}, rng), K = random_tensor({3, 2, 3, 3}, rng), kb = random_tensor({3}, rng);
  Tensor s = random_tensor({2, 1}, rng), wlog = random_tensor({2, 2}, rng);
  std::function<Var(Tape&)> f;
  std::vector<Tensor*> params;
  switch (GetParam()) {
    case 0: f = [&](Tape& t) { return probe(linear(t.leaf(a), t.leaf(W), t.leaf(bias)), coeffs); };
            params = {&a, &W, &bias}; break;
    case 1: f = [&](Tape& t) { return probe(conv2d_3x3(t.leaf(img), t.leaf(K), t.leaf(kb)), coeffs); };
            params = {&img, &K, &kb}; break;
    case 2: f = [&](Tape& t) { return probe(sigmoid(t.leaf(a)), coeffs); }; params = {&a}; break;
    case 3: f = [&](Tape& t) { return probe(softmax_t(t.leaf(a), 2.7), coeffs); }; params = {&a}; break;
    case 4: f = [&](Tape& t) { return probe(global_avg_pool(t.leaf(img)), coeffs); }; params = {&img}; break;
    case 5: f = [&](Tape& t) { return probe(avg_pool2d(t.leaf(img), 2), coeffs); }; params = {&img}; break;
    case 6: f = [&](Tape& t) { return probe(hflip2d(crop2d(t.leaf(img), Corner::UpperRight, 3)), coeffs); };
            params = {&img}; break;
    case 7: f = [&](Tape& t) { return probe(concat_cols({t.leaf(a), t.leaf(b)}), coeffs); };
            params = {&a, &b}; break;
    case 8: f = [&](Tape& t) { return probe(scale_rows(t.leaf(a), t.leaf(s)), coeffs); }; params = {&a, &s}; break;
    case 9: f = [&](Tape& t) { return probe(mul(t.leaf(a), t.leaf(b)), coeffs); }; params = {&a, &b}; break;
    case 10: f = [&](Tape& t) {
               Var w = softmax_t(t.leaf(wlog), 1.0);
               return probe(mix(w, {softmax_t(t.leaf(a), 1.0), softmax_t(t.leaf(b), 1.0)}), coeffs);
             };
             params = {&wlog, &a, &b}; break;
    case 11: f = [&](Tape& t) { return probe(relu(t.leaf(a)), coeffs); }; params = {&a}; break;
    case 12: f = [&](Tape& t) {
               Var x = t.leaf(a);
               return probe(concat_rows({slice_rows(x, 1, 2), slice_rows(x, 0, 1)}), coeffs);
             };
             params = {&a}; break;
  }
  const auto r = grad_check(f, params);
  EXPECT_LT(r.max_rel_error, 1e-5) << "op case " << GetParam();
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range(0, 13));

TEST(Sgd, PlainStepAndFixedPoint) {
  std::vector<double> th{1.0, -2.0}, v{0.0, 0.0};
  sgd_momentum_step(th, std::vector<double>{0.5, 1.0}, v, 0.1, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(th[0], 0.95);
  EXPECT_DOUBLE_EQ(th[1], -2.1);
  std::vector<double> fixed{3.0}, v0{0.0};
  sgd_momentum_step(fixed, std::vector<double>{0.0}, v0, 0.1, 0.9, 0.0);
  EXPECT_EQ(fixed[0], 3.0);
  EXPECT_THROW(sgd_momentum_step(fixed, std::vector<double>{0.0, 1.0}, v0, 0.1, 0.9, 0.0), DimensionError);
}

TEST(Sgd, TwoMomentumStepsOnQuadratic) {
  // f = theta^2 from theta = 1, lr 0.1, momentum 0.9, unrolled by hand:
  // v1 = 2, theta1 = 0.8; v2 = 0.9 * 2 + 1.6 = 3.4, theta2 = 0.8 - 0.34 = 0.46
  std::vector<double> th{1.0}, v{0.0};
  for (int k = 0; k < 2; ++k) sgd_momentum_step(th, std::vector<double>{2.0 * th[0]}, v, 0.1, 0.9, 0.0);
  EXPECT_NEAR(th[0], 0.46, 1e-15);
  EXPECT_NEAR(v[0], 3.4, 1e-15);
}

TEST(Sgd, WeightDecayEntersVelocity) {
  std::vector<double> th{2.0}, v{0.0};
  sgd_momentum_step(th, std::vector<double>{0.0}, v, 0.5, 0.9, 0.1);
  EXPECT_NEAR(v[0], 0.2, 1e-15);
  EXPECT_NEAR(th[0], 1.9, 1e-15);
}

}  // namespace
}  // namespace poi
