#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "semattnet/losses.hpp"
#include "support.hpp"

using namespace semattnet;
using namespace testing_support;

namespace {

Tensor<double> pixels(std::initializer_list<double> v) {
  Tensor<double> t(1, 1, 1, static_cast<int>(v.size()));
  std::copy(v.begin(), v.end(), t.data());
  return t;
}

// Ground truth with roughly `valid` of its pixels set.
Tensor<double> sparse_gt(int h, int w, std::uint64_t seed, double valid = 0.3) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(valid);
  std::uniform_real_distribution<double> depth(1.0, 80.0);
  Tensor<double> t(1, 1, h, w);
  for (auto& v : t) v = keep(rng) ? depth(rng) : 0.0;
  t[0] = depth(rng);
  return t;
}

}  // namespace

TEST(MaskedL2, HandExamples) {
  EXPECT_EQ(masked_l2(pixels({1, 2, 3}), pixels({1, 2, 3})), 0.0);
  EXPECT_DOUBLE_EQ(masked_l2(pixels({3, 100}), pixels({5, 0})), 4.0);
  EXPECT_DOUBLE_EQ(masked_l2(pixels({4, 7, -3}), pixels({5, 10, 0})), 5.0);
}

TEST(MaskedL2, EmptyMaskIsAnError) {
  EXPECT_THROW(masked_l2(pixels({1, 2}), pixels({0, 0})), EmptyMaskError);
  EXPECT_THROW(masked_l2(pixels({1, 2}), pixels({0, -1})), EmptyMaskError);
}

TEST(MaskedL2, ShapeMismatch) {
  EXPECT_THROW(masked_l2(pixels({1, 2}), pixels({1, 2, 3})), DimensionError);
}

TEST(MaskedL2, GradientMatchesFiniteDifferences) {
  Var<double> pred(random_tensor<double>({1, 1, 5, 6}, 1, 0, 50), true);
  const auto gt = sparse_gt(5, 6, 2);
  const auto r = grad_check({pred}, [&] { return masked_l2(pred, gt); }, 1e-5, 1e-8);
  EXPECT_LT(r.worst, 1e-6) << r.where;
}

TEST(LambdaSchedule, Endpoints) {
  const LossWeights w;
  const auto l0 = lambda_schedule(0, w);
  EXPECT_DOUBLE_EQ(l0.cg, 0.2);
  EXPECT_DOUBLE_EQ(l0.sg, 0.2);
  EXPECT_DOUBLE_EQ(l0.dg, 0.2);
  const auto l5 = lambda_schedule(5, w);
  EXPECT_NEAR(l5.cg, 0.1, 1e-15);
  EXPECT_NEAR(l5.dg, 0.1, 1e-15);
  for (int e : {10, 11, 60}) {
    const auto l = lambda_schedule(e, w);
    EXPECT_EQ(l.cg, 0.0);
    EXPECT_EQ(l.sg, 0.0);
    EXPECT_EQ(l.dg, 0.0);
  }
  EXPECT_THROW(lambda_schedule(-1, w), ValidationError);
}

TEST(TotalLoss, HandExamples) {
  const LossWeights w;
  EXPECT_EQ(total_loss(0, 0, 0, 0, w, 0), 0.0);
  EXPECT_DOUBLE_EQ(total_loss(1, 1, 1, 1, w, 0), 1.6);
  EXPECT_EQ(total_loss(3, 4, 5, 2.5, w, 10), 2.5);
  EXPECT_EQ(total_loss(3, 4, 5, 2.5, w, 25), 2.5);
  EXPECT_THROW(total_loss(-1, 0, 0, 0, w, 0), ValidationError);
  EXPECT_THROW(total_loss(0, 0, 0, NAN, w, 0), ValidationError);
}

TEST(TotalLoss, DifferentiableFormAgrees) {
  const LossWeights w;
  for (int epoch : {0, 3, 10}) {
    const Var<double> a(Tensor<double>(1, 1, 1, 1, 1.5)), b(Tensor<double>(1, 1, 1, 1, 2.0)),
        c(Tensor<double>(1, 1, 1, 1, 0.5)), f(Tensor<double>(1, 1, 1, 1, 3.0));
    EXPECT_NEAR(total_loss<double>(a, b, c, f, w, epoch).value()[0], total_loss(1.5, 2.0, 0.5, 3.0, w, epoch), 1e-12);
    // Two-branch form drops the semantic term.
    EXPECT_NEAR(total_loss<double>(a, Var<double>(), c, f, w, epoch).value()[0],
                total_loss(1.5, 0.0, 0.5, 3.0, w, epoch), 1e-12);
  }
}

TEST(Metrics, HandExamples) {
  const auto m = metrics(pixels({9}), pixels({10}));
  EXPECT_NEAR(m.rmse_mm, 1000.0, 1e-9);
  EXPECT_NEAR(m.mae_mm, 1000.0, 1e-9);
  EXPECT_NEAR(m.irmse_per_km, 11.111, 1e-3);
  EXPECT_NEAR(m.imae_per_km, 11.111, 1e-3);
  EXPECT_NEAR(m.irmse_per_km, (1.0 / 9 - 1.0 / 10) * 1000, 1e-9);
  EXPECT_EQ(m.valid_pixels, 1u);

  const auto gt = sparse_gt(8, 8, 3);
  const auto zero = metrics(gt, gt);
  EXPECT_EQ(zero.rmse_mm, 0.0);
  EXPECT_EQ(zero.mae_mm, 0.0);
  EXPECT_EQ(zero.irmse_per_km, 0.0);
  EXPECT_EQ(zero.imae_per_km, 0.0);
}

TEST(Metrics, ConstantBias) {
  const auto gt = sparse_gt(8, 8, 4);
  Tensor<double> pred = gt;
  for (auto& v : pred) v += 1.0;
  const auto m = metrics(pred, gt);
  EXPECT_NEAR(m.mae_mm, 1000.0, 1e-9);
  EXPECT_NEAR(m.rmse_mm, 1000.0, 1e-9);
}

TEST(Metrics, NonPositivePredictionReportsCount) {
  try {
    metrics(pixels({0, -1, 5, 3}), pixels({2, 2, 2, 0}));
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("2 of 3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(metrics(pixels({1}), pixels({0})), EmptyMaskError);
}

TEST(Metrics, PublishedConstants) {
  EXPECT_DOUBLE_EQ(kPublishedTestMetrics.rmse_mm, 709.41);
  EXPECT_DOUBLE_EQ(kPublishedTestMetrics.mae_mm, 205.49);
  EXPECT_DOUBLE_EQ(kPublishedTestMetrics.irmse_per_km, 2.03);
  EXPECT_DOUBLE_EQ(kPublishedTestMetrics.imae_per_km, 0.90);
}

// ---- properties

TEST(LossProperties, InvalidPixelsDoNotMatter) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const auto gt = sparse_gt(6, 9, 100 + trial);
    auto pred = random_tensor<double>({1, 1, 6, 9}, 200 + trial, 0, 80);
    const double before = masked_l2(pred, gt);
    std::uniform_real_distribution<double> junk(-1e6, 1e6);
    for (std::size_t i = 0; i < gt.size(); ++i)
      if (!(gt[i] > 0)) pred[i] = junk(rng);
    EXPECT_EQ(masked_l2(pred, gt), before);
  }
}

TEST(LossProperties, RmseAndMaeAreSymmetric) {
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = random_tensor<double>({1, 1, 5, 5}, 300 + trial, 0.5, 80);
    const auto b = random_tensor<double>({1, 1, 5, 5}, 400 + trial, 0.5, 80);
    const auto ab = metrics(a, b), ba = metrics(b, a);
    EXPECT_NEAR(ab.rmse_mm, ba.rmse_mm, 1e-9);
    EXPECT_NEAR(ab.mae_mm, ba.mae_mm, 1e-9);
  }
}

TEST(LossProperties, TotalLossMonotone) {
  std::mt19937_64 rng(20);
  std::uniform_real_distribution<double> u(0, 10);
  const LossWeights w;
  for (int trial = 0; trial < 100; ++trial) {
    const int epoch = trial % 14;
    double l[4] = {u(rng), u(rng), u(rng), u(rng)};
    const double base = total_loss(l[0], l[1], l[2], l[3], w, epoch);
    for (int k = 0; k < 4; ++k) {
      double m[4] = {l[0], l[1], l[2], l[3]};
      m[k] += u(rng);
      EXPECT_GE(total_loss(m[0], m[1], m[2], m[3], w, epoch), base);
    }
  }
}

TEST(LossProperties, ErrorsScaleWithDepth) {
  for (int trial = 0; trial < 30; ++trial) {
    const auto gt = sparse_gt(6, 6, 500 + trial);
    auto pred = random_tensor<double>({1, 1, 6, 6}, 600 + trial, 1, 80);
    const double s = 0.25 + 0.5 * trial;
    Tensor<double> gs = gt, ps = pred;
    for (auto& v : gs) v *= s;
    for (auto& v : ps) v *= s;
    const auto a = metrics(pred, gt), b = metrics(ps, gs);
    EXPECT_NEAR(b.rmse_mm, s * a.rmse_mm, 1e-9 * s * a.rmse_mm + 1e-9);
    EXPECT_NEAR(b.mae_mm, s * a.mae_mm, 1e-9 * s * a.mae_mm + 1e-9);
  }
}
