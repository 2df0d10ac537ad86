#include <gtest/gtest.h>

#include <cmath>

#include "semattnet/ops.hpp"
#include "support.hpp"

using namespace semattnet;
using namespace testing_support;

namespace {

// Scalar loss with a fixed random projection so every output entry matters.
Var<double> project(const Var<double>& y, std::uint64_t seed) {
  const Shape s = y.shape();
  const auto w = random_tensor<double>(s, seed);
  // sum(w * y) via products of single-channel slices.
  std::vector<Var<double>> parts;
  for (int c = 0; c < s.c; ++c) {
    Tensor<double> wc(s.n, 1, s.h, s.w);
    for (int b = 0; b < s.n; ++b)
      std::copy_n(w.plane(b, c), s.plane(), wc.plane(b, 0));
    parts.push_back(ops::sum(ops::mul_spatial(ops::slice_channels(y, c, 1), Var<double>(wc))));
  }
  return ops::add_n<double>(parts);
}

// Direct convolution with explicit loops.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const ops::ConvGeometry& g) {
  const int oh = g.out_extent(x.h()), ow = g.out_extent(x.w());
  Tensor<double> y(x.n(), w.n(), oh, ow);
  for (int b = 0; b < x.n(); ++b)
    for (int o = 0; o < w.n(); ++o)
      for (int yy = 0; yy < oh; ++yy)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = 0;
          for (int c = 0; c < x.c(); ++c)
            for (int ky = 0; ky < g.kernel; ++ky)
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int iy = yy * g.stride - g.pad + ky * g.dilation;
                const int ix = xx * g.stride - g.pad + kx * g.dilation;
                if (iy < 0 || ix < 0 || iy >= x.h() || ix >= x.w()) continue;
                acc += w.at(o, c, ky, kx) * x.at(b, c, iy, ix);
              }
          y.at(b, o, yy, xx) = acc;
        }
  return y;
}

// Transposed convolution as a scatter of each input pixel.
Tensor<double> deconv_oracle(const Tensor<double>& x, const Tensor<double>& w, const ops::ConvGeometry& g,
                             int out_h, int out_w) {
  Tensor<double> y(x.n(), w.c(), out_h, out_w);
  for (int b = 0; b < x.n(); ++b)
    for (int c = 0; c < x.c(); ++c)
      for (int iy = 0; iy < x.h(); ++iy)
        for (int ix = 0; ix < x.w(); ++ix)
          for (int o = 0; o < w.c(); ++o)
            for (int ky = 0; ky < g.kernel; ++ky)
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int oy = iy * g.stride - g.pad + ky * g.dilation;
                const int ox = ix * g.stride - g.pad + kx * g.dilation;
                if (oy < 0 || ox < 0 || oy >= out_h || ox >= out_w) continue;
                y.at(b, o, oy, ox) += w.at(c, o, ky, kx) * x.at(b, c, iy, ix);
              }
  return y;
}

}  // namespace

TEST(Conv, MatchesDirectLoops) {
  for (const ops::ConvGeometry g : {ops::ConvGeometry{3, 1, 1, 1}, ops::ConvGeometry{3, 2, 1, 1},
                                    ops::ConvGeometry{1, 1, 0, 1}, ops::ConvGeometry{1, 2, 0, 1},
                                    ops::ConvGeometry{3, 1, 2, 2}, ops::ConvGeometry{7, 1, 3, 1}}) {
    const auto x = random_tensor<double>({2, 3, 8, 10}, 1);
    const auto w = random_tensor<double>({4, 3, g.kernel, g.kernel}, 2);
    const auto y = ops::conv2d(Var<double>(x), Var<double>(w), g).value();
    EXPECT_LT(max_diff(y, conv_oracle(x, w, g)), 1e-12) << g.kernel << "/" << g.stride;
  }
}

TEST(ConvTranspose, MatchesScatter) {
  const ops::ConvGeometry g{3, 2, 1, 1};
  const auto x = random_tensor<double>({2, 3, 4, 5}, 3);
  const auto w = random_tensor<double>({3, 2, 3, 3}, 4);
  const auto y = ops::conv_transpose2d(Var<double>(x), Var<double>(w), Var<double>(), g, 1).value();
  EXPECT_EQ(y.shape(), (Shape{2, 2, 8, 10}));
  EXPECT_LT(max_diff(y, deconv_oracle(x, w, g, 8, 10)), 1e-12);
}

TEST(BatchNorm, TrainingNormalizesPerChannel) {
  const auto x = random_tensor<double>({3, 2, 4, 4}, 5, -3, 7);
  Tensor<double> rm(2, 1, 1, 1), rv(2, 1, 1, 1, 1.0);
  const Var<double> gamma(Tensor<double>(2, 1, 1, 1, 1.0)), beta(Tensor<double>(2, 1, 1, 1));
  const auto y = ops::batch_norm(Var<double>(x), gamma, beta, rm, rv, true).value();
  for (int c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (int b = 0; b < 3; ++b)
      for (int i = 0; i < 16; ++i) m += y.plane(b, c)[i] / 48;
    for (int b = 0; b < 3; ++b)
      for (int i = 0; i < 16; ++i) v += (y.plane(b, c)[i] - m) * (y.plane(b, c)[i] - m) / 48;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
  // Inference with running statistics is an affine map.
  Tensor<double> m2(2, 1, 1, 1, 1.0), v2(2, 1, 1, 1, 4.0);
  const auto z = ops::batch_norm(Var<double>(x), gamma, beta, m2, v2, false).value();
  EXPECT_NEAR(z[0], (x[0] - 1.0) / std::sqrt(4.0 + 1e-5), 1e-12);
}

// ---- gradients

TEST(OpGradients, Conv) {
  for (const ops::ConvGeometry g : {ops::ConvGeometry{3, 1, 1, 1}, ops::ConvGeometry{3, 2, 1, 1},
                                    ops::ConvGeometry{1, 1, 0, 1}, ops::ConvGeometry{3, 1, 2, 2}}) {
    Var<double> x(random_tensor<double>({2, 2, 6, 6}, 10), true);
    Var<double> w(random_tensor<double>({3, 2, g.kernel, g.kernel}, 11), true);
    Var<double> b(random_tensor<double>({3, 1, 1, 1}, 12), true);
    const auto r = grad_check({x, w, b}, [&] { return project(ops::conv2d(x, w, b, g), 13); }, 1e-5, 1e-6);
    EXPECT_LT(r.worst, 1e-6) << r.where;
  }
}

TEST(OpGradients, ConvTranspose) {
  Var<double> x(random_tensor<double>({2, 3, 3, 4}, 20), true);
  Var<double> w(random_tensor<double>({3, 2, 3, 3}, 21), true);
  Var<double> b(random_tensor<double>({2, 1, 1, 1}, 22), true);
  const auto r = grad_check(
      {x, w, b}, [&] { return project(ops::conv_transpose2d(x, w, b, {3, 2, 1, 1}, 1), 23); }, 1e-5, 1e-6);
  EXPECT_LT(r.worst, 1e-6) << r.where;
}

TEST(OpGradients, BatchNorm) {
  for (bool training : {true, false}) {
    Var<double> x(random_tensor<double>({2, 3, 3, 3}, 30, -2, 4), true);
    Var<double> gamma(random_tensor<double>({3, 1, 1, 1}, 31, 0.5, 1.5), true);
    Var<double> beta(random_tensor<double>({3, 1, 1, 1}, 32), true);
    Tensor<double> rm(3, 1, 1, 1, 0.3), rv(3, 1, 1, 1, 2.0);
    const auto r = grad_check({x, gamma, beta}, [&] {
      Tensor<double> m = rm, v = rv;  // keep the running statistics fixed across evaluations
      return project(ops::batch_norm(x, gamma, beta, m, v, training), 33);
    }, 1e-5, 1e-6);
    EXPECT_LT(r.worst, 1e-5) << (training ? "training " : "inference ") << r.where;
  }
}

TEST(OpGradients, Pointwise) {
  Var<double> x(random_tensor<double>({2, 3, 4, 4}, 40), true);
  Var<double> y(random_tensor<double>({2, 3, 4, 4}, 41), true);
  // Keep relu inputs away from the kink.
  for (auto& v : x.mutable_value()) v += v > 0 ? 0.1 : -0.1;
  const auto r = grad_check({x, y}, [&] {
    const std::vector<Var<double>> parts{ops::relu(x), ops::sigmoid(y), ops::scale(x, 3.0)};
    return project(ops::add(ops::add_n<double>(parts), ops::concat<double>(std::vector<Var<double>>{
                                                          ops::slice_channels(x, 0, 2), ops::slice_channels(y, 2, 1)})),
                   42);
  }, 1e-5, 1e-6);
  EXPECT_LT(r.worst, 1e-6) << r.where;
}

TEST(OpGradients, PoolsAndBroadcasts) {
  Var<double> x(random_tensor<double>({2, 3, 4, 5}, 50), true);
  Var<double> a(random_tensor<double>({2, 3, 1, 1}, 51), true);
  Var<double> s(random_tensor<double>({2, 1, 4, 5}, 52), true);
  const auto r = grad_check({x, a, s}, [&] {
    const std::vector<Var<double>> parts{
        project(ops::global_avg_pool(x), 53), project(ops::global_max_pool(x), 54),
        project(ops::channel_mean(x), 55),    project(ops::channel_max(x), 56),
        project(ops::mul_channel(x, a), 57),  project(ops::mul_spatial(x, s), 58)};
    return ops::add_n<double>(parts);
  }, 1e-6, 1e-6);
  EXPECT_LT(r.worst, 1e-6) << r.where;
}
