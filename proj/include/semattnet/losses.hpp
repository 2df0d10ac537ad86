#pragma once

// Masked training losses, the weighted total loss with its decaying branch
// weights, and the KITTI depth-completion metrics.

#include <array>
#include <cmath>
#include <cstddef>
#include <string>

#include <nlohmann/json.hpp>

#include "semattnet/ops.hpp"

namespace semattnet {

// true where ground truth > 0.
template <class T>
std::vector<unsigned char> valid_mask(const Tensor<T>& gt) {
  std::vector<unsigned char> mask(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) mask[i] = gt[i] > T(0) ? 1 : 0;
  return mask;
}

template <class T>
std::size_t count_valid(const Tensor<T>& gt) {
  std::size_t n = 0;
  for (T v : gt.vec()) n += v > T(0) ? 1 : 0;
  return n;
}

// Mean of (gt - pred)^2 over pixels with gt > 0.
template <class T>
Var<T> masked_l2(const Var<T>& pred, const Tensor<T>& gt) {
  Tensor<T>::require_same_shape(pred.value(), gt, "masked_l2");
  const std::size_t valid = count_valid(gt);
  if (valid == 0) throw EmptyMaskError("masked_l2: ground truth has no valid pixels");
  double acc = 0;
  const auto& p = pred.value();
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (gt[i] > T(0)) {
      const double d = static_cast<double>(gt[i]) - p[i];
      acc += d * d;
    }
  const T loss = static_cast<T>(acc / static_cast<double>(valid));
  return make_result<T>(Tensor<T>(1, 1, 1, 1, loss), {pred}, [gt, valid](Node<T>& self) {
    Node<T>& pn = *self.parents[0];
    Tensor<T>& dp = pn.grad_buffer();
    const T scale = T(2) * self.grad[0] / static_cast<T>(valid);
    for (std::size_t i = 0; i < gt.size(); ++i)
      if (gt[i] > T(0)) dp[i] += scale * (pn.value[i] - gt[i]);
  });
}

template <class T>
T masked_l2(const Tensor<T>& pred, const Tensor<T>& gt) {
  NoGradGuard guard;
  return masked_l2(Var<T>(pred), gt).value()[0];
}

struct LossWeights {
  double lambda_cg = 0.2;
  double lambda_sg = 0.2;
  double lambda_dg = 0.2;
  int decay_end_epoch = 10;

  void validate() const {
    if (lambda_cg < 0 || lambda_sg < 0 || lambda_dg < 0)
      throw ValidationError("loss weights must be nonnegative");
    if (decay_end_epoch < 1) throw ValidationError("decay_end_epoch must be positive");
  }
};

struct BranchLambdas {
  double cg = 0, sg = 0, dg = 0;
};

// Linear decay from the initial weights at epoch 0 to 0 at decay_end_epoch.
inline BranchLambdas lambda_schedule(int epoch, const LossWeights& w) {
  w.validate();
  if (epoch < 0) throw ValidationError("lambda_schedule: negative epoch");
  const double factor = std::max(0.0, 1.0 - static_cast<double>(epoch) / w.decay_end_epoch);
  return {w.lambda_cg * factor, w.lambda_sg * factor, w.lambda_dg * factor};
}

inline double total_loss(double l_cg, double l_sg, double l_dg, double l_fused, const LossWeights& w,
                         int epoch) {
  for (double v : {l_cg, l_sg, l_dg, l_fused})
    if (!std::isfinite(v) || v < 0)
      throw ValidationError("total_loss: losses must be finite and nonnegative");
  const BranchLambdas lam = lambda_schedule(epoch, w);
  return lam.cg * l_cg + lam.sg * l_sg + lam.dg * l_dg + l_fused;
}

// Differentiable counterpart. `l_sg` may be undefined for two-branch models.
template <class T>
Var<T> total_loss(const Var<T>& l_cg, const Var<T>& l_sg, const Var<T>& l_dg, const Var<T>& l_fused,
                  const LossWeights& w, int epoch) {
  const BranchLambdas lam = lambda_schedule(epoch, w);
  std::vector<Var<T>> terms{l_cg, l_dg, l_fused};
  std::vector<T> weights{static_cast<T>(lam.cg), static_cast<T>(lam.dg), T(1)};
  if (l_sg.defined()) {
    terms.push_back(l_sg);
    weights.push_back(static_cast<T>(lam.sg));
  }
  for (const auto& t : terms)
    if (!std::isfinite(t.value()[0]) || t.value()[0] < 0)
      throw ValidationError("total_loss: losses must be finite and nonnegative");
  return ops::weighted_sum<T>(terms, weights);
}

// KITTI-convention error metrics over gt > 0 pixels. Depths in meters.
struct MetricReport {
  double rmse_mm = 0;
  double mae_mm = 0;
  double irmse_per_km = 0;
  double imae_per_km = 0;
  std::size_t valid_pixels = 0;

  nlohmann::json to_json() const {
    return {{"rmse_mm", rmse_mm},
            {"mae_mm", mae_mm},
            {"irmse_per_km", irmse_per_km},
            {"imae_per_km", imae_per_km},
            {"valid_pixels", valid_pixels}};
  }
};

// Documented full-scale test-set numbers of the reference model.
inline constexpr MetricReport kPublishedTestMetrics{709.41, 205.49, 2.03, 0.90, 0};

template <class T>
MetricReport metrics(const Tensor<T>& pred, const Tensor<T>& gt) {
  Tensor<T>::require_same_shape(pred, gt, "metrics");
  double se = 0, ae = 0, ise = 0, iae = 0;
  std::size_t valid = 0, nonpositive = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!(gt[i] > T(0))) continue;
    ++valid;
    if (!(pred[i] > T(0))) ++nonpositive;
  }
  if (valid == 0) throw EmptyMaskError("metrics: ground truth has no valid pixels");
  if (nonpositive > 0)
    throw ValidationError("metrics: " + std::to_string(nonpositive) + " of " +
                          std::to_string(valid) +
                          " valid pixels have non-positive predictions (inverse metrics undefined)");
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!(gt[i] > T(0))) continue;
    const double g = gt[i], p = pred[i];
    const double d = g - p;
    const double inv = 1.0 / g - 1.0 / p;
    se += d * d;
    ae += std::abs(d);
    ise += inv * inv;
    iae += std::abs(inv);
  }
  const double n = static_cast<double>(valid);
  return {std::sqrt(se / n) * 1000.0, ae / n * 1000.0, std::sqrt(ise / n) * 1000.0,
          iae / n * 1000.0, valid};
}

}  // namespace semattnet
