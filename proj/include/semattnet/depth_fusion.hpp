#pragma once

#include <span>
#include <vector>

#include "semattnet/ops.hpp"

namespace semattnet {

namespace detail {
template <class T>
void check_fusion_inputs(std::span<const Tensor<T>> depths, std::span<const Tensor<T>> confidences) {
  if (depths.size() != confidences.size() || depths.size() < 2 || depths.size() > 3)
    throw DimensionError("confidence_fuse: need 2 or 3 (depth, confidence) pairs, got " +
                         std::to_string(depths.size()) + "/" + std::to_string(confidences.size()));
  const Shape s = depths.front().shape();
  if (s.c != 1) throw DimensionError("confidence_fuse: maps must be single-channel");
  for (std::size_t b = 0; b < depths.size(); ++b) {
    if (depths[b].shape() != s || confidences[b].shape() != s)
      throw DimensionError("confidence_fuse: map " + std::to_string(b) + " has shape " +
                           depths[b].shape().str() + "/" + confidences[b].shape().str() +
                           ", expected " + s.str());
    if (!depths[b].all_finite()) throw ValidationError("confidence_fuse: non-finite depth");
    if (!confidences[b].all_finite())
      throw ValidationError("confidence_fuse: non-finite confidence");
  }
}
}  // namespace detail

// Per-pixel softmax over the branch confidence logits, max-subtracted.
template <class T>
std::vector<Tensor<T>> confidence_weights(std::span<const Tensor<T>> confidences) {
  const std::size_t branches = confidences.size();
  if (branches == 0) throw DimensionError("confidence_weights: empty list");
  std::vector<Tensor<T>> weights(branches, Tensor<T>(confidences.front().shape()));
  for (std::size_t i = 0; i < confidences.front().size(); ++i) {
    T top = confidences[0][i];
    for (std::size_t b = 1; b < branches; ++b) top = std::max(top, confidences[b][i]);
    T denom = 0;
    for (std::size_t b = 0; b < branches; ++b) {
      weights[b][i] = std::exp(confidences[b][i] - top);
      denom += weights[b][i];
    }
    for (std::size_t b = 0; b < branches; ++b) weights[b][i] /= denom;
  }
  return weights;
}

// D_f = sum_b softmax(C)_b * D_b, differentiable in depths and confidences.
template <class T>
Var<T> confidence_fuse(std::span<const Var<T>> depths, std::span<const Var<T>> confidences) {
  std::vector<Tensor<T>> dv, cv;
  for (const auto& d : depths) dv.push_back(d.value());
  for (const auto& c : confidences) cv.push_back(c.value());
  detail::check_fusion_inputs<T>(dv, cv);
  auto weights = confidence_weights<T>(cv);
  Tensor<T> fused(dv.front().shape());
  for (std::size_t b = 0; b < dv.size(); ++b)
    for (std::size_t i = 0; i < fused.size(); ++i) fused[i] += weights[b][i] * dv[b][i];

  std::vector<Var<T>> inputs(depths.begin(), depths.end());
  inputs.insert(inputs.end(), confidences.begin(), confidences.end());
  const std::size_t branches = depths.size();
  return make_result<T>(fused, std::move(inputs),
                        [branches, fused, weights = std::move(weights)](Node<T>& self) {
    for (std::size_t b = 0; b < branches; ++b) {
      Node<T>& dn = *self.parents[b];
      Node<T>& cn = *self.parents[branches + b];
      if (dn.requires_grad) {
        Tensor<T>& g = dn.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * weights[b][i];
      }
      if (cn.requires_grad) {
        Tensor<T>& g = cn.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
          g[i] += self.grad[i] * weights[b][i] * (dn.value[i] - fused[i]);
      }
    }
  });
}

// Value-level fusion of 2 or 3 branch predictions (ordered cg, sg, dg).
template <class T>
Tensor<T> confidence_fuse(std::span<const Tensor<T>> depths, std::span<const Tensor<T>> confidences) {
  NoGradGuard guard;
  std::vector<Var<T>> dv, cv;
  for (const auto& d : depths) dv.emplace_back(d);
  for (const auto& c : confidences) cv.emplace_back(c);
  return confidence_fuse<T>(dv, cv).value();
}

}  // namespace semattnet
