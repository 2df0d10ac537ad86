#pragma once

// Semantic-aware multi-modal attention fusion: channel attention followed by
// spatial attention over the channel concatenation of modality features.

#include <random>
#include <span>
#include <vector>

#include "semattnet/ops.hpp"

namespace semattnet {

// Reduction ratio for a channel-attention MLP over `channels` inputs: 16 for
// wide inputs, C/2 for narrow ones, lowered to the nearest divisor of C.
inline int default_reduction(int channels) {
  if (channels < 1) throw ValidationError("default_reduction: channels must be positive");
  int target = channels >= 16 ? 16 : std::max(1, channels / 2);
  while (channels % target != 0) --target;
  return target;
}

template <class T>
struct ChannelAttentionParams {
  Tensor<T> w0;  // (C/r) x C x 1 x 1
  Tensor<T> w1;  // C x (C/r) x 1 x 1
  int reduction = 1;

  int channels() const { return w0.c(); }
  int hidden() const { return w0.n(); }

  static ChannelAttentionParams zeros(int channels, int reduction) {
    validate_ratio(channels, reduction);
    const int hidden = channels / reduction;
    return {Tensor<T>(hidden, channels, 1, 1), Tensor<T>(channels, hidden, 1, 1), reduction};
  }

  template <class Rng>
  static ChannelAttentionParams random(int channels, int reduction, Rng& rng, T scale = T(0.5)) {
    auto p = zeros(channels, reduction);
    p.w0.fill_uniform(rng, -scale, scale);
    p.w1.fill_uniform(rng, -scale, scale);
    return p;
  }

  static void validate_ratio(int channels, int reduction) {
    if (channels < 1 || reduction < 1)
      throw ValidationError("channel attention: channels and reduction must be positive");
    if (channels % reduction != 0)
      throw ValidationError("channel attention: reduction " + std::to_string(reduction) +
                            " does not divide " + std::to_string(channels) + " channels");
  }

  void validate() const {
    validate_ratio(w0.c(), reduction);
    if (w0.shape() != Shape{w0.c() / reduction, w0.c(), 1, 1} ||
        w1.shape() != Shape{w0.c(), w0.n(), 1, 1})
      throw DimensionError("channel attention: inconsistent MLP shapes " + w0.shape().str() +
                           " / " + w1.shape().str());
    if (!w0.all_finite() || !w1.all_finite())
      throw ValidationError("channel attention: non-finite parameters");
  }
};

template <class T>
struct SpatialAttentionParams {
  Tensor<T> kernel;  // 1 x 2 x k x k, input planes ordered [mean; max]
  T bias = 0;

  int kernel_size() const { return kernel.h(); }

  static SpatialAttentionParams zeros(int kernel_size = 7) {
    if (kernel_size < 1 || kernel_size % 2 == 0)
      throw ValidationError("spatial attention: kernel size must be odd");
    return {Tensor<T>(1, 2, kernel_size, kernel_size), T(0)};
  }

  template <class Rng>
  static SpatialAttentionParams random(int kernel_size, Rng& rng, T scale = T(0.5)) {
    auto p = zeros(kernel_size);
    p.kernel.fill_uniform(rng, -scale, scale);
    std::uniform_real_distribution<double> d(-scale, scale);
    p.bias = static_cast<T>(d(rng));
    return p;
  }

  void validate() const {
    const Shape s = kernel.shape();
    if (s.n != 1 || s.c != 2 || s.h != s.w || s.h % 2 == 0)
      throw ValidationError("spatial attention: kernel must be 1x2xkxk with odd k, got " + s.str());
    if (!kernel.all_finite() || !std::isfinite(bias))
      throw ValidationError("spatial attention: non-finite parameters");
  }
};

// ---- differentiable forms (batched, used by the backbone and gradient checks)

// sigmoid(W1 relu(W0 avg) + W1 relu(W0 max)) -> N x C x 1 x 1.
template <class T>
Var<T> channel_attention(const Var<T>& f, const Var<T>& w0, const Var<T>& w1) {
  const ops::ConvGeometry pointwise{1, 1, 0, 1};
  auto mlp = [&](const Var<T>& pooled) {
    return ops::conv2d(ops::relu(ops::conv2d(pooled, w0, pointwise)), w1, pointwise);
  };
  return ops::sigmoid(ops::add(mlp(ops::global_avg_pool(f)), mlp(ops::global_max_pool(f))));
}

// sigmoid(conv([mean_c f; max_c f]) + bias) -> N x 1 x H x W.
template <class T>
Var<T> spatial_attention(const Var<T>& f, const Var<T>& kernel, const Var<T>& bias) {
  const int k = kernel.shape().h;
  const std::vector<Var<T>> planes{ops::channel_mean(f), ops::channel_max(f)};
  return ops::sigmoid(ops::conv2d(ops::concat<T>(planes), kernel, bias, {k, 1, k / 2, 1}));
}

// F'' = A_s(F') * F' with F' = A_c(F) * F and F the concatenation of inputs.
template <class T>
Var<T> sammafb(std::span<const Var<T>> modalities, const Var<T>& w0, const Var<T>& w1,
               const Var<T>& kernel, const Var<T>& bias) {
  Var<T> fused = modalities.size() == 1 ? modalities.front() : ops::concat<T>(modalities);
  Var<T> refined = ops::mul_channel(fused, channel_attention(fused, w0, w1));
  return ops::mul_spatial(refined, spatial_attention(refined, kernel, bias));
}

// ---- value-level API on single FeatureMaps (1 x C x H x W)

namespace detail {
template <class T>
void require_feature(const Tensor<T>& f, const char* what) {
  if (f.n() != 1 || f.c() < 1 || f.h() < 1 || f.w() < 1)
    throw DimensionError(std::string(what) + ": expected a 1xCxHxW feature map, got " +
                         f.shape().str());
  if (!f.all_finite()) throw ValidationError(std::string(what) + ": non-finite input");
}
}  // namespace detail

// Per-channel weights A_c, each strictly inside (0, 1) for finite input.
template <class T>
std::vector<T> channel_attention(const Tensor<T>& f, const ChannelAttentionParams<T>& p) {
  detail::require_feature(f, "channel_attention");
  if (p.w0.c() != f.c())
    throw DimensionError("channel_attention: parameters expect " + std::to_string(p.w0.c()) +
                         " channels, feature map has " + std::to_string(f.c()));
  p.validate();
  NoGradGuard guard;
  const auto a = channel_attention(Var<T>(f), Var<T>(p.w0), Var<T>(p.w1));
  return {a.value().begin(), a.value().end()};
}

// Spatial weights A_s as a 1 x 1 x H x W map.
template <class T>
Tensor<T> spatial_attention(const Tensor<T>& f, const SpatialAttentionParams<T>& p) {
  detail::require_feature(f, "spatial_attention");
  p.validate();
  NoGradGuard guard;
  return spatial_attention(Var<T>(f), Var<T>(p.kernel), Var<T>(Tensor<T>(1, 1, 1, 1, p.bias)))
      .value();
}

// Fuses 2 (color/semantic) or 3 (color/semantic/depth) same-shaped feature
// maps, concatenated in the order given.
template <class T>
Tensor<T> sammafb_fuse(std::span<const Tensor<T>> modalities, const ChannelAttentionParams<T>& cap,
                       const SpatialAttentionParams<T>& sap) {
  if (modalities.size() != 2 && modalities.size() != 3)
    throw ValidationError("sammafb_fuse: expected 2 or 3 modalities, got " +
                          std::to_string(modalities.size()));
  for (const auto& m : modalities) {
    detail::require_feature(m, "sammafb_fuse");
    if (m.shape() != modalities.front().shape())
      throw DimensionError("sammafb_fuse: modality shapes differ (" + m.shape().str() + " vs " +
                           modalities.front().shape().str() + ")");
  }
  const int fused_channels = static_cast<int>(modalities.size()) * modalities.front().c();
  if (cap.w0.c() != fused_channels)
    throw DimensionError("sammafb_fuse: channel attention expects " + std::to_string(cap.w0.c()) +
                         " channels, fused input has " + std::to_string(fused_channels));
  cap.validate();
  sap.validate();
  NoGradGuard guard;
  std::vector<Var<T>> vars;
  for (const auto& m : modalities) vars.emplace_back(m);
  return sammafb<T>(vars, Var<T>(cap.w0), Var<T>(cap.w1), Var<T>(sap.kernel),
                    Var<T>(Tensor<T>(1, 1, 1, 1, sap.bias)))
      .value();
}

}  // namespace semattnet
