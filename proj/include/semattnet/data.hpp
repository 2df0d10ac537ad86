#pragma once

// Scene samples, KITTI-style cropping, seeded augmentation and the procedural
// scene generator used for desk-scale experiments.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "semattnet/tensor.hpp"

namespace semattnet {

// Aligned planes of one frame. Images are 1 x C x H x W float tensors.
struct SceneSample {
  Tensor<float> rgb;       // 3 planes in [0, 1]
  Tensor<float> semantic;  // 3 planes, color-coded classes in [0, 1]
  Tensor<float> sparse_depth;
  Tensor<float> gt_depth;
  std::string id;

  int height() const { return gt_depth.h(); }
  int width() const { return gt_depth.w(); }

  std::vector<unsigned char> valid_mask() const {
    std::vector<unsigned char> m(gt_depth.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = gt_depth[i] > 0.0f ? 1 : 0;
    return m;
  }

  void validate() const {
    const int h = gt_depth.h(), w = gt_depth.w();
    const auto aligned = [&](const Tensor<float>& t, int c) { return t.shape() == Shape{1, c, h, w}; };
    if (!aligned(rgb, 3) || !aligned(semantic, 3) || !aligned(sparse_depth, 1) || !aligned(gt_depth, 1))
      throw DimensionError("scene sample '" + id + "': planes are not aligned");
  }
};

inline double valid_ratio(const Tensor<float>& depth) {
  std::size_t n = 0;
  for (float v : depth.vec()) n += v > 0.0f ? 1 : 0;
  return depth.empty() ? 0.0 : static_cast<double>(n) / static_cast<double>(depth.size());
}

// 64-bit mixing used to derive independent seeds from (seed, key) pairs.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t key) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (key + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_id(const std::string& id) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : id) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// ---- geometric transforms (identical for every plane)

inline Tensor<float> crop_plane(const Tensor<float>& t, int top, int left, int height, int width) {
  Tensor<float> out(t.n(), t.c(), height, width);
  for (int b = 0; b < t.n(); ++b)
    for (int c = 0; c < t.c(); ++c)
      for (int y = 0; y < height; ++y)
        std::copy_n(&t.at(b, c, top + y, left), width, &out.at(b, c, y, 0));
  return out;
}

inline Tensor<float> flip_plane(const Tensor<float>& t) {
  Tensor<float> out(t.shape());
  for (int b = 0; b < t.n(); ++b)
    for (int c = 0; c < t.c(); ++c)
      for (int y = 0; y < t.h(); ++y)
        std::reverse_copy(&t.at(b, c, y, 0), &t.at(b, c, y, 0) + t.w(), &out.at(b, c, y, 0));
  return out;
}

inline SceneSample crop(const SceneSample& s, int top, int left, int height, int width) {
  if (top < 0 || left < 0 || top + height > s.height() || left + width > s.width())
    throw ShapeError("crop window " + std::to_string(height) + "x" + std::to_string(width) + "+" +
                     std::to_string(top) + "+" + std::to_string(left) + " exceeds " +
                     std::to_string(s.height()) + "x" + std::to_string(s.width()));
  return {crop_plane(s.rgb, top, left, height, width), crop_plane(s.semantic, top, left, height, width),
          crop_plane(s.sparse_depth, top, left, height, width),
          crop_plane(s.gt_depth, top, left, height, width), s.id};
}

inline SceneSample flip_horizontal(const SceneSample& s) {
  return {flip_plane(s.rgb), flip_plane(s.semantic), flip_plane(s.sparse_depth), flip_plane(s.gt_depth),
          s.id};
}

struct CropSize {
  int height = 0, width = 0;
};
inline constexpr CropSize kKittiBottomCrop{352, 1252};
inline constexpr CropSize kKittiTrainCrop{320, 1216};

// Keeps the bottom rows and a horizontally centered window.
inline SceneSample bottom_crop(const SceneSample& s, CropSize size = kKittiBottomCrop) {
  s.validate();
  if (s.height() < size.height || s.width() < size.width)
    throw ShapeError("bottom_crop: input " + std::to_string(s.height()) + "x" +
                     std::to_string(s.width()) + " smaller than " + std::to_string(size.height) + "x" +
                     std::to_string(size.width));
  return crop(s, s.height() - size.height, (s.width() - size.width) / 2, size.height, size.width);
}

struct AugmentOptions {
  CropSize crop = kKittiTrainCrop;
  double flip_probability = 0.5;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
};

// Brightness, contrast and saturation factors drawn from [1 - r, 1 + r].
struct ColorJitter {
  double brightness = 1, contrast = 1, saturation = 1;

  void apply(Tensor<float>& rgb) const {
    const std::size_t plane = rgb.shape().plane();
    auto clamp01 = [](double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); };
    for (float& v : rgb.vec()) v = clamp01(v * brightness);
    double mean_gray = 0;
    for (std::size_t i = 0; i < plane; ++i)
      mean_gray += 0.299 * rgb.plane(0, 0)[i] + 0.587 * rgb.plane(0, 1)[i] + 0.114 * rgb.plane(0, 2)[i];
    mean_gray /= static_cast<double>(plane);
    for (float& v : rgb.vec()) v = clamp01((v - mean_gray) * contrast + mean_gray);
    for (std::size_t i = 0; i < plane; ++i) {
      const double gray =
          0.299 * rgb.plane(0, 0)[i] + 0.587 * rgb.plane(0, 1)[i] + 0.114 * rgb.plane(0, 2)[i];
      for (int c = 0; c < 3; ++c) {
        float& v = rgb.plane(0, c)[i];
        v = clamp01((v - gray) * saturation + gray);
      }
    }
  }
};

struct AugmentDraw {
  int top = 0, left = 0;
  bool flip = false;
  ColorJitter jitter;
};

inline AugmentDraw draw_augmentation(int height, int width, std::uint64_t seed,
                                     const AugmentOptions& opt) {
  if (height < opt.crop.height || width < opt.crop.width)
    throw ShapeError("augment: sample " + std::to_string(height) + "x" + std::to_string(width) +
                     " smaller than crop " + std::to_string(opt.crop.height) + "x" +
                     std::to_string(opt.crop.width));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  AugmentDraw d;
  d.top = static_cast<int>(u(rng) * (height - opt.crop.height + 1));
  d.left = static_cast<int>(u(rng) * (width - opt.crop.width + 1));
  d.top = std::min(d.top, height - opt.crop.height);
  d.left = std::min(d.left, width - opt.crop.width);
  d.flip = u(rng) < opt.flip_probability;
  d.jitter.brightness = 1.0 + opt.brightness * (2 * u(rng) - 1);
  d.jitter.contrast = 1.0 + opt.contrast * (2 * u(rng) - 1);
  d.jitter.saturation = 1.0 + opt.saturation * (2 * u(rng) - 1);
  return d;
}

inline SceneSample apply_augmentation(const SceneSample& s, const AugmentDraw& d, CropSize size) {
  SceneSample out = crop(s, d.top, d.left, size.height, size.width);
  if (d.flip) out = flip_horizontal(out);
  d.jitter.apply(out.rgb);
  return out;
}

// Seeded random crop + horizontal flip on all planes, color jitter on rgb.
inline SceneSample augment(const SceneSample& s, std::uint64_t seed, const AugmentOptions& opt = {}) {
  s.validate();
  return apply_augmentation(s, draw_augmentation(s.height(), s.width(), seed, opt), opt.crop);
}

// ---- procedural scenes

inline constexpr double kSparseRatio = 0.059;
inline constexpr double kFarDepth = 40.0;

// Color code of each synthetic class: far wall, ground, then object classes.
inline constexpr std::array<std::array<float, 3>, 6> kClassColors{{
    {0.27f, 0.51f, 0.71f},  // far / sky
    {0.50f, 0.25f, 0.50f},  // ground
    {0.00f, 0.00f, 0.56f},  // vehicle
    {0.27f, 0.27f, 0.27f},  // building
    {0.86f, 0.86f, 0.00f},  // pole / sign
    {0.42f, 0.56f, 0.14f},  // vegetation
}};

struct SynthOptions {
  double sparse_ratio = kSparseRatio;
  bool shadows = true;
  int min_objects = 3;
  int max_objects = 6;
};

// Depths are quantized to the 1/256 m grid of 16-bit depth PNGs, so a
// synthetic scene survives a round trip through the on-disk layout.
inline float quantize_depth(double meters) {
  return static_cast<float>(std::round(meters * 256.0) / 256.0);
}

inline SceneSample synth_scene(std::uint64_t seed, int height, int width, const SynthOptions& opt = {}) {
  if (height <= 0 || width <= 0 || height % 32 != 0 || width % 32 != 0)
    throw ShapeError("synth_scene: size " + std::to_string(height) + "x" + std::to_string(width) +
                     " must be positive multiples of 32");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  SceneSample s{Tensor<float>(1, 3, height, width), Tensor<float>(1, 3, height, width),
                Tensor<float>(1, 1, height, width), Tensor<float>(1, 1, height, width),
                "synth_" + std::to_string(seed)};

  std::vector<double> depth(static_cast<std::size_t>(height) * width, kFarDepth);
  std::vector<int> klass(depth.size(), 0);
  std::vector<std::array<float, 3>> albedo(depth.size(), kClassColors[0]);

  // Ground plane below a horizon: depth falls off as 1 / (row - horizon).
  const double horizon = height * (0.30 + 0.1 * u(rng));
  const double ground_scale = (height - horizon) * (2.0 + u(rng));
  for (int y = 0; y < height; ++y) {
    if (y <= horizon) continue;
    const double d = std::min(kFarDepth, ground_scale / (y - horizon));
    for (int x = 0; x < width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * width + x;
      depth[i] = d;
      klass[i] = 1;
      albedo[i] = kClassColors[1];
    }
  }

  // Fronto-parallel rectangles, nearest wins.
  std::uniform_int_distribution<int> count(opt.min_objects, opt.max_objects);
  const int objects = count(rng);
  for (int k = 0; k < objects; ++k) {
    const int cls = 2 + static_cast<int>(u(rng) * 4) % 4;
    const double d = 3.0 + u(rng) * 27.0;
    const int rh = std::max(2, static_cast<int>(height * (0.15 + 0.45 * u(rng))));
    const int rw = std::max(2, static_cast<int>(width * (0.08 + 0.30 * u(rng))));
    const int top = std::clamp(static_cast<int>(horizon + height * 0.25 * u(rng)) - rh / 2, 0, height - rh);
    const int left = static_cast<int>(u(rng) * (width - rw));
    std::array<float, 3> tint = kClassColors[static_cast<std::size_t>(cls)];
    for (auto& c : tint) c = static_cast<float>(std::clamp(c + 0.2 * (u(rng) - 0.5), 0.0, 1.0));
    for (int y = top; y < top + rh; ++y)
      for (int x = left; x < left + rw; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * width + x;
        if (d < depth[i]) {
          depth[i] = d;
          klass[i] = cls;
          albedo[i] = tint;
        }
      }
  }

  // Shadow bands: diagonal stripes of reduced brightness on the rgb image only.
  struct Band {
    double offset, slope, half_width, attenuation;
  };
  std::vector<Band> bands;
  if (opt.shadows) {
    // Separate stream so toggling shadows leaves every other plane unchanged.
    std::mt19937_64 shadow_rng(mix_seed(seed, 0x5ad0));
    const int n = 1 + static_cast<int>(u(shadow_rng) * 2);
    for (int k = 0; k < n; ++k)
      bands.push_back({u(shadow_rng) * width, -1.0 + 2.0 * u(shadow_rng), width * (0.05 + 0.1 * u(shadow_rng)),
                       0.35 + 0.3 * u(shadow_rng)});
  }

  std::normal_distribution<double> noise(0.0, 0.02);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * width + x;
      const float d = quantize_depth(depth[i]);
      s.gt_depth[i] = d;
      double shade = 1.0 - 0.5 * (d / kFarDepth);
      for (const auto& b : bands)
        if (std::abs(x - (b.offset + b.slope * y)) < b.half_width) shade *= b.attenuation;
      for (int c = 0; c < 3; ++c) {
        s.rgb.plane(0, c)[i] =
            static_cast<float>(std::clamp(albedo[i][static_cast<std::size_t>(c)] * shade + noise(rng), 0.0, 1.0));
        s.semantic.plane(0, c)[i] = kClassColors[static_cast<std::size_t>(klass[i])][static_cast<std::size_t>(c)];
      }
    }

  // Uniform subsampling of exactly round(ratio * H * W) pixels.
  std::vector<std::size_t> order(depth.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const auto keep = static_cast<std::size_t>(std::llround(opt.sparse_ratio * static_cast<double>(depth.size())));
  for (std::size_t k = 0; k < keep; ++k) s.sparse_depth[order[k]] = s.gt_depth[order[k]];
  return s;
}

}  // namespace semattnet
