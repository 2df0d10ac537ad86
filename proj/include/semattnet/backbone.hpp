#pragma once

// Color-guided (CG), semantic-guided (SG) and depth-guided (DG) encoder-decoder
// branches. Each later branch receives the earlier branches' predicted depths
// as input planes and their decoder features at matching strides, merged into
// its encoder by the configured fusion mode.

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "semattnet/attention.hpp"
#include "semattnet/depth_fusion.hpp"
#include "semattnet/nn.hpp"

namespace semattnet {

enum class FusionMode { add, concat, sammafb };
enum class BranchLayout { cg_dg, cg_sg_dg };

inline std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::add: return "add";
    case FusionMode::concat: return "concat";
    case FusionMode::sammafb: return "sammafb";
  }
  return "?";
}
inline std::string to_string(BranchLayout l) { return l == BranchLayout::cg_dg ? "cg_dg" : "cg_sg_dg"; }

// Encoder widths: stem followed by five stride-2 stages.
using StageWidths = std::array<int, 6>;

inline constexpr int kStages = 5;
inline constexpr int kInputMultiple = 32;  // 2^kStages

struct BackboneConfig {
  StageWidths widths{32, 64, 128, 256, 512, 1024};
  BranchLayout layout = BranchLayout::cg_sg_dg;
  FusionMode fusion = FusionMode::sammafb;
  int attention_kernel = 7;
  int dg_extra_layers = 2;

  static BackboneConfig full() { return {}; }
  static BackboneConfig tiny() {
    BackboneConfig c;
    c.widths = {4, 8, 16, 32, 64, 128};
    return c;
  }
  bool has_semantic_branch() const { return layout == BranchLayout::cg_sg_dg; }
};

// Merges an encoder feature with same-stride features injected from earlier
// branches. Inputs are ordered [injected...; own] so the concatenation is
// always [color; semantic; depth].
template <class T>
class StageFusion {
 public:
  StageFusion() = default;
  StageFusion(LayerFactory<T> f, FusionMode mode, int width, int sources, int attention_kernel)
      : mode_(mode), width_(width), sources_(sources) {
    if (mode_ != FusionMode::sammafb || sources_ == 0) return;
    const int channels = out_width();
    const int hidden = channels / default_reduction(channels);
    w0_ = f.kaiming("channel.w0", {hidden, channels, 1, 1}, channels);
    w1_ = f.kaiming("channel.w1", {channels, hidden, 1, 1}, hidden, 1.0);
    kernel_ = f.kaiming("spatial.kernel", {1, 2, attention_kernel, attention_kernel},
                        2 * attention_kernel * attention_kernel, 1.0);
    bias_ = f.constant("spatial.bias", {1, 1, 1, 1}, T(0));
  }

  int out_width() const {
    if (sources_ == 0 || mode_ == FusionMode::add) return width_;
    return (sources_ + 1) * width_;
  }

  Var<T> operator()(const Var<T>& own, std::span<const Var<T>> injected) const {
    if (static_cast<int>(injected.size()) != sources_)
      throw DimensionError("stage fusion: expected " + std::to_string(sources_) +
                           " injected features, got " + std::to_string(injected.size()));
    if (sources_ == 0) return own;
    std::vector<Var<T>> parts(injected.begin(), injected.end());
    for (const auto& p : parts)
      if (p.shape() != own.shape())
        throw DimensionError("stage fusion: injected feature " + p.shape().str() +
                             " does not match encoder feature " + own.shape().str());
    parts.push_back(own);
    switch (mode_) {
      case FusionMode::add: return ops::add_n<T>(parts);
      case FusionMode::concat: return ops::concat<T>(parts);
      case FusionMode::sammafb: return sammafb<T>(parts, w0_, w1_, kernel_, bias_);
    }
    return own;
  }

  ChannelAttentionParams<T> channel_params() const {
    const int channels = out_width();
    return {w0_.value(), w1_.value(), channels / w0_.shape().n};
  }
  SpatialAttentionParams<T> spatial_params() const { return {kernel_.value(), bias_.value()[0]}; }

 private:
  FusionMode mode_ = FusionMode::add;
  int width_ = 0;
  int sources_ = 0;
  Var<T> w0_, w1_, kernel_, bias_;
};

template <class T>
struct BranchOutput {
  Var<T> depth;       // N x 1 x H x W
  Var<T> confidence;  // N x 1 x H x W, raw logits
  // Decoder features at strides 16, 8, 4, 2, 1, for injection downstream.
  std::vector<Var<T>> decoder_features;
  // Last feature map before the output head.
  Var<T> head_features;
};

// One encoder-decoder branch.
template <class T>
class Branch {
 public:
  Branch() = default;
  Branch(LayerFactory<T> f, int in_channels, const StageWidths& widths, int sources, FusionMode mode,
         int attention_kernel, int extra_layers)
      : in_channels_(in_channels), sources_(sources), widths_(widths) {
    stem_ = ConvBn<T>(f.scoped("enc.stem"), in_channels, widths[0], 3, 1);
    fusions_[0] = StageFusion<T>(f.scoped("enc.fuse0"), mode, widths[0], sources, attention_kernel);
    int in = fusions_[0].out_width();
    for (int s = 1; s <= kStages; ++s) {
      const std::string stage = "enc.stage" + std::to_string(s);
      blocks_[s - 1][0] = ResidualBlock<T>(f.scoped(stage + ".block1"), in, widths[s], 2);
      blocks_[s - 1][1] = ResidualBlock<T>(f.scoped(stage + ".block2"), widths[s], widths[s], 1);
      in = widths[s];
      if (s < kStages) {
        fusions_[s] = StageFusion<T>(f.scoped("enc.fuse" + std::to_string(s)), mode, widths[s],
                                     sources, attention_kernel);
        in = fusions_[s].out_width();
      }
    }
    for (int i = 0; i < extra_layers; ++i)
      encoder_extra_.emplace_back(f.scoped("enc.extra" + std::to_string(i)), widths[kStages],
                                  widths[kStages], 3, 1);
    bottleneck_ = ConvBn<T>(f.scoped("dec.conv"), widths[kStages], widths[kStages], 3, 1);
    for (int s = kStages; s >= 1; --s)
      upsamplers_[kStages - s] =
          Upsample<T>(f.scoped("dec.up" + std::to_string(s)), widths[s], widths[s - 1]);
    for (int i = 0; i < extra_layers; ++i)
      decoder_extra_.emplace_back(f.scoped("dec.extra" + std::to_string(i)), widths[0], widths[0], 3, 1);
    head_ = Conv<T>(f.scoped("head"), widths[0], 2, 3, 1, true, 1.0);
  }

  int in_channels() const { return in_channels_; }
  int sources() const { return sources_; }
  const StageFusion<T>& fusion(int stage) const { return fusions_.at(stage); }

  // `injected` holds one list per upstream branch, each with decoder features
  // at strides 16, 8, 4, 2, 1.
  BranchOutput<T> forward(const Var<T>& x, std::span<const std::vector<Var<T>>> injected,
                          bool training) const {
    const Shape s = x.shape();
    if (s.c != in_channels_)
      throw DimensionError("branch: expected " + std::to_string(in_channels_) + " input planes, got " +
                           std::to_string(s.c));
    if (s.h % kInputMultiple != 0 || s.w % kInputMultiple != 0 || s.h == 0 || s.w == 0)
      throw ShapeError("branch: input " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                       " is not divisible by " + std::to_string(kInputMultiple));
    if (static_cast<int>(injected.size()) != sources_)
      throw DimensionError("branch: expected " + std::to_string(sources_) +
                           " injected feature lists, got " + std::to_string(injected.size()));
    for (const auto& list : injected)
      if (list.size() != kStages)
        throw DimensionError("branch: injected feature list must have " + std::to_string(kStages) +
                             " stages, got " + std::to_string(list.size()));

    auto stage_injection = [&](int stage) {
      std::vector<Var<T>> parts;
      for (const auto& list : injected) parts.push_back(list[kStages - 1 - stage]);
      return parts;
    };

    std::array<Var<T>, kStages> skips;  // pre-fusion encoder features, strides 1..16
    Var<T> e = stem_(x, training);
    skips[0] = e;
    Var<T> h = fusions_[0](e, stage_injection(0));
    for (int st = 1; st <= kStages; ++st) {
      e = blocks_[st - 1][1](blocks_[st - 1][0](h, training), training);
      if (st < kStages) {
        skips[st] = e;
        h = fusions_[st](e, stage_injection(st));
      } else {
        h = e;
      }
    }
    for (const auto& layer : encoder_extra_) h = layer(h, training);

    BranchOutput<T> out;
    Var<T> d = bottleneck_(h, training);
    for (int i = 0; i < kStages; ++i) {
      d = ops::add(upsamplers_[i](d, training), skips[kStages - 1 - i]);
      out.decoder_features.push_back(d);
    }
    for (const auto& layer : decoder_extra_) d = layer(d, training);
    out.head_features = d;
    const Var<T> head = head_(d);
    out.depth = ops::slice_channels(head, 0, 1);
    out.confidence = ops::slice_channels(head, 1, 1);
    return out;
  }

 private:
  int in_channels_ = 0;
  int sources_ = 0;
  StageWidths widths_{};
  ConvBn<T> stem_;
  std::array<StageFusion<T>, kStages> fusions_;
  std::array<std::array<ResidualBlock<T>, 2>, kStages> blocks_;
  std::vector<ConvBn<T>> encoder_extra_;
  ConvBn<T> bottleneck_;
  std::array<Upsample<T>, kStages> upsamplers_;
  std::vector<ConvBn<T>> decoder_extra_;
  Conv<T> head_;
};

// Planes for one batch. `semantic` is empty for two-branch layouts.
template <class T>
struct BackboneInput {
  Tensor<T> rgb;       // N x 3 x H x W, [0, 1]
  Tensor<T> semantic;  // N x 3 x H x W, [0, 1]
  Tensor<T> sparse;    // N x 1 x H x W, meters, 0 = missing
};

template <class T>
struct BackboneOutput {
  BranchOutput<T> cg;
  std::optional<BranchOutput<T>> sg;
  BranchOutput<T> dg;
  Var<T> fused;  // confidence-weighted D_f

  std::vector<Var<T>> depths() const {
    std::vector<Var<T>> d{cg.depth};
    if (sg) d.push_back(sg->depth);
    d.push_back(dg.depth);
    return d;
  }
  std::vector<Var<T>> confidences() const {
    std::vector<Var<T>> c{cg.confidence};
    if (sg) c.push_back(sg->confidence);
    c.push_back(dg.confidence);
    return c;
  }
};

template <class T>
class Backbone {
 public:
  Backbone(LayerFactory<T> f, const BackboneConfig& config) : config_(config) {
    const bool three = config.has_semantic_branch();
    cg_ = Branch<T>(f.scoped("cg"), 4, config.widths, 0, config.fusion, config.attention_kernel, 0);
    if (three)
      sg_ = Branch<T>(f.scoped("sg"), 5, config.widths, 1, config.fusion, config.attention_kernel, 0);
    dg_ = Branch<T>(f.scoped("dg"), three ? 3 : 2, config.widths, three ? 2 : 1, config.fusion,
                    config.attention_kernel, config.dg_extra_layers);
  }

  const BackboneConfig& config() const { return config_; }
  const Branch<T>& cg() const { return cg_; }
  const Branch<T>& sg() const { return *sg_; }
  const Branch<T>& dg() const { return dg_; }

  void check_input(const BackboneInput<T>& in) const {
    const Shape s = in.rgb.shape();
    if (s.c != 3) throw DimensionError("backbone: rgb must have 3 planes, got " + s.str());
    if (in.sparse.shape() != Shape{s.n, 1, s.h, s.w})
      throw DimensionError("backbone: sparse depth " + in.sparse.shape().str() +
                           " not aligned with rgb " + s.str());
    if (config_.has_semantic_branch()) {
      if (in.semantic.shape() != Shape{s.n, 3, s.h, s.w})
        throw ConfigError("backbone: three-branch layout requires a 3-plane semantic image aligned "
                          "with rgb, got " + in.semantic.shape().str());
    } else if (!in.semantic.empty()) {
      throw ConfigError("backbone: two-branch layout (cg_dg) does not accept semantic input");
    }
  }

  // CG -> SG -> DG, then confidence fusion.
  BackboneOutput<T> forward(const BackboneInput<T>& in, bool training) const {
    check_input(in);
    const Var<T> sparse(in.sparse);
    BackboneOutput<T> out;
    {
      const std::vector<Var<T>> planes{Var<T>(in.rgb), sparse};
      out.cg = cg_.forward(ops::concat<T>(planes), {}, training);
    }
    std::vector<std::vector<Var<T>>> injected{out.cg.decoder_features};
    std::vector<Var<T>> dg_planes{out.cg.depth};
    if (sg_) {
      const std::vector<Var<T>> planes{out.cg.depth, Var<T>(in.semantic), sparse};
      out.sg = sg_->forward(ops::concat<T>(planes), injected, training);
      injected.push_back(out.sg->decoder_features);
      dg_planes.push_back(out.sg->depth);
    }
    dg_planes.push_back(sparse);
    out.dg = dg_.forward(ops::concat<T>(dg_planes), injected, training);
    out.fused = confidence_fuse<T>(out.depths(), out.confidences());
    return out;
  }

 private:
  BackboneConfig config_;
  Branch<T> cg_;
  std::optional<Branch<T>> sg_;
  Branch<T> dg_;
};

}  // namespace semattnet
