#pragma once

#include <cstdint>
#include <memory>
#include <random>

#include "semattnet/backbone.hpp"
#include "semattnet/cspn.hpp"

namespace semattnet {

struct ModelConfig {
  BackboneConfig backbone = BackboneConfig::tiny();
  bool refinement = true;
  int cspn_kernel = 3;
  DilationSchedule schedule = DilationSchedule::standard();
};

template <class T>
struct ModelOutput {
  BackboneOutput<T> backbone;
  Var<T> affinity;  // raw N x (k*k - 1) x H x W, only with refinement
  Var<T> refined;

  // Final depth: refined when refinement is enabled, else D_f.
  const Var<T>& prediction() const { return refined.defined() ? refined : backbone.fused; }
};

// Backbone plus the optional propagation stage. Owns all parameters.
template <class T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed)
      : config_(config), store_(std::make_unique<ParamStore<T>>()), rng_(seed) {
    config_.schedule.validate();
    LayerFactory<T> root(*store_, rng_, "model");
    backbone_ = std::make_unique<Backbone<T>>(root.scoped("backbone"), config_.backbone);
    if (config_.refinement) {
      const int neighbors = config_.cspn_kernel * config_.cspn_kernel - 1;
      affinity_head_ = Conv<T>(root.scoped("refine.affinity"), config_.backbone.widths[0], neighbors,
                               3, 1, true, 0.1);
      // Positive raw affinities make the initial propagation a smoothing one.
      affinity_head_.bias.mutable_value().fill(T(1));
    }
  }

  const ModelConfig& config() const { return config_; }
  const Backbone<T>& backbone() const { return *backbone_; }
  ParamStore<T>& params() { return *store_; }
  const ParamStore<T>& params() const { return *store_; }

  // `with_refinement = false` stops after the backbone (first training stage).
  ModelOutput<T> forward(const BackboneInput<T>& in, bool training, bool with_refinement = true) const {
    ModelOutput<T> out;
    out.backbone = backbone_->forward(in, training);
    if (config_.refinement && with_refinement) {
      out.affinity = affinity_head_(out.backbone.dg.head_features);
      out.refined = refine<T>(out.backbone.fused, in.sparse, out.affinity, config_.cspn_kernel,
                              config_.schedule);
    }
    return out;
  }

 private:
  ModelConfig config_;
  std::unique_ptr<ParamStore<T>> store_;
  std::mt19937_64 rng_;
  std::unique_ptr<Backbone<T>> backbone_;
  Conv<T> affinity_head_;
};

}  // namespace semattnet
