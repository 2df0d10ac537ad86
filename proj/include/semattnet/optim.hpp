#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <string>

#include "semattnet/nn.hpp"

namespace semattnet {

struct AdamOptions {
  double lr = 0.00128;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 1e-6;  // L2 term added to the gradient
};

// Adam over every trainable parameter of a store. Moments are keyed by
// parameter name so they can be checkpointed.
template <class T>
class Adam {
 public:
  explicit Adam(AdamOptions options) : options_(options) {}

  const AdamOptions& options() const { return options_; }
  double lr() const { return options_.lr; }
  void set_lr(double lr) { options_.lr = lr; }
  long step_count() const { return steps_; }

  void step(ParamStore<T>& store) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    for (const auto& name : store.param_names()) {
      Var<T>& p = store.param(name);
      auto& node = *p.node();
      if (!node.requires_grad || !node.has_grad()) continue;
      auto& [m, v] = moments(name, node.value.shape());
      Tensor<T>& w = node.value;
      const Tensor<T>& g = node.grad;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double grad = static_cast<double>(g[i]) + options_.weight_decay * w[i];
        m[i] = static_cast<T>(options_.beta1 * m[i] + (1 - options_.beta1) * grad);
        v[i] = static_cast<T>(options_.beta2 * v[i] + (1 - options_.beta2) * grad * grad);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] = static_cast<T>(w[i] - options_.lr * mhat / (std::sqrt(vhat) + options_.eps));
      }
    }
  }

  // Checkpoint access.
  std::map<std::string, std::pair<Tensor<T>, Tensor<T>>>& state() { return state_; }
  const std::map<std::string, std::pair<Tensor<T>, Tensor<T>>>& state() const { return state_; }
  void set_step_count(long steps) { steps_ = steps; }

 private:
  std::pair<Tensor<T>, Tensor<T>>& moments(const std::string& name, Shape shape) {
    auto it = state_.find(name);
    if (it == state_.end()) it = state_.emplace(name, std::make_pair(Tensor<T>(shape), Tensor<T>(shape))).first;
    return it->second;
  }

  AdamOptions options_;
  long steps_ = 0;
  std::map<std::string, std::pair<Tensor<T>, Tensor<T>>> state_;
};

// Multiplies the learning rate by `factor` after `patience` epochs without
// improvement of the monitored metric (lower is better).
struct PlateauScheduler {
  double factor = 0.5;
  int patience = 3;
  double min_lr = 1e-7;
  double best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;

  // Returns the (possibly reduced) learning rate.
  double observe(double metric, double lr) {
    if (metric < best) {
      best = metric;
      bad_epochs = 0;
      return lr;
    }
    if (++bad_epochs > patience) {
      bad_epochs = 0;
      return std::max(min_lr, lr * factor);
    }
    return lr;
  }
};

}  // namespace semattnet
