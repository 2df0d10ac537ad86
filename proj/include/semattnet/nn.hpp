#pragma once

// Parameter storage and the small layer vocabulary the branches are built from.

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "semattnet/ops.hpp"

namespace semattnet {

// Named trainable parameters plus non-trainable buffers (running statistics).
// Names are unique; iteration follows insertion order.
template <class T>
class ParamStore {
 public:
  Var<T> add_param(const std::string& name, Tensor<T> init) {
    if (params_.count(name) || buffers_.count(name))
      throw ValidationError("duplicate parameter name '" + name + "'");
    auto [it, ok] = params_.emplace(name, Var<T>(std::move(init), true));
    param_order_.push_back(name);
    return it->second;
  }

  Tensor<T>* add_buffer(const std::string& name, Tensor<T> init) {
    if (params_.count(name) || buffers_.count(name))
      throw ValidationError("duplicate buffer name '" + name + "'");
    auto [it, ok] = buffers_.emplace(name, std::move(init));
    buffer_order_.push_back(name);
    return &it->second;
  }

  const std::vector<std::string>& param_names() const { return param_order_; }
  const std::vector<std::string>& buffer_names() const { return buffer_order_; }

  Var<T>& param(const std::string& name) { return lookup(params_, name); }
  const Var<T>& param(const std::string& name) const { return lookup(params_, name); }
  Tensor<T>& buffer(const std::string& name) { return lookup(buffers_, name); }
  const Tensor<T>& buffer(const std::string& name) const { return lookup(buffers_, name); }
  bool has_param(const std::string& name) const { return params_.count(name) > 0; }
  bool has_buffer(const std::string& name) const { return buffers_.count(name) > 0; }

  void zero_grad() {
    for (auto& [name, p] : params_) p.node()->zero_grad();
  }

  // Enables/disables gradient flow into every parameter whose name starts
  // with `prefix`.
  void set_trainable(const std::string& prefix, bool trainable) {
    for (auto& [name, p] : params_)
      if (name.rfind(prefix, 0) == 0) p.node()->requires_grad = trainable;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) n += p.value().size();
    return n;
  }

 private:
  template <class Map>
  static auto& lookup(Map& m, const std::string& name) {
    auto it = m.find(name);
    if (it == m.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::map<std::string, Var<T>> params_;
  std::map<std::string, Tensor<T>> buffers_;
  std::vector<std::string> param_order_;
  std::vector<std::string> buffer_order_;
};

// Registers layers under a dotted name prefix with seeded initialization.
template <class T>
class LayerFactory {
 public:
  LayerFactory(ParamStore<T>& store, std::mt19937_64& rng, std::string prefix)
      : store_(store), rng_(rng), prefix_(std::move(prefix)) {}

  LayerFactory scoped(const std::string& child) const {
    return LayerFactory(store_, rng_, prefix_ + "." + child);
  }
  std::string name(const std::string& leaf) const { return prefix_ + "." + leaf; }

  // He-normal initialization for a weight with the given fan-in.
  Var<T> kaiming(const std::string& leaf, Shape shape, int fan_in, double gain = 2.0) {
    Tensor<T> w(shape);
    w.fill_normal(rng_, T(0), static_cast<T>(std::sqrt(gain / fan_in)));
    return store_.add_param(name(leaf), std::move(w));
  }
  Var<T> constant(const std::string& leaf, Shape shape, T value) {
    return store_.add_param(name(leaf), Tensor<T>(shape, value));
  }
  Tensor<T>* buffer(const std::string& leaf, Shape shape, T value) {
    return store_.add_buffer(name(leaf), Tensor<T>(shape, value));
  }
  std::mt19937_64& rng() { return rng_; }

 private:
  ParamStore<T>& store_;
  std::mt19937_64& rng_;
  std::string prefix_;
};

template <class T>
struct BatchNorm {
  Var<T> gamma, beta;
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;

  BatchNorm() = default;
  BatchNorm(LayerFactory<T> f, int channels)
      : gamma(f.constant("gamma", {channels, 1, 1, 1}, T(1))),
        beta(f.constant("beta", {channels, 1, 1, 1}, T(0))),
        running_mean(f.buffer("running_mean", {channels, 1, 1, 1}, T(0))),
        running_var(f.buffer("running_var", {channels, 1, 1, 1}, T(1))) {}

  Var<T> operator()(const Var<T>& x, bool training) const {
    return ops::batch_norm(x, gamma, beta, *running_mean, *running_var, training);
  }
};

// Convolution with optional bias.
template <class T>
struct Conv {
  Var<T> weight, bias;
  ops::ConvGeometry geometry;

  Conv() = default;
  Conv(LayerFactory<T> f, int in, int out, int kernel, int stride, bool with_bias, double gain = 2.0)
      : weight(f.kaiming("weight", {out, in, kernel, kernel}, in * kernel * kernel, gain)),
        geometry{kernel, stride, kernel / 2, 1} {
    if (with_bias) bias = f.constant("bias", {out, 1, 1, 1}, T(0));
  }

  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias, geometry); }
};

// conv -> batch norm -> optional relu.
template <class T>
struct ConvBn {
  Conv<T> conv;
  BatchNorm<T> bn;
  bool relu = true;

  ConvBn() = default;
  ConvBn(LayerFactory<T> f, int in, int out, int kernel, int stride, bool with_relu = true)
      : conv(f.scoped("conv"), in, out, kernel, stride, false),
        bn(f.scoped("bn"), out),
        relu(with_relu) {}

  Var<T> operator()(const Var<T>& x, bool training) const {
    auto y = bn(conv(x), training);
    return relu ? ops::relu(y) : y;
  }
};

// Basic two-convolution residual block with a projection shortcut when the
// width or stride changes.
template <class T>
struct ResidualBlock {
  ConvBn<T> first, second;
  ConvBn<T> projection;
  bool has_projection = false;

  ResidualBlock() = default;
  ResidualBlock(LayerFactory<T> f, int in, int out, int stride)
      : first(f.scoped("conv1"), in, out, 3, stride),
        second(f.scoped("conv2"), out, out, 3, 1, false),
        has_projection(in != out || stride != 1) {
    if (has_projection) projection = ConvBn<T>(f.scoped("shortcut"), in, out, 1, stride, false);
  }

  Var<T> operator()(const Var<T>& x, bool training) const {
    auto y = second(first(x, training), training);
    auto shortcut = has_projection ? projection(x, training) : x;
    return ops::relu(ops::add(y, shortcut));
  }
};

// 2x upsampling: 3x3 transposed conv (stride 2) -> batch norm -> relu.
template <class T>
struct Upsample {
  Var<T> weight;
  BatchNorm<T> bn;

  Upsample() = default;
  Upsample(LayerFactory<T> f, int in, int out)
      : weight(f.kaiming("weight", {in, out, 3, 3}, in * 9 / 4)), bn(f.scoped("bn"), out) {}

  Var<T> operator()(const Var<T>& x, bool training) const {
    return ops::relu(bn(ops::conv_transpose2d(x, weight, Var<T>(), {3, 2, 1, 1}, 1), training));
  }
};

}  // namespace semattnet
