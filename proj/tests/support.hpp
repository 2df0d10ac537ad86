#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "semattnet/autograd.hpp"
#include "semattnet/tensor.hpp"

namespace testing_support {

using semattnet::Shape;
using semattnet::Tensor;
using semattnet::Var;

template <class T = double>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, T lo = T(-1), T hi = T(1)) {
  std::mt19937_64 rng(seed);
  Tensor<T> t(s);
  t.fill_uniform(rng, lo, hi);
  return t;
}

template <class T>
double max_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheck {
  double worst = 0;
  std::size_t checked = 0;
  std::string where;
};

// Compares backward() against central differences for every entry of every
// leaf (or `per_leaf` random entries when nonzero). `loss` rebuilds the graph.
inline GradCheck grad_check(std::vector<Var<double>> leaves,
                            const std::function<Var<double>()>& loss, double step, double floor,
                            std::size_t per_leaf = 0, std::uint64_t seed = 7) {
  for (auto& l : leaves) l.node()->zero_grad();
  semattnet::backward(loss());
  std::vector<Tensor<double>> analytic;
  for (auto& l : leaves) analytic.push_back(l.grad());

  GradCheck out;
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    Tensor<double>& v = leaves[k].mutable_value();
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (per_leaf > 0 && per_leaf < idx.size()) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(per_leaf);
    }
    for (std::size_t i : idx) {
      const double orig = v[i];
      double plus, minus;
      {
        semattnet::NoGradGuard g;
        v[i] = orig + step;
        plus = loss().value()[0];
        v[i] = orig - step;
        minus = loss().value()[0];
      }
      v[i] = orig;
      const double numeric = (plus - minus) / (2 * step);
      const double a = analytic[k].empty() ? 0.0 : analytic[k][i];
      const double e = relative_error(a, numeric, floor);
      ++out.checked;
      if (e > out.worst) {
        out.worst = e;
        out.where = "leaf " + std::to_string(k) + " entry " + std::to_string(i) + ": analytic " +
                    std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return out;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("semattnet_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& child = "") const {
    return child.empty() ? path_.string() : (path_ / child).string();
  }

 private:
  std::filesystem::path path_;
};

}  // namespace testing_support
