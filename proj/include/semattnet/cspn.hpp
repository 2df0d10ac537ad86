#pragma once

// Convolutional spatial propagation with dilated (atrous) neighborhoods.
//
// Affinities are normalized once by the per-pixel L1 mass of the raw
// neighbor values; the center keeps the remaining mass. Neighbors that fall
// outside the image contribute no value and their weight stays with the
// center, so every step is an affine combination whose weights sum to 1:
//
//   h'(i) = h(i) + sum_{j in-bounds} k_j(i) * (h(i + d * o_j) - h(i))

#include <cmath>
#include <utility>
#include <vector>

#include "semattnet/ops.hpp"

namespace semattnet {

// (dy, dx) offsets of a k x k stencil in row-major order, center excluded.
inline std::vector<std::pair<int, int>> stencil_offsets(int kernel) {
  if (kernel < 3 || kernel % 2 == 0) throw ValidationError("stencil: kernel must be odd and >= 3");
  std::vector<std::pair<int, int>> offsets;
  const int r = kernel / 2;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (dy != 0 || dx != 0) offsets.emplace_back(dy, dx);
  return offsets;
}

template <class T>
struct AffinityField {
  Tensor<T> raw;  // N x (k*k - 1) x H x W
  int kernel = 3;

  void validate() const {
    if (kernel < 3 || kernel % 2 == 0) throw ValidationError("affinity: kernel must be odd and >= 3");
    if (raw.c() != kernel * kernel - 1)
      throw DimensionError("affinity: expected " + std::to_string(kernel * kernel - 1) +
                           " neighbor channels, got " + std::to_string(raw.c()));
    if (!raw.all_finite()) throw ValidationError("affinity: non-finite values");
  }
};

template <class T>
struct NormalizedAffinity {
  Tensor<T> neighbors;    // N x (k*k - 1) x H x W, signed
  Tensor<T> self_weight;  // N x 1 x H x W, 1 - sum(neighbors)
  int kernel = 3;
};

struct DilationSchedule {
  static constexpr std::size_t kIterations = 12;
  std::vector<int> rates;

  // Dilation 2 for the first six steps, then 1.
  static DilationSchedule standard() { return {{2, 2, 2, 2, 2, 2, 1, 1, 1, 1, 1, 1}}; }

  void validate() const {
    if (rates.size() != kIterations)
      throw ValidationError("dilation schedule must have " + std::to_string(kIterations) +
                            " entries, got " + std::to_string(rates.size()));
    for (int r : rates)
      if (r < 1) throw ValidationError("dilation rates must be >= 1");
  }

  // Chebyshev radius reachable by the full schedule for a k x k stencil.
  int reach(int kernel) const {
    int total = 0;
    for (int r : rates) total += r;
    return total * (kernel / 2);
  }
};

// ---- differentiable steps

template <class T>
Var<T> normalize_affinity(const Var<T>& raw) {
  const Shape s = raw.shape();
  const std::size_t plane = s.plane();
  Tensor<T> out(s);
  Tensor<T> mass(s.n, 1, s.h, s.w);
  for (int b = 0; b < s.n; ++b) {
    T* m = mass.plane(b, 0);
    for (int j = 0; j < s.c; ++j) {
      const T* p = raw.value().plane(b, j);
      for (std::size_t i = 0; i < plane; ++i) m[i] += std::abs(p[i]);
    }
    for (int j = 0; j < s.c; ++j) {
      const T* p = raw.value().plane(b, j);
      T* q = out.plane(b, j);
      for (std::size_t i = 0; i < plane; ++i) q[i] = m[i] > T(0) ? p[i] / m[i] : T(0);
    }
  }
  return make_result<T>(std::move(out), {raw}, [s, plane, mass = std::move(mass)](Node<T>& self) {
    Node<T>& rn = *self.parents[0];
    Tensor<T>& dr = rn.grad_buffer();
    for (int b = 0; b < s.n; ++b) {
      const T* m = mass.plane(b, 0);
      for (std::size_t i = 0; i < plane; ++i) {
        if (!(m[i] > T(0))) continue;
        T dot = 0;  // sum_j g_j * raw_j
        for (int j = 0; j < s.c; ++j) dot += self.grad.plane(b, j)[i] * rn.value.plane(b, j)[i];
        const T inv = T(1) / m[i];
        for (int j = 0; j < s.c; ++j) {
          const T r = rn.value.plane(b, j)[i];
          const T sign = r > T(0) ? T(1) : (r < T(0) ? T(-1) : T(0));
          dr.plane(b, j)[i] += self.grad.plane(b, j)[i] * inv - sign * dot * inv * inv;
        }
      }
    }
  });
}

// One propagation step of h (N x 1 x H x W) with normalized neighbor weights.
template <class T>
Var<T> propagate_step(const Var<T>& h, const Var<T>& neighbors, int kernel, int dilation) {
  const Shape s = h.shape();
  const auto offsets = stencil_offsets(kernel);
  if (s.c != 1 || neighbors.shape() != Shape{s.n, static_cast<int>(offsets.size()), s.h, s.w})
    throw DimensionError("propagate_step: state " + s.str() + " / affinity " +
                         neighbors.shape().str());
  if (dilation < 1) throw ValidationError("propagate_step: dilation must be >= 1");
  Tensor<T> out = h.value();
  for (int b = 0; b < s.n; ++b) {
    const T* hv = h.value().plane(b, 0);
    T* o = out.plane(b, 0);
    for (std::size_t j = 0; j < offsets.size(); ++j) {
      const int oy = offsets[j].first * dilation, ox = offsets[j].second * dilation;
      const T* kv = neighbors.value().plane(b, static_cast<int>(j));
      for (int y = std::max(0, -oy); y < std::min(s.h, s.h - oy); ++y)
        for (int x = std::max(0, -ox); x < std::min(s.w, s.w - ox); ++x) {
          const std::size_t i = static_cast<std::size_t>(y) * s.w + x;
          o[i] += kv[i] * (hv[i + static_cast<std::ptrdiff_t>(oy) * s.w + ox] - hv[i]);
        }
    }
  }
  return make_result<T>(std::move(out), {h, neighbors}, [s, offsets, dilation](Node<T>& self) {
    Node<T>& hn = *self.parents[0];
    Node<T>& kn = *self.parents[1];
    for (int b = 0; b < s.n; ++b) {
      const T* g = self.grad.plane(b, 0);
      const T* hv = hn.value.plane(b, 0);
      T* dh = hn.requires_grad ? hn.grad_buffer().plane(b, 0) : nullptr;
      if (dh)
        for (std::size_t i = 0; i < s.plane(); ++i) dh[i] += g[i];
      for (std::size_t j = 0; j < offsets.size(); ++j) {
        const int oy = offsets[j].first * dilation, ox = offsets[j].second * dilation;
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(oy) * s.w + ox;
        const T* kv = kn.value.plane(b, static_cast<int>(j));
        T* dk = kn.requires_grad ? kn.grad_buffer().plane(b, static_cast<int>(j)) : nullptr;
        for (int y = std::max(0, -oy); y < std::min(s.h, s.h - oy); ++y)
          for (int x = std::max(0, -ox); x < std::min(s.w, s.w - ox); ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * s.w + x;
            if (dk) dk[i] += g[i] * (hv[i + shift] - hv[i]);
            if (dh) {
              dh[i + shift] += g[i] * kv[i];
              dh[i] -= g[i] * kv[i];
            }
          }
      }
    }
  });
}

// Replaces h wherever the sparse map holds a measurement (> 0).
template <class T>
Var<T> reinject(const Var<T>& h, const Tensor<T>& sparse) {
  Tensor<T>::require_same_shape(h.value(), sparse, "reinject");
  Tensor<T> out = h.value();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (sparse[i] > T(0)) out[i] = sparse[i];
  return make_result<T>(std::move(out), {h}, [sparse](Node<T>& self) {
    Tensor<T>& dh = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < dh.size(); ++i)
      if (!(sparse[i] > T(0))) dh[i] += self.grad[i];
  });
}

// Normalizes once, then runs the schedule with re-injection after each step.
template <class T>
Var<T> refine(const Var<T>& fused, const Tensor<T>& sparse, const Var<T>& raw_affinity, int kernel,
              const DilationSchedule& schedule) {
  schedule.validate();
  const Var<T> neighbors = normalize_affinity(raw_affinity);
  Var<T> state = fused;
  for (int rate : schedule.rates) state = reinject(propagate_step(state, neighbors, kernel, rate), sparse);
  return state;
}

// ---- value-level API

template <class T>
NormalizedAffinity<T> normalize_affinity(const AffinityField<T>& raw) {
  raw.validate();
  NoGradGuard guard;
  NormalizedAffinity<T> out{normalize_affinity(Var<T>(raw.raw)).value(),
                            Tensor<T>(raw.raw.n(), 1, raw.raw.h(), raw.raw.w(), T(1)), raw.kernel};
  const std::size_t plane = out.self_weight.shape().plane();
  for (int b = 0; b < out.neighbors.n(); ++b)
    for (int j = 0; j < out.neighbors.c(); ++j) {
      const T* p = out.neighbors.plane(b, j);
      T* sw = out.self_weight.plane(b, 0);
      for (std::size_t i = 0; i < plane; ++i) sw[i] -= p[i];
    }
  return out;
}

template <class T>
void validate_normalized(const NormalizedAffinity<T>& k, T tolerance = T(1e-5)) {
  const Shape s = k.neighbors.shape();
  if (k.self_weight.shape() != Shape{s.n, 1, s.h, s.w} || s.c != k.kernel * k.kernel - 1)
    throw DimensionError("normalized affinity: inconsistent shapes");
  const std::size_t plane = s.plane();
  for (int b = 0; b < s.n; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      T l1 = 0, total = k.self_weight.plane(b, 0)[i];
      for (int j = 0; j < s.c; ++j) {
        const T v = k.neighbors.plane(b, j)[i];
        l1 += std::abs(v);
        total += v;
      }
      const bool unit_mass = std::abs(l1 - T(1)) <= tolerance || l1 == T(0);
      if (!unit_mass || std::abs(total - T(1)) > tolerance || !std::isfinite(total))
        throw ValidationError("propagate_step: affinities are not normalized at pixel " +
                              std::to_string(i));
    }
}

// h: 1 x 1 x H x W (or batched).
template <class T>
Tensor<T> propagate_step(const Tensor<T>& h, const NormalizedAffinity<T>& kappa, int dilation) {
  validate_normalized(kappa);
  NoGradGuard guard;
  return propagate_step(Var<T>(h), Var<T>(kappa.neighbors), kappa.kernel, dilation).value();
}

template <class T>
Tensor<T> refine(const Tensor<T>& fused, const Tensor<T>& sparse, const AffinityField<T>& raw,
                 const DilationSchedule& schedule) {
  raw.validate();
  if (fused.shape() != sparse.shape() || fused.c() != 1 ||
      raw.raw.shape() != Shape{fused.n(), raw.raw.c(), fused.h(), fused.w()})
    throw DimensionError("refine: misaligned inputs " + fused.shape().str() + ", " +
                         sparse.shape().str() + ", " + raw.raw.shape().str());
  NoGradGuard guard;
  auto out = refine(Var<T>(fused), sparse, Var<T>(raw.raw), raw.kernel, schedule).value();
  if (!out.all_finite()) throw ValidationError("refine: non-finite output");
  return out;
}

}  // namespace semattnet
