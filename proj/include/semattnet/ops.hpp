#pragma once

// Differentiable tensor primitives used by every network module.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "semattnet/autograd.hpp"

namespace semattnet::ops {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int pad = 0;
  int dilation = 1;

  int out_extent(int in) const { return (in + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1; }
  bool pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
};

namespace detail {

// cols is (channels*k*k) x (out_h*out_w), row-major.
template <class T>
void im2col(const T* src, int channels, int height, int width, const ConvGeometry& g, int out_h,
            int out_w, T* cols) {
  const int k = g.kernel;
  for (int c = 0; c < channels; ++c) {
    const T* plane = src + static_cast<std::size_t>(c) * height * width;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        T* row = cols + (static_cast<std::size_t>(c) * k * k + ki * k + kj) * out_h * out_w;
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * g.stride - g.pad + ki * g.dilation;
          T* dst = row + static_cast<std::size_t>(oh) * out_w;
          if (ih < 0 || ih >= height) {
            std::fill_n(dst, out_w, T(0));
            continue;
          }
          const T* line = plane + static_cast<std::size_t>(ih) * width;
          const int offset = kj * g.dilation - g.pad;
          if (g.stride == 1) {
            for (int ow = 0; ow < out_w; ++ow) {
              const int iw = ow + offset;
              dst[ow] = (iw >= 0 && iw < width) ? line[iw] : T(0);
            }
          } else {
            for (int ow = 0; ow < out_w; ++ow) {
              const int iw = ow * g.stride + offset;
              dst[ow] = (iw >= 0 && iw < width) ? line[iw] : T(0);
            }
          }
        }
      }
    }
  }
}

// Scatter-add inverse of im2col.
template <class T>
void col2im(const T* cols, int channels, int height, int width, const ConvGeometry& g, int out_h,
            int out_w, T* dst) {
  const int k = g.kernel;
  for (int c = 0; c < channels; ++c) {
    T* plane = dst + static_cast<std::size_t>(c) * height * width;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const T* row = cols + (static_cast<std::size_t>(c) * k * k + ki * k + kj) * out_h * out_w;
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * g.stride - g.pad + ki * g.dilation;
          if (ih < 0 || ih >= height) continue;
          T* line = plane + static_cast<std::size_t>(ih) * width;
          const T* src = row + static_cast<std::size_t>(oh) * out_w;
          const int offset = kj * g.dilation - g.pad;
          for (int ow = 0; ow < out_w; ++ow) {
            const int iw = ow * g.stride + offset;
            if (iw >= 0 && iw < width) line[iw] += src[ow];
          }
        }
      }
    }
  }
}

template <class T>
Tensor<T>& accumulate(Node<T>& parent) {
  return parent.grad_buffer();
}

}  // namespace detail

// x: N x Cin x H x W, weight: Cout x Cin x k x k, bias: Cout x 1 x 1 x 1 or undefined.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvGeometry g) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.h != g.kernel || ws.w != g.kernel || ws.c != xs.c)
    throw DimensionError("conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
  if (bias.defined() && bias.value().size() != static_cast<std::size_t>(ws.n))
    throw DimensionError("conv2d: bias size mismatch");
  const int out_h = g.out_extent(xs.h);
  const int out_w = g.out_extent(xs.w);
  if (out_h <= 0 || out_w <= 0) throw ShapeError("conv2d: empty output for input " + xs.str());

  const int cout = ws.n;
  const int kdim = xs.c * g.kernel * g.kernel;
  const int npix = out_h * out_w;
  Tensor<T> out(xs.n, cout, out_h, out_w);
  Buffer<T> cols(g.pointwise() ? 0 : static_cast<std::size_t>(kdim) * npix);
  ConstMatMap<T> wm(weight.value().data(), cout, kdim);
  for (int b = 0; b < xs.n; ++b) {
    const T* colptr = x.value().plane(b, 0);
    if (!g.pointwise()) {
      detail::im2col(x.value().plane(b, 0), xs.c, xs.h, xs.w, g, out_h, out_w, cols.data());
      colptr = cols.data();
    }
    MatMap<T> ym(out.plane(b, 0), cout, npix);
    ym.noalias() = wm * ConstMatMap<T>(colptr, kdim, npix);
    if (bias.defined())
      for (int o = 0; o < cout; ++o) ym.row(o).array() += bias.value()[o];
  }

  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(out), inputs, [g, xs, cout, kdim, npix, out_h, out_w](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Node<T>& wn = *self.parents[1];
    Node<T>* bn = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    Buffer<T> cols(static_cast<std::size_t>(kdim) * npix);
    Buffer<T> dcols(xn.requires_grad && !g.pointwise() ? cols.size() : 0);
    ConstMatMap<T> wm(wn.value.data(), cout, kdim);
    for (int b = 0; b < xs.n; ++b) {
      ConstMatMap<T> dy(self.grad.plane(b, 0), cout, npix);
      if (wn.requires_grad) {
        const T* colptr = xn.value.plane(b, 0);
        if (!g.pointwise()) {
          detail::im2col(xn.value.plane(b, 0), xs.c, xs.h, xs.w, g, out_h, out_w, cols.data());
          colptr = cols.data();
        }
        MatMap<T> dw(wn.grad_buffer().data(), cout, kdim);
        dw.noalias() += dy * ConstMatMap<T>(colptr, kdim, npix).transpose();
      }
      if (bn && bn->requires_grad) {
        Tensor<T>& db = bn->grad_buffer();
        for (int o = 0; o < cout; ++o) db[o] += dy.row(o).sum();
      }
      if (xn.requires_grad) {
        if (g.pointwise()) {
          MatMap<T> dx(xn.grad_buffer().plane(b, 0), kdim, npix);
          dx.noalias() += wm.transpose() * dy;
        } else {
          MatMap<T> dc(dcols.data(), kdim, npix);
          dc.noalias() = wm.transpose() * dy;
          detail::col2im(dcols.data(), xs.c, xs.h, xs.w, g, out_h, out_w,
                         xn.grad_buffer().plane(b, 0));
        }
      }
    }
  });
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, ConvGeometry g) {
  return conv2d(x, weight, Var<T>(), g);
}

// Transposed convolution; weight: Cin x Cout x k x k. Output extent is
// (in - 1) * stride - 2 * pad + dilation * (k - 1) + output_padding + 1.
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvGeometry g,
                        int output_padding) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.n != xs.c || ws.h != g.kernel || ws.w != g.kernel)
    throw DimensionError("conv_transpose2d: weight " + ws.str() + " incompatible with input " +
                         xs.str());
  const int cout = ws.c;
  const int out_h = (xs.h - 1) * g.stride - 2 * g.pad + g.dilation * (g.kernel - 1) + output_padding + 1;
  const int out_w = (xs.w - 1) * g.stride - 2 * g.pad + g.dilation * (g.kernel - 1) + output_padding + 1;
  if (g.out_extent(out_h) != xs.h || g.out_extent(out_w) != xs.w)
    throw ShapeError("conv_transpose2d: inconsistent geometry");
  const int kdim = cout * g.kernel * g.kernel;
  const int npix_in = xs.h * xs.w;
  const int npix_out = out_h * out_w;

  Tensor<T> out(xs.n, cout, out_h, out_w);
  Buffer<T> cols(static_cast<std::size_t>(kdim) * npix_in);
  ConstMatMap<T> wm(weight.value().data(), xs.c, kdim);
  for (int b = 0; b < xs.n; ++b) {
    MatMap<T> cm(cols.data(), kdim, npix_in);
    cm.noalias() = wm.transpose() * ConstMatMap<T>(x.value().plane(b, 0), xs.c, npix_in);
    detail::col2im(cols.data(), cout, out_h, out_w, g, xs.h, xs.w, out.plane(b, 0));
    if (bias.defined())
      for (int o = 0; o < cout; ++o) {
        T* p = out.plane(b, o);
        for (int i = 0; i < npix_out; ++i) p[i] += bias.value()[o];
      }
  }

  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(out), inputs,
                        [g, xs, cout, kdim, npix_in, npix_out, out_h, out_w](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Node<T>& wn = *self.parents[1];
    Node<T>* bn = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    Buffer<T> cols(static_cast<std::size_t>(kdim) * npix_in);
    ConstMatMap<T> wm(wn.value.data(), xs.c, kdim);
    for (int b = 0; b < xs.n; ++b) {
      detail::im2col(self.grad.plane(b, 0), cout, out_h, out_w, g, xs.h, xs.w, cols.data());
      ConstMatMap<T> cm(cols.data(), kdim, npix_in);
      if (xn.requires_grad) {
        MatMap<T> dx(xn.grad_buffer().plane(b, 0), xs.c, npix_in);
        dx.noalias() += wm * cm;
      }
      if (wn.requires_grad) {
        MatMap<T> dw(wn.grad_buffer().data(), xs.c, kdim);
        dw.noalias() += ConstMatMap<T>(xn.value.plane(b, 0), xs.c, npix_in) * cm.transpose();
      }
      if (bn && bn->requires_grad) {
        Tensor<T>& db = bn->grad_buffer();
        for (int o = 0; o < cout; ++o) {
          const T* p = self.grad.plane(b, o);
          T acc = 0;
          for (int i = 0; i < npix_out; ++i) acc += p[i];
          db[o] += acc;
        }
      }
    }
  });
}

// Per-channel normalization over (N, H, W). In training mode batch statistics
// are used and the running estimates are updated in place.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  const Shape s = x.shape();
  if (gamma.value().size() != static_cast<std::size_t>(s.c) ||
      beta.value().size() != static_cast<std::size_t>(s.c))
    throw DimensionError("batch_norm: affine parameters do not match " + s.str());
  const std::size_t plane = s.plane();
  const double count = static_cast<double>(s.n) * plane;

  std::vector<T> mean(s.c), inv_std(s.c);
  for (int c = 0; c < s.c; ++c) {
    if (training) {
      double sum = 0;
      for (int b = 0; b < s.n; ++b) {
        const T* p = x.value().plane(b, c);
        for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      }
      const double mu = sum / count;
      double sq = 0;
      for (int b = 0; b < s.n; ++b) {
        const T* p = x.value().plane(b, c);
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      const double var = sq / count;
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + eps));
      const double unbiased = count > 1 ? sq / (count - 1) : var;
      running_mean[c] = static_cast<T>((1 - momentum) * running_mean[c] + momentum * mu);
      running_var[c] = static_cast<T>((1 - momentum) * running_var[c] + momentum * unbiased);
    } else {
      mean[c] = running_mean[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps));
    }
  }

  Tensor<T> out(s);
  for (int b = 0; b < s.n; ++b)
    for (int c = 0; c < s.c; ++c) {
      const T* p = x.value().plane(b, c);
      T* q = out.plane(b, c);
      const T g = gamma.value()[c] * inv_std[c];
      const T off = beta.value()[c] - g * mean[c];
      for (std::size_t i = 0; i < plane; ++i) q[i] = g * p[i] + off;
    }

  return make_result<T>(std::move(out), {x, gamma, beta},
                        [s, plane, count, training, mean = std::move(mean),
                         inv_std = std::move(inv_std)](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Node<T>& gn = *self.parents[1];
    Node<T>& bn = *self.parents[2];
    for (int c = 0; c < s.c; ++c) {
      double sum_dy = 0, sum_dy_xhat = 0;
      for (int b = 0; b < s.n; ++b) {
        const T* dy = self.grad.plane(b, c);
        const T* p = xn.value.plane(b, c);
        for (std::size_t i = 0; i < plane; ++i) {
          sum_dy += dy[i];
          sum_dy_xhat += dy[i] * (p[i] - mean[c]) * inv_std[c];
        }
      }
      if (gn.requires_grad) gn.grad_buffer()[c] += static_cast<T>(sum_dy_xhat);
      if (bn.requires_grad) bn.grad_buffer()[c] += static_cast<T>(sum_dy);
      if (!xn.requires_grad) continue;
      const T g = gn.value[c] * inv_std[c];
      for (int b = 0; b < s.n; ++b) {
        const T* dy = self.grad.plane(b, c);
        const T* p = xn.value.plane(b, c);
        T* dx = xn.grad_buffer().plane(b, c);
        if (training) {
          const T a = static_cast<T>(sum_dy / count);
          const T bterm = static_cast<T>(sum_dy_xhat / count);
          for (std::size_t i = 0; i < plane; ++i) {
            const T xhat = (p[i] - mean[c]) * inv_std[c];
            dx[i] += g * (dy[i] - a - xhat * bterm);
          }
        } else {
          for (std::size_t i = 0; i < plane; ++i) dx[i] += g * dy[i];
        }
      }
    }
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const auto& in = x.value();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Tensor<T>& dx = xn.grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (xn.value[i] > T(0)) dx[i] += self.grad[i];
  });
}

template <class T>
T sigmoid_scalar(T v) {
  // Split by sign so exp never overflows.
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(x.value()[i]);
  return make_result<T>(out, {x}, [out](Node<T>& self) {
    Tensor<T>& dx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i] * out[i] * (T(1) - out[i]);
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = a.value();
  out += b.value();
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->grad_buffer() += self.grad;
  });
}

template <class T>
Var<T> add_n(std::span<const Var<T>> xs) {
  if (xs.empty()) throw DimensionError("add_n: empty list");
  Tensor<T> out = xs.front().value();
  for (std::size_t i = 1; i < xs.size(); ++i) out += xs[i].value();
  return make_result<T>(std::move(out), std::vector<Var<T>>(xs.begin(), xs.end()), [](Node<T>& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->grad_buffer() += self.grad;
  });
}

template <class T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v *= factor;
  return make_result<T>(std::move(out), {x}, [factor](Node<T>& self) {
    Tensor<T>& dx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += factor * self.grad[i];
  });
}

// Channel concatenation in list order.
template <class T>
Var<T> concat(std::span<const Var<T>> xs) {
  std::vector<Tensor<T>> values;
  values.reserve(xs.size());
  for (const auto& v : xs) values.push_back(v.value());
  Tensor<T> out = concat_channels<T>(values);
  return make_result<T>(std::move(out), std::vector<Var<T>>(xs.begin(), xs.end()), [](Node<T>& self) {
    const Shape s = self.value.shape();
    int offset = 0;
    for (auto& p : self.parents) {
      const int pc = p->value.c();
      if (p->requires_grad) {
        Tensor<T>& dp = p->grad_buffer();
        const std::size_t count = static_cast<std::size_t>(pc) * s.plane();
        for (int b = 0; b < s.n; ++b) {
          const T* src = self.grad.plane(b, offset);
          T* dst = dp.plane(b, 0);
          for (std::size_t i = 0; i < count; ++i) dst[i] += src[i];
        }
      }
      offset += pc;
    }
  });
}

template <class T>
Var<T> slice_channels(const Var<T>& x, int start, int count) {
  const Shape s = x.shape();
  if (start < 0 || count <= 0 || start + count > s.c)
    throw DimensionError("slice_channels: range out of bounds for " + s.str());
  Tensor<T> out(s.n, count, s.h, s.w);
  const std::size_t len = static_cast<std::size_t>(count) * s.plane();
  for (int b = 0; b < s.n; ++b) std::copy_n(x.value().plane(b, start), len, out.plane(b, 0));
  return make_result<T>(std::move(out), {x}, [start, count, s, len](Node<T>& self) {
    Tensor<T>& dx = self.parents[0]->grad_buffer();
    for (int b = 0; b < s.n; ++b) {
      const T* src = self.grad.plane(b, 0);
      T* dst = dx.plane(b, start);
      for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
    }
  });
}

// x: N x C x H x W scaled by a: N x C x 1 x 1.
template <class T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& a) {
  const Shape s = x.shape();
  if (a.shape() != Shape{s.n, s.c, 1, 1})
    throw DimensionError("mul_channel: weights " + a.shape().str() + " for input " + s.str());
  Tensor<T> out(s);
  const std::size_t plane = s.plane();
  for (int b = 0; b < s.n; ++b)
    for (int c = 0; c < s.c; ++c) {
      const T wgt = a.value().at(b, c, 0, 0);
      const T* p = x.value().plane(b, c);
      T* q = out.plane(b, c);
      for (std::size_t i = 0; i < plane; ++i) q[i] = wgt * p[i];
    }
  return make_result<T>(std::move(out), {x, a}, [s, plane](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Node<T>& an = *self.parents[1];
    for (int b = 0; b < s.n; ++b)
      for (int c = 0; c < s.c; ++c) {
        const T* dy = self.grad.plane(b, c);
        if (an.requires_grad) {
          const T* p = xn.value.plane(b, c);
          T acc = 0;
          for (std::size_t i = 0; i < plane; ++i) acc += dy[i] * p[i];
          an.grad_buffer().at(b, c, 0, 0) += acc;
        }
        if (xn.requires_grad) {
          const T wgt = an.value.at(b, c, 0, 0);
          T* dx = xn.grad_buffer().plane(b, c);
          for (std::size_t i = 0; i < plane; ++i) dx[i] += wgt * dy[i];
        }
      }
  });
}

// x: N x C x H x W scaled by a: N x 1 x H x W.
template <class T>
Var<T> mul_spatial(const Var<T>& x, const Var<T>& a) {
  const Shape s = x.shape();
  if (a.shape() != Shape{s.n, 1, s.h, s.w})
    throw DimensionError("mul_spatial: weights " + a.shape().str() + " for input " + s.str());
  Tensor<T> out(s);
  const std::size_t plane = s.plane();
  for (int b = 0; b < s.n; ++b) {
    const T* wgt = a.value().plane(b, 0);
    for (int c = 0; c < s.c; ++c) {
      const T* p = x.value().plane(b, c);
      T* q = out.plane(b, c);
      for (std::size_t i = 0; i < plane; ++i) q[i] = wgt[i] * p[i];
    }
  }
  return make_result<T>(std::move(out), {x, a}, [s, plane](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Node<T>& an = *self.parents[1];
    for (int b = 0; b < s.n; ++b) {
      const T* wgt = an.value.plane(b, 0);
      for (int c = 0; c < s.c; ++c) {
        const T* dy = self.grad.plane(b, c);
        if (an.requires_grad) {
          const T* p = xn.value.plane(b, c);
          T* da = an.grad_buffer().plane(b, 0);
          for (std::size_t i = 0; i < plane; ++i) da[i] += dy[i] * p[i];
        }
        if (xn.requires_grad) {
          T* dx = xn.grad_buffer().plane(b, c);
          for (std::size_t i = 0; i < plane; ++i) dx[i] += wgt[i] * dy[i];
        }
      }
    }
  });
}

// Mean of each H x W plane -> N x C x 1 x 1.
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  Tensor<T> out(s.n, s.c, 1, 1);
  for (int b = 0; b < s.n; ++b)
    for (int c = 0; c < s.c; ++c) {
      const T* p = x.value().plane(b, c);
      T acc = 0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      out.at(b, c, 0, 0) = acc / static_cast<T>(plane);
    }
  return make_result<T>(std::move(out), {x}, [s, plane](Node<T>& self) {
    Tensor<T>& dx = self.parents[0]->grad_buffer();
    for (int b = 0; b < s.n; ++b)
      for (int c = 0; c < s.c; ++c) {
        const T g = self.grad.at(b, c, 0, 0) / static_cast<T>(plane);
        T* d = dx.plane(b, c);
        for (std::size_t i = 0; i < plane; ++i) d[i] += g;
      }
  });
}

// Max of each H x W plane -> N x C x 1 x 1. The gradient goes to the first
// maximizing location.
template <class T>
Var<T> global_max_pool(const Var<T>& x) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  Tensor<T> out(s.n, s.c, 1, 1);
  std::vector<std::size_t> argmax(static_cast<std::size_t>(s.n) * s.c);
  for (int b = 0; b < s.n; ++b)
    for (int c = 0; c < s.c; ++c) {
      const T* p = x.value().plane(b, c);
      const std::size_t best = static_cast<std::size_t>(std::max_element(p, p + plane) - p);
      argmax[static_cast<std::size_t>(b) * s.c + c] = best;
      out.at(b, c, 0, 0) = p[best];
    }
  return make_result<T>(std::move(out), {x}, [s, argmax = std::move(argmax)](Node<T>& self) {
    Tensor<T>& dx = self.parents[0]->grad_buffer();
    for (int b = 0; b < s.n; ++b)
      for (int c = 0; c < s.c; ++c)
        dx.plane(b, c)[argmax[static_cast<std::size_t>(b) * s.c + c]] += self.grad.at(b, c, 0, 0);
  });
}

// Mean across channels -> N x 1 x H x W.
template <class T>
Var<T> channel_mean(const Var<T>& x) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  Tensor<T> out(s.n, 1, s.h, s.w);
  for (int b = 0; b < s.n; ++b) {
    T* q = out.plane(b, 0);
    for (int c = 0; c < s.c; ++c) {
      const T* p = x.value().plane(b, c);
      for (std::size_t i = 0; i < plane; ++i) q[i] += p[i];
    }
    for (std::size_t i = 0; i < plane; ++i) q[i] /= static_cast<T>(s.c);
  }
  return make_result<T>(std::move(out), {x}, [s, plane](Node<T>& self) {
    Tensor<T>& dx = self.parents[0]->grad_buffer();
    for (int b = 0; b < s.n; ++b) {
      const T* dy = self.grad.plane(b, 0);
      for (int c = 0; c < s.c; ++c) {
        T* d = dx.plane(b, c);
        for (std::size_t i = 0; i < plane; ++i) d[i] += dy[i] / static_cast<T>(s.c);
      }
    }
  });
}

// Max across channels -> N x 1 x H x W; gradient to the first maximizing channel.
template <class T>
Var<T> channel_max(const Var<T>& x) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  Tensor<T> out(s.n, 1, s.h, s.w);
  std::vector<int> argmax(static_cast<std::size_t>(s.n) * plane, 0);
  for (int b = 0; b < s.n; ++b) {
    T* q = out.plane(b, 0);
    std::copy_n(x.value().plane(b, 0), plane, q);
    int* am = argmax.data() + static_cast<std::size_t>(b) * plane;
    for (int c = 1; c < s.c; ++c) {
      const T* p = x.value().plane(b, c);
      for (std::size_t i = 0; i < plane; ++i)
        if (p[i] > q[i]) {
          q[i] = p[i];
          am[i] = c;
        }
    }
  }
  return make_result<T>(std::move(out), {x}, [s, plane, argmax = std::move(argmax)](Node<T>& self) {
    Tensor<T>& dx = self.parents[0]->grad_buffer();
    for (int b = 0; b < s.n; ++b) {
      const T* dy = self.grad.plane(b, 0);
      const int* am = argmax.data() + static_cast<std::size_t>(b) * plane;
      for (std::size_t i = 0; i < plane; ++i) dx.plane(b, am[i])[i] += dy[i];
    }
  });
}

// Sum of all entries -> 1 x 1 x 1 x 1.
template <class T>
Var<T> sum(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().vec()) acc += v;
  return make_result<T>(Tensor<T>(1, 1, 1, 1, acc), {x}, [](Node<T>& self) {
    Tensor<T>& dx = self.parents[0]->grad_buffer();
    const T g = self.grad[0];
    for (auto& v : dx.vec()) v += g;
  });
}

// sum_i weights[i] * scalars[i] for 1x1x1x1 inputs.
template <class T>
Var<T> weighted_sum(std::span<const Var<T>> scalars, std::span<const T> weights) {
  if (scalars.size() != weights.size() || scalars.empty())
    throw DimensionError("weighted_sum: list length mismatch");
  T acc = 0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].value().size() != 1) throw DimensionError("weighted_sum: non-scalar input");
    acc += weights[i] * scalars[i].value()[0];
  }
  std::vector<T> w(weights.begin(), weights.end());
  return make_result<T>(Tensor<T>(1, 1, 1, 1, acc), std::vector<Var<T>>(scalars.begin(), scalars.end()),
                        [w = std::move(w)](Node<T>& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i)
      if (self.parents[i]->requires_grad) self.parents[i]->grad_buffer()[0] += w[i] * self.grad[0];
  });
}

}  // namespace semattnet::ops
