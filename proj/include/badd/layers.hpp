// Copyright 2026 The badd-mnist Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Forward/backward kernels for the fixed layer vocabulary: 2-D convolution
// (im2col + GEMM), batch normalization, ReLU, global average pooling and
// fully connected layers. All tensors are NCHW / (N, F) row-major.

#pragma once

#include <Eigen/Core>

#include "badd/tensor.hpp"

namespace badd::ops {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t in_channels, height, width;
  std::size_t kernel, stride, padding;

  std::size_t out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
  std::size_t patch() const { return in_channels * kernel * kernel; }
  std::size_t positions() const { return out_height() * out_width(); }
};

namespace detail {
/// Output columns [lo, hi) whose input column ox*stride + kx - pad lies
/// inside the image.
inline void valid_columns(const ConvGeometry& g, std::size_t kx, std::size_t wo, std::size_t& lo,
                          std::size_t& hi) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding), s = static_cast<std::ptrdiff_t>(g.stride);
  const auto k = static_cast<std::ptrdiff_t>(kx), w = static_cast<std::ptrdiff_t>(g.width);
  std::ptrdiff_t first = pad - k > 0 ? (pad - k + s - 1) / s : 0;
  std::ptrdiff_t last = (w - 1 + pad - k) >= 0 ? (w - 1 + pad - k) / s + 1 : 0;
  last = std::min<std::ptrdiff_t>(last, static_cast<std::ptrdiff_t>(wo));
  lo = static_cast<std::size_t>(std::min<std::ptrdiff_t>(first, last));
  hi = static_cast<std::size_t>(last);
}
}  // namespace detail

/// Unfolds one (C, H, W) image into a (C*k*k, Ho*Wo) column matrix.
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t kx = 0; kx < g.kernel; ++kx) {
    std::size_t lo, hi;
    detail::valid_columns(g, kx, wo, lo, hi);
    for (std::size_t c = 0; c < g.in_channels; ++c) {
      const T* plane = img + c * g.height * g.width;
      for (std::size_t ky = 0; ky < g.kernel; ++ky) {
        T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          T* out = row + oy * wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(out, out + wo, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.width;
          std::fill(out, out + lo, T{0});
          if (lo < hi) {
            const std::size_t first = lo * g.stride + kx - g.padding;
            if (g.stride == 1) {
              std::copy(src + first, src + first + (hi - lo), out + lo);
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) out[ox] = src[first + (ox - lo) * g.stride];
            }
          }
          std::fill(out + hi, out + wo, T{0});
        }
      }
    }
  }
}

/// Adjoint of im2col: accumulates a column matrix back into an image.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* img) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t kx = 0; kx < g.kernel; ++kx) {
    std::size_t lo, hi;
    detail::valid_columns(g, kx, wo, lo, hi);
    for (std::size_t c = 0; c < g.in_channels; ++c) {
      T* plane = img + c * g.height * g.width;
      for (std::size_t ky = 0; ky < g.kernel; ++ky) {
        const T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          if (lo >= hi) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * g.width + (lo * g.stride + kx - g.padding);
          const T* in = row + oy * wo;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[(ox - lo) * g.stride] += in[ox];
        }
      }
    }
  }
}

inline ConvGeometry conv_geometry(const Shape& x, std::size_t kernel, std::size_t stride,
                                  std::size_t padding) {
  if (x.size() != 4) throw RuntimeError("conv2d expects (N,C,H,W) input, got " + shape_str(x));
  if (x[2] + 2 * padding < kernel || x[3] + 2 * padding < kernel || stride == 0)
    throw RuntimeError("conv2d kernel does not fit input " + shape_str(x));
  return {x[1], x[2], x[3], kernel, stride, padding};
}

/// weight: (Co, Ci, k, k); bias: (Co).
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                         std::size_t stride, std::size_t padding) {
  const std::size_t co = weight.dim(0), k = weight.dim(2);
  const auto g = conv_geometry(x.shape(), k, stride, padding);
  if (weight.dim(1) != g.in_channels)
    throw RuntimeError("conv2d: input has " + std::to_string(g.in_channels) +
                       " channels, weight expects " + std::to_string(weight.dim(1)));
  const std::size_t n = x.dim(0), p = g.positions(), kk = g.patch();
  Tensor<T> y({n, co, g.out_height(), g.out_width()});
  std::vector<T> col(kk * p);
  CMapMat<T> w(weight.data(), static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(kk));
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias.data(), static_cast<Eigen::Index>(co));
  for (std::size_t i = 0; i < n; ++i) {
    im2col(x.data() + i * g.in_channels * g.height * g.width, g, col.data());
    MapMat<T> out(y.data() + i * co * p, static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(p));
    out.noalias() = w * CMapMat<T>(col.data(), static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(p));
    out.colwise() += b;
  }
  return y;
}

template <typename T>
struct ConvGrads {
  Tensor<T> dweight, dbias, dinput;
};

/// Gradients of a convolution; dinput is left empty when not requested.
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy,
                             std::size_t stride, std::size_t padding, bool need_dinput) {
  const std::size_t co = weight.dim(0), k = weight.dim(2);
  const auto g = conv_geometry(x.shape(), k, stride, padding);
  const std::size_t n = x.dim(0), p = g.positions(), kk = g.patch();
  const std::size_t img = g.in_channels * g.height * g.width;
  ConvGrads<T> out{Tensor<T>(weight.shape()), Tensor<T>({co}), {}};
  if (need_dinput) out.dinput = Tensor<T>(x.shape());
  std::vector<T> col(kk * p), dcol;
  if (need_dinput) dcol.resize(kk * p);
  MapMat<T> dw(out.dweight.data(), static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(kk));
  CMapMat<T> w(weight.data(), static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(kk));
  for (std::size_t i = 0; i < n; ++i) {
    CMapMat<T> g_out(dy.data() + i * co * p, static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(p));
    im2col(x.data() + i * img, g, col.data());
    dw.noalias() += g_out * CMapMat<T>(col.data(), static_cast<Eigen::Index>(kk),
                                       static_cast<Eigen::Index>(p)).transpose();
    for (std::size_t c = 0; c < co; ++c) {
      T s{0};
      const T* r = dy.data() + (i * co + c) * p;
      for (std::size_t j = 0; j < p; ++j) s += r[j];
      out.dbias[c] += s;
    }
    if (need_dinput) {
      MapMat<T>(dcol.data(), static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(p)).noalias() =
          w.transpose() * g_out;
      col2im(dcol.data(), g, out.dinput.data() + i * img);
    }
  }
  return out;
}

/// Per-channel statistics saved by a train-mode batchnorm forward.
template <typename T>
struct BatchNormSaved {
  std::vector<T> mean, inv_std;
};

inline void bn_dims(const Shape& s, std::size_t& n, std::size_t& c, std::size_t& spatial) {
  if (s.size() != 2 && s.size() != 4)
    throw RuntimeError("batchnorm expects (N,C) or (N,C,H,W), got " + shape_str(s));
  n = s[0];
  c = s[1];
  spatial = s.size() == 4 ? s[2] * s[3] : 1;
}

/// Normalizes with batch statistics and updates the running estimates
/// (running_var uses the unbiased batch variance).
template <typename T>
Tensor<T> batchnorm_forward_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                  Tensor<T>& running_mean, Tensor<T>& running_var, double eps,
                                  double momentum, BatchNormSaved<T>& saved) {
  std::size_t n, c, sp;
  bn_dims(x.shape(), n, c, sp);
  const double m = static_cast<double>(n * sp);
  saved.mean.assign(c, T{0});
  saved.inv_std.assign(c, T{0});
  Tensor<T> y(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* r = x.data() + (i * c + ch) * sp;
      for (std::size_t j = 0; j < sp; ++j) s += static_cast<double>(r[j]);
    }
    const double mean = s / m;
    double v = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* r = x.data() + (i * c + ch) * sp;
      for (std::size_t j = 0; j < sp; ++j) {
        const double d = static_cast<double>(r[j]) - mean;
        v += d * d;
      }
    }
    const double var = v / m;
    const double inv = 1.0 / std::sqrt(var + eps);
    saved.mean[ch] = static_cast<T>(mean);
    saved.inv_std[ch] = static_cast<T>(inv);
    const T sc = static_cast<T>(static_cast<double>(gamma[ch]) * inv);
    const T sh = static_cast<T>(static_cast<double>(beta[ch]) - static_cast<double>(gamma[ch]) * inv * mean);
    for (std::size_t i = 0; i < n; ++i) {
      const T* r = x.data() + (i * c + ch) * sp;
      T* o = y.data() + (i * c + ch) * sp;
      for (std::size_t j = 0; j < sp; ++j) o[j] = r[j] * sc + sh;
    }
    const double unbiased = m > 1 ? v / (m - 1) : var;
    running_mean[ch] = static_cast<T>((1 - momentum) * static_cast<double>(running_mean[ch]) + momentum * mean);
    running_var[ch] = static_cast<T>((1 - momentum) * static_cast<double>(running_var[ch]) + momentum * unbiased);
  }
  return y;
}

template <typename T>
Tensor<T> batchnorm_forward_eval(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                 const Tensor<T>& running_mean, const Tensor<T>& running_var,
                                 double eps) {
  std::size_t n, c, sp;
  bn_dims(x.shape(), n, c, sp);
  Tensor<T> y(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(running_var[ch]) + eps);
    const T sc = static_cast<T>(static_cast<double>(gamma[ch]) * inv);
    const T sh = static_cast<T>(static_cast<double>(beta[ch]) -
                                static_cast<double>(gamma[ch]) * inv * static_cast<double>(running_mean[ch]));
    for (std::size_t i = 0; i < n; ++i) {
      const T* r = x.data() + (i * c + ch) * sp;
      T* o = y.data() + (i * c + ch) * sp;
      for (std::size_t j = 0; j < sp; ++j) o[j] = r[j] * sc + sh;
    }
  }
  return y;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> dgamma, dbeta, dinput;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward_train(const Tensor<T>& x, const Tensor<T>& gamma,
                                           const Tensor<T>& dy, const BatchNormSaved<T>& saved) {
  std::size_t n, c, sp;
  bn_dims(x.shape(), n, c, sp);
  const double m = static_cast<double>(n * sp);
  BatchNormGrads<T> g{Tensor<T>({c}), Tensor<T>({c}), Tensor<T>(x.shape())};
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double mean = saved.mean[ch], inv = saved.inv_std[ch];
    double sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* r = x.data() + (i * c + ch) * sp;
      const T* d = dy.data() + (i * c + ch) * sp;
      for (std::size_t j = 0; j < sp; ++j) {
        sum_dy += static_cast<double>(d[j]);
        sum_dy_xhat += static_cast<double>(d[j]) * (static_cast<double>(r[j]) - mean) * inv;
      }
    }
    g.dgamma[ch] = static_cast<T>(sum_dy_xhat);
    g.dbeta[ch] = static_cast<T>(sum_dy);
    const double k = static_cast<double>(gamma[ch]) * inv / m;
    for (std::size_t i = 0; i < n; ++i) {
      const T* r = x.data() + (i * c + ch) * sp;
      const T* d = dy.data() + (i * c + ch) * sp;
      T* o = g.dinput.data() + (i * c + ch) * sp;
      for (std::size_t j = 0; j < sp; ++j) {
        const double xhat = (static_cast<double>(r[j]) - mean) * inv;
        o[j] = static_cast<T>(k * (m * static_cast<double>(d[j]) - sum_dy - xhat * sum_dy_xhat));
      }
    }
  }
  return g;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward_eval(const Tensor<T>& x, const Tensor<T>& gamma,
                                          const Tensor<T>& running_mean,
                                          const Tensor<T>& running_var, double eps,
                                          const Tensor<T>& dy) {
  std::size_t n, c, sp;
  bn_dims(x.shape(), n, c, sp);
  BatchNormGrads<T> g{Tensor<T>({c}), Tensor<T>({c}), Tensor<T>(x.shape())};
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(running_var[ch]) + eps);
    const double mean = running_mean[ch];
    double sum_dy = 0, sum_dy_xhat = 0;
    const T sc = static_cast<T>(static_cast<double>(gamma[ch]) * inv);
    for (std::size_t i = 0; i < n; ++i) {
      const T* r = x.data() + (i * c + ch) * sp;
      const T* d = dy.data() + (i * c + ch) * sp;
      T* o = g.dinput.data() + (i * c + ch) * sp;
      for (std::size_t j = 0; j < sp; ++j) {
        sum_dy += static_cast<double>(d[j]);
        sum_dy_xhat += static_cast<double>(d[j]) * (static_cast<double>(r[j]) - mean) * inv;
        o[j] = d[j] * sc;
      }
    }
    g.dgamma[ch] = static_cast<T>(sum_dy_xhat);
    g.dbeta[ch] = static_cast<T>(sum_dy);
  }
  return g;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T{0} ? dy[i] : T{0};
  return dx;
}

template <typename T>
Tensor<T> global_avgpool_forward(const Tensor<T>& x) {
  if (x.rank() != 4) throw RuntimeError("global average pool expects (N,C,H,W), got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), sp = x.dim(2) * x.dim(3);
  Tensor<T> y({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0;
    const T* r = x.data() + i * sp;
    for (std::size_t j = 0; j < sp; ++j) s += static_cast<double>(r[j]);
    y[i] = static_cast<T>(s / static_cast<double>(sp));
  }
  return y;
}

template <typename T>
Tensor<T> global_avgpool_backward(const Shape& input_shape, const Tensor<T>& dy) {
  Tensor<T> dx(input_shape);
  const std::size_t nc = input_shape[0] * input_shape[1], sp = input_shape[2] * input_shape[3];
  for (std::size_t i = 0; i < nc; ++i) {
    const T v = dy[i] / static_cast<T>(sp);
    std::fill(dx.data() + i * sp, dx.data() + (i + 1) * sp, v);
  }
  return dx;
}

/// weight: (K, F), bias: (K); x: (N, F) -> (N, K).
template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || x.dim(1) != weight.dim(1))
    throw RuntimeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                       shape_str(weight.shape()));
  const auto n = static_cast<Eigen::Index>(x.dim(0)), f = static_cast<Eigen::Index>(x.dim(1)),
             k = static_cast<Eigen::Index>(weight.dim(0));
  Tensor<T> y({x.dim(0), weight.dim(0)});
  MapMat<T> out(y.data(), n, k);
  out.noalias() = CMapMat<T>(x.data(), n, f) * CMapMat<T>(weight.data(), k, f).transpose();
  out.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data(), k);
  return y;
}

template <typename T>
struct LinearGrads {
  Tensor<T> dweight, dbias, dinput;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy) {
  const auto n = static_cast<Eigen::Index>(x.dim(0)), f = static_cast<Eigen::Index>(x.dim(1)),
             k = static_cast<Eigen::Index>(weight.dim(0));
  LinearGrads<T> g{Tensor<T>(weight.shape()), Tensor<T>({weight.dim(0)}), Tensor<T>(x.shape())};
  CMapMat<T> d(dy.data(), n, k);
  MapMat<T>(g.dweight.data(), k, f).noalias() = d.transpose() * CMapMat<T>(x.data(), n, f);
  MapMat<T>(g.dinput.data(), n, f).noalias() = d * CMapMat<T>(weight.data(), k, f);
  for (Eigen::Index j = 0; j < k; ++j) {
    T s{0};
    for (Eigen::Index i = 0; i < n; ++i) s += d(i, j);
    g.dbias[static_cast<std::size_t>(j)] = s;
  }
  return g;
}

/// Adds a per-sample, per-channel vector (N, C) to x, broadcasting over
/// any spatial extent.
template <typename T>
void add_channel_vector(Tensor<T>& x, const Tensor<T>& v) {
  const std::size_t n = x.dim(0), c = x.dim(1), sp = x.size() / (n * c);
  if (v.rank() != 2 || v.dim(0) != n || v.dim(1) != c)
    throw RuntimeError("injected features " + shape_str(v.shape()) + " do not match activation " +
                       shape_str(x.shape()));
  for (std::size_t i = 0; i < n * c; ++i) {
    T* r = x.data() + i * sp;
    for (std::size_t j = 0; j < sp; ++j) r[j] += v[i];
  }
}

/// Adjoint of add_channel_vector: sums dx over the spatial extent.
template <typename T>
Tensor<T> sum_spatial(const Tensor<T>& dx) {
  const std::size_t n = dx.dim(0), c = dx.dim(1), sp = dx.size() / (n * c);
  Tensor<T> out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    T s{0};
    for (std::size_t j = 0; j < sp; ++j) s += dx[i * sp + j];
    out[i] = s;
  }
  return out;
}

}  // namespace badd::ops
