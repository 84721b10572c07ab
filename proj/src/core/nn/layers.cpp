/*
 * Copyright 2026 The PLHN Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "layers.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Core>

namespace plhn::nn {
namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

template <typename T>
MapR<T> mat(T* p, Index rows, Index cols, Index ld) {
  return MapR<T>(p, rows, cols, Eigen::OuterStride<>(ld));
}
template <typename T>
CMapR<T> cmat(const T* p, Index rows, Index cols, Index ld) {
  return CMapR<T>(p, rows, cols, Eigen::OuterStride<>(ld));
}

// Strided-window geometry shared by convolution and its adjoint. A "small"
// voxel o reads the "big" voxel o*s + tap - p along every axis.
struct Geometry {
  Index channels;
  Dims3 big, small;
  Index k, s, p;
};

// Valid range [lo, hi) of small indices whose big index lands inside [0, n).
inline void valid_range(Index n_small, Index n_big, Index tap, Index s, Index p, Index& lo, Index& hi) {
  const Index off = tap - p;
  // need 0 <= o*s + off < n_big
  lo = off >= 0 ? 0 : (-off + s - 1) / s;
  hi = n_big - 1 - off < 0 ? 0 : (n_big - 1 - off) / s + 1;
  lo = std::min(lo, n_small);
  hi = std::clamp(hi, lo, n_small);
}

// Rows of `col` are (channel, a, b, c); columns are small voxels in slices [h0, h1).
template <typename T>
void im2col(const T* src, const Geometry& g, Index h0, Index h1, T* col) {
  const Index nc = (h1 - h0) * g.small.w * g.small.z;
  const Index kk = g.k;
  Index r = 0;
  for (Index ch = 0; ch < g.channels; ++ch) {
    const T* src_c = src + ch * g.big.count();
    for (Index a = 0; a < kk; ++a)
      for (Index b = 0; b < kk; ++b)
        for (Index c = 0; c < kk; ++c, ++r) {
          T* dst = col + r * nc;
          Index zlo, zhi;
          valid_range(g.small.z, g.big.z, c, g.s, g.p, zlo, zhi);
          for (Index oh = h0; oh < h1; ++oh) {
            const Index ih = oh * g.s + a - g.p;
            if (ih < 0 || ih >= g.big.h) {
              std::fill_n(dst, g.small.w * g.small.z, T{});
              dst += g.small.w * g.small.z;
              continue;
            }
            for (Index ow = 0; ow < g.small.w; ++ow, dst += g.small.z) {
              const Index iw = ow * g.s + b - g.p;
              if (iw < 0 || iw >= g.big.w) {
                std::fill_n(dst, g.small.z, T{});
                continue;
              }
              const T* srow = src_c + (ih * g.big.w + iw) * g.big.z + c - g.p;
              std::fill_n(dst, zlo, T{});
              if (g.s == 1) {
                std::copy(srow + zlo, srow + zhi, dst + zlo);
              } else {
                for (Index oz = zlo; oz < zhi; ++oz) dst[oz] = srow[oz * g.s];
              }
              std::fill(dst + zhi, dst + g.small.z, T{});
            }
          }
        }
  }
}

// Adjoint of im2col: accumulates columns back into the big grid.
template <typename T>
void col2im(const T* col, const Geometry& g, Index h0, Index h1, T* dst) {
  const Index nc = (h1 - h0) * g.small.w * g.small.z;
  const Index kk = g.k;
  Index r = 0;
  for (Index ch = 0; ch < g.channels; ++ch) {
    T* dst_c = dst + ch * g.big.count();
    for (Index a = 0; a < kk; ++a)
      for (Index b = 0; b < kk; ++b)
        for (Index c = 0; c < kk; ++c, ++r) {
          const T* src = col + r * nc;
          Index zlo, zhi;
          valid_range(g.small.z, g.big.z, c, g.s, g.p, zlo, zhi);
          for (Index oh = h0; oh < h1; ++oh) {
            const Index ih = oh * g.s + a - g.p;
            if (ih < 0 || ih >= g.big.h) {
              src += g.small.w * g.small.z;
              continue;
            }
            for (Index ow = 0; ow < g.small.w; ++ow, src += g.small.z) {
              const Index iw = ow * g.s + b - g.p;
              if (iw < 0 || iw >= g.big.w) continue;
              T* drow = dst_c + (ih * g.big.w + iw) * g.big.z + c - g.p;
              for (Index oz = zlo; oz < zhi; ++oz) drow[oz * g.s] += src[oz];
            }
          }
        }
  }
}

// Number of small-grid slices per im2col chunk.
inline Index slices_per_chunk(const Dims3& small, Index rows) {
  const Index plane = small.w * small.z;
  const Index budget = std::max<Index>(4096, (1 << 21) / std::max<Index>(rows, 1));
  return std::clamp<Index>(budget / std::max<Index>(plane, 1), 1, small.h);
}

template <typename T>
void add_bias(T* y, const T* b, Index channels, Index spatial) {
  for (Index c = 0; c < channels; ++c) {
    T* row = y + c * spatial;
    const T v = b[c];
    for (Index i = 0; i < spatial; ++i) row[i] += v;
  }
}

template <typename T>
void accumulate_bias_grad(const T* dy, T* db, Index channels, Index spatial) {
  for (Index c = 0; c < channels; ++c) {
    const T* row = dy + c * spatial;
    double s = 0.0;
    for (Index i = 0; i < spatial; ++i) s += static_cast<double>(row[i]);
    db[c] += static_cast<T>(s);
  }
}

}  // namespace

template <typename T>
void init_param(Param<T>& p, std::mt19937_64& rng) {
  if (p.xavier()) {
    const double bound = std::sqrt(6.0 / static_cast<double>(p.fan_in + p.fan_out));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Index i = 0; i < p.value.numel(); ++i) p.value[i] = static_cast<T>(u(rng));
  } else {
    p.value.fill(p.init_value);
  }
  p.grad.zero();
}

// ---- Conv3d -----------------------------------------------------------------

template <typename T>
Conv3d<T>::Conv3d(const std::string& name, Index ci, Index co, Index k_, Index s, Index p)
    : weight(name + ".weight", {co, ci, k_, k_, k_}, ci * k_ * k_ * k_, co * k_ * k_ * k_),
      bias(name + ".bias", {co}),
      cin(ci), cout(co), k(k_), stride(s), pad(p) {}

template <typename T>
Dims3 Conv3d<T>::output_dims(const Dims3& in) const {
  Dims3 o;
  for (int a = 0; a < 3; ++a) o[a] = (in[a] + 2 * pad - k) / stride + 1;
  return o;
}

template <typename T>
Tensor<T> Conv3d<T>::forward(const Tensor<T>& x) {
  const Shape5 s = shape5(x);
  if (s.c != cin) throw InvalidInputError(weight.name + ": expected " + std::to_string(cin) + " channels, got " + x.shape_str());
  x_ = x;
  const Dims3 od = output_dims(s.dims());
  Tensor<T> y = make5<T>(s.n, cout, od);
  const Index R = cin * k * k * k;
  const Index So = od.count();
  const Geometry g{cin, s.dims(), od, k, stride, pad};
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);
  const Index chunk = slices_per_chunk(od, R);
  std::vector<T> col;
  auto W = cmat(weight.value.data(), cout, R, R);
  for (Index n = 0; n < s.n; ++n) {
    const T* xn = x.data() + n * cin * s.spatial();
    T* yn = y.data() + n * cout * So;
    if (pointwise) {
      mat(yn, cout, So, So).noalias() = W * cmat(xn, cin, So, So);
    } else {
      for (Index h0 = 0; h0 < od.h; h0 += chunk) {
        const Index h1 = std::min(od.h, h0 + chunk);
        const Index nc = (h1 - h0) * od.w * od.z;
        col.resize(static_cast<std::size_t>(R * nc));
        im2col(xn, g, h0, h1, col.data());
        mat(yn + h0 * od.w * od.z, cout, nc, So).noalias() = W * cmat(col.data(), R, nc, nc);
      }
    }
    add_bias(yn, bias.value.data(), cout, So);
  }
  return y;
}

template <typename T>
Tensor<T> Conv3d<T>::backward(const Tensor<T>& dy) {
  const Shape5 s = shape5(x_);
  const Dims3 od = output_dims(s.dims());
  const Index R = cin * k * k * k;
  const Index So = od.count();
  const Geometry g{cin, s.dims(), od, k, stride, pad};
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);
  const Index chunk = slices_per_chunk(od, R);
  Tensor<T> dx(x_.shape());
  std::vector<T> col, dcol;
  auto W = cmat(weight.value.data(), cout, R, R);
  auto dW = mat(weight.grad.data(), cout, R, R);
  for (Index n = 0; n < s.n; ++n) {
    const T* xn = x_.data() + n * cin * s.spatial();
    const T* dyn = dy.data() + n * cout * So;
    T* dxn = dx.data() + n * cin * s.spatial();
    accumulate_bias_grad(dyn, bias.grad.data(), cout, So);
    if (pointwise) {
      auto dY = cmat(dyn, cout, So, So);
      dW.noalias() += dY * cmat(xn, cin, So, So).transpose();
      mat(dxn, cin, So, So).noalias() = W.transpose() * dY;
      continue;
    }
    for (Index h0 = 0; h0 < od.h; h0 += chunk) {
      const Index h1 = std::min(od.h, h0 + chunk);
      const Index nc = (h1 - h0) * od.w * od.z;
      col.resize(static_cast<std::size_t>(R * nc));
      dcol.resize(static_cast<std::size_t>(R * nc));
      im2col(xn, g, h0, h1, col.data());
      auto dY = cmat(dyn + h0 * od.w * od.z, cout, nc, So);
      dW.noalias() += dY * cmat(col.data(), R, nc, nc).transpose();
      mat(dcol.data(), R, nc, nc).noalias() = W.transpose() * dY;
      col2im(dcol.data(), g, h0, h1, dxn);
    }
  }
  return dx;
}

template <typename T>
void Conv3d<T>::collect_params(std::vector<Param<T>*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

// ---- ConvTranspose3d ------------------------------------------------------------

template <typename T>
ConvTranspose3d<T>::ConvTranspose3d(const std::string& name, Index ci, Index co, Index k_, Index s, Index p, Index op)
    : weight(name + ".weight", {ci, co, k_, k_, k_}, co * k_ * k_ * k_, ci * k_ * k_ * k_),
      bias(name + ".bias", {co}),
      cin(ci), cout(co), k(k_), stride(s), pad(p), out_pad(op) {}

template <typename T>
Dims3 ConvTranspose3d<T>::output_dims(const Dims3& in) const {
  Dims3 o;
  for (int a = 0; a < 3; ++a) o[a] = (in[a] - 1) * stride - 2 * pad + k + out_pad;
  return o;
}

template <typename T>
Tensor<T> ConvTranspose3d<T>::forward(const Tensor<T>& x) {
  const Shape5 s = shape5(x);
  if (s.c != cin) throw InvalidInputError(weight.name + ": expected " + std::to_string(cin) + " channels, got " + x.shape_str());
  x_ = x;
  out_dims_ = output_dims(s.dims());
  Tensor<T> y = make5<T>(s.n, cout, out_dims_);
  const Index R = cout * k * k * k;
  const Index Si = s.spatial();
  const Geometry g{cout, out_dims_, s.dims(), k, stride, pad};
  const Index chunk = slices_per_chunk(s.dims(), R);
  std::vector<T> col;
  auto W = cmat(weight.value.data(), cin, R, R);
  for (Index n = 0; n < s.n; ++n) {
    const T* xn = x.data() + n * cin * Si;
    T* yn = y.data() + n * cout * out_dims_.count();
    for (Index h0 = 0; h0 < s.h; h0 += chunk) {
      const Index h1 = std::min(s.h, h0 + chunk);
      const Index nc = (h1 - h0) * s.w * s.z;
      col.resize(static_cast<std::size_t>(R * nc));
      mat(col.data(), R, nc, nc).noalias() = W.transpose() * cmat(xn + h0 * s.w * s.z, cin, nc, Si);
      col2im(col.data(), g, h0, h1, yn);
    }
    add_bias(yn, bias.value.data(), cout, out_dims_.count());
  }
  return y;
}

template <typename T>
Tensor<T> ConvTranspose3d<T>::backward(const Tensor<T>& dy) {
  const Shape5 s = shape5(x_);
  const Index R = cout * k * k * k;
  const Index Si = s.spatial();
  const Index So = out_dims_.count();
  const Geometry g{cout, out_dims_, s.dims(), k, stride, pad};
  const Index chunk = slices_per_chunk(s.dims(), R);
  Tensor<T> dx(x_.shape());
  std::vector<T> dcol;
  auto W = cmat(weight.value.data(), cin, R, R);
  auto dW = mat(weight.grad.data(), cin, R, R);
  for (Index n = 0; n < s.n; ++n) {
    const T* xn = x_.data() + n * cin * Si;
    const T* dyn = dy.data() + n * cout * So;
    T* dxn = dx.data() + n * cin * Si;
    accumulate_bias_grad(dyn, bias.grad.data(), cout, So);
    for (Index h0 = 0; h0 < s.h; h0 += chunk) {
      const Index h1 = std::min(s.h, h0 + chunk);
      const Index nc = (h1 - h0) * s.w * s.z;
      dcol.resize(static_cast<std::size_t>(R * nc));
      im2col(dyn, g, h0, h1, dcol.data());
      auto dC = cmat(dcol.data(), R, nc, nc);
      mat(dxn + h0 * s.w * s.z, cin, nc, Si).noalias() = W * dC;
      dW.noalias() += cmat(xn + h0 * s.w * s.z, cin, nc, Si) * dC.transpose();
    }
  }
  return dx;
}

template <typename T>
void ConvTranspose3d<T>::collect_params(std::vector<Param<T>*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

// ---- BatchNorm3d ------------------------------------------------------------------

template <typename T>
BatchNorm3d<T>::BatchNorm3d(const std::string& name, Index channels, double momentum, double eps)
    : gamma(name + ".gamma", {channels}, 0, 0, T(1)),
      beta(name + ".beta", {channels}),
      running_mean(name + ".running_mean", {channels}),
      running_var(name + ".running_var", {channels}, 0, 0, T(1)),
      momentum_(momentum),
      eps_(eps) {
  gamma.value.fill(T(1));
  running_var.value.fill(T(1));
  running_mean.grad = Tensor<T>();
  running_var.grad = Tensor<T>();
}

template <typename T>
Tensor<T> BatchNorm3d<T>::forward(const Tensor<T>& x) {
  const Shape5 s = shape5(x);
  const Index sp = s.spatial();
  const Index count = s.n * sp;
  Tensor<T> y(x.shape());
  xhat_ = Tensor<T>(x.shape());
  inv_std_.assign(static_cast<std::size_t>(s.c), 0.0);
  cached_training_ = training_;
  for (Index c = 0; c < s.c; ++c) {
    double mean, var;
    if (training_) {
      double sum = 0.0;
      for (Index n = 0; n < s.n; ++n) {
        const T* p = x.data() + (n * s.c + c) * sp;
        for (Index i = 0; i < sp; ++i) sum += static_cast<double>(p[i]);
      }
      mean = sum / static_cast<double>(count);
      double sq = 0.0;
      for (Index n = 0; n < s.n; ++n) {
        const T* p = x.data() + (n * s.c + c) * sp;
        for (Index i = 0; i < sp; ++i) {
          const double d = static_cast<double>(p[i]) - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(count);
      const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
      running_mean.value[c] = static_cast<T>((1.0 - momentum_) * static_cast<double>(running_mean.value[c]) + momentum_ * mean);
      running_var.value[c] = static_cast<T>((1.0 - momentum_) * static_cast<double>(running_var.value[c]) + momentum_ * unbiased);
    } else {
      mean = static_cast<double>(running_mean.value[c]);
      var = static_cast<double>(running_var.value[c]);
    }
    const double inv = 1.0 / std::sqrt(var + eps_);
    inv_std_[static_cast<std::size_t>(c)] = inv;
    const T g = gamma.value[c], b = beta.value[c];
    for (Index n = 0; n < s.n; ++n) {
      const Index off = (n * s.c + c) * sp;
      const T* p = x.data() + off;
      T* xh = xhat_.data() + off;
      T* q = y.data() + off;
      for (Index i = 0; i < sp; ++i) {
        xh[i] = static_cast<T>((static_cast<double>(p[i]) - mean) * inv);
        q[i] = g * xh[i] + b;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> BatchNorm3d<T>::backward(const Tensor<T>& dy) {
  const Shape5 s = shape5(dy);
  const Index sp = s.spatial();
  const double count = static_cast<double>(s.n * sp);
  Tensor<T> dx(dy.shape());
  for (Index c = 0; c < s.c; ++c) {
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (Index n = 0; n < s.n; ++n) {
      const Index off = (n * s.c + c) * sp;
      const T* g = dy.data() + off;
      const T* xh = xhat_.data() + off;
      for (Index i = 0; i < sp; ++i) {
        sum_dy += static_cast<double>(g[i]);
        sum_dy_xh += static_cast<double>(g[i]) * static_cast<double>(xh[i]);
      }
    }
    gamma.grad[c] += static_cast<T>(sum_dy_xh);
    beta.grad[c] += static_cast<T>(sum_dy);
    const double gm = static_cast<double>(gamma.value[c]);
    const double inv = inv_std_[static_cast<std::size_t>(c)];
    for (Index n = 0; n < s.n; ++n) {
      const Index off = (n * s.c + c) * sp;
      const T* g = dy.data() + off;
      const T* xh = xhat_.data() + off;
      T* d = dx.data() + off;
      if (cached_training_) {
        const double a = gm * inv / count;
        for (Index i = 0; i < sp; ++i)
          d[i] = static_cast<T>(a * (count * static_cast<double>(g[i]) - sum_dy - static_cast<double>(xh[i]) * sum_dy_xh));
      } else {
        const double a = gm * inv;
        for (Index i = 0; i < sp; ++i) d[i] = static_cast<T>(a * static_cast<double>(g[i]));
      }
    }
  }
  return dx;
}

template <typename T>
void BatchNorm3d<T>::collect_params(std::vector<Param<T>*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

template <typename T>
void BatchNorm3d<T>::collect_buffers(std::vector<Param<T>*>& out) {
  out.push_back(&running_mean);
  out.push_back(&running_var);
}

// ---- LeakyReLU -----------------------------------------------------------------

template <typename T>
Tensor<T> LeakyReLU<T>::forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  positive_.resize(static_cast<std::size_t>(x.numel()));
  for (Index i = 0; i < x.numel(); ++i) {
    const bool pos = x[i] > T(0);
    positive_[static_cast<std::size_t>(i)] = pos;
    y[i] = pos ? x[i] : slope_ * x[i];
  }
  return y;
}

template <typename T>
Tensor<T> LeakyReLU<T>::backward(const Tensor<T>& dy) const {
  Tensor<T> dx(dy.shape());
  for (Index i = 0; i < dy.numel(); ++i) dx[i] = positive_[static_cast<std::size_t>(i)] ? dy[i] : slope_ * dy[i];
  return dx;
}

// ---- blocks ----------------------------------------------------------------------

template <typename T>
ConvBlock<T>::ConvBlock(const std::string& name, Index cin, Index cout, Index stride, double slope, double bn_mom,
                        double bn_eps)
    : conv(name + ".conv", cin, cout, 3, stride, 1), bn(name + ".bn", cout, bn_mom, bn_eps), act(slope) {}

template <typename T>
Tensor<T> ConvBlock<T>::forward(const Tensor<T>& x) {
  return act.forward(bn.forward(conv.forward(x)));
}

template <typename T>
Tensor<T> ConvBlock<T>::backward(const Tensor<T>& dy) {
  return conv.backward(bn.backward(act.backward(dy)));
}

template <typename T>
void ConvBlock<T>::collect_params(std::vector<Param<T>*>& out) {
  conv.collect_params(out);
  bn.collect_params(out);
}

template <typename T>
void ConvBlock<T>::collect_buffers(std::vector<Param<T>*>& out) {
  bn.collect_buffers(out);
}

template <typename T>
DeconvBlock<T>::DeconvBlock(const std::string& name, Index cin, Index cout, Index k, Index pad, Index out_pad,
                            double slope, double bn_mom, double bn_eps)
    : deconv(name + ".deconv", cin, cout, k, 2, pad, out_pad), bn(name + ".bn", cout, bn_mom, bn_eps), act(slope) {}

template <typename T>
Tensor<T> DeconvBlock<T>::forward(const Tensor<T>& x) {
  return act.forward(bn.forward(deconv.forward(x)));
}

template <typename T>
Tensor<T> DeconvBlock<T>::backward(const Tensor<T>& dy) {
  return deconv.backward(bn.backward(act.backward(dy)));
}

template <typename T>
void DeconvBlock<T>::collect_params(std::vector<Param<T>*>& out) {
  deconv.collect_params(out);
  bn.collect_params(out);
}

template <typename T>
void DeconvBlock<T>::collect_buffers(std::vector<Param<T>*>& out) {
  bn.collect_buffers(out);
}

// ---- Linear -------------------------------------------------------------------------

template <typename T>
Linear<T>::Linear(const std::string& name, Index in_, Index out_)
    : weight(name + ".weight", {out_, in_}, in_, out_), bias(name + ".bias", {out_}), in(in_), out(out_) {}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) {
  if (x.rank() != 2 || x.dim(1) != in) throw InvalidInputError(weight.name + ": bad input shape " + x.shape_str());
  x_ = x;
  const Index rows = x.dim(0);
  Tensor<T> y({rows, out});
  auto Y = mat(y.data(), rows, out, out);
  Y.noalias() = cmat(x.data(), rows, in, in) * cmat(weight.value.data(), out, in, in).transpose();
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < out; ++j) y[r * out + j] += bias.value[j];
  return y;
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& dy) {
  const Index rows = dy.dim(0);
  auto dY = cmat(dy.data(), rows, out, out);
  mat(weight.grad.data(), out, in, in).noalias() += dY.transpose() * cmat(x_.data(), rows, in, in);
  for (Index j = 0; j < out; ++j) {
    double s = 0.0;
    for (Index r = 0; r < rows; ++r) s += static_cast<double>(dy[r * out + j]);
    bias.grad[j] += static_cast<T>(s);
  }
  Tensor<T> dx({rows, in});
  mat(dx.data(), rows, in, in).noalias() = dY * cmat(weight.value.data(), out, in, in);
  return dx;
}

template <typename T>
void Linear<T>::collect_params(std::vector<Param<T>*>& o) {
  o.push_back(&weight);
  o.push_back(&bias);
}

// ---- LayerNorm -----------------------------------------------------------------------

template <typename T>
LayerNorm<T>::LayerNorm(const std::string& name, Index dim, double eps)
    : gamma(name + ".gamma", {dim}, 0, 0, T(1)), beta(name + ".beta", {dim}), dim_(dim), eps_(eps) {
  gamma.value.fill(T(1));
}

template <typename T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x) {
  const Index rows = x.dim(0);
  Tensor<T> y(x.shape());
  xhat_ = Tensor<T>(x.shape());
  inv_std_.assign(static_cast<std::size_t>(rows), 0.0);
  for (Index r = 0; r < rows; ++r) {
    const T* p = x.data() + r * dim_;
    double mean = 0.0;
    for (Index j = 0; j < dim_; ++j) mean += static_cast<double>(p[j]);
    mean /= static_cast<double>(dim_);
    double var = 0.0;
    for (Index j = 0; j < dim_; ++j) {
      const double d = static_cast<double>(p[j]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(dim_);
    const double inv = 1.0 / std::sqrt(var + eps_);
    inv_std_[static_cast<std::size_t>(r)] = inv;
    T* xh = xhat_.data() + r * dim_;
    T* q = y.data() + r * dim_;
    for (Index j = 0; j < dim_; ++j) {
      xh[j] = static_cast<T>((static_cast<double>(p[j]) - mean) * inv);
      q[j] = gamma.value[j] * xh[j] + beta.value[j];
    }
  }
  return y;
}

template <typename T>
Tensor<T> LayerNorm<T>::backward(const Tensor<T>& dy) {
  const Index rows = dy.dim(0);
  Tensor<T> dx(dy.shape());
  const double n = static_cast<double>(dim_);
  for (Index r = 0; r < rows; ++r) {
    const T* g = dy.data() + r * dim_;
    const T* xh = xhat_.data() + r * dim_;
    double s1 = 0.0, s2 = 0.0;
    for (Index j = 0; j < dim_; ++j) {
      const double gx = static_cast<double>(g[j]) * static_cast<double>(gamma.value[j]);
      s1 += gx;
      s2 += gx * static_cast<double>(xh[j]);
      gamma.grad[j] += g[j] * xh[j];
      beta.grad[j] += g[j];
    }
    const double inv = inv_std_[static_cast<std::size_t>(r)];
    T* d = dx.data() + r * dim_;
    for (Index j = 0; j < dim_; ++j) {
      const double gx = static_cast<double>(g[j]) * static_cast<double>(gamma.value[j]);
      d[j] = static_cast<T>(inv / n * (n * gx - s1 - static_cast<double>(xh[j]) * s2));
    }
  }
  return dx;
}

template <typename T>
void LayerNorm<T>::collect_params(std::vector<Param<T>*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

// ---- GELU (exact erf form) -------------------------------------------------------------

template <typename T>
Tensor<T> Gelu<T>::forward(const Tensor<T>& x) {
  x_ = x;
  Tensor<T> y(x.shape());
  for (Index i = 0; i < x.numel(); ++i) {
    const double v = static_cast<double>(x[i]);
    y[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)));
  }
  return y;
}

template <typename T>
Tensor<T> Gelu<T>::backward(const Tensor<T>& dy) const {
  Tensor<T> dx(dy.shape());
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  for (Index i = 0; i < dy.numel(); ++i) {
    const double v = static_cast<double>(x_[i]);
    const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
    dx[i] = static_cast<T>(static_cast<double>(dy[i]) * (cdf + v * pdf));
  }
  return dx;
}

// ---- WindowAttention ----------------------------------------------------------------------

template <typename T>
WindowAttention<T>::WindowAttention(const std::string& name, Index d, Index h, Index w)
    : qkv(name + ".qkv", d, 3 * d), proj(name + ".proj", d, d), dim(d), heads(h), window(w) {
  if (d % h != 0) throw ConfigError(name + ": dim not divisible by heads");
}

template <typename T>
std::vector<std::vector<Index>> WindowAttention<T>::windows(const Dims3& grid) const {
  for (int a = 0; a < 3; ++a)
    if (grid[a] % window != 0)
      throw ConfigError("token grid " + grid.str() + " not divisible by window " + std::to_string(window));
  std::vector<std::vector<Index>> out;
  for (Index i0 = 0; i0 < grid.h; i0 += window)
    for (Index j0 = 0; j0 < grid.w; j0 += window)
      for (Index k0 = 0; k0 < grid.z; k0 += window) {
        std::vector<Index> idx;
        idx.reserve(static_cast<std::size_t>(window * window * window));
        for (Index i = i0; i < i0 + window; ++i)
          for (Index j = j0; j < j0 + window; ++j)
            for (Index k = k0; k < k0 + window; ++k) idx.push_back((i * grid.w + j) * grid.z + k);
        out.push_back(std::move(idx));
      }
  return out;
}

template <typename T>
Tensor<T> WindowAttention<T>::forward(const Tensor<T>& x, const Dims3& grid) {
  const Index L = grid.count();
  if (x.rank() != 2 || x.dim(1) != dim || x.dim(0) % L != 0)
    throw InvalidInputError(qkv.weight.name + ": bad token shape " + x.shape_str());
  grid_ = grid;
  batch_ = x.dim(0) / L;
  qkv_out_ = qkv.forward(x);
  const auto wins = windows(grid);
  const Index n = window * window * window;
  const Index dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  probs_.assign(static_cast<std::size_t>(batch_ * static_cast<Index>(wins.size()) * heads * n * n), T{});
  Tensor<T> attn({x.dim(0), dim});
  const Index ld = 3 * dim;
  std::vector<double> logits(static_cast<std::size_t>(n));
  Index pidx = 0;
  for (Index b = 0; b < batch_; ++b)
    for (const auto& win : wins)
      for (Index h = 0; h < heads; ++h, pidx += n * n) {
        T* P = probs_.data() + pidx;
        for (Index i = 0; i < n; ++i) {
          const T* q = qkv_out_.data() + (b * L + win[static_cast<std::size_t>(i)]) * ld + h * dh;
          double mx = -1e300;
          for (Index j = 0; j < n; ++j) {
            const T* kk = qkv_out_.data() + (b * L + win[static_cast<std::size_t>(j)]) * ld + dim + h * dh;
            double s = 0.0;
            for (Index d = 0; d < dh; ++d) s += static_cast<double>(q[d]) * static_cast<double>(kk[d]);
            logits[static_cast<std::size_t>(j)] = s * scale;
            mx = std::max(mx, s * scale);
          }
          double z = 0.0;
          for (Index j = 0; j < n; ++j) z += std::exp(logits[static_cast<std::size_t>(j)] - mx);
          for (Index j = 0; j < n; ++j) P[i * n + j] = static_cast<T>(std::exp(logits[static_cast<std::size_t>(j)] - mx) / z);
          T* o = attn.data() + (b * L + win[static_cast<std::size_t>(i)]) * dim + h * dh;
          for (Index j = 0; j < n; ++j) {
            const T pij = P[i * n + j];
            const T* v = qkv_out_.data() + (b * L + win[static_cast<std::size_t>(j)]) * ld + 2 * dim + h * dh;
            for (Index d = 0; d < dh; ++d) o[d] += pij * v[d];
          }
        }
      }
  return proj.forward(attn);
}

template <typename T>
Tensor<T> WindowAttention<T>::backward(const Tensor<T>& dy) {
  const Tensor<T> dattn = proj.backward(dy);
  const Index L = grid_.count();
  const auto wins = windows(grid_);
  const Index n = window * window * window;
  const Index dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Index ld = 3 * dim;
  Tensor<T> dqkv({qkv_out_.dim(0), ld});
  std::vector<double> dP(static_cast<std::size_t>(n * n)), dS(static_cast<std::size_t>(n * n));
  Index pidx = 0;
  auto row = [&](const Tensor<T>& t, Index b, Index tok, Index off, Index stride) {
    return t.data() + (b * L + tok) * stride + off;
  };
  for (Index b = 0; b < batch_; ++b)
    for (const auto& win : wins)
      for (Index h = 0; h < heads; ++h, pidx += n * n) {
        const T* P = probs_.data() + pidx;
        // dP = dO V^T ; dV = P^T dO
        for (Index i = 0; i < n; ++i) {
          const T* dO = row(dattn, b, win[static_cast<std::size_t>(i)], h * dh, dim);
          for (Index j = 0; j < n; ++j) {
            const T* v = row(qkv_out_, b, win[static_cast<std::size_t>(j)], 2 * dim + h * dh, ld);
            double s = 0.0;
            for (Index d = 0; d < dh; ++d) s += static_cast<double>(dO[d]) * static_cast<double>(v[d]);
            dP[static_cast<std::size_t>(i * n + j)] = s;
            T* dv = dqkv.data() + (b * L + win[static_cast<std::size_t>(j)]) * ld + 2 * dim + h * dh;
            const T pij = P[i * n + j];
            for (Index d = 0; d < dh; ++d) dv[d] += pij * dO[d];
          }
        }
        // softmax backward
        for (Index i = 0; i < n; ++i) {
          double dot = 0.0;
          for (Index j = 0; j < n; ++j) dot += dP[static_cast<std::size_t>(i * n + j)] * static_cast<double>(P[i * n + j]);
          for (Index j = 0; j < n; ++j)
            dS[static_cast<std::size_t>(i * n + j)] =
                static_cast<double>(P[i * n + j]) * (dP[static_cast<std::size_t>(i * n + j)] - dot) * scale;
        }
        // dQ = dS K ; dK = dS^T Q
        for (Index i = 0; i < n; ++i) {
          const Index ti = win[static_cast<std::size_t>(i)];
          T* dq = dqkv.data() + (b * L + ti) * ld + h * dh;
          const T* q = row(qkv_out_, b, ti, h * dh, ld);
          for (Index j = 0; j < n; ++j) {
            const Index tj = win[static_cast<std::size_t>(j)];
            const T* kk = row(qkv_out_, b, tj, dim + h * dh, ld);
            T* dk = dqkv.data() + (b * L + tj) * ld + dim + h * dh;
            const T g = static_cast<T>(dS[static_cast<std::size_t>(i * n + j)]);
            for (Index d = 0; d < dh; ++d) {
              dq[d] += g * kk[d];
              dk[d] += g * q[d];
            }
          }
        }
      }
  return qkv.backward(dqkv);
}

template <typename T>
void WindowAttention<T>::collect_params(std::vector<Param<T>*>& out) {
  qkv.collect_params(out);
  proj.collect_params(out);
}

// ---- TransformerBlock -------------------------------------------------------------------------

template <typename T>
TransformerBlock<T>::TransformerBlock(const std::string& name, Index dim, Index heads, Index window, Index mlp_ratio)
    : norm1(name + ".norm1", dim),
      attn(name + ".attn", dim, heads, window),
      norm2(name + ".norm2", dim),
      fc1(name + ".mlp.fc1", dim, mlp_ratio * dim),
      fc2(name + ".mlp.fc2", mlp_ratio * dim, dim) {}

template <typename T>
Tensor<T> TransformerBlock<T>::forward(const Tensor<T>& x, const Dims3& grid) {
  Tensor<T> x1 = attn.forward(norm1.forward(x), grid);
  add_inplace(x1, x);
  Tensor<T> x2 = fc2.forward(gelu.forward(fc1.forward(norm2.forward(x1))));
  add_inplace(x2, x1);
  return x2;
}

template <typename T>
Tensor<T> TransformerBlock<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dx1 = norm2.backward(fc1.backward(gelu.backward(fc2.backward(dy))));
  add_inplace(dx1, dy);
  Tensor<T> dx = norm1.backward(attn.backward(dx1));
  add_inplace(dx, dx1);
  return dx;
}

template <typename T>
void TransformerBlock<T>::collect_params(std::vector<Param<T>*>& out) {
  norm1.collect_params(out);
  attn.collect_params(out);
  norm2.collect_params(out);
  fc1.collect_params(out);
  fc2.collect_params(out);
}

// ---- token reshapes ----------------------------------------------------------------------------

template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  const Shape5 s = shape5(x);
  const Index L = s.spatial();
  Tensor<T> t({s.n * L, s.c});
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c) {
      const T* src = x.data() + (n * s.c + c) * L;
      for (Index i = 0; i < L; ++i) t[(n * L + i) * s.c + c] = src[i];
    }
  return t;
}

template <typename T>
Tensor<T> from_tokens(const Tensor<T>& tokens, Index n_batch, const Dims3& grid) {
  const Index L = grid.count();
  const Index C = tokens.dim(1);
  if (tokens.dim(0) != n_batch * L) throw InvalidInputError("token count does not match grid " + grid.str());
  Tensor<T> x = make5<T>(n_batch, C, grid);
  for (Index n = 0; n < n_batch; ++n)
    for (Index c = 0; c < C; ++c) {
      T* dst = x.data() + (n * C + c) * L;
      for (Index i = 0; i < L; ++i) dst[i] = tokens[(n * L + i) * C + c];
    }
  return x;
}

#define PLHN_INSTANTIATE(T)                                                         \
  template void init_param<T>(Param<T>&, std::mt19937_64&);                         \
  template class Conv3d<T>;                                                         \
  template class ConvTranspose3d<T>;                                                \
  template class BatchNorm3d<T>;                                                    \
  template class LeakyReLU<T>;                                                      \
  template class ConvBlock<T>;                                                      \
  template class DeconvBlock<T>;                                                    \
  template class Linear<T>;                                                         \
  template class LayerNorm<T>;                                                      \
  template class Gelu<T>;                                                           \
  template class WindowAttention<T>;                                                \
  template class TransformerBlock<T>;                                               \
  template Tensor<T> to_tokens<T>(const Tensor<T>&);                                \
  template Tensor<T> from_tokens<T>(const Tensor<T>&, Index, const Dims3&);

PLHN_INSTANTIATE(float)
PLHN_INSTANTIATE(double)
#undef PLHN_INSTANTIATE

}  // namespace plhn::nn
