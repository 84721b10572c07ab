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

#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "../tensor.hpp"

namespace plhn::nn {

// A trainable array with its gradient. Buffers (running statistics) reuse the
// type and leave `grad` empty.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Index fan_in = 0;   // Xavier fan counts; zero marks "not Xavier-initialized"
  Index fan_out = 0;
  T init_value = T{};  // constant init for non-Xavier params

  Param() = default;
  Param(std::string n, std::vector<Index> shape, Index fi = 0, Index fo = 0, T init = T{})
      : name(std::move(n)), value(shape, init), grad(shape), fan_in(fi), fan_out(fo), init_value(init) {}
  bool xavier() const { return fan_in > 0; }
};

template <typename T>
class Module {
 public:
  virtual ~Module() = default;
  virtual void collect_params(std::vector<Param<T>*>& out) = 0;
  virtual void collect_buffers(std::vector<Param<T>*>&) {}
  virtual void set_training(bool) {}
};

// Xavier-uniform for weights with fan counts, constant init otherwise.
template <typename T>
void init_param(Param<T>& p, std::mt19937_64& rng);

// ---- spatial layers on (N, C, H, W, Z) -------------------------------------

template <typename T>
class Conv3d : public Module<T> {
 public:
  Conv3d(const std::string& name, Index cin, Index cout, Index k, Index stride, Index pad);
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect_params(std::vector<Param<T>*>& out) override;
  Dims3 output_dims(const Dims3& in) const;

  Param<T> weight;  // (cout, cin, k, k, k)
  Param<T> bias;    // (cout)
  Index cin, cout, k, stride, pad;

 private:
  Tensor<T> x_;
};

// Adjoint of a strided convolution: output spatial size (in-1)*stride - 2*pad + k + out_pad.
template <typename T>
class ConvTranspose3d : public Module<T> {
 public:
  ConvTranspose3d(const std::string& name, Index cin, Index cout, Index k, Index stride, Index pad, Index out_pad);
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect_params(std::vector<Param<T>*>& out) override;
  Dims3 output_dims(const Dims3& in) const;

  Param<T> weight;  // (cin, cout, k, k, k)
  Param<T> bias;    // (cout)
  Index cin, cout, k, stride, pad, out_pad;

 private:
  Tensor<T> x_;
  Dims3 out_dims_{};
};

template <typename T>
class BatchNorm3d : public Module<T> {
 public:
  BatchNorm3d(const std::string& name, Index channels, double momentum, double eps);
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect_params(std::vector<Param<T>*>& out) override;
  void collect_buffers(std::vector<Param<T>*>& out) override;
  void set_training(bool on) override { training_ = on; }
  bool training() const { return training_; }

  Param<T> gamma, beta;
  Param<T> running_mean, running_var;

 private:
  double momentum_, eps_;
  bool training_ = true;
  Tensor<T> xhat_;
  std::vector<double> inv_std_;
  bool cached_training_ = true;
};

template <typename T>
class LeakyReLU {
 public:
  explicit LeakyReLU(double slope) : slope_(static_cast<T>(slope)) {}
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy) const;

 private:
  T slope_;
  std::vector<unsigned char> positive_;
};

// conv (3x3x3 here) -> batch norm -> leaky ReLU
template <typename T>
class ConvBlock : public Module<T> {
 public:
  ConvBlock(const std::string& name, Index cin, Index cout, Index stride, double slope, double bn_mom, double bn_eps);
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect_params(std::vector<Param<T>*>& out) override;
  void collect_buffers(std::vector<Param<T>*>& out) override;
  void set_training(bool on) override { bn.set_training(on); }

  Conv3d<T> conv;
  BatchNorm3d<T> bn;
  LeakyReLU<T> act;
};

// transpose conv -> batch norm -> leaky ReLU
template <typename T>
class DeconvBlock : public Module<T> {
 public:
  DeconvBlock(const std::string& name, Index cin, Index cout, Index k, Index pad, Index out_pad, double slope,
              double bn_mom, double bn_eps);
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect_params(std::vector<Param<T>*>& out) override;
  void collect_buffers(std::vector<Param<T>*>& out) override;
  void set_training(bool on) override { bn.set_training(on); }

  ConvTranspose3d<T> deconv;
  BatchNorm3d<T> bn;
  LeakyReLU<T> act;
};

// ---- token layers on (rows, features) --------------------------------------

template <typename T>
class Linear : public Module<T> {
 public:
  Linear(const std::string& name, Index in, Index out);
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect_params(std::vector<Param<T>*>& out) override;

  Param<T> weight;  // (out, in)
  Param<T> bias;    // (out)
  Index in, out;

 private:
  Tensor<T> x_;
};

template <typename T>
class LayerNorm : public Module<T> {
 public:
  LayerNorm(const std::string& name, Index dim, double eps = 1e-5);
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect_params(std::vector<Param<T>*>& out) override;

  Param<T> gamma, beta;

 private:
  Index dim_;
  double eps_;
  Tensor<T> xhat_;
  std::vector<double> inv_std_;
};

template <typename T>
class Gelu {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy) const;

 private:
  Tensor<T> x_;
};

// Multi-head self-attention restricted to non-overlapping cubic windows of a
// token grid. Tokens are laid out (N, h*w*z, dim) with z fastest.
template <typename T>
class WindowAttention : public Module<T> {
 public:
  WindowAttention(const std::string& name, Index dim, Index heads, Index window);
  Tensor<T> forward(const Tensor<T>& x, const Dims3& grid);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect_params(std::vector<Param<T>*>& out) override;

  Linear<T> qkv;
  Linear<T> proj;
  Index dim, heads, window;

 private:
  std::vector<std::vector<Index>> windows(const Dims3& grid) const;
  Tensor<T> qkv_out_;
  std::vector<T> probs_;  // per (sample, window, head): window^3 x window^3
  Dims3 grid_{};
  Index batch_ = 0;
};

// Pre-norm block: x += MSA(LN(x)); x += MLP(LN(x)).
template <typename T>
class TransformerBlock : public Module<T> {
 public:
  TransformerBlock(const std::string& name, Index dim, Index heads, Index window, Index mlp_ratio);
  Tensor<T> forward(const Tensor<T>& x, const Dims3& grid);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect_params(std::vector<Param<T>*>& out) override;

  LayerNorm<T> norm1;
  WindowAttention<T> attn;
  LayerNorm<T> norm2;
  Linear<T> fc1;
  Gelu<T> gelu;
  Linear<T> fc2;
};

// (N, C, h, w, z) <-> (N*h*w*z, C) token matrices.
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x);
template <typename T>
Tensor<T> from_tokens(const Tensor<T>& tokens, Index n, const Dims3& grid);

}  // namespace plhn::nn
