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

#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "config.hpp"
#include "nn/layers.hpp"
#include "prototype.hpp"

namespace plhn {

// Which optional parts take part in a forward/backward pass.
struct ActiveParts {
  bool transformer = false;
  bool prototypes = false;
};

// Stage 1 of the two-stage schedule runs the plain backbone; stage 2 (or a
// single joint stage, `stage` = 0) enables everything the flags allow.
ActiveParts active_parts(const NetworkConfig& cfg, int stage);

template <typename T>
struct FeaturePyramid {
  Tensor<T> f1_1;  // (N, M, H/2, W/2, Z/2)
  Tensor<T> f1_2;  // (N, 2M, H/4, ...)
  Tensor<T> f1_3;  // (N, Hs, H/8, ...)
};

template <typename T>
struct SegmentationOutputs {
  Tensor<T> p1;  // (N, 1, H, W, Z)
  Tensor<T> pf;  // empty unless the prototype head ran
  Tensor<T> pi;  // decoder feature (N, M, H, W, Z)
  Tensor<T> x;   // per-voxel normalized pi
  Tensor<T> s;   // similarity (N, C*K, H, W, Z), empty unless the prototype head ran

  // Probability used for the final mask.
  const Tensor<T>& final_prob() const { return pf.empty() ? p1 : pf; }
};

template <typename T>
class HybridNet {
 public:
  explicit HybridNet(const NetworkConfig& cfg);

  const NetworkConfig& config() const { return cfg_; }

  // Xavier-uniform weights, zero biases, unit BN scales; identical for equal seeds.
  void init(std::uint64_t seed);
  void set_training(bool on);

  // ---- stage-level pieces (each caches what its backward needs) ----
  FeaturePyramid<T> encoder1_forward(const Tensor<T>& x);
  Tensor<T> encoder2_forward(const Tensor<T>& x);
  // (N, C, h, w, z) -> (N*h*w*z, Hs)
  Tensor<T> linear_embed(const Tensor<T>& f);
  Tensor<T> transformer_forward(const Tensor<T>& tokens, const Dims3& grid);
  Tensor<T> decoder_forward(const FeaturePyramid<T>& skips, const Tensor<T>* bottleneck);
  Tensor<T> seg_head(const Tensor<T>& pi);

  // Called with X before the prototype head reads the bank (used to initialize it lazily).
  using FeatureHook = std::function<void(const Tensor<T>& X)>;

  SegmentationOutputs<T> forward(const Tensor<T>& x, const ActiveParts& act, PrototypeBank* bank,
                                 const FeatureHook& hook = {});
  // Gradients of the loss w.r.t. P1, Pf (may be empty) and an extra similarity gradient (may be empty).
  void backward(const Tensor<T>& dp1, const Tensor<T>& dpf, const Tensor<T>& dS_extra);

  std::vector<nn::Param<T>*> params();
  std::vector<nn::Param<T>*> params(const ActiveParts& act);
  std::vector<nn::Param<T>*> buffers();
  void zero_grad();

  // Parameter families used for stage gating.
  std::vector<nn::Param<T>*> transformer_params();
  std::vector<nn::Param<T>*> prototype_params();

  std::vector<std::unique_ptr<nn::ConvBlock<T>>> encoder1;
  std::vector<std::unique_ptr<nn::ConvBlock<T>>> encoder2;
  std::unique_ptr<nn::Linear<T>> embed;
  std::vector<std::unique_ptr<nn::TransformerBlock<T>>> blocks;
  std::unique_ptr<nn::DeconvBlock<T>> dec1, dec2, dec3;
  std::unique_ptr<nn::Conv3d<T>> head;
  std::unique_ptr<PrototypeHead<T>> proto;

 private:
  NetworkConfig cfg_;
  // forward caches
  ActiveParts act_{};
  Index batch_ = 0;
  Dims3 grid_{};
  Tensor<T> p1_, x_;
  std::vector<T> norms_;
  bool ran_proto_ = false;
};

// ---- complexity -------------------------------------------------------------

struct ModuleCost {
  std::string name;
  std::int64_t params = 0;
  double flops = 0.0;  // multiply-add counted as 2
};

// Per-module parameter and FLOP breakdown for inference with every flag-enabled part active.
std::vector<ModuleCost> cost_table(const NetworkConfig& cfg, const Dims3& input_dims);
std::int64_t count_parameters(const NetworkConfig& cfg);
double estimate_flops(const NetworkConfig& cfg, const Dims3& input_dims);

}  // namespace plhn
