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

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "prototype.hpp"

namespace plhn {

inline constexpr double kDiceEps = 1e-5;
inline constexpr double kProbClamp = 1e-7;

// Single-patch losses. When `grad` is non-null, weight * dL/dP is added to it.
template <typename T>
double dice_loss(std::span<const T> p, std::span<const std::uint8_t> y, T* grad = nullptr, double weight = 1.0);
template <typename T>
double bce_loss(std::span<const T> p, std::span<const std::uint8_t> y, T* grad = nullptr, double weight = 1.0);
template <typename T>
double combined_loss(std::span<const T> p, std::span<const std::uint8_t> y, T* grad = nullptr, double weight = 1.0);

struct DiceBce {
  double dice = 0.0;
  double bce = 0.0;
  double sum() const { return dice + bce; }
};

// Per-patch Dice and BCE of an (N, 1, H, W, Z) probability tensor, averaged over N.
// Labels hold N*H*W*Z values. Adds weight * gradient into `dp` when given.
template <typename T>
DiceBce batch_combined_loss(const Tensor<T>& p, const std::vector<std::uint8_t>& y, Tensor<T>* dp = nullptr,
                            double weight = 1.0);

// Mean over voxels of -log softmax(S / tau)[assigned slot]; S is (N, C*K, H, W, Z).
template <typename T>
double ppc_loss(const Tensor<T>& S, const Assignment& a, double tau, Tensor<T>* dS = nullptr, double weight = 1.0);

struct LossBreakdown {
  double dice_p1 = 0.0;
  double bce_p1 = 0.0;
  double dice_pf = 0.0;
  double bce_pf = 0.0;
  double ppc = 0.0;
  double total = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  bool ppc_skipped = false;
};

// total = (dice_p1 + bce_p1) + lambda1 * (dice_pf + bce_pf) + lambda2 * ppc
LossBreakdown compose_total(DiceBce p1, DiceBce pf, double ppc, double lambda1, double lambda2);

// Full objective. `pf` and `ppc` may be absent (stage 1); gradients go to dp1/dpf when given.
template <typename T>
LossBreakdown total_loss(const Tensor<T>& p1, const Tensor<T>* pf, const std::vector<std::uint8_t>& y,
                         std::optional<double> ppc, double lambda1, double lambda2, Tensor<T>* dp1 = nullptr,
                         Tensor<T>* dpf = nullptr);

}  // namespace plhn
