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

#include "losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace plhn {
namespace {

void check_sizes(std::size_t p, std::size_t y) {
  if (p != y) throw InvalidInputError("loss: prediction and label sizes differ");
}

}  // namespace

template <typename T>
double dice_loss(std::span<const T> p, std::span<const std::uint8_t> y, T* grad, double weight) {
  check_sizes(p.size(), y.size());
  double inter = 0.0, pp = 0.0, yy = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = static_cast<double>(p[i]);
    inter += pi * y[i];
    pp += pi * pi;
    yy += y[i];
  }
  const double den = pp + yy + kDiceEps;
  if (grad) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = -2.0 * y[i] / den + 4.0 * inter * static_cast<double>(p[i]) / (den * den);
      grad[i] += static_cast<T>(weight * g);
    }
  }
  return 1.0 - 2.0 * inter / den;
}

template <typename T>
double bce_loss(std::span<const T> p, std::span<const std::uint8_t> y, T* grad, double weight) {
  check_sizes(p.size(), y.size());
  if (p.empty()) return 0.0;
  const double n = static_cast<double>(p.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double raw = static_cast<double>(p[i]);
    const double q = std::clamp(raw, kProbClamp, 1.0 - kProbClamp);
    sum -= y[i] ? std::log(q) : std::log(1.0 - q);
    if (grad && raw == q) grad[i] += static_cast<T>(weight * (y[i] ? -1.0 / q : 1.0 / (1.0 - q)) / n);
  }
  return sum / n;
}

template <typename T>
double combined_loss(std::span<const T> p, std::span<const std::uint8_t> y, T* grad, double weight) {
  return dice_loss(p, y, grad, weight) + bce_loss(p, y, grad, weight);
}

template <typename T>
DiceBce batch_combined_loss(const Tensor<T>& p, const std::vector<std::uint8_t>& y, Tensor<T>* dp, double weight) {
  const Shape5 s = shape5(p);
  if (s.c != 1) throw InvalidInputError("loss: expected a single-channel probability tensor");
  check_sizes(static_cast<std::size_t>(p.numel()), y.size());
  if (dp && dp->shape() != p.shape()) *dp = Tensor<T>(p.shape());
  const Index sp = s.spatial();
  DiceBce out;
  const double w = weight / static_cast<double>(s.n);
  for (Index n = 0; n < s.n; ++n) {
    std::span<const T> pn(p.data() + n * sp, static_cast<std::size_t>(sp));
    std::span<const std::uint8_t> yn(y.data() + n * sp, static_cast<std::size_t>(sp));
    T* g = dp ? dp->data() + n * sp : nullptr;
    out.dice += dice_loss(pn, yn, g, w);
    out.bce += bce_loss(pn, yn, g, w);
  }
  out.dice /= static_cast<double>(s.n);
  out.bce /= static_cast<double>(s.n);
  return out;
}

template <typename T>
double ppc_loss(const Tensor<T>& S, const Assignment& a, double tau, Tensor<T>* dS, double weight) {
  if (!(tau > 0.0)) throw InvalidInputError("ppc_loss: tau must be positive");
  const Shape5 s = shape5(S);
  const Index sp = s.spatial(), CK = s.c;
  const Index V = s.n * sp;
  if (static_cast<Index>(a.slot.size()) != V) throw InvalidInputError("ppc_loss: assignment size mismatch");
  if (V == 0) return 0.0;
  if (dS && dS->shape() != S.shape()) *dS = Tensor<T>(S.shape());
  std::vector<double> z(static_cast<std::size_t>(CK));
  double sum = 0.0;
  for (Index n = 0; n < s.n; ++n)
    for (Index i = 0; i < sp; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < CK; ++j) {
        z[static_cast<std::size_t>(j)] = static_cast<double>(S[(n * CK + j) * sp + i]) / tau;
        mx = std::max(mx, z[static_cast<std::size_t>(j)]);
      }
      double den = 0.0;
      for (Index j = 0; j < CK; ++j) den += std::exp(z[static_cast<std::size_t>(j)] - mx);
      const Index pos = a.slot[static_cast<std::size_t>(n * sp + i)];
      sum += std::log(den) + mx - z[static_cast<std::size_t>(pos)];
      if (dS) {
        const double g = weight / (tau * static_cast<double>(V));
        for (Index j = 0; j < CK; ++j) {
          const double sm = std::exp(z[static_cast<std::size_t>(j)] - mx) / den;
          (*dS)[(n * CK + j) * sp + i] += static_cast<T>(g * (sm - (j == pos ? 1.0 : 0.0)));
        }
      }
    }
  return sum / static_cast<double>(V);
}

LossBreakdown compose_total(DiceBce p1, DiceBce pf, double ppc, double lambda1, double lambda2) {
  LossBreakdown b;
  b.dice_p1 = p1.dice;
  b.bce_p1 = p1.bce;
  b.dice_pf = pf.dice;
  b.bce_pf = pf.bce;
  b.ppc = ppc;
  b.lambda1 = lambda1;
  b.lambda2 = lambda2;
  b.total = p1.sum() + lambda1 * pf.sum() + lambda2 * ppc;
  return b;
}

template <typename T>
LossBreakdown total_loss(const Tensor<T>& p1, const Tensor<T>* pf, const std::vector<std::uint8_t>& y,
                         std::optional<double> ppc, double lambda1, double lambda2, Tensor<T>* dp1, Tensor<T>* dpf) {
  if (lambda1 < 0.0 || lambda2 < 0.0) throw InvalidInputError("loss weights must be non-negative");
  const DiceBce l1 = batch_combined_loss(p1, y, dp1, 1.0);
  DiceBce lf;
  if (pf) lf = batch_combined_loss(*pf, y, dpf, lambda1);
  LossBreakdown b = compose_total(l1, lf, ppc.value_or(0.0), pf ? lambda1 : 0.0, ppc ? lambda2 : 0.0);
  b.ppc_skipped = !ppc.has_value();
  return b;
}

#define PLHN_INSTANTIATE(T)                                                                                        \
  template double dice_loss<T>(std::span<const T>, std::span<const std::uint8_t>, T*, double);                     \
  template double bce_loss<T>(std::span<const T>, std::span<const std::uint8_t>, T*, double);                      \
  template double combined_loss<T>(std::span<const T>, std::span<const std::uint8_t>, T*, double);                 \
  template DiceBce batch_combined_loss<T>(const Tensor<T>&, const std::vector<std::uint8_t>&, Tensor<T>*, double); \
  template double ppc_loss<T>(const Tensor<T>&, const Assignment&, double, Tensor<T>*, double);                    \
  template LossBreakdown total_loss<T>(const Tensor<T>&, const Tensor<T>*, const std::vector<std::uint8_t>&,       \
                                       std::optional<double>, double, double, Tensor<T>*, Tensor<T>*);

PLHN_INSTANTIATE(float)
PLHN_INSTANTIATE(double)
#undef PLHN_INSTANTIATE

}  // namespace plhn
