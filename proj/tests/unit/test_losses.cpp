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

#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "losses.hpp"

using namespace plhn;
using plhn::test::max_rel_error;

namespace {

Tensor<double> probs(std::vector<Index> shape, std::uint64_t seed) {
  Tensor<double> t = plhn::test::random_tensor(std::move(shape), seed);
  for (auto& v : t.vec()) v = 1.0 / (1.0 + std::exp(-v));
  return t;
}

std::vector<std::uint8_t> labels(Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint8_t> y(static_cast<std::size_t>(n));
  for (auto& v : y) v = static_cast<std::uint8_t>(rng() & 1u);
  return y;
}

}  // namespace

TEST_CASE("dice and bce closed forms") {
  const std::vector<double> p{1.0, 0.0, 0.5, 0.5};
  const std::vector<std::uint8_t> y{1, 0, 0, 1};
  // inter = 1.5, pp = 1.5, yy = 2
  CHECK(dice_loss<double>(p, y) == doctest::Approx(1.0 - 3.0 / (3.5 + kDiceEps)).epsilon(1e-12));
  const std::vector<double> half{0.5, 0.5};
  const std::vector<std::uint8_t> y01{0, 1};
  CHECK(bce_loss<double>(half, y01) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // perfect prediction: dice ~ 0, bce clamped at -log(1 - 1e-7)
  const std::vector<double> exact{0.0, 1.0};
  CHECK(dice_loss<double>(exact, y01) == doctest::Approx(0.0).epsilon(1e-5));
  CHECK(bce_loss<double>(exact, y01) == doctest::Approx(-std::log(1.0 - kProbClamp)).epsilon(1e-9));
  // empty label, empty prediction: Dice defined via epsilon
  const std::vector<double> zero{0.0, 0.0};
  const std::vector<std::uint8_t> y00{0, 0};
  CHECK(dice_loss<double>(zero, y00) == doctest::Approx(1.0));
}

TEST_CASE("dice plus bce: 1/3 dice oracle") {
  // p = y = {1, 0, 0}: inter 1, pp 1, yy 1 -> 1 - 2/(2+eps)
  const std::vector<double> p{1.0, 0.0, 0.0};
  const std::vector<std::uint8_t> y{1, 0, 0};
  CHECK(dice_loss<double>(p, y) == doctest::Approx(1.0 - 2.0 / (2.0 + kDiceEps)).epsilon(1e-12));
  // p = {1, 1, 0}, y = {1, 0, 0}: 1 - 2/(3+eps) ~ 1/3
  const std::vector<double> p2{1.0, 1.0, 0.0};
  CHECK(dice_loss<double>(p2, y) == doctest::Approx(1.0 / 3.0).epsilon(1e-5));
}

TEST_CASE("clamped bce has zero gradient") {
  const std::vector<double> p{0.0, 1.0};
  const std::vector<std::uint8_t> y{1, 0};
  double g[2] = {0.0, 0.0};
  const double l = bce_loss<double>(p, y, g);
  CHECK(std::isfinite(l));
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 0.0);
}

TEST_CASE("batch combined loss gradient") {
  Tensor<double> p = probs({3, 1, 4, 3, 2}, 11);
  const auto y = labels(p.numel(), 5);
  Tensor<double> dp;
  batch_combined_loss(p, y, &dp, 0.7);
  auto loss = [&] { return 0.7 * batch_combined_loss<double>(p, y).sum(); };
  CHECK(max_rel_error(p, dp, loss, 48, 1e-7) < 1e-6);
}

TEST_CASE("batch loss is the mean of per-patch losses") {
  Tensor<double> p = probs({2, 1, 2, 2, 2}, 3);
  const auto y = labels(p.numel(), 9);
  const DiceBce b = batch_combined_loss<double>(p, y);
  double expect = 0.0;
  for (Index n = 0; n < 2; ++n) {
    std::span<const double> pn(p.data() + n * 8, 8);
    std::span<const std::uint8_t> yn(y.data() + n * 8, 8);
    expect += combined_loss(pn, yn);
  }
  CHECK(b.sum() == doctest::Approx(expect / 2.0).epsilon(1e-12));
}

TEST_CASE("ppc loss value and gradient") {
  const int C = 2, K = 3;
  Tensor<double> S = plhn::test::random_tensor({2, C * K, 3, 2, 2}, 21, 0.5);
  const auto y = labels(2 * 12, 4);
  const Assignment a = assign_prototypes(S, y, C, K, AssignScope::WithinClass);
  const double tau = 0.1;
  Tensor<double> dS;
  const double l = ppc_loss(S, a, tau, &dS, 0.05);
  // reference by direct softmax
  double ref = 0.0;
  for (Index n = 0; n < 2; ++n)
    for (Index i = 0; i < 12; ++i) {
      double den = 0.0;
      for (Index j = 0; j < C * K; ++j) den += std::exp(S[(n * C * K + j) * 12 + i] / tau);
      const Index pos = a.slot[static_cast<std::size_t>(n * 12 + i)];
      ref -= std::log(std::exp(S[(n * C * K + pos) * 12 + i] / tau) / den);
    }
  CHECK(l == doctest::Approx(ref / 24.0).epsilon(1e-12));
  auto loss = [&] { return 0.05 * ppc_loss<double>(S, a, tau); };
  CHECK(max_rel_error(S, dS, loss, 48, 1e-7) < 1e-6);
}

TEST_CASE("ppc rejects bad tau") {
  Tensor<double> S({1, 2, 1, 1, 1});
  Assignment a{{0}, {0}};
  CHECK_THROWS_AS(ppc_loss(S, a, 0.0), InvalidInputError);
}

TEST_CASE("total loss composition") {
  Tensor<double> p1 = probs({2, 1, 2, 2, 2}, 1), pf = probs({2, 1, 2, 2, 2}, 2);
  const auto y = labels(p1.numel(), 3);
  const LossBreakdown b = total_loss(p1, &pf, y, 0.8, 0.2, 0.05);
  const double e = batch_combined_loss<double>(p1, y).sum() + 0.2 * batch_combined_loss<double>(pf, y).sum() + 0.05 * 0.8;
  CHECK(b.total == doctest::Approx(e).epsilon(1e-12));
  CHECK_FALSE(b.ppc_skipped);
  const LossBreakdown s = total_loss<double>(p1, nullptr, y, std::nullopt, 0.2, 0.05);
  CHECK(s.ppc_skipped);
  CHECK(s.total == doctest::Approx(batch_combined_loss<double>(p1, y).sum()).epsilon(1e-12));
  CHECK_THROWS_AS(total_loss<double>(p1, nullptr, y, std::nullopt, -1.0, 0.0), InvalidInputError);
}
