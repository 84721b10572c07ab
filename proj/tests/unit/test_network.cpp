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
#include <random>

#include "gradcheck.hpp"
#include "network.hpp"

using namespace plhn;
using plhn::test::dot;
using plhn::test::max_rel_error;
using plhn::test::random_tensor;

namespace {

NetworkConfig tiny_config() {
  NetworkConfig c;
  c.M = 4;
  c.Hs = 16;
  c.T = 1;
  c.Ws = 1;
  c.K = 2;
  c.patch_dims = {16, 16, 8};
  c.stride = {8, 8, 8};
  return c;
}

PrototypeBank random_bank(const NetworkConfig& c, std::uint64_t seed) {
  PrototypeBank b(c.C, c.K, c.M, c.eta);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  for (int s = 0; s < b.slots(); ++s) {
    double n = 0;
    for (int i = 0; i < c.M; ++i) n += std::pow(b.slot(s)[i] = g(rng), 2);
    for (int i = 0; i < c.M; ++i) b.slot(s)[i] /= std::sqrt(n);
  }
  b.initialized = true;
  return b;
}

}  // namespace

TEST_CASE("feature shapes follow the stride-8 contract") {
  NetworkConfig c;
  c.M = 8;
  c.Hs = 32;
  c.T = 1;
  c.patch_dims = {64, 64, 32};
  HybridNet<float> net(c);
  net.init(1);
  Tensor<float> x = make5<float>(1, 2, {64, 64, 32}, 0.1f);
  auto f = net.encoder1_forward(x);
  CHECK(f.f1_1.shape() == std::vector<Index>{1, 8, 32, 32, 16});
  CHECK(f.f1_2.shape() == std::vector<Index>{1, 16, 16, 16, 8});
  CHECK(f.f1_3.shape() == std::vector<Index>{1, 32, 8, 8, 4});
  CHECK(net.encoder2_forward(x).shape() == std::vector<Index>{1, 32, 8, 8, 4});
  auto out = net.forward(x, active_parts(c, 1), nullptr);
  CHECK(out.pi.shape() == std::vector<Index>{1, 8, 64, 64, 32});
  CHECK(out.p1.shape() == std::vector<Index>{1, 1, 64, 64, 32});
  CHECK(out.pf.empty());
  for (Index i = 0; i < out.p1.numel(); ++i) {
    REQUIRE(out.p1[i] > 0.0f);
    REQUIRE(out.p1[i] < 1.0f);
  }
}

TEST_CASE("linear embedding shape and identity map") {
  NetworkConfig c;
  c.M = 8;
  c.Hs = 32;  // Ci = 4M = Hs
  c.T = 1;
  c.patch_dims = {16, 16, 16};
  c.stride = {8, 8, 8};
  HybridNet<double> net(c);
  for (Index i = 0; i < net.embed->weight.value.numel(); ++i) net.embed->weight.value[i] = 0.0;
  for (Index i = 0; i < 32; ++i) net.embed->weight.value[i * 32 + i] = 1.0;
  const Tensor<double> f = random_tensor({2, 32, 2, 2, 2}, 3);
  const Tensor<double> tok = net.linear_embed(f);
  CHECK(tok.shape() == std::vector<Index>{16, 32});
  CHECK(tok == nn::to_tokens(f));
  CHECK(nn::from_tokens(tok, 2, Dims3{2, 2, 2}) == f);
}

TEST_CASE("decoder normalization: unit voxels, zero voxels stay zero") {
  Tensor<double> pi = make5<double>(1, 3, {1, 1, 2});
  pi[0] = 3.0;  // voxel 0 = (3, 4, 0)
  pi[2] = 4.0;
  std::vector<double> norms;
  const Tensor<double> x = normalize_channels(pi, &norms);
  CHECK(x[0] == doctest::Approx(0.6));
  CHECK(x[2] == doctest::Approx(0.8));
  CHECK(x[4] == 0.0);
  CHECK(x[1] == 0.0);  // voxel 1 is all-zero
  CHECK(x[3] == 0.0);
}

TEST_CASE("seg head: zero weights give 0.5, bias +10 gives 1 - 4.54e-5") {
  NetworkConfig c = tiny_config();
  HybridNet<double> net(c);
  const Tensor<double> pi = random_tensor({1, 4, 2, 2, 2}, 5);
  net.head->weight.value.zero();
  net.head->bias.value.zero();
  const Tensor<double> p0 = net.seg_head(pi);
  for (double v : p0.vec()) CHECK(v == 0.5);
  net.head->bias.value[0] = 10.0;
  const Tensor<double> p10 = net.seg_head(pi);
  for (double v : p10.vec()) CHECK(v == doctest::Approx(1.0 / (1.0 + std::exp(-10.0))).epsilon(1e-12));
}

TEST_CASE("init is deterministic per seed and differs across seeds") {
  NetworkConfig c = tiny_config();
  HybridNet<float> a(c), b(c), d(c);
  a.init(7);
  b.init(7);
  d.init(8);
  auto pa = a.params(), pb = b.params(), pd = d.params();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->value == pb[i]->value);
    if (pa[i]->xavier() && !(pa[i]->value == pd[i]->value)) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("forward is a pure function of input and parameters in eval mode") {
  NetworkConfig c = tiny_config();
  HybridNet<float> net(c);
  net.init(3);
  net.set_training(false);
  PrototypeBank bank = random_bank(c, 4);
  Tensor<float> x = tensor_cast<float>(random_tensor({1, 2, 16, 16, 8}, 9));
  auto o1 = net.forward(x, active_parts(c, 2), &bank);
  auto o2 = net.forward(x, active_parts(c, 2), &bank);
  CHECK(o1.pf == o2.pf);
  CHECK(o1.p1 == o2.p1);
  CHECK(o1.s.dim(1) == c.slots());
}

TEST_CASE("analytic parameter count equals the constructed model") {
  for (int variant = 0; variant < 4; ++variant) {
    NetworkConfig c;
    c.flags.use_prototypes = variant != 1;
    c.flags.use_fusion = variant != 1 && variant != 2;
    c.flags.use_encoder2 = variant != 3;
    if (variant == 2) c.distance = DistanceKind::Cosine;
    HybridNet<float> net(c);
    std::int64_t n = 0;
    for (auto* p : net.params()) n += p->value.numel();
    CHECK(n == count_parameters(c));
  }
}

TEST_CASE("full network gradient matches central differences (64-bit)") {
  NetworkConfig c = tiny_config();
  for (int fusion = 1; fusion >= 0; --fusion) {
    c.flags.use_fusion = fusion;
    HybridNet<double> net(c);
    net.init(11);
    // perturb BN affine params away from (1, 0)
    std::mt19937_64 rng(12);
    std::normal_distribution<double> g(0.0, 0.1);
    for (auto* p : net.params())
      if (!p->xavier())
        for (Index i = 0; i < p->value.numel(); ++i) p->value[i] += g(rng);
    PrototypeBank bank = random_bank(c, 13);
    const ActiveParts act = active_parts(c, 2);
    Tensor<double> x = random_tensor({2, 2, 16, 16, 8}, 14);
    auto out = net.forward(x, act, &bank);
    const Tensor<double> r1 = random_tensor(out.p1.shape(), 15);
    const Tensor<double> rf = random_tensor(out.pf.shape(), 16);
    const Tensor<double> rs = random_tensor(out.s.shape(), 17, 0.1);
    auto loss = [&] {
      auto o = net.forward(x, act, &bank);
      return dot(o.p1, r1) + dot(o.pf, rf) + dot(o.s, rs);
    };
    net.zero_grad();
    net.forward(x, act, &bank);
    net.backward(r1, rf, rs);
    for (auto* p : net.params()) {
      INFO(p->name << " fusion=" << fusion);
      CHECK(max_rel_error(p->value, p->grad, loss, 6) < 1e-4);
    }
  }
}

TEST_CASE("stage-1 backward leaves transformer and prototype grads at zero") {
  NetworkConfig c = tiny_config();
  HybridNet<double> net(c);
  net.init(21);
  const Tensor<double> x = random_tensor({1, 2, 16, 16, 8}, 22);
  net.zero_grad();
  auto out = net.forward(x, active_parts(c, 1), nullptr);
  CHECK(out.pf.empty());
  net.backward(random_tensor(out.p1.shape(), 23), {}, {});
  for (auto* p : net.transformer_params())
    for (double v : p->grad.vec()) REQUIRE(v == 0.0);
  for (auto* p : net.prototype_params())
    for (double v : p->grad.vec()) REQUIRE(v == 0.0);
  double embed_grad = 0.0;
  for (double v : net.embed->weight.grad.vec()) embed_grad += std::abs(v);
  CHECK(embed_grad > 0.0);
}

TEST_CASE("complexity anchors") {
  NetworkConfig full;
  NetworkConfig bb = full;
  bb.flags.use_prototypes = false;
  bb.flags.use_fusion = false;
  CHECK(std::abs(count_parameters(bb) / 10.0e6 - 1.0) <= 0.15);
  CHECK(std::abs(count_parameters(full) / 11.0e6 - 1.0) <= 0.15);
  NetworkConfig s9 = bb;
  s9.M = 16;
  s9.Hs = 192;
  s9.T = 4;
  CHECK(std::abs(count_parameters(s9) / 4.1e6 - 1.0) <= 0.15);
  const double f128 = estimate_flops(bb, {128, 128, 128});
  const double f48 = estimate_flops(bb, {128, 128, 48});
  CHECK(std::abs(f128 / 203.5e9 - 1.0) <= 0.20);
  CHECK(std::abs(f48 / 76.3e9 - 1.0) <= 0.20);
  CHECK(std::abs(estimate_flops(full, {128, 128, 48}) / 146.1e9 - 1.0) <= 0.20);
  CHECK(std::abs(estimate_flops(s9, {128, 128, 128}) / 70.6e9 - 1.0) <= 0.20);
  CHECK(f128 / f48 >= 2.5);
  CHECK(f128 / f48 <= 2.85);
}
