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

#include <algorithm>
#include <numeric>
#include <random>

#include "inference.hpp"
#include "volume_io.hpp"

using namespace plhn;

namespace {

Volume noise(Dims3 d, std::uint64_t seed) {
  Volume v(d);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& x : v.data()) x = u(rng);
  return v;
}

NetworkConfig tiny() {
  NetworkConfig cfg;
  cfg.M = 4;
  cfg.Hs = 32;
  cfg.T = 1;
  cfg.Ws = 1;
  cfg.K = 2;
  cfg.patch_dims = {16, 16, 8};
  cfg.stride = {8, 8, 4};
  return cfg;
}

}  // namespace

TEST_CASE("axis origins clamp the last window") {
  CHECK(axis_origins(10, 4, 3) == std::vector<Index>{0, 3, 6});
  CHECK(axis_origins(11, 4, 3) == std::vector<Index>{0, 3, 6, 7});
  CHECK(axis_origins(4, 4, 2) == std::vector<Index>{0});
  CHECK(axis_origins(8, 4, 4) == std::vector<Index>{0, 4});
  CHECK_THROWS_AS(axis_origins(3, 4, 1), InvalidInputError);
}

TEST_CASE("coverage is at least one everywhere and matches brute force") {
  const Dims3 vol{13, 9, 7}, patch{5, 4, 3}, stride{3, 4, 2};
  const auto c = coverage_counts(vol, patch, stride);
  const auto wins = window_origins(vol, patch, stride);
  for (Index h = 0; h < vol.h; ++h)
    for (Index w = 0; w < vol.w; ++w)
      for (Index z = 0; z < vol.z; ++z) {
        std::int32_t n = 0;
        for (const auto& o : wins)
          n += (h >= o.h && h < o.h + patch.h && w >= o.w && w < o.w + patch.w && z >= o.z && z < o.z + patch.z);
        CHECK(c.at(h, w, z) == n);
        CHECK(n >= 1);
      }
}

TEST_CASE("constant stub gives a constant volume") {
  const Dims3 vol{20, 18, 11}, patch{8, 8, 8};
  const auto r = sliding_window_predict(noise(vol, 1), noise(vol, 2), patch, {5, 3, 2}, 0,
                                        [&](const InputTensor&, std::size_t) { return Volume(patch, 0.7f); });
  for (float v : r.prob.data()) CHECK(v == doctest::Approx(0.7f).epsilon(1e-6));
}

TEST_CASE("two-window layout averages the overlap") {
  const Dims3 vol{12, 8, 8}, patch{8, 8, 8};
  const auto r = sliding_window_predict(noise(vol, 1), noise(vol, 2), patch, {4, 8, 8}, 0,
                                        [&](const InputTensor&, std::size_t w) { return Volume(patch, w == 0 ? 0.2f : 0.6f); });
  REQUIRE(r.windows == 2);
  CHECK(r.prob.at(0, 0, 0) == doctest::Approx(0.2f));
  CHECK(r.prob.at(5, 3, 3) == doctest::Approx(0.4f));
  CHECK(r.prob.at(11, 7, 7) == doctest::Approx(0.6f));
}

TEST_CASE("visit order does not change the result") {
  const Dims3 vol{21, 17, 10}, patch{8, 8, 8};
  const Volume pre = noise(vol, 3), post = noise(vol, 4);
  // a stub whose output depends on the input content
  const PatchPredictor f = [&](const InputTensor& in, std::size_t) {
    Volume v(patch);
    for (Index i = 0; i < v.size(); ++i) v[i] = in.data[i] * 0.5f + 0.1f;
    return v;
  };
  const auto a = sliding_window_predict(pre, post, patch, {3, 5, 2}, 0, f);
  std::vector<std::size_t> order(a.windows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), std::mt19937_64(5));
  const auto b = sliding_window_predict(pre, post, patch, {3, 5, 2}, 0, f, &order);
  for (Index i = 0; i < a.prob.size(); ++i) CHECK(std::abs(a.prob[i] - b.prob[i]) <= 1e-6f);
  std::vector<std::size_t> bad(a.windows, 0);
  CHECK_THROWS_AS(sliding_window_predict(pre, post, patch, {3, 5, 2}, 0, f, &bad), InvalidInputError);
}

TEST_CASE("small volumes are padded and cropped back") {
  const Dims3 vol{6, 9, 3}, patch{8, 8, 8};
  int calls = 0;
  const auto r = sliding_window_predict(noise(vol, 1), noise(vol, 2), patch, {8, 8, 8}, 0,
                                        [&](const InputTensor& in, std::size_t) {
                                          ++calls;
                                          CHECK(in.dims() == patch);
                                          return Volume(patch, 0.3f);
                                        });
  CHECK(r.prob.dims() == vol);
  CHECK(calls == 2);
}

TEST_CASE("roi masking") {
  const Dims3 d{4, 4, 4};
  const Volume p = noise(d, 9);
  CHECK(apply_roi_mask(p, Mask(d, 1)) == p);
  const Volume zeroed = apply_roi_mask(p, Mask(d, 0));
  for (float v : zeroed.data()) CHECK(v == 0.0f);
  Mask roi(d);
  std::mt19937_64 rng(1);
  for (auto& v : roi.data()) v = static_cast<std::uint8_t>(rng() & 1u);
  const Volume m = apply_roi_mask(p, roi);
  for (Index i = 0; i < d.count(); ++i) CHECK(m[i] == p[i] * static_cast<float>(roi[i]));
  CHECK_THROWS_AS(apply_roi_mask(p, Mask({4, 4, 3})), InvalidInputError);
}

TEST_CASE("single window equals a direct forward pass") {
  const NetworkConfig cfg = tiny();
  auto net = std::make_unique<HybridNet<float>>(cfg);
  net->init(3);
  HybridNet<float>& ref = *net;
  Segmenter seg(std::move(net), PrototypeBank{}, active_parts(cfg, 1));
  const Volume pre = noise(cfg.patch_dims, 1), post = noise(cfg.patch_dims, 2);
  const auto r = sliding_window_predict(pre, post, cfg.patch_dims, {4, 4, 2}, cfg.Ws, seg.predictor());
  CHECK(r.windows == 1);
  InputTensor in = build_input_tensor(pre, post, cfg.Ws);
  in.data.reshape({1, 2, 16, 16, 8});
  const auto out = ref.forward(in.data, active_parts(cfg, 1), nullptr);
  for (Index i = 0; i < r.prob.size(); ++i) CHECK(std::abs(r.prob[i] - out.p1[i]) <= 1e-6f);
}

TEST_CASE("predict_case restores the native grid") {
  NetworkConfig cfg = tiny();
  auto net = std::make_unique<HybridNet<float>>(cfg);
  net->init(4);
  Segmenter seg(std::move(net), PrototypeBank{}, active_parts(cfg, 1));
  const Dims3 d{20, 14, 6};
  const Volume pre = noise(d, 1), post = noise(d, 2);
  const auto r = predict_case(pre, post, {0.8, 1.2, 2.0}, seg);
  CHECK(r.mask.dims() == d);
  CHECK(r.prob.dims() == d);
  CHECK(r.working_dims == Dims3{16, 17, 12});
  const Mask zero(d, 0);
  const auto none = predict_case(pre, post, {0.8, 1.2, 2.0}, seg, &zero);
  for (auto v : none.mask.data()) CHECK(v == 0);
}
