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

#include "sampler.hpp"
#include "volume_io.hpp"

using namespace plhn;

namespace {

VolumeCase box_case(Dims3 d, Dims3 lo, Dims3 hi) {
  VolumeCase c;
  c.case_id = "box";
  c.pre_contrast = Volume(d, 0.0f);
  c.post_contrast = Volume(d, 1.0f);
  c.tumor_mask = Mask(d, 0);
  for (Index h = lo.h; h < hi.h; ++h)
    for (Index w = lo.w; w < hi.w; ++w)
      for (Index z = lo.z; z < hi.z; ++z) c.tumor_mask.at(h, w, z) = 1;
  return c;
}

NetworkConfig small_cfg() {
  NetworkConfig cfg;
  cfg.patch_dims = {16, 16, 8};
  cfg.Ws = 1;
  return cfg;
}

Index tumour_count(const Mask& m) {
  Index n = 0;
  for (auto v : m.data()) n += v;
  return n;
}

}  // namespace

TEST_CASE("centroid patch contains a small tumour entirely") {
  const VolumeCase c = box_case({40, 40, 20}, {20, 22, 10}, {24, 26, 13});
  std::mt19937_64 rng(1);
  const auto ps = sample_patches(c, small_cfg(), rng);
  CHECK(ps[0].kind == PatchKind::FullTumor);
  CHECK(tumour_count(ps[0].label) == 4 * 4 * 3);
  // centroid (21.5, 23.5, 11) - patch/2 -> (14, 16, 7) after rounding half away from zero
  CHECK(ps[0].origin == Dims3{14, 16, 7});
  for (int k = 1; k < 3; ++k) {
    CHECK(ps[static_cast<std::size_t>(k)].kind == PatchKind::PartialTumor);
    CHECK(tumour_count(ps[static_cast<std::size_t>(k)].label) > 0);
  }
  CHECK(ps[0].input.data.shape() == std::vector<Index>{2, 16, 16, 8});
}

TEST_CASE("centroid patch is clamped at borders") {
  const VolumeCase c = box_case({40, 40, 20}, {0, 0, 0}, {2, 2, 2});
  std::mt19937_64 rng(2);
  const auto ps = sample_patches(c, small_cfg(), rng);
  CHECK(ps[0].origin == Dims3{0, 0, 0});
}

TEST_CASE("fallback crops still hit a tiny tumour") {
  // a single voxel in a big volume: random crops almost never hit it
  const VolumeCase c = box_case({120, 120, 60}, {100, 3, 55}, {101, 4, 56});
  for (std::uint64_t s = 0; s < 5; ++s) {
    std::mt19937_64 rng(s);
    const auto ps = sample_patches(c, small_cfg(), rng);
    for (const auto& p : ps) CHECK(tumour_count(p.label) == 1);
  }
}

TEST_CASE("empty mask gives uniform fallback patches") {
  const VolumeCase c = box_case({30, 30, 12}, {0, 0, 0}, {0, 0, 0});
  std::mt19937_64 rng(3);
  const auto ps = sample_patches(c, small_cfg(), rng);
  for (const auto& p : ps) {
    CHECK(p.kind == PatchKind::Fallback);
    CHECK(p.label.dims() == Dims3{16, 16, 8});
  }
}

TEST_CASE("small cases are reflect-padded") {
  const VolumeCase c = box_case({10, 20, 6}, {4, 4, 2}, {6, 6, 4});
  std::mt19937_64 rng(4);
  const auto ps = sample_patches(c, small_cfg(), rng);
  for (const auto& p : ps) CHECK(p.label.dims() == Dims3{16, 16, 8});
  CHECK(tumour_count(ps[0].label) >= 8);
}

TEST_CASE("sampling is deterministic for a seed") {
  SyntheticSpec spec;
  spec.grid_size = {48, 48, 32};
  spec.seed = 5;
  const VolumeCase c = generate_synthetic_case(spec, "s");
  std::mt19937_64 a(9), b(9);
  const auto pa = build_batch({&c, &c}, small_cfg(), a);
  const auto pb = build_batch({&c, &c}, small_cfg(), b);
  REQUIRE(pa.size() == 6);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].origin == pb[i].origin);
    CHECK(pa[i].label == pb[i].label);
  }
}
