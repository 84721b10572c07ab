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

#include "sampler.hpp"

#include <algorithm>
#include <cmath>

#include "log.hpp"
#include "volume_io.hpp"

namespace plhn {
namespace {

// Summed-volume table with a zero border: S(h, w, z) counts voxels in [0,h) x [0,w) x [0,z).
class MaskIntegral {
 public:
  explicit MaskIntegral(const Mask& m) : d_(m.dims()), t_(static_cast<std::size_t>((d_.h + 1) * (d_.w + 1) * (d_.z + 1)), 0) {
    for (Index h = 1; h <= d_.h; ++h)
      for (Index w = 1; w <= d_.w; ++w)
        for (Index z = 1; z <= d_.z; ++z)
          at(h, w, z) = m.at(h - 1, w - 1, z - 1) + at(h - 1, w, z) + at(h, w - 1, z) + at(h, w, z - 1) -
                        at(h - 1, w - 1, z) - at(h - 1, w, z - 1) - at(h, w - 1, z - 1) + at(h - 1, w - 1, z - 1);
  }

  std::int64_t count(const Dims3& o, const Dims3& p) const {
    const Index h0 = o.h, w0 = o.w, z0 = o.z, h1 = o.h + p.h, w1 = o.w + p.w, z1 = o.z + p.z;
    return get(h1, w1, z1) - get(h0, w1, z1) - get(h1, w0, z1) - get(h1, w1, z0) + get(h0, w0, z1) +
           get(h0, w1, z0) + get(h1, w0, z0) - get(h0, w0, z0);
  }

 private:
  std::int64_t& at(Index h, Index w, Index z) { return t_[static_cast<std::size_t>((h * (d_.w + 1) + w) * (d_.z + 1) + z)]; }
  std::int64_t get(Index h, Index w, Index z) const {
    return t_[static_cast<std::size_t>((h * (d_.w + 1) + w) * (d_.z + 1) + z)];
  }
  Dims3 d_;
  std::vector<std::int64_t> t_;
};

Index uniform(Index lo, Index hi, std::mt19937_64& rng) {
  return std::uniform_int_distribution<Index>(lo, hi)(rng);
}

Dims3 random_origin(const Dims3& vol, const Dims3& patch, std::mt19937_64& rng) {
  Dims3 o;
  for (int a = 0; a < 3; ++a) o[a] = uniform(0, vol[a] - patch[a], rng);
  return o;
}

}  // namespace

const char* patch_kind_name(PatchKind k) {
  switch (k) {
    case PatchKind::FullTumor: return "full_tumor";
    case PatchKind::PartialTumor: return "partial_tumor";
    case PatchKind::Fallback: return "fallback";
  }
  return "?";
}

PatchRecord extract_patch(const VolumeCase& c, const Dims3& origin, const Dims3& patch, PatchKind kind, int window) {
  PatchRecord r;
  r.case_id = c.case_id;
  r.origin = origin;
  r.kind = kind;
  r.label = crop(c.tumor_mask, origin, patch);
  r.input = build_input_tensor(crop(c.pre_contrast, origin, patch), crop(c.post_contrast, origin, patch), window);
  return r;
}

std::array<PatchRecord, 3> sample_patches(const VolumeCase& in, const NetworkConfig& cfg, std::mt19937_64& rng) {
  const Dims3 P = cfg.patch_dims;
  const bool small = in.dims().h < P.h || in.dims().w < P.w || in.dims().z < P.z;
  VolumeCase padded;
  if (small) padded = reflect_pad_case(in, P);
  const VolumeCase& c = small ? padded : in;
  const Dims3 D = c.dims();

  std::vector<Index> tumour;
  double ch = 0, cw = 0, cz = 0;
  for (Index h = 0; h < D.h; ++h)
    for (Index w = 0; w < D.w; ++w)
      for (Index z = 0; z < D.z; ++z)
        if (c.tumor_mask.at(h, w, z)) {
          tumour.push_back(c.tumor_mask.offset(h, w, z));
          ch += static_cast<double>(h);
          cw += static_cast<double>(w);
          cz += static_cast<double>(z);
        }

  std::array<PatchRecord, 3> out;
  if (tumour.empty()) {
    log::warn("case " + c.case_id + ": empty tumour mask, sampling uniform patches");
    for (auto& r : out) r = extract_patch(c, random_origin(D, P, rng), P, PatchKind::Fallback, cfg.Ws);
    return out;
  }

  const double n = static_cast<double>(tumour.size());
  const double centroid[3] = {ch / n, cw / n, cz / n};
  Dims3 o;
  for (int a = 0; a < 3; ++a)
    o[a] = std::clamp<Index>(static_cast<Index>(std::llround(centroid[a] - static_cast<double>(P[a]) / 2.0)), 0,
                             D[a] - P[a]);
  out[0] = extract_patch(c, o, P, PatchKind::FullTumor, cfg.Ws);

  const MaskIntegral integral(c.tumor_mask);
  for (int k = 1; k < 3; ++k) {
    bool found = false;
    for (int t = 0; t < kPartialTries && !found; ++t) {
      o = random_origin(D, P, rng);
      found = integral.count(o, P) > 0;
    }
    if (!found) {
      // crop guaranteed to contain a random tumour voxel
      const Index v = tumour[static_cast<std::size_t>(uniform(0, static_cast<Index>(tumour.size()) - 1, rng))];
      const Index pos[3] = {v / (D.w * D.z), (v / D.z) % D.w, v % D.z};
      for (int a = 0; a < 3; ++a) o[a] = uniform(std::max<Index>(0, pos[a] - P[a] + 1), std::min(pos[a], D[a] - P[a]), rng);
    }
    out[static_cast<std::size_t>(k)] = extract_patch(c, o, P, PatchKind::PartialTumor, cfg.Ws);
  }
  return out;
}

std::vector<PatchRecord> build_batch(const std::vector<const VolumeCase*>& cases, const NetworkConfig& cfg,
                                     std::mt19937_64& rng) {
  std::vector<PatchRecord> out;
  out.reserve(cases.size() * 3);
  for (const VolumeCase* c : cases)
    for (auto& r : sample_patches(*c, cfg, rng)) out.push_back(std::move(r));
  return out;
}

}  // namespace plhn
