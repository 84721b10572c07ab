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

#include <array>
#include <random>
#include <string>
#include <vector>

#include "config.hpp"
#include "data_model.hpp"

namespace plhn {

enum class PatchKind { FullTumor, PartialTumor, Fallback };

const char* patch_kind_name(PatchKind k);

struct PatchRecord {
  std::string case_id;
  InputTensor input;
  Mask label;
  Dims3 origin{};  // corner in (padded) case coordinates
  PatchKind kind = PatchKind::Fallback;
};

inline constexpr int kPartialTries = 50;

// Crops pre/post/mask at `origin` with the configured patch dims.
PatchRecord extract_patch(const VolumeCase& c, const Dims3& origin, const Dims3& patch, PatchKind kind, int window);

// Three patches: one centred on the tumour centroid, two random crops holding at least one
// tumour voxel. Cases smaller than the patch are reflect-padded first (origins then refer to
// the padded grid). An empty mask yields three uniform crops and a warning.
std::array<PatchRecord, 3> sample_patches(const VolumeCase& c, const NetworkConfig& cfg, std::mt19937_64& rng);

// Concatenated triples, in case order.
std::vector<PatchRecord> build_batch(const std::vector<const VolumeCase*>& cases, const NetworkConfig& cfg,
                                     std::mt19937_64& rng);

}  // namespace plhn
