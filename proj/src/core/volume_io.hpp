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
#include <cstdint>
#include <string>
#include <utility>

#include "data_model.hpp"

namespace plhn {

// ---- geometry helpers ------------------------------------------------------

// round(shape * spacing / target) per axis; throws if any axis collapses below 1.
Dims3 resampled_dims(const Dims3& dims, const Spacing& spacing, const Spacing& target);

// Trilinear resampling onto `out_dims`, voxel centers aligned, edge-clamped.
Volume resample_image(const Volume& in, const Spacing& spacing, const Spacing& target, const Dims3& out_dims);
// Nearest-neighbour counterpart for label grids.
Mask resample_mask(const Mask& in, const Spacing& spacing, const Spacing& target, const Dims3& out_dims);

VolumeCase resample_case(const VolumeCase& c, const Spacing& target);

// Mirror padding at the high end of each axis up to `target` (no-op where already large enough).
template <typename T>
Grid3<T> reflect_pad(const Grid3<T>& in, const Dims3& target);

template <typename T>
Grid3<T> crop(const Grid3<T>& in, const Dims3& origin, const Dims3& dims);

// Pads every grid of a case so that each axis is at least `min_dims`.
VolumeCase reflect_pad_case(const VolumeCase& c, const Dims3& min_dims);

// ---- synthetic cases -------------------------------------------------------

struct SyntheticSpec {
  Dims3 grid_size{96, 96, 48};
  int n_tumors = 1;
  std::array<double, 2> tumor_radius_range_mm{6.0, 10.0};
  double enhancement_gain = 1.0;
  double noise_sigma = 0.05;
  double background_texture_scale = 0.3;
  std::int64_t seed = 0;
  Spacing spacing_mm{1.0, 1.0, 1.0};
};

void validate_synthetic_spec(const SyntheticSpec& spec);
std::string synthetic_spec_to_json(const SyntheticSpec& spec, int indent = 2);
SyntheticSpec synthetic_spec_from_json(const std::string& text);

VolumeCase generate_synthetic_case(const SyntheticSpec& spec, const std::string& case_id = "synthetic");

// ---- file formats ----------------------------------------------------------

struct LoadedVolume {
  Volume grid;
  Spacing spacing{1.0, 1.0, 1.0};
};

enum class VolumeFormat { Raw, Nifti, NiftiGz };

// ".nii" / ".nii.gz" select NIfTI-1; anything else is the raw pair `<path>.json` + `<path>.bin`
// (a trailing ".json" or ".bin" on `path` is accepted and stripped).
VolumeFormat format_for_path(const std::string& path);

void save_volume(const Volume& grid, const Spacing& spacing, const std::string& path);
LoadedVolume load_volume(const std::string& path);

// Masks are stored as 0/1 reals; loading rejects any other value.
void save_mask(const Mask& mask, const Spacing& spacing, const std::string& path);
std::pair<Mask, Spacing> load_mask(const std::string& path);

// Resolves `<stem>` to an existing file with one of the supported extensions (raw first).
// Returns an empty string when nothing matches.
std::string find_volume(const std::string& stem);

// Extension used when writing new files in a given format.
std::string extension_for(VolumeFormat fmt);

}  // namespace plhn
