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

#include <string>
#include <vector>

#include "config.hpp"
#include "data_model.hpp"
#include "volume_io.hpp"

namespace plhn {

// A case on disk: `<dir>/<id>_pre`, `<id>_post` and optionally `<id>_mask` in any supported format.
struct CaseFiles {
  std::string id;
  std::string pre;
  std::string post;
  std::string mask;  // empty when absent
};

// Cases in manifest order when `<dir>/manifest.json` exists, otherwise every `<id>_pre` with a
// matching `<id>_post`, sorted by id.
std::vector<CaseFiles> scan_cases(const std::string& dir);

// Ids of every `<id><suffix>` volume in `dir`, sorted.
std::vector<std::string> scan_volume_ids(const std::string& dir, const std::string& suffix);

struct SynthResult {
  std::vector<std::string> ids;
  std::string manifest_path;
  std::string manifest_hash;
};

// Writes `count` cases (case i uses seed spec.seed + i) plus manifest.json.
SynthResult write_synthetic_dataset(const SyntheticSpec& spec, int count, const std::string& dir,
                                    VolumeFormat format = VolumeFormat::Raw);

// Loads and validates one case; the mask is required.
VolumeCase load_case(const CaseFiles& files);

// Training view of a dataset: every case resampled to the target spacing and reflect-padded
// up to the patch size.
std::vector<VolumeCase> load_training_cases(const std::string& dir, const NetworkConfig& cfg);

}  // namespace plhn
