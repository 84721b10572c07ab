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
#include <optional>
#include <string>
#include <vector>

#include "data_model.hpp"

namespace plhn {

struct OverlapMetrics {
  std::optional<double> dsc;  // empty-vs-empty is 1.0
  std::optional<double> ppv;  // missing when pred is empty
  std::optional<double> sen;  // missing when gt is empty
  std::int64_t tp = 0, fp = 0, fn = 0;
};

// Throws InvalidInputError on shape mismatch or non-binary values.
OverlapMetrics overlap_metrics(const Mask& pred, const Mask& gt);

// Foreground voxels with a 6-neighbour that is background or outside the grid.
std::vector<std::array<Index, 3>> surface_voxels(const Mask& m);
Mask surface_mask(const Mask& m);

// Squared Euclidean distance (mm^2) from every voxel to the nearest set voxel of `feature`
// (exact, separable lower-envelope transform). Infinity everywhere when `feature` is empty.
std::vector<double> squared_edt(const Mask& feature, const Spacing& spacing);

struct SurfaceDistances {
  std::optional<double> asd_mm;
  std::optional<double> hd95_mm;
};

// Pooled bidirectional surface distances between two masks; missing when either surface is empty.
SurfaceDistances surface_distances(const Mask& a, const Mask& b, const Spacing& spacing);
// Same, from explicit surface voxel lists living on a grid of `dims`.
SurfaceDistances surface_distances(const std::vector<std::array<Index, 3>>& a,
                                   const std::vector<std::array<Index, 3>>& b, const Dims3& dims,
                                   const Spacing& spacing);

// q in [0, 100]; linear interpolation between order statistics (sorts a copy).
double percentile_linear(std::vector<double> v, double q);

struct CaseMetrics {
  std::string case_id;
  std::optional<double> dsc, ppv, sen, asd_mm, hd95_mm;
};

CaseMetrics evaluate_case(const std::string& id, const Mask& pred, const Mask& gt, const Spacing& spacing);

struct Aggregate {
  std::string metric;
  double mean = 0.0;
  double half_width = 0.0;  // 1.96 * sd / sqrt(n)
  std::int64_t n = 0;
  std::int64_t missing = 0;
};

struct MetricsReport {
  std::vector<CaseMetrics> rows;
  std::vector<Aggregate> aggregates;  // dsc, ppv, sen, asd_mm, hd95_mm
};

MetricsReport aggregate(std::vector<CaseMetrics> rows);

std::string report_csv(const MetricsReport& r);
std::string report_json(const MetricsReport& r);

// Writes one PNG per z-slice that has foreground: background `image` in grey (or black),
// ground-truth contour green, prediction contour red. Returns the files written.
std::vector<std::string> write_overlays(const Mask& pred, const Mask& gt, const Volume* image,
                                        const std::string& dir, const std::string& stem);

}  // namespace plhn
