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

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "data_model.hpp"
#include "network.hpp"

namespace plhn {

// Window starts along one axis: 0, s, 2s, ... with the last clamped to extent - patch.
std::vector<Index> axis_origins(Index extent, Index patch, Index stride);

// All window origins in h-major, then w, then z order. Requires extent >= patch on every axis.
std::vector<Dims3> window_origins(const Dims3& volume, const Dims3& patch, const Dims3& stride);

// Number of windows covering each voxel.
Grid3<std::int32_t> coverage_counts(const Dims3& volume, const Dims3& patch, const Dims3& stride);

// Predicts one (2, patch) input; `window` is the index into window_origins().
using PatchPredictor = std::function<Volume(const InputTensor& input, std::size_t window)>;

struct SlidingWindowResult {
  Volume prob;
  std::size_t windows = 0;
};

// Accumulate-then-divide overlap averaging. Volumes smaller than the patch are reflect-padded
// (at the far end) and the result is cropped back. `order`, when given, is a permutation of
// window indices to visit.
SlidingWindowResult sliding_window_predict(const Volume& pre, const Volume& post, const Dims3& patch,
                                           const Dims3& stride, int window, const PatchPredictor& predictor,
                                           const std::vector<std::size_t>* order = nullptr);

// prob * roi; throws InvalidInputError on shape mismatch.
Volume apply_roi_mask(const Volume& prob, const Mask& roi);

// A network with its prototype bank, run in evaluation mode one window at a time.
class Segmenter {
 public:
  Segmenter(std::unique_ptr<HybridNet<float>> net, PrototypeBank bank, ActiveParts parts);

  const NetworkConfig& config() const { return net_->config(); }
  const ActiveParts& parts() const { return parts_; }
  Volume predict_patch(const InputTensor& input);
  PatchPredictor predictor();

 private:
  std::unique_ptr<HybridNet<float>> net_;
  PrototypeBank bank_;
  ActiveParts parts_;
};

struct CasePrediction {
  Mask mask;           // native grid
  Volume prob;         // native grid
  Dims3 working_dims;  // grid at the target spacing
  std::size_t windows = 0;
  double seconds = 0.0;
};

// resample -> sliding window -> ROI -> threshold at 0.5 -> back to native spacing
// (nearest for the mask, trilinear for the probability). `roi` lives on the native grid.
CasePrediction predict_case(const Volume& pre, const Volume& post, const Spacing& spacing, Segmenter& model,
                            const Mask* roi = nullptr);

}  // namespace plhn
