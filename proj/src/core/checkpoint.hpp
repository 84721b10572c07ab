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
#include <map>
#include <memory>
#include <string>

#include "config.hpp"
#include "inference.hpp"
#include "network.hpp"
#include "prototype.hpp"

namespace plhn {

// Everything needed to continue training exactly where it stopped.
struct TrainState {
  int stage = 1;                // 1, 2, or 0 for a single joint stage
  int epoch = 0;                // completed epochs of `stage`
  std::int64_t iteration = 0;   // completed iterations of `stage`
  bool stage_complete = false;
  double best_dsc = -1.0;       // best validation DSC seen so far (any stage)
  int best_epoch = -1;
  std::string rng;              // std::mt19937_64 text state
  PrototypeBank bank;
  std::map<std::string, Tensor<float>> momentum;  // SGD velocity by parameter name
};

// Archive layout: "PLHNCKPT", u64 little-endian header length, JSON header (meta + array index),
// then the raw little-endian array bytes. Written to a temporary file and renamed into place.
void save_checkpoint(const std::string& path, HybridNet<float>& net, const TrainState& state);

struct LoadedCheckpoint {
  NetworkConfig cfg;
  std::string config_hash;
  std::unique_ptr<HybridNet<float>> net;
  TrainState state;
};

// Throws IoError on malformed files and ConfigError when the stored config hash does not match.
LoadedCheckpoint load_checkpoint(const std::string& path);

// Parts a checkpoint was trained with: the backbone only for a stage-1 checkpoint.
ActiveParts checkpoint_parts(const LoadedCheckpoint& ck);

std::unique_ptr<Segmenter> load_segmenter(const std::string& path);

}  // namespace plhn
