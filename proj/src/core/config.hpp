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
#include <vector>

#include "tensor.hpp"

namespace plhn {

enum class DistanceKind { Learned, Cosine };
enum class AssignScope { WithinClass, AllSlots };

// Ablation switches. The default enables the full model.
struct ModelFlags {
  bool use_transformer = true;
  bool use_encoder2 = true;
  bool use_prototypes = true;
  bool use_fusion = true;
  bool two_stage = true;
  bool operator==(const ModelFlags&) const = default;
};

struct NetworkConfig {
  // architecture
  int M = 32;
  int Hs = 256;
  int T = 8;
  int Ws = 2;
  int C = 2;
  int K = 5;
  int heads = 0;      // 0 selects max(1, Hs / 32)
  int mlp_ratio = 4;
  int dn_hidden = 0;  // 0 selects 2M
  double leaky_slope = 0.01;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  // prototypes and losses
  double tau = 0.1;
  double eta = 0.999;
  double lambda1 = 0.2;
  double lambda2 = 0.05;
  DistanceKind distance = DistanceKind::Learned;
  AssignScope assign_scope = AssignScope::WithinClass;
  int kmeans_iters = 10;
  int empty_slot_reinit = 100;

  // sampling and inference geometry
  Dims3 patch_dims{128, 128, 48};
  Dims3 stride{64, 64, 8};
  std::array<double, 3> target_spacing_mm{1.0, 1.0, 1.0};

  // optimization
  int stage1_epochs = 300;
  int stage2_epochs = 200;
  double stage1_lr = 0.01;
  double stage2_lr = 0.001;
  double weight_decay = 1e-4;
  double sgd_momentum = 0.9;
  double lr_power = 0.9;
  double lr_floor = 1e-6;
  int batch_cases = 2;
  int val_every = 10;
  std::int64_t seed = 0;
  bool deterministic = true;

  ModelFlags flags;

  int num_heads() const { return heads > 0 ? heads : (Hs / 32 > 0 ? Hs / 32 : 1); }
  int dn_width() const { return dn_hidden > 0 ? dn_hidden : 2 * M; }
  int slots() const { return C * K; }
  bool has_embedding() const { return flags.use_transformer || flags.use_encoder2; }

  bool operator==(const NetworkConfig&) const = default;
};

struct ConfigViolation {
  std::string field;
  std::string message;
};

// Never throws; an empty list means the config is usable.
std::vector<ConfigViolation> validate_config(const NetworkConfig& cfg);

// Throws ConfigError listing every violation.
void require_valid(const NetworkConfig& cfg);

// Divisibility contract of network inputs for a given config.
std::vector<ConfigViolation> check_patch_dims(const Dims3& dims, int window);

std::string config_to_json(const NetworkConfig& cfg, int indent = 2);
// Rejects unknown keys and type mismatches with ConfigError.
NetworkConfig config_from_json(const std::string& text);
NetworkConfig load_config(const std::string& path);
void save_config(const NetworkConfig& cfg, const std::string& path);

// Stable hex digest of the canonical JSON form.
std::string config_hash(const NetworkConfig& cfg);

std::string fnv1a_hex(const std::string& bytes);

}  // namespace plhn
