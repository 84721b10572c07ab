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
#include <optional>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "data_model.hpp"
#include "losses.hpp"

namespace plhn {

// lr0 * (1 - iteration/total)^power, floored.
double step_lr(std::int64_t iteration, std::int64_t total, double lr0, double power = 0.9, double floor = 1e-6);

// v <- mu*v + g + wd*w; w <- w - lr*v, for the given parameters only.
void sgd_step(const std::vector<nn::Param<float>*>& params, std::map<std::string, Tensor<float>>& velocity,
              double lr, double momentum, double weight_decay);

inline constexpr Index kPrototypeInitCap = 50000;  // feature vectors per class for k-means

struct TrainOptions {
  std::string out_dir;
  std::string resume;   // checkpoint to continue from
  int only_stage = 0;   // 0 runs the whole schedule; 1 or 2 a single stage of the two-stage schedule
  bool validate = true;
};

struct IterationLog {
  int stage = 0;
  int epoch = 0;
  std::int64_t iteration = 0;
  double lr = 0.0;
  LossBreakdown loss;
  std::int64_t bank_updates = 0;
};

struct EpochSummary {
  int stage = 0;
  int epoch = 0;  // 1-based within the stage
  double mean_total = 0.0;
  double mean_seg_loss = 0.0;  // Lc(P1)
  std::optional<double> val_dsc;
};

struct TrainReport {
  TrainState state;
  std::vector<EpochSummary> epochs;
  std::string last_ckpt, best_ckpt, stage1_ckpt, log_csv, config_snapshot;
};

using EpochCallback = std::function<void(const EpochSummary&)>;

// Runs the two-stage (or joint) schedule on cases already at the target spacing. Validation runs
// every `val_every` epochs and after the last epoch of each stage on `val` (or on the training
// cases when `val` is empty). Throws ConfigError for an impossible request (e.g. stage 2 without
// a completed stage 1) and NumericError on a non-finite loss.
TrainReport train(const NetworkConfig& cfg, const std::vector<VolumeCase>& cases, const std::vector<VolumeCase>& val,
                  const TrainOptions& opt, const EpochCallback& on_epoch = {});

// Mean sliding-window DSC of `net` (evaluation mode) over cases at the working spacing.
double validation_dsc(HybridNet<float>& net, PrototypeBank* bank, const ActiveParts& parts,
                      const std::vector<VolumeCase>& cases);

}  // namespace plhn
