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

#include "inference.hpp"
#include "metrics.hpp"
#include "volume_io.hpp"

namespace plhn {

// A case to segment: explicit pre/post volume paths plus an optional native-grid ROI.
struct InferJob {
  std::string id;
  std::string pre;
  std::string post;
  std::string roi;  // empty: no ROI
};

// `input` is either a dataset directory (every `<id>_pre`/`<id>_post` pair, ROI `<roi>/<id>_roi`
// when `roi` is a directory) or a case stem `<stem>_pre`/`<stem>_post` (ROI file `roi`).
std::vector<InferJob> plan_inference(const std::string& input, const std::string& roi);

struct InferOutput {
  std::string id;
  std::string mask_path;
  std::string prob_path;
  std::string sidecar_path;
  CasePrediction prediction;
};

// Runs predict_case and writes `<out>/<id>_mask`, `<id>_prob` (format by extension) and `<id>.json`.
InferOutput infer_to_files(const InferJob& job, Segmenter& model, const std::string& out_dir, VolumeFormat format);

// Pairs `<id>_mask` volumes of `pred_dir` and `gt_dir`; throws InvalidInputError listing unmatched
// ids. Uses gt spacing; `threads` > 1 evaluates cases concurrently. Overlays (when `overlay_dir`
// is non-empty) use `<gt_dir>/<id>_post` as background when present.
MetricsReport evaluate_directories(const std::string& pred_dir, const std::string& gt_dir, int threads,
                                   const std::string& overlay_dir = {});

// Writes `<prefix>.csv` and `<prefix>.json` (a trailing .csv/.json on `prefix` is dropped).
std::vector<std::string> write_report(const MetricsReport& r, const std::string& prefix);

}  // namespace plhn
