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

#include "pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "dataset.hpp"
#include "log.hpp"

namespace plhn {
namespace fs = std::filesystem;

std::vector<InferJob> plan_inference(const std::string& input, const std::string& roi) {
  std::vector<InferJob> jobs;
  if (fs::is_directory(input)) {
    const bool roi_dir = !roi.empty() && fs::is_directory(roi);
    if (!roi.empty() && !roi_dir) throw InvalidInputError("--roi must be a directory when --in is a directory");
    for (const auto& c : scan_cases(input)) {
      InferJob j{c.id, c.pre, c.post, {}};
      if (roi_dir) {
        j.roi = find_volume((fs::path(roi) / (c.id + "_roi")).string());
        if (j.roi.empty()) throw IoError("no ROI for case " + c.id + " in " + roi);
      }
      jobs.push_back(std::move(j));
    }
    if (jobs.empty()) throw IoError("no cases found in " + input);
    return jobs;
  }
  InferJob j;
  j.id = fs::path(input).filename().string();
  j.pre = find_volume(input + "_pre");
  j.post = find_volume(input + "_post");
  if (j.pre.empty() || j.post.empty()) throw IoError("cannot find " + input + "_pre and " + input + "_post");
  if (!roi.empty()) {
    j.roi = find_volume(roi);
    if (j.roi.empty()) throw IoError("cannot find ROI " + roi);
  }
  jobs.push_back(std::move(j));
  return jobs;
}

InferOutput infer_to_files(const InferJob& job, Segmenter& model, const std::string& out_dir, VolumeFormat format) {
  const LoadedVolume pre = load_volume(job.pre), post = load_volume(job.post);
  if (pre.grid.dims() != post.grid.dims()) throw InvalidInputError("case " + job.id + ": pre/post shapes differ");
  Mask roi;
  if (!job.roi.empty()) roi = load_mask(job.roi).first;
  InferOutput o;
  o.id = job.id;
  o.prediction = predict_case(pre.grid, post.grid, pre.spacing, model, job.roi.empty() ? nullptr : &roi);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
  const std::string base = (fs::path(out_dir) / job.id).string(), ext = extension_for(format);
  o.mask_path = base + "_mask" + ext;
  o.prob_path = base + "_prob" + ext;
  o.sidecar_path = base + ".json";
  save_mask(o.prediction.mask, pre.spacing, o.mask_path);
  save_volume(o.prediction.prob, pre.spacing, o.prob_path);

  std::int64_t fg = 0;
  for (auto v : o.prediction.mask.data()) fg += v;
  const Dims3 d = pre.grid.dims(), w = o.prediction.working_dims;
  const nlohmann::json side = {{"case_id", job.id},
                               {"input_shape", {d.h, d.w, d.z}},
                               {"input_spacing_mm", pre.spacing},
                               {"working_shape", {w.h, w.w, w.z}},
                               {"working_spacing_mm", model.config().target_spacing_mm},
                               {"windows", o.prediction.windows},
                               {"roi", job.roi.empty() ? nlohmann::json(nullptr) : nlohmann::json(job.roi)},
                               {"foreground_voxels", fg},
                               {"runtime_s", o.prediction.seconds}};
  std::ofstream(o.sidecar_path) << side.dump(2) << "\n";
  return o;
}

MetricsReport evaluate_directories(const std::string& pred_dir, const std::string& gt_dir, int threads,
                                   const std::string& overlay_dir) {
  const auto pred_ids = scan_volume_ids(pred_dir, "_mask"), gt_ids = scan_volume_ids(gt_dir, "_mask");
  std::vector<std::string> only_pred, only_gt;
  std::set_difference(pred_ids.begin(), pred_ids.end(), gt_ids.begin(), gt_ids.end(), std::back_inserter(only_pred));
  std::set_difference(gt_ids.begin(), gt_ids.end(), pred_ids.begin(), pred_ids.end(), std::back_inserter(only_gt));
  if (!only_pred.empty() || !only_gt.empty()) {
    std::string msg = "unmatched cases:";
    for (const auto& id : only_pred) msg += " " + id + " (prediction only)";
    for (const auto& id : only_gt) msg += " " + id + " (ground truth only)";
    throw InvalidInputError(msg);
  }
  if (gt_ids.empty()) throw InvalidInputError("no *_mask volumes found in " + gt_dir);

  std::vector<CaseMetrics> rows(gt_ids.size());
  std::vector<std::string> errors(gt_ids.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < gt_ids.size();) {
      const std::string& id = gt_ids[i];
      try {
        auto [pred, psp] = load_mask(find_volume((fs::path(pred_dir) / (id + "_mask")).string()));
        auto [gt, gsp] = load_mask(find_volume((fs::path(gt_dir) / (id + "_mask")).string()));
        if (pred.dims() != gt.dims())
          throw InvalidInputError("case " + id + ": prediction " + pred.dims().str() + " vs ground truth " + gt.dims().str());
        rows[i] = evaluate_case(id, pred, gt, gsp);
        if (!overlay_dir.empty()) {
          const std::string img = find_volume((fs::path(gt_dir) / (id + "_post")).string());
          std::optional<LoadedVolume> bg;
          if (!img.empty()) bg = load_volume(img);
          write_overlays(pred, gt, bg && bg->grid.dims() == gt.dims() ? &bg->grid : nullptr, overlay_dir, id);
        }
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(gt_ids.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < errors.size(); ++i)
    if (!errors[i].empty()) throw IoError(errors[i]);
  return aggregate(std::move(rows));
}

std::vector<std::string> write_report(const MetricsReport& r, const std::string& prefix) {
  std::string p = prefix;
  for (const char* ext : {".csv", ".json"}) {
    const std::string e = ext;
    if (p.size() > e.size() && p.compare(p.size() - e.size(), e.size(), e) == 0) p.resize(p.size() - e.size());
  }
  const fs::path parent = fs::path(p).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  const std::vector<std::string> files{p + ".csv", p + ".json"};
  std::ofstream csv(files[0]), js(files[1]);
  if (!(csv << report_csv(r)) || !(js << report_json(r) << "\n")) throw IoError("cannot write report " + p);
  return files;
}

}  // namespace plhn
