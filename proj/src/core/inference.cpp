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

#include "inference.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>

#include "log.hpp"
#include "volume_io.hpp"

namespace plhn {

std::vector<Index> axis_origins(Index extent, Index patch, Index stride) {
  if (patch < 1 || stride < 1) throw InvalidInputError("patch and stride must be positive");
  if (extent < patch) throw InvalidInputError("volume extent smaller than the patch");
  std::vector<Index> o;
  for (Index s = 0;; s += stride) {
    if (s + patch >= extent) {
      o.push_back(extent - patch);
      break;
    }
    o.push_back(s);
  }
  return o;
}

std::vector<Dims3> window_origins(const Dims3& volume, const Dims3& patch, const Dims3& stride) {
  const auto oh = axis_origins(volume.h, patch.h, stride.h);
  const auto ow = axis_origins(volume.w, patch.w, stride.w);
  const auto oz = axis_origins(volume.z, patch.z, stride.z);
  std::vector<Dims3> out;
  out.reserve(oh.size() * ow.size() * oz.size());
  for (Index h : oh)
    for (Index w : ow)
      for (Index z : oz) out.push_back({h, w, z});
  return out;
}

Grid3<std::int32_t> coverage_counts(const Dims3& volume, const Dims3& patch, const Dims3& stride) {
  Grid3<std::int32_t> c(volume, 0);
  for (const Dims3& o : window_origins(volume, patch, stride))
    for (Index h = 0; h < patch.h; ++h)
      for (Index w = 0; w < patch.w; ++w)
        for (Index z = 0; z < patch.z; ++z) ++c.at(o.h + h, o.w + w, o.z + z);
  return c;
}

SlidingWindowResult sliding_window_predict(const Volume& pre_in, const Volume& post_in, const Dims3& patch,
                                           const Dims3& stride, int window, const PatchPredictor& predictor,
                                           const std::vector<std::size_t>* order) {
  if (pre_in.dims() != post_in.dims()) throw InvalidInputError("pre/post volumes differ in shape");
  const Dims3 native = pre_in.dims();
  const Volume pre = reflect_pad(pre_in, patch);
  const Volume post = reflect_pad(post_in, patch);
  const Dims3 D = pre.dims();

  const std::vector<Dims3> origins = window_origins(D, patch, stride);
  std::vector<std::size_t> visit(origins.size());
  std::iota(visit.begin(), visit.end(), std::size_t{0});
  if (order) {
    std::vector<std::size_t> sorted = *order;
    std::sort(sorted.begin(), sorted.end());
    if (sorted != visit) throw InvalidInputError("window order is not a permutation");
    visit = *order;
  }

  std::vector<double> acc(static_cast<std::size_t>(D.count()), 0.0);
  Grid3<std::int32_t> cover(D, 0);
  for (std::size_t wi : visit) {
    const Dims3& o = origins[wi];
    const InputTensor in = build_input_tensor(crop(pre, o, patch), crop(post, o, patch), window);
    const Volume p = predictor(in, wi);
    if (p.dims() != patch) throw InvalidInputError("predictor returned " + p.dims().str() + ", expected " + patch.str());
    for (Index h = 0; h < patch.h; ++h)
      for (Index w = 0; w < patch.w; ++w)
        for (Index z = 0; z < patch.z; ++z) {
          const Index off = cover.offset(o.h + h, o.w + w, o.z + z);
          acc[static_cast<std::size_t>(off)] += static_cast<double>(p.at(h, w, z));
          ++cover[off];
        }
  }

  Volume full(D);
  for (Index i = 0; i < D.count(); ++i) full[i] = static_cast<float>(acc[static_cast<std::size_t>(i)] / cover[i]);
  SlidingWindowResult r;
  r.windows = origins.size();
  r.prob = native == D ? std::move(full) : crop(full, {0, 0, 0}, native);
  return r;
}

Volume apply_roi_mask(const Volume& prob, const Mask& roi) {
  if (prob.dims() != roi.dims())
    throw InvalidInputError("ROI " + roi.dims().str() + " does not match volume " + prob.dims().str());
  Volume out = prob;
  for (Index i = 0; i < out.size(); ++i)
    if (!roi[i]) out[i] = 0.0f;
  return out;
}

Segmenter::Segmenter(std::unique_ptr<HybridNet<float>> net, PrototypeBank bank, ActiveParts parts)
    : net_(std::move(net)), bank_(std::move(bank)), parts_(parts) {
  if (!net_) throw InvalidInputError("segmenter needs a network");
  if (parts_.prototypes && !bank_.initialized) throw InvalidInputError("prototype head enabled without a bank");
  net_->set_training(false);
}

Volume Segmenter::predict_patch(const InputTensor& input) {
  const Dims3 d = input.dims();
  Tensor<float> x = input.data;
  x.reshape({1, 2, d.h, d.w, d.z});
  const auto out = net_->forward(x, parts_, parts_.prototypes ? &bank_ : nullptr);
  return Volume(d, out.final_prob().vec());
}

PatchPredictor Segmenter::predictor() {
  return [this](const InputTensor& in, std::size_t) { return predict_patch(in); };
}

CasePrediction predict_case(const Volume& pre, const Volume& post, const Spacing& spacing, Segmenter& model,
                            const Mask* roi) {
  const auto t0 = std::chrono::steady_clock::now();
  const NetworkConfig& cfg = model.config();
  const Spacing target = cfg.target_spacing_mm;
  const Dims3 native = pre.dims();
  if (post.dims() != native) throw InvalidInputError("pre/post volumes differ in shape");
  if (roi && roi->dims() != native)
    throw InvalidInputError("ROI " + roi->dims().str() + " does not match volume " + native.str());

  const Dims3 work = resampled_dims(native, spacing, target);
  const Volume rpre = resample_image(pre, spacing, target, work);
  const Volume rpost = resample_image(post, spacing, target, work);
  SlidingWindowResult sw =
      sliding_window_predict(rpre, rpost, cfg.patch_dims, cfg.stride, cfg.Ws, model.predictor());
  Volume prob = std::move(sw.prob);
  if (roi) {
    const Mask rroi = resample_mask(*roi, spacing, target, work);
    bool any = false;
    for (auto v : rroi.data()) any = any || v;
    if (!any) log::warn("ROI mask is empty; prediction will be empty");
    prob = apply_roi_mask(prob, rroi);
  }
  const Mask mask = threshold_mask(prob);

  CasePrediction r;
  r.working_dims = work;
  r.windows = sw.windows;
  r.mask = resample_mask(mask, target, spacing, native);
  r.prob = resample_image(prob, target, spacing, native);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace plhn
