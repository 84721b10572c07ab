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

#include "data_model.hpp"

#include "config.hpp"

namespace plhn {

void validate_case(const VolumeCase& c) {
  const Dims3 d = c.pre_contrast.dims();
  if (d.count() <= 0) throw InvalidInputError("case " + c.case_id + ": empty volume");
  if (c.post_contrast.dims() != d || c.tumor_mask.dims() != d)
    throw InvalidInputError("case " + c.case_id + ": pre/post/mask shapes differ");
  for (auto v : c.tumor_mask.data())
    if (v > 1) throw InvalidInputError("case " + c.case_id + ": mask is not binary");
  for (double s : c.spacing_mm)
    if (!(s > 0.0)) throw InvalidInputError("case " + c.case_id + ": spacing must be positive");
}

InputTensor build_input_tensor(const Volume& pre, const Volume& post, int window) {
  if (pre.dims() != post.dims())
    throw InvalidInputError("pre/post patch shape mismatch: " + pre.dims().str() + " vs " + post.dims().str());
  const Dims3 d = pre.dims();
  if (auto v = check_patch_dims(d, window); !v.empty())
    throw ConfigError("patch " + d.str() + ": " + v.front().message);
  InputTensor out{Tensor<float>({2, d.h, d.w, d.z})};
  const Index n = d.count();
  float* ch0 = out.data.data();
  float* ch1 = ch0 + n;
  for (Index i = 0; i < n; ++i) {
    ch0[i] = post[i];
    ch1[i] = post[i] - pre[i];
  }
  return out;
}

template <typename T>
Tensor<T> stack_inputs(const std::vector<const InputTensor*>& inputs) {
  if (inputs.empty()) throw InvalidInputError("empty input batch");
  const Dims3 d = inputs.front()->dims();
  Tensor<T> out = make5<T>(static_cast<Index>(inputs.size()), 2, d);
  const Index per = 2 * d.count();
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    if (inputs[n]->dims() != d) throw InvalidInputError("batch inputs differ in shape");
    const float* src = inputs[n]->data.data();
    T* dst = out.data() + static_cast<Index>(n) * per;
    for (Index i = 0; i < per; ++i) dst[i] = static_cast<T>(src[i]);
  }
  return out;
}

template Tensor<float> stack_inputs<float>(const std::vector<const InputTensor*>&);
template Tensor<double> stack_inputs<double>(const std::vector<const InputTensor*>&);

}  // namespace plhn
