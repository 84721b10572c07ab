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
#include <string>
#include <vector>

#include "tensor.hpp"

namespace plhn {

using Spacing = std::array<double, 3>;

// A registered pre/post-contrast pair with its tumor mask.
struct VolumeCase {
  std::string case_id;
  Volume pre_contrast;
  Volume post_contrast;
  Mask tumor_mask;
  Spacing spacing_mm{1.0, 1.0, 1.0};

  const Dims3& dims() const { return pre_contrast.dims(); }
};

// Throws InvalidInputError describing the first broken invariant.
void validate_case(const VolumeCase& c);

// Two-channel network input: channel 0 post-contrast, channel 1 post minus pre.
struct InputTensor {
  Tensor<float> data;  // (2, H, W, Z)

  Dims3 dims() const { return {data.dim(1), data.dim(2), data.dim(3)}; }
};

// `window` is the attention window used for the divisibility check (0 skips it).
InputTensor build_input_tensor(const Volume& pre_patch, const Volume& post_patch, int window);

// Stacks single inputs into an (N, 2, H, W, Z) batch.
template <typename T>
Tensor<T> stack_inputs(const std::vector<const InputTensor*>& inputs);

}  // namespace plhn
