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

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace plhn {

using Index = std::int64_t;

// Spatial extent of a volume. Memory order is (h, w, z) with z fastest.
struct Dims3 {
  Index h = 0;
  Index w = 0;
  Index z = 0;

  Index count() const { return h * w * z; }
  Index operator[](int axis) const { return axis == 0 ? h : (axis == 1 ? w : z); }
  Index& operator[](int axis) { return axis == 0 ? h : (axis == 1 ? w : z); }
  bool operator==(const Dims3&) const = default;
  std::string str() const {
    return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(z);
  }
};

template <typename T>
class Grid3 {
 public:
  Grid3() = default;
  explicit Grid3(Dims3 dims, T fill = T{}) : dims_(dims), data_(static_cast<std::size_t>(dims.count()), fill) {}
  Grid3(Dims3 dims, std::vector<T> data) : dims_(dims), data_(std::move(data)) {
    if (static_cast<Index>(data_.size()) != dims_.count())
      throw InvalidInputError("grid data size does not match dims " + dims_.str());
  }

  const Dims3& dims() const { return dims_; }
  Index size() const { return dims_.count(); }
  Index offset(Index h, Index w, Index z) const { return (h * dims_.w + w) * dims_.z + z; }

  T& at(Index h, Index w, Index z) { return data_[static_cast<std::size_t>(offset(h, w, z))]; }
  const T& at(Index h, Index w, Index z) const { return data_[static_cast<std::size_t>(offset(h, w, z))]; }
  T& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }

  bool operator==(const Grid3&) const = default;

 private:
  Dims3 dims_;
  std::vector<T> data_;
};

using Volume = Grid3<float>;
using Mask = Grid3<std::uint8_t>;

// Dense row-major N-d array. Network activations use (N, C, H, W, Z).
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<Index> shape, T fill = T{}) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(numel_of(shape_)), fill);
  }
  Tensor(std::initializer_list<Index> shape, T fill = T{}) : Tensor(std::vector<Index>(shape), fill) {}

  static Index numel_of(const std::vector<Index>& s) {
    return std::accumulate(s.begin(), s.end(), Index{1}, std::multiplies<>());
  }

  const std::vector<Index>& shape() const { return shape_; }
  Index dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  Index numel() const { return static_cast<Index>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }
  T& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  void reshape(std::vector<Index> s) {
    if (numel_of(s) != numel()) throw InvalidInputError("reshape changes element count");
    shape_ = std::move(s);
  }
  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T{}); }

  std::string shape_str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < shape_.size(); ++i) s += (i ? "," : "") + std::to_string(shape_[i]);
    return s + ")";
  }

  bool operator==(const Tensor&) const = default;

 private:
  std::vector<Index> shape_;
  std::vector<T> data_;
};

// Convenience accessors for (N, C, H, W, Z) activations.
struct Shape5 {
  Index n, c, h, w, z;
  Index spatial() const { return h * w * z; }
  Dims3 dims() const { return {h, w, z}; }
};

template <typename T>
Shape5 shape5(const Tensor<T>& t) {
  if (t.rank() != 5) throw InvalidInputError("expected rank-5 tensor, got " + t.shape_str());
  return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), t.dim(4)};
}

template <typename T>
Tensor<T> make5(Index n, Index c, Dims3 d, T fill = T{}) {
  return Tensor<T>({n, c, d.h, d.w, d.z}, fill);
}

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  Tensor<To> out(t.shape());
  for (Index i = 0; i < t.numel(); ++i) out[i] = static_cast<To>(t[i]);
  return out;
}

// Channel concatenation of two (N, C, H, W, Z) tensors.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape5 sa = shape5(a), sb = shape5(b);
  if (sa.n != sb.n || sa.dims() != sb.dims())
    throw InvalidInputError("concat shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  Tensor<T> out = make5<T>(sa.n, sa.c + sb.c, sa.dims());
  const Index sp = sa.spatial();
  for (Index n = 0; n < sa.n; ++n) {
    std::copy_n(a.data() + n * sa.c * sp, sa.c * sp, out.data() + n * (sa.c + sb.c) * sp);
    std::copy_n(b.data() + n * sb.c * sp, sb.c * sp, out.data() + (n * (sa.c + sb.c) + sa.c) * sp);
  }
  return out;
}

// Splits a channel-concatenated gradient back into its two parts.
template <typename T>
void split_channels(const Tensor<T>& g, Index ca, Tensor<T>& ga, Tensor<T>& gb) {
  const Shape5 s = shape5(g);
  const Index cb = s.c - ca;
  const Index sp = s.spatial();
  ga = make5<T>(s.n, ca, s.dims());
  gb = make5<T>(s.n, cb, s.dims());
  for (Index n = 0; n < s.n; ++n) {
    std::copy_n(g.data() + n * s.c * sp, ca * sp, ga.data() + n * ca * sp);
    std::copy_n(g.data() + (n * s.c + ca) * sp, cb * sp, gb.data() + n * cb * sp);
  }
}

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src) {
  if (dst.numel() != src.numel()) throw InvalidInputError("add shape mismatch");
  for (Index i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

}  // namespace plhn
