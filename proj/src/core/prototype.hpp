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
#include <random>
#include <vector>

#include "config.hpp"
#include "nn/layers.hpp"

namespace plhn {

// C x K unit-norm prototypes of width M. Stored in double; never receives gradients.
struct PrototypeBank {
  int C = 0;
  int K = 0;
  int M = 0;
  double eta = 0.999;
  std::vector<double> mu;                  // (C*K) x M, slot index c*K + k
  std::int64_t update_count = 0;
  std::vector<std::int64_t> empty_streak;  // per slot
  bool initialized = false;

  PrototypeBank() = default;
  PrototypeBank(int c, int k, int m, double eta_);

  int slots() const { return C * K; }
  double* slot(int s) { return mu.data() + static_cast<std::size_t>(s) * static_cast<std::size_t>(M); }
  const double* slot(int s) const { return mu.data() + static_cast<std::size_t>(s) * static_cast<std::size_t>(M); }

  // (C*K, M) copy in the network's scalar type.
  template <typename T>
  Tensor<T> matrix() const;
};

// Row-major set of feature vectors.
struct FeatureSet {
  Index dim = 0;
  std::vector<double> data;

  Index size() const { return dim ? static_cast<Index>(data.size()) / dim : 0; }
  const double* row(Index i) const { return data.data() + i * dim; }
  void push(const double* v) { data.insert(data.end(), v, v + dim); }
};

// Splits normalized features X (N, M, H, W, Z) by ground-truth class (labels are N*H*W*Z, values < C).
// At most `cap` vectors per class are kept, drawn without replacement when exceeded.
template <typename T>
std::vector<FeatureSet> features_by_class(const Tensor<T>& X, const std::vector<std::uint8_t>& labels, int C,
                                          Index cap, std::mt19937_64& rng);

// k-means++ seeding followed by `iters` Lloyd steps per class; centers are L2-normalized.
// A class with fewer than K vectors is padded with jittered duplicates (warning emitted).
PrototypeBank init_prototypes(const std::vector<FeatureSet>& per_class, int K, double eta, int iters,
                              std::mt19937_64& rng);

// One assigned slot per voxel (index c*K + k) and its ground-truth class.
struct Assignment {
  std::vector<std::int32_t> slot;
  std::vector<std::uint8_t> cls;
};

// Winner-take-all on the similarity tensor S (N, C*K, H, W, Z). Ties resolve to the lowest k.
// WithinClass restricts the argmax to the voxel's own class slots.
template <typename T>
Assignment assign_prototypes(const Tensor<T>& S, const std::vector<std::uint8_t>& labels, int C, int K,
                             AssignScope scope);

struct ClusterMeans {
  int M = 0;
  std::vector<double> r;          // (C*K) x M, normalized
  std::vector<std::int64_t> count;
  std::vector<bool> empty;         // no members, or the mean vanished (norm < 1e-12)
};

template <typename T>
ClusterMeans compute_cluster_means(const Tensor<T>& X, const Assignment& a, int slots);

// mu <- normalize(eta*mu + (1-eta)*R) on non-empty slots; empty slots untouched; update_count += 1.
void momentum_update(PrototypeBank& bank, const ClusterMeans& means);

// Re-seeds slots that have been empty for more than `limit` consecutive updates with the
// class voxel least similar to its assigned prototype. Returns the re-seeded slot indices.
template <typename T>
std::vector<int> reinit_dead_slots(PrototypeBank& bank, const Tensor<T>& X, const Tensor<T>& S, const Assignment& a,
                                   int limit);

// X_tilde = softmax(X U^T) U per voxel (d_k = 1). X is (N, M, H, W, Z), U is (C*K, M).
// `probs` (optional) receives the (N, C*K, H, W, Z) attention weights.
template <typename T>
Tensor<T> attention_fuse(const Tensor<T>& X, const Tensor<T>& U, Tensor<T>* probs = nullptr);

// 1 where p >= 0.5.
Mask threshold_mask(const Volume& p);

// L2 normalization over channels per voxel; voxels with norm < 1e-12 map to zero.
template <typename T>
Tensor<T> normalize_channels(const Tensor<T>& pi, std::vector<T>* norms = nullptr);
template <typename T>
Tensor<T> normalize_channels_backward(const Tensor<T>& x, const std::vector<T>& norms, const Tensor<T>& dx);

// Learnable part of the prototype module: the distance network Dn and the fusion convolution.
template <typename T>
class PrototypeHead : public nn::Module<T> {
 public:
  explicit PrototypeHead(const NetworkConfig& cfg);

  // Similarity S (N, C*K, ...) between every voxel of X and every row of U.
  Tensor<T> similarity(const Tensor<T>& X, const Tensor<T>& U);
  // Accumulates parameter grads and returns dL/dX for the last `similarity` call.
  Tensor<T> similarity_backward(const Tensor<T>& dS);

  struct Output {
    Tensor<T> S;
    Tensor<T> pf;  // (N, 1, H, W, Z)
  };
  // Pf = sigmoid(conv([X_tilde, S])) with fusion, sigmoid(conv([Pi, S])) without.
  Output forward(const Tensor<T>& Pi, const Tensor<T>& X, const Tensor<T>& U);
  struct Grads {
    Tensor<T> dX;
    Tensor<T> dPi;  // only populated without fusion
  };
  // dS_extra (may be empty) is added to the similarity gradient, e.g. from the contrastive loss.
  Grads backward(const Tensor<T>& dpf, const Tensor<T>& dS_extra);

  void collect_params(std::vector<nn::Param<T>*>& out) override;

  DistanceKind distance;
  bool fusion;
  Index M, CK, hidden;
  nn::Param<T> dn_w1;  // (hidden, 2M): columns [0, M) act on x, [M, 2M) on the prototype
  nn::Param<T> dn_b1;
  nn::Param<T> dn_w2;  // (1, hidden)
  nn::Param<T> dn_b2;
  nn::Conv3d<T> fuse;  // (M + C*K) -> 1, 3x3x3
  T leaky;

 private:
  Tensor<T> x_, u_, a_;  // a_ = W1x * x per voxel: (N, hidden, sp)
  Tensor<T> probs_;
  Tensor<T> pf_;
};

}  // namespace plhn
