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

#include "prototype.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Core>

#include "log.hpp"

namespace plhn {
namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

template <typename T>
MapR<T> mat(T* p, Index r, Index c, Index ld) { return MapR<T>(p, r, c, Eigen::OuterStride<>(ld)); }
template <typename T>
CMapR<T> cmat(const T* p, Index r, Index c, Index ld) { return CMapR<T>(p, r, c, Eigen::OuterStride<>(ld)); }

double sq_dist(const double* a, const double* b, Index d) {
  double s = 0.0;
  for (Index i = 0; i < d; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// Normalizes in place; returns false (leaving v untouched) for a vanishing vector.
bool normalize(double* v, Index d) {
  double n = 0.0;
  for (Index i = 0; i < d; ++i) n += v[i] * v[i];
  n = std::sqrt(n);
  if (n < 1e-12) return false;
  for (Index i = 0; i < d; ++i) v[i] /= n;
  return true;
}

void random_unit(double* v, Index d, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  do {
    for (Index i = 0; i < d; ++i) v[i] = g(rng);
  } while (!normalize(v, d));
}

// Lloyd's algorithm from k-means++ seeds; returns K x dim centers (unnormalized).
std::vector<double> kmeans(const FeatureSet& pts, int K, int iters, std::mt19937_64& rng) {
  const Index n = pts.size(), d = pts.dim;
  std::vector<double> centers(static_cast<std::size_t>(K * d));
  std::uniform_int_distribution<Index> first(0, n - 1);
  std::copy_n(pts.row(first(rng)), d, centers.data());
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  for (int k = 1; k < K; ++k) {
    double total = 0.0;
    for (Index i = 0; i < n; ++i) {
      d2[static_cast<std::size_t>(i)] =
          std::min(d2[static_cast<std::size_t>(i)], sq_dist(pts.row(i), centers.data() + (k - 1) * d, d));
      total += d2[static_cast<std::size_t>(i)];
    }
    Index pick = 0;
    if (total > 0.0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (pick = 0; pick < n - 1; ++pick) {
        u -= d2[static_cast<std::size_t>(pick)];
        if (u < 0.0) break;
      }
    } else {
      pick = first(rng);
    }
    std::copy_n(pts.row(pick), d, centers.data() + k * d);
  }

  std::vector<int> owner(static_cast<std::size_t>(n), -1);
  std::vector<double> sums(centers.size());
  std::vector<Index> counts(static_cast<std::size_t>(K));
  for (int it = 0; it < iters; ++it) {
    bool changed = false;
    for (Index i = 0; i < n; ++i) {
      int best = 0;
      double bd = sq_dist(pts.row(i), centers.data(), d);
      for (int k = 1; k < K; ++k) {
        const double dk = sq_dist(pts.row(i), centers.data() + k * d, d);
        if (dk < bd) bd = dk, best = k;
      }
      changed |= owner[static_cast<std::size_t>(i)] != best;
      owner[static_cast<std::size_t>(i)] = best;
    }
    if (!changed && it > 0) break;
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (Index i = 0; i < n; ++i) {
      const int k = owner[static_cast<std::size_t>(i)];
      ++counts[static_cast<std::size_t>(k)];
      for (Index j = 0; j < d; ++j) sums[static_cast<std::size_t>(k * d + j)] += pts.row(i)[j];
    }
    for (int k = 0; k < K; ++k) {
      if (counts[static_cast<std::size_t>(k)] == 0) continue;  // keep the previous center
      for (Index j = 0; j < d; ++j)
        centers[static_cast<std::size_t>(k * d + j)] =
            sums[static_cast<std::size_t>(k * d + j)] / static_cast<double>(counts[static_cast<std::size_t>(k)]);
    }
  }
  return centers;
}

template <typename T>
T sigmoid(T z) {
  return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(z))));
}

}  // namespace

PrototypeBank::PrototypeBank(int c, int k, int m, double eta_)
    : C(c), K(k), M(m), eta(eta_),
      mu(static_cast<std::size_t>(c * k * m), 0.0),
      empty_streak(static_cast<std::size_t>(c * k), 0) {}

template <typename T>
Tensor<T> PrototypeBank::matrix() const {
  Tensor<T> u({static_cast<Index>(slots()), static_cast<Index>(M)});
  for (Index i = 0; i < u.numel(); ++i) u[i] = static_cast<T>(mu[static_cast<std::size_t>(i)]);
  return u;
}

template <typename T>
std::vector<FeatureSet> features_by_class(const Tensor<T>& X, const std::vector<std::uint8_t>& labels, int C,
                                          Index cap, std::mt19937_64& rng) {
  const Shape5 s = shape5(X);
  const Index sp = s.spatial();
  if (static_cast<Index>(labels.size()) != s.n * sp) throw InvalidInputError("label count does not match features");
  std::vector<std::vector<Index>> idx(static_cast<std::size_t>(C));
  for (Index v = 0; v < s.n * sp; ++v) {
    const auto c = labels[static_cast<std::size_t>(v)];
    if (c >= C) throw InvalidInputError("label value out of range");
    idx[c].push_back(v);
  }
  std::vector<FeatureSet> out(static_cast<std::size_t>(C));
  std::vector<double> buf(static_cast<std::size_t>(s.c));
  for (int c = 0; c < C; ++c) {
    auto& ids = idx[static_cast<std::size_t>(c)];
    if (cap > 0 && static_cast<Index>(ids.size()) > cap) {
      for (Index i = 0; i < cap; ++i) {
        std::uniform_int_distribution<Index> u(i, static_cast<Index>(ids.size()) - 1);
        std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(u(rng))]);
      }
      ids.resize(static_cast<std::size_t>(cap));
      std::sort(ids.begin(), ids.end());
    }
    out[static_cast<std::size_t>(c)].dim = s.c;
    out[static_cast<std::size_t>(c)].data.reserve(ids.size() * static_cast<std::size_t>(s.c));
    for (Index v : ids) {
      const Index n = v / sp, i = v % sp;
      for (Index ch = 0; ch < s.c; ++ch)
        buf[static_cast<std::size_t>(ch)] = static_cast<double>(X[(n * s.c + ch) * sp + i]);
      out[static_cast<std::size_t>(c)].push(buf.data());
    }
  }
  return out;
}

PrototypeBank init_prototypes(const std::vector<FeatureSet>& per_class, int K, double eta, int iters,
                              std::mt19937_64& rng) {
  if (per_class.empty() || K < 1) throw InvalidInputError("init_prototypes: need at least one class and K >= 1");
  const Index M = per_class.front().dim;
  PrototypeBank bank(static_cast<int>(per_class.size()), K, static_cast<int>(M), eta);
  for (int c = 0; c < bank.C; ++c) {
    FeatureSet pts = per_class[static_cast<std::size_t>(c)];
    if (pts.dim != M) throw InvalidInputError("init_prototypes: feature width differs between classes");
    if (pts.size() == 0) {
      log::warn("class " + std::to_string(c) + " has no features; prototypes initialized randomly");
      for (int k = 0; k < K; ++k) random_unit(bank.slot(c * K + k), M, rng);
      continue;
    }
    if (pts.size() < K) {
      log::warn("class " + std::to_string(c) + " has " + std::to_string(pts.size()) + " features for " +
                std::to_string(K) + " prototypes; padding with jittered duplicates");
      std::normal_distribution<double> jitter(0.0, 1e-3);
      std::uniform_int_distribution<Index> pick(0, pts.size() - 1);
      const Index have = pts.size();
      std::vector<double> v(static_cast<std::size_t>(M));
      for (Index i = have; i < K; ++i) {
        const double* src = pts.row(pick(rng) % have);
        for (Index j = 0; j < M; ++j) v[static_cast<std::size_t>(j)] = src[j] + jitter(rng);
        pts.push(v.data());
      }
    }
    const std::vector<double> centers = kmeans(pts, K, iters, rng);
    for (int k = 0; k < K; ++k) {
      double* dst = bank.slot(c * K + k);
      std::copy_n(centers.data() + k * M, M, dst);
      if (!normalize(dst, M)) random_unit(dst, M, rng);
    }
  }
  bank.initialized = true;
  return bank;
}

template <typename T>
Assignment assign_prototypes(const Tensor<T>& S, const std::vector<std::uint8_t>& labels, int C, int K,
                             AssignScope scope) {
  const Shape5 s = shape5(S);
  if (s.c != C * K) throw InvalidInputError("similarity tensor has wrong slot count");
  const Index sp = s.spatial();
  Assignment a;
  a.slot.resize(static_cast<std::size_t>(s.n * sp));
  a.cls.resize(static_cast<std::size_t>(s.n * sp));
  for (Index n = 0; n < s.n; ++n)
    for (Index i = 0; i < sp; ++i) {
      const Index v = n * sp + i;
      const int c = labels[static_cast<std::size_t>(v)];
      const int lo = scope == AssignScope::WithinClass ? c * K : 0;
      const int hi = scope == AssignScope::WithinClass ? lo + K : C * K;
      int best = lo;
      T bs = S[(n * s.c + lo) * sp + i];
      for (int j = lo + 1; j < hi; ++j) {
        const T sj = S[(n * s.c + j) * sp + i];
        if (sj > bs) bs = sj, best = j;
      }
      a.slot[static_cast<std::size_t>(v)] = best;
      a.cls[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(c);
    }
  return a;
}

template <typename T>
ClusterMeans compute_cluster_means(const Tensor<T>& X, const Assignment& a, int slots) {
  const Shape5 s = shape5(X);
  const Index sp = s.spatial();
  ClusterMeans out;
  out.M = static_cast<int>(s.c);
  out.r.assign(static_cast<std::size_t>(slots * s.c), 0.0);
  out.count.assign(static_cast<std::size_t>(slots), 0);
  out.empty.assign(static_cast<std::size_t>(slots), true);
  for (Index n = 0; n < s.n; ++n)
    for (Index i = 0; i < sp; ++i) {
      const int j = a.slot[static_cast<std::size_t>(n * sp + i)];
      ++out.count[static_cast<std::size_t>(j)];
      double* r = out.r.data() + j * s.c;
      for (Index ch = 0; ch < s.c; ++ch) r[ch] += static_cast<double>(X[(n * s.c + ch) * sp + i]);
    }
  for (int j = 0; j < slots; ++j) {
    double* r = out.r.data() + j * s.c;
    if (out.count[static_cast<std::size_t>(j)] == 0) continue;
    for (Index ch = 0; ch < s.c; ++ch) r[ch] /= static_cast<double>(out.count[static_cast<std::size_t>(j)]);
    out.empty[static_cast<std::size_t>(j)] = !normalize(r, s.c);
  }
  return out;
}

void momentum_update(PrototypeBank& bank, const ClusterMeans& means) {
  if (means.M != bank.M || static_cast<int>(means.empty.size()) != bank.slots())
    throw InvalidInputError("cluster means do not match the prototype bank");
  std::vector<double> v(static_cast<std::size_t>(bank.M));
  for (int j = 0; j < bank.slots(); ++j) {
    if (means.empty[static_cast<std::size_t>(j)]) {
      ++bank.empty_streak[static_cast<std::size_t>(j)];
      continue;
    }
    bank.empty_streak[static_cast<std::size_t>(j)] = 0;
    if (bank.eta == 1.0) continue;  // exact fixed point
    double* mu = bank.slot(j);
    const double* r = means.r.data() + j * bank.M;
    if (bank.eta == 0.0) {  // R is already unit norm; copy it exactly
      std::copy(r, r + bank.M, mu);
      continue;
    }
    for (int i = 0; i < bank.M; ++i) v[static_cast<std::size_t>(i)] = bank.eta * mu[i] + (1.0 - bank.eta) * r[i];
    if (normalize(v.data(), bank.M)) std::copy(v.begin(), v.end(), mu);
  }
  ++bank.update_count;
}

template <typename T>
std::vector<int> reinit_dead_slots(PrototypeBank& bank, const Tensor<T>& X, const Tensor<T>& S, const Assignment& a,
                                   int limit) {
  std::vector<int> reseeded;
  const Shape5 s = shape5(X);
  const Index sp = s.spatial();
  std::vector<bool> used(a.slot.size(), false);
  for (int j = 0; j < bank.slots(); ++j) {
    if (bank.empty_streak[static_cast<std::size_t>(j)] <= limit) continue;
    const int c = j / bank.K;
    Index worst = -1;
    T ws = std::numeric_limits<T>::infinity();
    for (Index v = 0; v < static_cast<Index>(a.slot.size()); ++v) {
      if (a.cls[static_cast<std::size_t>(v)] != c || used[static_cast<std::size_t>(v)]) continue;
      const Index n = v / sp, i = v % sp;
      const T sv = S[(n * S.dim(1) + a.slot[static_cast<std::size_t>(v)]) * sp + i];
      if (sv < ws) ws = sv, worst = v;
    }
    if (worst < 0) continue;
    const Index n = worst / sp, i = worst % sp;
    std::vector<double> v(static_cast<std::size_t>(bank.M));
    for (int ch = 0; ch < bank.M; ++ch) v[static_cast<std::size_t>(ch)] = static_cast<double>(X[(n * s.c + ch) * sp + i]);
    if (!normalize(v.data(), bank.M)) continue;
    std::copy(v.begin(), v.end(), bank.slot(j));
    bank.empty_streak[static_cast<std::size_t>(j)] = 0;
    used[static_cast<std::size_t>(worst)] = true;
    reseeded.push_back(j);
    log::info("re-initialized dead prototype slot " + std::to_string(j));
  }
  return reseeded;
}

template <typename T>
Tensor<T> attention_fuse(const Tensor<T>& X, const Tensor<T>& U, Tensor<T>* probs) {
  const Shape5 s = shape5(X);
  const Index CK = U.dim(0), M = U.dim(1);
  if (M != s.c) throw InvalidInputError("attention_fuse: prototype width differs from feature width");
  const Index sp = s.spatial();
  Tensor<T> out(X.shape());
  Tensor<T> P = make5<T>(s.n, CK, s.dims());
  auto Um = cmat(U.data(), CK, M, M);
  for (Index n = 0; n < s.n; ++n) {
    T* pn = P.data() + n * CK * sp;
    mat(pn, CK, sp, sp).noalias() = Um * cmat(X.data() + n * M * sp, M, sp, sp);
    for (Index i = 0; i < sp; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < CK; ++j) mx = std::max(mx, static_cast<double>(pn[j * sp + i]));
      double z = 0.0;
      for (Index j = 0; j < CK; ++j) z += std::exp(static_cast<double>(pn[j * sp + i]) - mx);
      for (Index j = 0; j < CK; ++j)
        pn[j * sp + i] = static_cast<T>(std::exp(static_cast<double>(pn[j * sp + i]) - mx) / z);
    }
    mat(out.data() + n * M * sp, M, sp, sp).noalias() = Um.transpose() * cmat(pn, CK, sp, sp);
  }
  if (probs) *probs = std::move(P);
  return out;
}

Mask threshold_mask(const Volume& p) {
  Mask m(p.dims());
  for (Index i = 0; i < p.size(); ++i) m[i] = p[i] >= 0.5f ? 1 : 0;
  return m;
}

template <typename T>
Tensor<T> normalize_channels(const Tensor<T>& pi, std::vector<T>* norms) {
  const Shape5 s = shape5(pi);
  const Index sp = s.spatial();
  Tensor<T> x(pi.shape());
  if (norms) norms->assign(static_cast<std::size_t>(s.n * sp), T{});
  for (Index n = 0; n < s.n; ++n)
    for (Index i = 0; i < sp; ++i) {
      double nn = 0.0;
      for (Index c = 0; c < s.c; ++c) {
        const double v = static_cast<double>(pi[(n * s.c + c) * sp + i]);
        nn += v * v;
      }
      nn = std::sqrt(nn);
      if (norms) (*norms)[static_cast<std::size_t>(n * sp + i)] = static_cast<T>(nn);
      if (nn < 1e-12) continue;
      for (Index c = 0; c < s.c; ++c)
        x[(n * s.c + c) * sp + i] = static_cast<T>(static_cast<double>(pi[(n * s.c + c) * sp + i]) / nn);
    }
  return x;
}

template <typename T>
Tensor<T> normalize_channels_backward(const Tensor<T>& x, const std::vector<T>& norms, const Tensor<T>& dx) {
  const Shape5 s = shape5(x);
  const Index sp = s.spatial();
  Tensor<T> dpi(x.shape());
  for (Index n = 0; n < s.n; ++n)
    for (Index i = 0; i < sp; ++i) {
      const double nn = static_cast<double>(norms[static_cast<std::size_t>(n * sp + i)]);
      if (nn < 1e-12) continue;
      double d = 0.0;
      for (Index c = 0; c < s.c; ++c) {
        const Index o = (n * s.c + c) * sp + i;
        d += static_cast<double>(x[o]) * static_cast<double>(dx[o]);
      }
      for (Index c = 0; c < s.c; ++c) {
        const Index o = (n * s.c + c) * sp + i;
        dpi[o] = static_cast<T>((static_cast<double>(dx[o]) - static_cast<double>(x[o]) * d) / nn);
      }
    }
  return dpi;
}

// ---- PrototypeHead -------------------------------------------------------------

template <typename T>
PrototypeHead<T>::PrototypeHead(const NetworkConfig& cfg)
    : distance(cfg.distance),
      fusion(cfg.flags.use_fusion),
      M(cfg.M),
      CK(cfg.slots()),
      hidden(cfg.dn_width()),
      dn_w1("proto.dn.fc1.weight", {hidden, 2 * M}, 2 * M, hidden),
      dn_b1("proto.dn.fc1.bias", {hidden}),
      dn_w2("proto.dn.fc2.weight", {1, hidden}, hidden, 1),
      dn_b2("proto.dn.fc2.bias", {1}),
      fuse("proto.fuse", M + CK, 1, 3, 1, 1),
      leaky(static_cast<T>(cfg.leaky_slope)) {}

template <typename T>
Tensor<T> PrototypeHead<T>::similarity(const Tensor<T>& X, const Tensor<T>& U) {
  const Shape5 s = shape5(X);
  if (s.c != M || U.dim(0) != CK || U.dim(1) != M) throw InvalidInputError("similarity: shape mismatch");
  const Index sp = s.spatial();
  x_ = X;
  u_ = U;
  Tensor<T> S = make5<T>(s.n, CK, s.dims());
  auto Um = cmat(U.data(), CK, M, M);
  if (distance == DistanceKind::Cosine) {
    for (Index n = 0; n < s.n; ++n)
      mat(S.data() + n * CK * sp, CK, sp, sp).noalias() = Um * cmat(X.data() + n * M * sp, M, sp, sp);
    return S;
  }
  // First layer factorized: W1 [x; mu] = W1x x + W1mu mu.
  a_ = make5<T>(s.n, hidden, s.dims());
  auto W1x = cmat(dn_w1.value.data(), hidden, M, 2 * M);
  auto W1u = cmat(dn_w1.value.data() + M, hidden, M, 2 * M);
  MatR<T> B = Um * W1u.transpose();  // (CK, hidden)
  for (Index j = 0; j < CK; ++j)
    for (Index h = 0; h < hidden; ++h) B(j, h) += dn_b1.value[h];
  const T b2 = dn_b2.value[0];
  for (Index n = 0; n < s.n; ++n) {
    T* an = a_.data() + n * hidden * sp;
    mat(an, hidden, sp, sp).noalias() = W1x * cmat(X.data() + n * M * sp, M, sp, sp);
    for (Index j = 0; j < CK; ++j) {
      T* srow = S.data() + (n * CK + j) * sp;
      std::fill_n(srow, sp, b2);
      for (Index h = 0; h < hidden; ++h) {
        const T bj = B(j, h), w = dn_w2.value[h];
        const T* ah = an + h * sp;
        for (Index i = 0; i < sp; ++i) {
          const T z = ah[i] + bj;
          srow[i] += w * (z > T(0) ? z : leaky * z);
        }
      }
    }
  }
  return S;
}

template <typename T>
Tensor<T> PrototypeHead<T>::similarity_backward(const Tensor<T>& dS) {
  const Shape5 s = shape5(x_);
  const Index sp = s.spatial();
  Tensor<T> dX(x_.shape());
  auto Um = cmat(u_.data(), CK, M, M);
  if (distance == DistanceKind::Cosine) {
    for (Index n = 0; n < s.n; ++n)
      mat(dX.data() + n * M * sp, M, sp, sp).noalias() = Um.transpose() * cmat(dS.data() + n * CK * sp, CK, sp, sp);
    return dX;
  }
  auto W1x = cmat(dn_w1.value.data(), hidden, M, 2 * M);
  auto W1u = cmat(dn_w1.value.data() + M, hidden, M, 2 * M);
  MatR<T> B = Um * W1u.transpose();
  for (Index j = 0; j < CK; ++j)
    for (Index h = 0; h < hidden; ++h) B(j, h) += dn_b1.value[h];
  std::vector<double> dB(static_cast<std::size_t>(CK * hidden), 0.0);
  std::vector<double> dw2(static_cast<std::size_t>(hidden), 0.0);
  double db2 = 0.0;
  Tensor<T> dA({hidden, sp});
  for (Index n = 0; n < s.n; ++n) {
    const T* an = a_.data() + n * hidden * sp;
    dA.zero();
    for (Index j = 0; j < CK; ++j) {
      const T* g = dS.data() + (n * CK + j) * sp;
      double gs = 0.0;
      for (Index i = 0; i < sp; ++i) gs += static_cast<double>(g[i]);
      db2 += gs;
      for (Index h = 0; h < hidden; ++h) {
        const T bj = B(j, h), w = dn_w2.value[h];
        const T* ah = an + h * sp;
        T* dah = dA.data() + h * sp;
        double acc_w = 0.0, acc_b = 0.0;
        for (Index i = 0; i < sp; ++i) {
          const T z = ah[i] + bj;
          const bool pos = z > T(0);
          acc_w += static_cast<double>(g[i]) * static_cast<double>(pos ? z : leaky * z);
          const T dz = g[i] * w * (pos ? T(1) : leaky);
          dah[i] += dz;
          acc_b += static_cast<double>(dz);
        }
        dw2[static_cast<std::size_t>(h)] += acc_w;
        dB[static_cast<std::size_t>(j * hidden + h)] += acc_b;
      }
    }
    const auto dAm = cmat(dA.data(), hidden, sp, sp);
    const auto Xn = cmat(x_.data() + n * M * sp, M, sp, sp);
    mat(dn_w1.grad.data(), hidden, M, 2 * M).noalias() += dAm * Xn.transpose();
    mat(dX.data() + n * M * sp, M, sp, sp).noalias() = W1x.transpose() * dAm;
  }
  for (Index h = 0; h < hidden; ++h) {
    dn_w2.grad[h] += static_cast<T>(dw2[static_cast<std::size_t>(h)]);
    double b1 = 0.0;
    for (Index j = 0; j < CK; ++j) {
      const double g = dB[static_cast<std::size_t>(j * hidden + h)];
      b1 += g;
      for (Index m = 0; m < M; ++m) dn_w1.grad[h * 2 * M + M + m] += static_cast<T>(g * static_cast<double>(u_[j * M + m]));
    }
    dn_b1.grad[h] += static_cast<T>(b1);
  }
  dn_b2.grad[0] += static_cast<T>(db2);
  return dX;
}

template <typename T>
typename PrototypeHead<T>::Output PrototypeHead<T>::forward(const Tensor<T>& Pi, const Tensor<T>& X,
                                                            const Tensor<T>& U) {
  Output out;
  out.S = similarity(X, U);
  Tensor<T> in = fusion ? concat_channels(attention_fuse(X, U, &probs_), out.S) : concat_channels(Pi, out.S);
  Tensor<T> z = fuse.forward(in);
  for (Index i = 0; i < z.numel(); ++i) z[i] = sigmoid(z[i]);
  pf_ = z;
  out.pf = std::move(z);
  return out;
}

template <typename T>
typename PrototypeHead<T>::Grads PrototypeHead<T>::backward(const Tensor<T>& dpf, const Tensor<T>& dS_extra) {
  Tensor<T> dz(dpf.shape());
  for (Index i = 0; i < dz.numel(); ++i) dz[i] = dpf[i] * pf_[i] * (T(1) - pf_[i]);
  Tensor<T> din = fuse.backward(dz);
  Tensor<T> dfeat, dS;
  split_channels(din, M, dfeat, dS);
  if (!dS_extra.empty()) add_inplace(dS, dS_extra);
  Grads g;
  g.dX = similarity_backward(dS);
  if (!fusion) {
    g.dPi = std::move(dfeat);
    return g;
  }
  // softmax(X U^T) U backward; U is constant.
  const Shape5 s = shape5(x_);
  const Index sp = s.spatial();
  auto Um = cmat(u_.data(), CK, M, M);
  MatR<T> dP(CK, sp);
  for (Index n = 0; n < s.n; ++n) {
    dP.noalias() = Um * cmat(dfeat.data() + n * M * sp, M, sp, sp);
    const T* p = probs_.data() + n * CK * sp;
    for (Index i = 0; i < sp; ++i) {
      double dot = 0.0;
      for (Index j = 0; j < CK; ++j) dot += static_cast<double>(p[j * sp + i]) * static_cast<double>(dP(j, i));
      for (Index j = 0; j < CK; ++j)
        dP(j, i) = static_cast<T>(static_cast<double>(p[j * sp + i]) * (static_cast<double>(dP(j, i)) - dot));
    }
    mat(g.dX.data() + n * M * sp, M, sp, sp).noalias() += Um.transpose() * dP;
  }
  return g;
}

template <typename T>
void PrototypeHead<T>::collect_params(std::vector<nn::Param<T>*>& out) {
  if (distance == DistanceKind::Learned) {
    out.push_back(&dn_w1);
    out.push_back(&dn_b1);
    out.push_back(&dn_w2);
    out.push_back(&dn_b2);
  }
  fuse.collect_params(out);
}

#define PLHN_INSTANTIATE(T)                                                                                     \
  template Tensor<T> PrototypeBank::matrix<T>() const;                                                          \
  template std::vector<FeatureSet> features_by_class<T>(const Tensor<T>&, const std::vector<std::uint8_t>&, int, \
                                                        Index, std::mt19937_64&);                               \
  template Assignment assign_prototypes<T>(const Tensor<T>&, const std::vector<std::uint8_t>&, int, int,        \
                                           AssignScope);                                                        \
  template ClusterMeans compute_cluster_means<T>(const Tensor<T>&, const Assignment&, int);                     \
  template std::vector<int> reinit_dead_slots<T>(PrototypeBank&, const Tensor<T>&, const Tensor<T>&,            \
                                                 const Assignment&, int);                                       \
  template Tensor<T> attention_fuse<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>*);                         \
  template Tensor<T> normalize_channels<T>(const Tensor<T>&, std::vector<T>*);                                  \
  template Tensor<T> normalize_channels_backward<T>(const Tensor<T>&, const std::vector<T>&, const Tensor<T>&); \
  template class PrototypeHead<T>;

PLHN_INSTANTIATE(float)
PLHN_INSTANTIATE(double)
#undef PLHN_INSTANTIATE

}  // namespace plhn
