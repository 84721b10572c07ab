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

#include "network.hpp"

#include <cmath>

namespace plhn {
namespace {

template <typename T>
T sigmoid(T z) {
  return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(z))));
}

template <typename T>
Tensor<T> sigmoid_grad(const Tensor<T>& dp, const Tensor<T>& p) {
  Tensor<T> dz(p.shape());
  for (Index i = 0; i < p.numel(); ++i) dz[i] = dp[i] * p[i] * (T(1) - p[i]);
  return dz;
}

template <typename M, typename T>
void collect(M& m, std::vector<nn::Param<T>*>& out) {
  if (m) m->collect_params(out);
}

}  // namespace

ActiveParts active_parts(const NetworkConfig& cfg, int stage) {
  ActiveParts a;
  const bool late = stage != 1 || !cfg.flags.two_stage;
  a.transformer = late && cfg.flags.use_transformer;
  a.prototypes = late && cfg.flags.use_prototypes;
  return a;
}

template <typename T>
HybridNet<T>::HybridNet(const NetworkConfig& cfg) : cfg_(cfg) {
  require_valid(cfg);
  const Index M = cfg.M, Hs = cfg.Hs;
  const double sl = cfg.leaky_slope, bm = cfg.bn_momentum, be = cfg.bn_eps;
  auto block = [&](const std::string& n, Index ci, Index co, Index s) {
    return std::make_unique<nn::ConvBlock<T>>(n, ci, co, s, sl, bm, be);
  };
  // Encoder-1: stride 2 in the second block of each stage.
  encoder1.push_back(block("encoder1.0", 2, M, 1));
  encoder1.push_back(block("encoder1.1", M, M, 2));
  encoder1.push_back(block("encoder1.2", M, 2 * M, 1));
  encoder1.push_back(block("encoder1.3", 2 * M, 2 * M, 2));
  encoder1.push_back(block("encoder1.4", 2 * M, Hs, 1));
  encoder1.push_back(block("encoder1.5", Hs, Hs, 2));
  if (cfg.flags.use_encoder2) {
    // Encoder-2: stride 2 leads each stage.
    encoder2.push_back(block("encoder2.0", 2, M, 2));
    encoder2.push_back(block("encoder2.1", M, M, 1));
    encoder2.push_back(block("encoder2.2", M, 2 * M, 2));
    encoder2.push_back(block("encoder2.3", 2 * M, 2 * M, 1));
    encoder2.push_back(block("encoder2.4", 2 * M, 4 * M, 2));
    encoder2.push_back(block("encoder2.5", 4 * M, 4 * M, 1));
  }
  if (cfg.has_embedding()) {
    const Index ci = cfg.flags.use_encoder2 ? 4 * M : Hs;
    embed = std::make_unique<nn::Linear<T>>("embed", ci, Hs);
  }
  if (cfg.flags.use_transformer)
    for (int t = 0; t < cfg.T; ++t)
      blocks.push_back(std::make_unique<nn::TransformerBlock<T>>("transformer." + std::to_string(t), Hs,
                                                                 cfg.num_heads(), cfg.Ws, cfg.mlp_ratio));
  const Index d1_in = cfg.has_embedding() ? 2 * Hs : Hs;
  dec1 = std::make_unique<nn::DeconvBlock<T>>("decoder.0", d1_in, 2 * M, 3, 1, 1, sl, bm, be);
  dec2 = std::make_unique<nn::DeconvBlock<T>>("decoder.1", 4 * M, M, 2, 0, 0, sl, bm, be);
  dec3 = std::make_unique<nn::DeconvBlock<T>>("decoder.2", 2 * M, M, 2, 0, 0, sl, bm, be);
  head = std::make_unique<nn::Conv3d<T>>("head", M, 1, 1, 1, 0);
  if (cfg.flags.use_prototypes) proto = std::make_unique<PrototypeHead<T>>(cfg);
}

template <typename T>
void HybridNet<T>::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto* p : params()) nn::init_param(*p, rng);
  for (auto* b : buffers()) b->value.fill(b->init_value);
}

template <typename T>
void HybridNet<T>::set_training(bool on) {
  for (auto& b : encoder1) b->set_training(on);
  for (auto& b : encoder2) b->set_training(on);
  dec1->set_training(on);
  dec2->set_training(on);
  dec3->set_training(on);
}

template <typename T>
FeaturePyramid<T> HybridNet<T>::encoder1_forward(const Tensor<T>& x) {
  FeaturePyramid<T> f;
  Tensor<T> h = encoder1[0]->forward(x);
  f.f1_1 = encoder1[1]->forward(h);
  h = encoder1[2]->forward(f.f1_1);
  f.f1_2 = encoder1[3]->forward(h);
  h = encoder1[4]->forward(f.f1_2);
  f.f1_3 = encoder1[5]->forward(h);
  return f;
}

template <typename T>
Tensor<T> HybridNet<T>::encoder2_forward(const Tensor<T>& x) {
  if (encoder2.empty()) throw ConfigError("encoder-2 is disabled in this configuration");
  Tensor<T> h = x;
  for (auto& b : encoder2) h = b->forward(h);
  return h;
}

template <typename T>
Tensor<T> HybridNet<T>::linear_embed(const Tensor<T>& f) {
  if (!embed) throw ConfigError("linear embedding is disabled in this configuration");
  return embed->forward(nn::to_tokens(f));
}

template <typename T>
Tensor<T> HybridNet<T>::transformer_forward(const Tensor<T>& tokens, const Dims3& grid) {
  Tensor<T> t = tokens;
  for (auto& b : blocks) t = b->forward(t, grid);
  return t;
}

template <typename T>
Tensor<T> HybridNet<T>::decoder_forward(const FeaturePyramid<T>& skips, const Tensor<T>* bottleneck) {
  const bool want = embed != nullptr;
  if (want != (bottleneck != nullptr))
    throw InvalidInputError(want ? "decoder expects a bottleneck feature" : "decoder takes no bottleneck feature");
  if (bottleneck && shape5(*bottleneck).dims() != shape5(skips.f1_3).dims())
    throw InvalidInputError("bottleneck " + bottleneck->shape_str() + " does not match f1_3 " + skips.f1_3.shape_str());
  Tensor<T> d = dec1->forward(bottleneck ? concat_channels(skips.f1_3, *bottleneck) : skips.f1_3);
  if (shape5(d).dims() != shape5(skips.f1_2).dims())
    throw InvalidInputError("skip f1_2 " + skips.f1_2.shape_str() + " does not match decoder " + d.shape_str());
  d = dec2->forward(concat_channels(d, skips.f1_2));
  if (shape5(d).dims() != shape5(skips.f1_1).dims())
    throw InvalidInputError("skip f1_1 " + skips.f1_1.shape_str() + " does not match decoder " + d.shape_str());
  return dec3->forward(concat_channels(d, skips.f1_1));
}

template <typename T>
Tensor<T> HybridNet<T>::seg_head(const Tensor<T>& pi) {
  Tensor<T> z = head->forward(pi);
  for (Index i = 0; i < z.numel(); ++i) z[i] = sigmoid(z[i]);
  return z;
}

template <typename T>
SegmentationOutputs<T> HybridNet<T>::forward(const Tensor<T>& x, const ActiveParts& act, PrototypeBank* bank,
                                             const FeatureHook& hook) {
  const Shape5 s = shape5(x);
  if (s.c != 2) throw InvalidInputError("network input must have 2 channels, got " + x.shape_str());
  if (auto v = check_patch_dims(s.dims(), cfg_.Ws); !v.empty())
    throw ConfigError("input " + s.dims().str() + ": " + v.front().message);
  act_ = act;
  act_.transformer = act.transformer && !blocks.empty();
  act_.prototypes = act.prototypes && proto != nullptr;
  batch_ = s.n;

  const FeaturePyramid<T> f = encoder1_forward(x);
  grid_ = shape5(f.f1_3).dims();
  Tensor<T> bottleneck;
  if (embed) {
    Tensor<T> tok = linear_embed(encoder2.empty() ? f.f1_3 : encoder2_forward(x));
    if (act_.transformer) tok = transformer_forward(tok, grid_);
    bottleneck = nn::from_tokens(tok, batch_, grid_);
  }
  SegmentationOutputs<T> out;
  out.pi = decoder_forward(f, embed ? &bottleneck : nullptr);
  out.x = normalize_channels(out.pi, &norms_);
  out.p1 = seg_head(out.pi);
  ran_proto_ = false;
  if (act_.prototypes) {
    if (!bank) throw InvalidInputError("prototype head is active but no prototype bank was given");
    if (hook) hook(out.x);
    if (!bank->initialized) throw InvalidInputError("prototype bank is not initialized");
    auto o = proto->forward(out.pi, out.x, bank->matrix<T>());
    out.s = std::move(o.S);
    out.pf = std::move(o.pf);
    ran_proto_ = true;
  }
  p1_ = out.p1;
  x_ = out.x;
  return out;
}

template <typename T>
void HybridNet<T>::backward(const Tensor<T>& dp1, const Tensor<T>& dpf, const Tensor<T>& dS_extra) {
  Tensor<T> dpi = head->backward(dp1.empty() ? Tensor<T>(p1_.shape()) : sigmoid_grad(dp1, p1_));
  if (ran_proto_) {
    Tensor<T> dpf_ = dpf.empty() ? Tensor<T>(p1_.shape()) : dpf;
    auto g = proto->backward(dpf_, dS_extra);
    if (!g.dPi.empty()) add_inplace(dpi, g.dPi);
    add_inplace(dpi, normalize_channels_backward(x_, norms_, g.dX));
  }
  Tensor<T> a, b;
  split_channels(dec3->backward(dpi), cfg_.M, a, b);
  const Tensor<T> df1_1 = std::move(b);
  split_channels(dec2->backward(a), 2 * cfg_.M, a, b);
  const Tensor<T> df1_2 = std::move(b);
  const Tensor<T> dcat1 = dec1->backward(a);
  Tensor<T> df1_3;
  if (embed) {
    split_channels(dcat1, cfg_.Hs, df1_3, b);
    Tensor<T> dtok = nn::to_tokens(b);
    if (act_.transformer)
      for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) dtok = (*it)->backward(dtok);
    Tensor<T> dsrc = nn::from_tokens(embed->backward(dtok), batch_, grid_);
    if (!encoder2.empty()) {
      for (auto it = encoder2.rbegin(); it != encoder2.rend(); ++it) dsrc = (*it)->backward(dsrc);
    } else {
      add_inplace(df1_3, dsrc);
    }
  } else {
    df1_3 = dcat1;
  }
  Tensor<T> g = encoder1[5]->backward(df1_3);
  g = encoder1[4]->backward(g);
  add_inplace(g, df1_2);
  g = encoder1[3]->backward(g);
  g = encoder1[2]->backward(g);
  add_inplace(g, df1_1);
  g = encoder1[1]->backward(g);
  encoder1[0]->backward(g);
}

template <typename T>
std::vector<nn::Param<T>*> HybridNet<T>::transformer_params() {
  std::vector<nn::Param<T>*> out;
  for (auto& b : blocks) b->collect_params(out);
  return out;
}

template <typename T>
std::vector<nn::Param<T>*> HybridNet<T>::prototype_params() {
  std::vector<nn::Param<T>*> out;
  collect(proto, out);
  return out;
}

template <typename T>
std::vector<nn::Param<T>*> HybridNet<T>::params(const ActiveParts& act) {
  std::vector<nn::Param<T>*> out;
  for (auto& b : encoder1) b->collect_params(out);
  for (auto& b : encoder2) b->collect_params(out);
  collect(embed, out);
  if (act.transformer)
    for (auto& b : blocks) b->collect_params(out);
  dec1->collect_params(out);
  dec2->collect_params(out);
  dec3->collect_params(out);
  head->collect_params(out);
  if (act.prototypes) collect(proto, out);
  return out;
}

template <typename T>
std::vector<nn::Param<T>*> HybridNet<T>::params() {
  return params(ActiveParts{true, true});
}

template <typename T>
std::vector<nn::Param<T>*> HybridNet<T>::buffers() {
  std::vector<nn::Param<T>*> out;
  for (auto& b : encoder1) b->collect_buffers(out);
  for (auto& b : encoder2) b->collect_buffers(out);
  dec1->collect_buffers(out);
  dec2->collect_buffers(out);
  dec3->collect_buffers(out);
  return out;
}

template <typename T>
void HybridNet<T>::zero_grad() {
  for (auto* p : params()) p->grad.zero();
}

template class HybridNet<float>;
template class HybridNet<double>;

// ---- complexity ---------------------------------------------------------------

namespace {

double conv_flops(Index cin, Index cout, Index k, Index out_vox) {
  return 2.0 * static_cast<double>(cin * cout * k * k * k) * static_cast<double>(out_vox);
}
std::int64_t conv_block_params(Index cin, Index cout, Index k) { return cin * cout * k * k * k + cout + 2 * cout; }

Index vox(const Dims3& d, Index f) { return (d.h / f) * (d.w / f) * (d.z / f); }

}  // namespace

std::vector<ModuleCost> cost_table(const NetworkConfig& cfg, const Dims3& d) {
  require_valid(cfg);
  const Index M = cfg.M, Hs = cfg.Hs;
  std::vector<ModuleCost> rows;

  ModuleCost e1{"encoder1"};
  const Index e1c[6][3] = {{2, M, 1}, {M, M, 2}, {M, 2 * M, 2}, {2 * M, 2 * M, 4}, {2 * M, Hs, 4}, {Hs, Hs, 8}};
  for (auto& b : e1c) {
    e1.params += conv_block_params(b[0], b[1], 3);
    e1.flops += conv_flops(b[0], b[1], 3, vox(d, b[2]));
  }
  rows.push_back(e1);

  if (cfg.flags.use_encoder2) {
    ModuleCost e2{"encoder2"};
    const Index e2c[6][3] = {{2, M, 2}, {M, M, 2}, {M, 2 * M, 4}, {2 * M, 2 * M, 4}, {2 * M, 4 * M, 8}, {4 * M, 4 * M, 8}};
    for (auto& b : e2c) {
      e2.params += conv_block_params(b[0], b[1], 3);
      e2.flops += conv_flops(b[0], b[1], 3, vox(d, b[2]));
    }
    rows.push_back(e2);
  }
  const Index L = vox(d, 8);
  if (cfg.has_embedding()) {
    const Index ci = cfg.flags.use_encoder2 ? 4 * M : Hs;
    rows.push_back({"embed", ci * Hs + Hs, 2.0 * static_cast<double>(ci * Hs * L)});
  }
  if (cfg.flags.use_transformer) {
    const Index r = cfg.mlp_ratio;
    const Index n = static_cast<Index>(cfg.Ws) * cfg.Ws * cfg.Ws;
    ModuleCost tr{"transformer"};
    const std::int64_t per = 4 * Hs + (3 * Hs * Hs + 3 * Hs) + (Hs * Hs + Hs) + (r * Hs * Hs + r * Hs) + (r * Hs * Hs + Hs);
    tr.params = per * cfg.T;
    const double lin = 2.0 * static_cast<double>(3 * Hs * Hs + Hs * Hs + 2 * r * Hs * Hs) * static_cast<double>(L);
    const double att = 2.0 * 2.0 * static_cast<double>(L * n * Hs);  // scores + value mixing
    tr.flops = (lin + att) * cfg.T;
    rows.push_back(tr);
  }
  ModuleCost dec{"decoder"};
  const Index d1_in = cfg.has_embedding() ? 2 * Hs : Hs;
  dec.params = conv_block_params(d1_in, 2 * M, 3) + conv_block_params(4 * M, M, 2) + conv_block_params(2 * M, M, 2);
  // transpose conv cost scales with input voxels
  dec.flops = conv_flops(d1_in, 2 * M, 3, vox(d, 8)) + conv_flops(4 * M, M, 2, vox(d, 4)) + conv_flops(2 * M, M, 2, vox(d, 2));
  rows.push_back(dec);
  rows.push_back({"seg_head", M + 1, 2.0 * static_cast<double>(M * d.count())});

  if (cfg.flags.use_prototypes) {
    const Index CK = cfg.slots(), hid = cfg.dn_width();
    const double V = static_cast<double>(d.count());
    if (cfg.distance == DistanceKind::Learned) {
      // Dn evaluated on [x, mu] for every (voxel, prototype) pair
      rows.push_back({"proto.dn", 2 * M * hid + hid + hid + 1,
                      2.0 * static_cast<double>(CK * (2 * M * hid + hid)) * V});
    } else {
      rows.push_back({"proto.cosine", 0, 2.0 * static_cast<double>(CK * M) * V});
    }
    if (cfg.flags.use_fusion) rows.push_back({"proto.attention", 0, 2.0 * 2.0 * static_cast<double>(CK * M) * V});
    rows.push_back({"proto.fuse", (M + CK) * 27 + 1, conv_flops(M + CK, 1, 3, d.count())});
  }
  return rows;
}

std::int64_t count_parameters(const NetworkConfig& cfg) {
  std::int64_t n = 0;
  for (const auto& r : cost_table(cfg, cfg.patch_dims)) n += r.params;
  return n;
}

double estimate_flops(const NetworkConfig& cfg, const Dims3& input_dims) {
  double f = 0.0;
  for (const auto& r : cost_table(cfg, input_dims)) f += r.flops;
  return f;
}

}  // namespace plhn
