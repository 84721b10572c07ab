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

#include <doctest.h>

#include <random>

#include "gradcheck.hpp"
#include "nn/layers.hpp"

using namespace plhn;
using namespace plhn::nn;
using plhn::test::dot;
using plhn::test::max_rel_error;
using plhn::test::random_tensor;

namespace {

template <typename Layer>
void init_all(Layer& layer, std::uint64_t seed) {
  std::vector<Param<double>*> ps;
  layer.collect_params(ps);
  std::mt19937_64 rng(seed);
  for (auto* p : ps) {
    init_param(*p, rng);
    // perturb constant-initialized params so their gradients are exercised
    if (!p->xavier()) {
      std::normal_distribution<double> n(0.0, 0.1);
      for (Index i = 0; i < p->value.numel(); ++i) p->value[i] += n(rng);
    }
  }
}

// Naive direct convolution: y[o, p] = b[o] + sum w[o, c, a, b, c'] * x[c, p*s + tap - pad].
Tensor<double> naive_conv(const Tensor<double>& x, const Conv3d<double>& conv) {
  const Shape5 s = shape5(x);
  const Dims3 od = conv.output_dims(s.dims());
  Tensor<double> y = make5<double>(s.n, conv.cout, od);
  const Index k = conv.k;
  for (Index n = 0; n < s.n; ++n)
    for (Index o = 0; o < conv.cout; ++o)
      for (Index i = 0; i < od.h; ++i)
        for (Index j = 0; j < od.w; ++j)
          for (Index l = 0; l < od.z; ++l) {
            double acc = conv.bias.value[o];
            for (Index c = 0; c < s.c; ++c)
              for (Index a = 0; a < k; ++a)
                for (Index b = 0; b < k; ++b)
                  for (Index d = 0; d < k; ++d) {
                    const Index ih = i * conv.stride + a - conv.pad;
                    const Index iw = j * conv.stride + b - conv.pad;
                    const Index iz = l * conv.stride + d - conv.pad;
                    if (ih < 0 || iw < 0 || iz < 0 || ih >= s.h || iw >= s.w || iz >= s.z) continue;
                    acc += conv.weight.value[(((o * s.c + c) * k + a) * k + b) * k + d] *
                           x[(((n * s.c + c) * s.h + ih) * s.w + iw) * s.z + iz];
                  }
            y[(((n * conv.cout + o) * od.h + i) * od.w + j) * od.z + l] = acc;
          }
  return y;
}

// Scatter form of the transpose convolution: each input voxel spreads its kernel.
Tensor<double> naive_tconv(const Tensor<double>& x, const ConvTranspose3d<double>& tc) {
  const Shape5 s = shape5(x);
  const Dims3 od = tc.output_dims(s.dims());
  Tensor<double> y = make5<double>(s.n, tc.cout, od);
  const Index k = tc.k;
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index i = 0; i < s.h; ++i)
        for (Index j = 0; j < s.w; ++j)
          for (Index l = 0; l < s.z; ++l) {
            const double v = x[(((n * s.c + c) * s.h + i) * s.w + j) * s.z + l];
            for (Index o = 0; o < tc.cout; ++o)
              for (Index a = 0; a < k; ++a)
                for (Index b = 0; b < k; ++b)
                  for (Index d = 0; d < k; ++d) {
                    const Index oh = i * tc.stride + a - tc.pad;
                    const Index ow = j * tc.stride + b - tc.pad;
                    const Index oz = l * tc.stride + d - tc.pad;
                    if (oh < 0 || ow < 0 || oz < 0 || oh >= od.h || ow >= od.w || oz >= od.z) continue;
                    y[(((n * tc.cout + o) * od.h + oh) * od.w + ow) * od.z + oz] +=
                        v * tc.weight.value[(((c * tc.cout + o) * k + a) * k + b) * k + d];
                  }
          }
  for (Index n = 0; n < s.n; ++n)
    for (Index o = 0; o < tc.cout; ++o)
      for (Index i = 0; i < od.count(); ++i) y[(n * tc.cout + o) * od.count() + i] += tc.bias.value[o];
  return y;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Checks input and parameter gradients of a single-input layer against finite differences.
template <typename Layer, typename Fwd>
void check_layer_grads(Layer& layer, Tensor<double> x, Fwd fwd) {
  Tensor<double> y0 = fwd(layer, x);
  const Tensor<double> r = random_tensor(y0.shape(), 99);
  std::vector<Param<double>*> ps;
  layer.collect_params(ps);
  for (auto* p : ps) p->grad.zero();
  const Tensor<double> dx = layer.backward(r);
  auto loss = [&] { return dot(fwd(layer, x), r); };
  CHECK(max_rel_error(x, dx, loss) < 1e-5);
  for (auto* p : ps) {
    INFO(p->name);
    CHECK(max_rel_error(p->value, p->grad, loss) < 1e-5);
  }
}

}  // namespace

TEST_CASE("conv3d matches a direct loop and its output size contract") {
  for (Index stride : {1, 2}) {
    Conv3d<double> conv("c", 3, 4, 3, stride, 1);
    init_all(conv, 1);
    const Tensor<double> x = random_tensor({2, 3, 6, 4, 8}, 2);
    const Tensor<double> y = conv.forward(x);
    CHECK(max_abs_diff(y, naive_conv(x, conv)) < 1e-12);
    CHECK(y.dim(2) == 6 / stride);
    CHECK(y.dim(4) == 8 / stride);
  }
  Conv3d<double> pw("p", 5, 2, 1, 1, 0);
  init_all(pw, 3);
  const Tensor<double> x = random_tensor({1, 5, 3, 3, 2}, 4);
  CHECK(max_abs_diff(pw.forward(x), naive_conv(x, pw)) < 1e-12);
}

TEST_CASE("transpose conv matches the scatter definition and doubles the grid") {
  struct Geo { Index k, p, op; };
  for (Geo g : {Geo{3, 1, 1}, Geo{2, 0, 0}}) {
    ConvTranspose3d<double> tc("t", 3, 2, g.k, 2, g.p, g.op);
    init_all(tc, 5);
    const Tensor<double> x = random_tensor({2, 3, 3, 2, 4}, 6);
    const Tensor<double> y = tc.forward(x);
    CHECK(y.dim(2) == 6);
    CHECK(y.dim(3) == 4);
    CHECK(y.dim(4) == 8);
    CHECK(max_abs_diff(y, naive_tconv(x, tc)) < 1e-12);
  }
}

TEST_CASE("layer gradients match central differences") {
  auto plain = [](auto& l, const Tensor<double>& x) { return l.forward(x); };
  SUBCASE("conv stride 1 and 2") {
    Conv3d<double> c1("c1", 2, 3, 3, 1, 1);
    init_all(c1, 11);
    check_layer_grads(c1, random_tensor({2, 2, 4, 3, 4}, 12), plain);
    Conv3d<double> c2("c2", 2, 3, 3, 2, 1);
    init_all(c2, 13);
    check_layer_grads(c2, random_tensor({1, 2, 4, 4, 6}, 14), plain);
  }
  SUBCASE("transpose conv") {
    ConvTranspose3d<double> t1("t1", 3, 2, 3, 2, 1, 1);
    init_all(t1, 15);
    check_layer_grads(t1, random_tensor({2, 3, 2, 3, 2}, 16), plain);
    ConvTranspose3d<double> t2("t2", 3, 2, 2, 2, 0, 0);
    init_all(t2, 17);
    check_layer_grads(t2, random_tensor({1, 3, 2, 2, 3}, 18), plain);
  }
  SUBCASE("batch norm, train and eval modes") {
    BatchNorm3d<double> bn("bn", 3, 0.1, 1e-5);
    init_all(bn, 19);
    check_layer_grads(bn, random_tensor({2, 3, 2, 3, 2}, 20), plain);
    bn.set_training(false);
    check_layer_grads(bn, random_tensor({2, 3, 2, 3, 2}, 21), plain);
  }
  SUBCASE("conv block and deconv block") {
    ConvBlock<double> cb("cb", 2, 3, 2, 0.01, 0.1, 1e-5);
    init_all(cb, 22);
    check_layer_grads(cb, random_tensor({2, 2, 4, 4, 2}, 23), plain);
    DeconvBlock<double> db("db", 3, 2, 2, 0, 0, 0.01, 0.1, 1e-5);
    init_all(db, 24);
    check_layer_grads(db, random_tensor({2, 3, 2, 2, 2}, 25), plain);
  }
  SUBCASE("token layers") {
    Linear<double> lin("lin", 5, 4);
    init_all(lin, 26);
    check_layer_grads(lin, random_tensor({7, 5}, 27), plain);
    LayerNorm<double> ln("ln", 6);
    init_all(ln, 28);
    check_layer_grads(ln, random_tensor({5, 6}, 29), plain);
  }
  SUBCASE("window attention and transformer block") {
    const Dims3 grid{4, 2, 2};
    auto with_grid = [grid](auto& l, const Tensor<double>& x) { return l.forward(x, grid); };
    WindowAttention<double> att("att", 8, 2, 2);
    init_all(att, 30);
    check_layer_grads(att, random_tensor({2 * grid.count(), 8}, 31), with_grid);
    TransformerBlock<double> blk("blk", 8, 2, 2, 4);
    init_all(blk, 32);
    check_layer_grads(blk, random_tensor({grid.count(), 8}, 33), with_grid);
  }
}

TEST_CASE("gelu gradient") {
  Gelu<double> g;
  Tensor<double> x = random_tensor({10}, 40, 2.0);
  const Tensor<double> r = random_tensor({10}, 41);
  g.forward(x);
  const Tensor<double> dx = g.backward(r);
  CHECK(max_rel_error(x, dx, [&] { return dot(g.forward(x), r); }) < 1e-6);
}

TEST_CASE("zero-weight transformer block is the identity") {
  TransformerBlock<double> blk("blk", 8, 2, 2, 4);
  std::vector<Param<double>*> ps;
  blk.collect_params(ps);
  for (auto* p : ps) p->value.zero();
  const Tensor<double> x = random_tensor({8, 8}, 50);
  CHECK(blk.forward(x, Dims3{2, 2, 2}) == x);
}

TEST_CASE("attention stays inside windows: permuting windows permutes outputs") {
  WindowAttention<double> att("att", 4, 1, 2);
  init_all(att, 60);
  const Dims3 grid{4, 2, 2};  // two windows along h
  const Tensor<double> x = random_tensor({grid.count(), 4}, 61);
  Tensor<double> swapped = x;
  const Index half = grid.count() / 2;  // window 0 = rows [0, 8), window 1 = [8, 16) in h-major order
  for (Index t = 0; t < half; ++t)
    for (Index c = 0; c < 4; ++c) std::swap(swapped[t * 4 + c], swapped[(t + half) * 4 + c]);
  const Tensor<double> y = att.forward(x, grid);
  const Tensor<double> ys = att.forward(swapped, grid);
  for (Index t = 0; t < half; ++t)
    for (Index c = 0; c < 4; ++c) {
      CHECK(ys[t * 4 + c] == doctest::Approx(y[(t + half) * 4 + c]).epsilon(1e-12));
      CHECK(ys[(t + half) * 4 + c] == doctest::Approx(y[t * 4 + c]).epsilon(1e-12));
    }
}

TEST_CASE("xavier bound for a 3x3x3 conv follows sqrt(6/(fan_in+fan_out))") {
  const Index M = 8;
  Conv3d<float> conv("c", M, M, 3, 1, 1);
  std::mt19937_64 rng(3);
  init_param(conv.weight, rng);
  const double bound = std::sqrt(6.0 / (27.0 * M + 27.0 * M));
  float mx = 0.0f;
  for (Index i = 0; i < conv.weight.value.numel(); ++i) mx = std::max(mx, std::abs(conv.weight.value[i]));
  CHECK(mx <= bound);
  CHECK(mx > 0.9 * bound);
}

TEST_CASE("token reshape round trip") {
  const Tensor<double> x = random_tensor({2, 3, 2, 2, 2}, 70);
  const Tensor<double> t = to_tokens(x);
  CHECK(t.dim(0) == 16);
  CHECK(t.dim(1) == 3);
  CHECK(from_tokens(t, 2, Dims3{2, 2, 2}) == x);
}
