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

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include <json.hpp>

#include "metrics.hpp"

using namespace plhn;

namespace {

Mask ball(Dims3 d, double ch, double cw, double cz, double r) {
  Mask m(d);
  for (Index h = 0; h < d.h; ++h)
    for (Index w = 0; w < d.w; ++w)
      for (Index z = 0; z < d.z; ++z) {
        const double dh = h - ch, dw = w - cw, dz = z - cz;
        m.at(h, w, z) = dh * dh + dw * dw + dz * dz <= r * r ? 1 : 0;
      }
  return m;
}

// O(|A||B|) reference.
SurfaceDistances brute(const Mask& a, const Mask& b, const Spacing& sp) {
  const auto sa = surface_voxels(a), sb = surface_voxels(b);
  std::vector<double> all;
  auto nearest = [&](const std::array<Index, 3>& p, const std::vector<std::array<Index, 3>>& set) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : set) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) {
        const double d = static_cast<double>(p[static_cast<std::size_t>(k)] - q[static_cast<std::size_t>(k)]) * sp[static_cast<std::size_t>(k)];
        s += d * d;
      }
      best = std::min(best, s);
    }
    return std::sqrt(best);
  };
  for (const auto& p : sa) all.push_back(nearest(p, sb));
  for (const auto& p : sb) all.push_back(nearest(p, sa));
  double sum = 0.0;
  for (double v : all) sum += v;
  return {sum / static_cast<double>(all.size()), percentile_linear(all, 95.0)};
}

}  // namespace

TEST_CASE("overlap metrics") {
  Mask p({2, 2, 1}, 0), g({2, 2, 1}, 0);
  p[0] = p[1] = 1;
  g[1] = g[2] = 1;
  const auto m = overlap_metrics(p, g);
  CHECK(m.tp == 1);
  CHECK(m.fp == 1);
  CHECK(m.fn == 1);
  CHECK(*m.dsc == doctest::Approx(0.5));
  CHECK(*m.ppv == doctest::Approx(0.5));
  CHECK(*m.sen == doctest::Approx(0.5));

  const Mask e({2, 2, 1}, 0);
  const auto ee = overlap_metrics(e, e);
  CHECK(*ee.dsc == 1.0);
  CHECK_FALSE(ee.ppv.has_value());
  CHECK_FALSE(ee.sen.has_value());
  const auto pe = overlap_metrics(e, g);
  CHECK(*pe.dsc == 0.0);
  CHECK_FALSE(pe.ppv.has_value());
  CHECK(*pe.sen == 0.0);

  Mask bad({2, 2, 1}, 0);
  bad[0] = 2;
  CHECK_THROWS_AS(overlap_metrics(bad, g), InvalidInputError);
  CHECK_THROWS_AS(overlap_metrics(Mask({2, 2, 2}), g), InvalidInputError);
}

TEST_CASE("surface of a solid cube is its shell") {
  Mask m({5, 5, 5}, 0);
  for (Index h = 1; h < 4; ++h)
    for (Index w = 1; w < 4; ++w)
      for (Index z = 1; z < 4; ++z) m.at(h, w, z) = 1;
  CHECK(surface_voxels(m).size() == 26);
  CHECK(surface_mask(m).at(2, 2, 2) == 0);
}

TEST_CASE("exact anisotropic edt matches brute force") {
  std::mt19937_64 rng(3);
  const Dims3 d{9, 7, 6};
  Mask f(d, 0);
  for (int i = 0; i < 5; ++i) f.at(static_cast<Index>(rng() % 9), static_cast<Index>(rng() % 7), static_cast<Index>(rng() % 6)) = 1;
  const Spacing sp{0.7, 1.3, 2.5};
  const auto e = squared_edt(f, sp);
  for (Index h = 0; h < d.h; ++h)
    for (Index w = 0; w < d.w; ++w)
      for (Index z = 0; z < d.z; ++z) {
        double best = std::numeric_limits<double>::infinity();
        for (Index a = 0; a < d.h; ++a)
          for (Index b = 0; b < d.w; ++b)
            for (Index c = 0; c < d.z; ++c)
              if (f.at(a, b, c)) {
                const double x = (h - a) * sp[0], y = (w - b) * sp[1], q = (z - c) * sp[2];
                best = std::min(best, x * x + y * y + q * q);
              }
        CHECK(e[static_cast<std::size_t>(f.offset(h, w, z))] == doctest::Approx(best).epsilon(1e-12));
      }
  const auto inf = squared_edt(Mask(d, 0), sp);
  CHECK(std::isinf(inf[0]));
}

TEST_CASE("surface distances agree with the all-pairs oracle") {
  const Dims3 d{24, 22, 14};
  const Mask a = ball(d, 11, 10, 6, 6), b = ball(d, 13, 9, 7, 5);
  for (const Spacing sp : {Spacing{1, 1, 1}, Spacing{0.8, 0.8, 2.0}}) {
    const auto fast = surface_distances(a, b, sp), ref = brute(a, b, sp);
    CHECK(*fast.asd_mm == doctest::Approx(*ref.asd_mm).epsilon(1e-9));
    CHECK(*fast.hd95_mm == doctest::Approx(*ref.hd95_mm).epsilon(1e-9));
  }
  const auto same = surface_distances(a, a, {1, 1, 1});
  CHECK(*same.asd_mm == 0.0);
  CHECK(*same.hd95_mm == 0.0);
  CHECK_FALSE(surface_distances(a, Mask(d, 0), {1, 1, 1}).asd_mm.has_value());
}

TEST_CASE("single voxels at a known distance") {
  const Dims3 d{10, 10, 10};
  Mask a(d, 0), b(d, 0);
  a.at(1, 1, 1) = 1;
  b.at(4, 5, 1) = 1;
  const auto s = surface_distances(a, b, {1, 1, 2});
  CHECK(*s.asd_mm == doctest::Approx(5.0));
  CHECK(*s.hd95_mm == doctest::Approx(5.0));
}

TEST_CASE("percentile interpolation") {
  CHECK(percentile_linear({1, 2, 3, 4, 5}, 95.0) == doctest::Approx(4.8));
  CHECK(percentile_linear({3}, 95.0) == 3.0);
  CHECK_THROWS_AS(percentile_linear({}, 50.0), InvalidInputError);
}

TEST_CASE("aggregate and reports") {
  std::vector<CaseMetrics> rows{{"a", 0.8, 0.9, 0.7, 1.0, 2.0}, {"b", 0.6, std::nullopt, 0.5, 3.0, 4.0}};
  const auto r = aggregate(rows);
  REQUIRE(r.aggregates.size() == 5);
  const auto& dsc = r.aggregates[0];
  CHECK(dsc.mean == doctest::Approx(0.7));
  CHECK(dsc.half_width == doctest::Approx(1.96 * std::sqrt(0.02) / std::sqrt(2.0)));
  CHECK(r.aggregates[1].n == 1);
  CHECK(r.aggregates[1].missing == 1);
  CHECK(r.aggregates[1].half_width == 0.0);
  const auto j = nlohmann::json::parse(report_json(r));
  CHECK(j["cases"][1]["ppv"].is_null());
  CHECK(j["aggregate"]["dsc"]["n"] == 2);
  const std::string csv = report_csv(r);
  CHECK(csv.find("case_id,dsc,ppv,sen,asd_mm,hd95_mm") != std::string::npos);
  CHECK(csv.find("b,0.6,,0.5,3,4") != std::string::npos);
}

TEST_CASE("overlays are written for foreground slices") {
  const Dims3 d{12, 12, 6};
  const Mask g = ball(d, 6, 6, 3, 2), p = ball(d, 6, 7, 3, 2);
  Volume img(d, 0.0f);
  for (Index i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i % 17);
  const auto dir = std::filesystem::temp_directory_path() / "plhn_overlay_test";
  std::filesystem::remove_all(dir);
  const auto files = write_overlays(p, g, &img, dir.string(), "case");
  CHECK(files.size() == 5);
  for (const auto& f : files) CHECK(std::filesystem::file_size(f) > 0);
  std::filesystem::remove_all(dir);
}
