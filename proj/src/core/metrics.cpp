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

#include "metrics.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace plhn {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_binary(const Mask& m, const char* what) {
  for (auto v : m.data())
    if (v > 1) throw InvalidInputError(std::string(what) + " mask is not binary");
}

// 1-D squared distance transform along a line of n samples with spacing s, in place.
void edt_line(double* f, Index n, Index step, double s, std::vector<double>& buf, std::vector<Index>& v,
              std::vector<double>& z) {
  buf.resize(static_cast<std::size_t>(n));
  v.resize(static_cast<std::size_t>(n));
  z.resize(static_cast<std::size_t>(n) + 1);
  for (Index i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] = f[i * step];
  Index k = -1;
  for (Index q = 0; q < n; ++q) {
    const double fq = buf[static_cast<std::size_t>(q)];
    if (fq == kInf) continue;
    const double xq = static_cast<double>(q) * s;
    double zi = -kInf;
    while (k >= 0) {
      const Index p = v[static_cast<std::size_t>(k)];
      const double xp = static_cast<double>(p) * s;
      zi = ((fq + xq * xq) - (buf[static_cast<std::size_t>(p)] + xp * xp)) / (2.0 * (xq - xp));
      if (zi > z[static_cast<std::size_t>(k)]) break;
      --k;
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = k == 0 ? -kInf : zi;
    z[static_cast<std::size_t>(k) + 1] = kInf;
  }
  if (k < 0) return;  // no finite samples: line stays at infinity
  Index j = 0;
  for (Index i = 0; i < n; ++i) {
    const double xi = static_cast<double>(i) * s;
    while (z[static_cast<std::size_t>(j) + 1] < xi) ++j;
    const Index p = v[static_cast<std::size_t>(j)];
    const double dx = xi - static_cast<double>(p) * s;
    f[i * step] = dx * dx + buf[static_cast<std::size_t>(p)];
  }
}

void write_png(const std::string& path, Index width, Index height, const std::vector<unsigned char>& rgb) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("libpng failed writing " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (Index r = 0; r < height; ++r)
    png_write_row(png, const_cast<png_bytep>(rgb.data() + r * width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::string fmt(const std::optional<double>& v) {
  if (!v) return "";
  char b[64];
  std::snprintf(b, sizeof b, "%.9g", *v);
  return b;
}

}  // namespace

OverlapMetrics overlap_metrics(const Mask& pred, const Mask& gt) {
  if (pred.dims() != gt.dims())
    throw InvalidInputError("prediction " + pred.dims().str() + " and ground truth " + gt.dims().str() + " differ");
  check_binary(pred, "prediction");
  check_binary(gt, "ground-truth");
  OverlapMetrics m;
  for (Index i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    m.tp += p && g;
    m.fp += p && !g;
    m.fn += !p && g;
  }
  const double tp = static_cast<double>(m.tp), fp = static_cast<double>(m.fp), fn = static_cast<double>(m.fn);
  m.dsc = (m.tp + m.fp + m.fn) == 0 ? 1.0 : 2.0 * tp / (2.0 * tp + fp + fn);
  if (m.tp + m.fp > 0) m.ppv = tp / (tp + fp);
  if (m.tp + m.fn > 0) m.sen = tp / (tp + fn);
  return m;
}

Mask surface_mask(const Mask& m) {
  const Dims3 d = m.dims();
  Mask s(d);
  for (Index h = 0; h < d.h; ++h)
    for (Index w = 0; w < d.w; ++w)
      for (Index z = 0; z < d.z; ++z) {
        if (!m.at(h, w, z)) continue;
        const bool edge = h == 0 || w == 0 || z == 0 || h == d.h - 1 || w == d.w - 1 || z == d.z - 1 ||
                          !m.at(h - 1, w, z) || !m.at(h + 1, w, z) || !m.at(h, w - 1, z) || !m.at(h, w + 1, z) ||
                          !m.at(h, w, z - 1) || !m.at(h, w, z + 1);
        s.at(h, w, z) = edge ? 1 : 0;
      }
  return s;
}

std::vector<std::array<Index, 3>> surface_voxels(const Mask& m) {
  const Mask s = surface_mask(m);
  const Dims3 d = m.dims();
  std::vector<std::array<Index, 3>> out;
  for (Index h = 0; h < d.h; ++h)
    for (Index w = 0; w < d.w; ++w)
      for (Index z = 0; z < d.z; ++z)
        if (s.at(h, w, z)) out.push_back({h, w, z});
  return out;
}

std::vector<double> squared_edt(const Mask& feature, const Spacing& sp) {
  const Dims3 d = feature.dims();
  std::vector<double> f(static_cast<std::size_t>(d.count()));
  for (Index i = 0; i < d.count(); ++i) f[static_cast<std::size_t>(i)] = feature[i] ? 0.0 : kInf;
  std::vector<double> buf, zb;
  std::vector<Index> v;
  for (Index h = 0; h < d.h; ++h)
    for (Index w = 0; w < d.w; ++w) edt_line(f.data() + (h * d.w + w) * d.z, d.z, 1, sp[2], buf, v, zb);
  for (Index h = 0; h < d.h; ++h)
    for (Index z = 0; z < d.z; ++z) edt_line(f.data() + h * d.w * d.z + z, d.w, d.z, sp[1], buf, v, zb);
  for (Index w = 0; w < d.w; ++w)
    for (Index z = 0; z < d.z; ++z) edt_line(f.data() + w * d.z + z, d.h, d.w * d.z, sp[0], buf, v, zb);
  return f;
}

double percentile_linear(std::vector<double> v, double q) {
  if (v.empty()) throw InvalidInputError("percentile of an empty set");
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

SurfaceDistances surface_distances(const std::vector<std::array<Index, 3>>& a,
                                   const std::vector<std::array<Index, 3>>& b, const Dims3& dims,
                                   const Spacing& spacing) {
  SurfaceDistances out;
  if (a.empty() || b.empty()) return out;
  auto to_mask = [&](const std::vector<std::array<Index, 3>>& pts) {
    Mask m(dims);
    for (const auto& p : pts) m.at(p[0], p[1], p[2]) = 1;
    return m;
  };
  const std::vector<double> da = squared_edt(to_mask(a), spacing);
  const std::vector<double> db = squared_edt(to_mask(b), spacing);
  const Mask probe(dims);
  std::vector<double> pooled;
  pooled.reserve(a.size() + b.size());
  for (const auto& p : a) pooled.push_back(std::sqrt(db[static_cast<std::size_t>(probe.offset(p[0], p[1], p[2]))]));
  for (const auto& p : b) pooled.push_back(std::sqrt(da[static_cast<std::size_t>(probe.offset(p[0], p[1], p[2]))]));
  double sum = 0.0;
  for (double x : pooled) sum += x;
  out.asd_mm = sum / static_cast<double>(pooled.size());
  out.hd95_mm = percentile_linear(std::move(pooled), 95.0);
  return out;
}

SurfaceDistances surface_distances(const Mask& a, const Mask& b, const Spacing& spacing) {
  if (a.dims() != b.dims()) throw InvalidInputError("surface_distances: mask shapes differ");
  return surface_distances(surface_voxels(a), surface_voxels(b), a.dims(), spacing);
}

CaseMetrics evaluate_case(const std::string& id, const Mask& pred, const Mask& gt, const Spacing& spacing) {
  const OverlapMetrics o = overlap_metrics(pred, gt);
  const SurfaceDistances s = surface_distances(pred, gt, spacing);
  return {id, o.dsc, o.ppv, o.sen, s.asd_mm, s.hd95_mm};
}

MetricsReport aggregate(std::vector<CaseMetrics> rows) {
  MetricsReport r;
  r.rows = std::move(rows);
  using Getter = std::optional<double> CaseMetrics::*;
  const std::pair<const char*, Getter> cols[] = {{"dsc", &CaseMetrics::dsc},
                                                 {"ppv", &CaseMetrics::ppv},
                                                 {"sen", &CaseMetrics::sen},
                                                 {"asd_mm", &CaseMetrics::asd_mm},
                                                 {"hd95_mm", &CaseMetrics::hd95_mm}};
  for (const auto& [name, g] : cols) {
    Aggregate a;
    a.metric = name;
    std::vector<double> v;
    for (const auto& row : r.rows) {
      if ((row.*g).has_value()) v.push_back(*(row.*g));
      else ++a.missing;
    }
    a.n = static_cast<std::int64_t>(v.size());
    if (!v.empty()) {
      double s = 0.0;
      for (double x : v) s += x;
      a.mean = s / static_cast<double>(v.size());
      if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - a.mean) * (x - a.mean);
        a.half_width = 1.96 * std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
      }
    }
    r.aggregates.push_back(a);
  }
  return r;
}

std::string report_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << "# surface: 6-connected boundary voxels, voxel-centre distances in mm; hd95: linear-interpolated percentile\n";
  os << "case_id,dsc,ppv,sen,asd_mm,hd95_mm\n";
  for (const auto& c : r.rows)
    os << c.case_id << ',' << fmt(c.dsc) << ',' << fmt(c.ppv) << ',' << fmt(c.sen) << ',' << fmt(c.asd_mm) << ','
       << fmt(c.hd95_mm) << '\n';
  for (const auto& a : r.aggregates)
    os << "# " << a.metric << ": " << fmt(a.mean) << " +- " << fmt(a.half_width) << " (n=" << a.n
       << ", missing=" << a.missing << ")\n";
  return os.str();
}

std::string report_json(const MetricsReport& r) {
  nlohmann::json j;
  j["surface_convention"] = "6-connected boundary voxels, voxel-centre Euclidean distances in mm";
  j["cases"] = nlohmann::json::array();
  for (const auto& c : r.rows)
    j["cases"].push_back({{"case_id", c.case_id},
                          {"dsc", opt(c.dsc)},
                          {"ppv", opt(c.ppv)},
                          {"sen", opt(c.sen)},
                          {"asd_mm", opt(c.asd_mm)},
                          {"hd95_mm", opt(c.hd95_mm)}});
  for (const auto& a : r.aggregates)
    j["aggregate"][a.metric] = {{"mean", a.n ? nlohmann::json(a.mean) : nlohmann::json(nullptr)},
                                {"half_width_95", a.half_width},
                                {"n", a.n},
                                {"missing", a.missing}};
  return j.dump(2);
}

std::vector<std::string> write_overlays(const Mask& pred, const Mask& gt, const Volume* image, const std::string& dir,
                                        const std::string& stem) {
  if (pred.dims() != gt.dims() || (image && image->dims() != gt.dims()))
    throw InvalidInputError("overlay inputs differ in shape");
  std::filesystem::create_directories(dir);
  const Dims3 d = gt.dims();
  float lo = 0.0f, hi = 1.0f;
  if (image && image->size() > 0) {
    const auto [mn, mx] = std::minmax_element(image->data().begin(), image->data().end());
    lo = *mn;
    hi = *mx > *mn ? *mx : *mn + 1.0f;
  }
  auto contour = [&](const Mask& m, Index h, Index w, Index z) {
    if (!m.at(h, w, z)) return false;
    return h == 0 || w == 0 || h == d.h - 1 || w == d.w - 1 || !m.at(h - 1, w, z) || !m.at(h + 1, w, z) ||
           !m.at(h, w - 1, z) || !m.at(h, w + 1, z);
  };
  std::vector<std::string> files;
  std::vector<unsigned char> rgb(static_cast<std::size_t>(d.h * d.w * 3));
  for (Index z = 0; z < d.z; ++z) {
    bool any = false;
    for (Index h = 0; h < d.h && !any; ++h)
      for (Index w = 0; w < d.w && !any; ++w) any = pred.at(h, w, z) || gt.at(h, w, z);
    if (!any) continue;
    for (Index h = 0; h < d.h; ++h)
      for (Index w = 0; w < d.w; ++w) {
        unsigned char g = 0;
        if (image) g = static_cast<unsigned char>(std::clamp((image->at(h, w, z) - lo) / (hi - lo), 0.0f, 1.0f) * 255.0f);
        unsigned char* px = rgb.data() + (h * d.w + w) * 3;
        px[0] = px[1] = px[2] = g;
        const bool cg = contour(gt, h, w, z), cp = contour(pred, h, w, z);
        if (cg) px[0] = 0, px[1] = 255, px[2] = 0;
        if (cp) px[0] = 255, px[1] = cg ? 255 : 0, px[2] = 0;
      }
    char name[64];
    std::snprintf(name, sizeof name, "_z%03lld.png", static_cast<long long>(z));
    const std::string path = (std::filesystem::path(dir) / (stem + name)).string();
    write_png(path, d.w, d.h, rgb);
    files.push_back(path);
  }
  return files;
}

}  // namespace plhn
