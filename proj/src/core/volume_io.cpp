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

#include "volume_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>
#include <zlib.h>

namespace plhn {
namespace fs = std::filesystem;
using nlohmann::json;

// ---- geometry ----------------------------------------------------------------

Dims3 resampled_dims(const Dims3& dims, const Spacing& spacing, const Spacing& target) {
  Dims3 out;
  for (int a = 0; a < 3; ++a) {
    if (!(spacing[a] > 0.0) || !(target[a] > 0.0)) throw InvalidInputError("spacing must be positive");
    out[a] = static_cast<Index>(std::llround(static_cast<double>(dims[a]) * spacing[a] / target[a]));
    if (out[a] < 1) throw InvalidInputError("resampling to target spacing collapses axis " + std::to_string(a));
  }
  return out;
}

namespace {

// Continuous source coordinate of output voxel i with centers aligned.
inline double source_coord(Index i, double out_spacing, double in_spacing) {
  return (static_cast<double>(i) + 0.5) * out_spacing / in_spacing - 0.5;
}

inline float lerp(float a, float b, float t) { return a + t * (b - a); }

struct AxisSample {
  Index i0, i1;
  float t;
};

std::vector<AxisSample> linear_axis(Index out_n, Index in_n, double out_sp, double in_sp) {
  std::vector<AxisSample> s(static_cast<std::size_t>(out_n));
  for (Index i = 0; i < out_n; ++i) {
    double x = std::clamp(source_coord(i, out_sp, in_sp), 0.0, static_cast<double>(in_n - 1));
    Index i0 = static_cast<Index>(std::floor(x));
    Index i1 = std::min(i0 + 1, in_n - 1);
    s[static_cast<std::size_t>(i)] = {i0, i1, static_cast<float>(x - static_cast<double>(i0))};
  }
  return s;
}

std::vector<Index> nearest_axis(Index out_n, Index in_n, double out_sp, double in_sp) {
  std::vector<Index> s(static_cast<std::size_t>(out_n));
  for (Index i = 0; i < out_n; ++i) {
    double x = source_coord(i, out_sp, in_sp);
    s[static_cast<std::size_t>(i)] = std::clamp<Index>(static_cast<Index>(std::floor(x + 0.5)), 0, in_n - 1);
  }
  return s;
}

Index reflect_index(Index i, Index n) {
  if (n == 1) return 0;
  const Index period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

Volume resample_image(const Volume& in, const Spacing& sp, const Spacing& target, const Dims3& out_dims) {
  const Dims3 d = in.dims();
  if (out_dims == d && sp == target) return in;
  const auto ax = linear_axis(out_dims.h, d.h, target[0], sp[0]);
  const auto ay = linear_axis(out_dims.w, d.w, target[1], sp[1]);
  const auto az = linear_axis(out_dims.z, d.z, target[2], sp[2]);
  Volume out(out_dims);
  for (Index i = 0; i < out_dims.h; ++i) {
    const auto& x = ax[static_cast<std::size_t>(i)];
    for (Index j = 0; j < out_dims.w; ++j) {
      const auto& y = ay[static_cast<std::size_t>(j)];
      for (Index k = 0; k < out_dims.z; ++k) {
        const auto& z = az[static_cast<std::size_t>(k)];
        const float c00 = lerp(in.at(x.i0, y.i0, z.i0), in.at(x.i0, y.i0, z.i1), z.t);
        const float c01 = lerp(in.at(x.i0, y.i1, z.i0), in.at(x.i0, y.i1, z.i1), z.t);
        const float c10 = lerp(in.at(x.i1, y.i0, z.i0), in.at(x.i1, y.i0, z.i1), z.t);
        const float c11 = lerp(in.at(x.i1, y.i1, z.i0), in.at(x.i1, y.i1, z.i1), z.t);
        out.at(i, j, k) = lerp(lerp(c00, c01, y.t), lerp(c10, c11, y.t), x.t);
      }
    }
  }
  return out;
}

Mask resample_mask(const Mask& in, const Spacing& sp, const Spacing& target, const Dims3& out_dims) {
  const Dims3 d = in.dims();
  if (out_dims == d && sp == target) return in;
  const auto ax = nearest_axis(out_dims.h, d.h, target[0], sp[0]);
  const auto ay = nearest_axis(out_dims.w, d.w, target[1], sp[1]);
  const auto az = nearest_axis(out_dims.z, d.z, target[2], sp[2]);
  Mask out(out_dims);
  for (Index i = 0; i < out_dims.h; ++i)
    for (Index j = 0; j < out_dims.w; ++j)
      for (Index k = 0; k < out_dims.z; ++k)
        out.at(i, j, k) = in.at(ax[static_cast<std::size_t>(i)], ay[static_cast<std::size_t>(j)],
                                az[static_cast<std::size_t>(k)]);
  return out;
}

VolumeCase resample_case(const VolumeCase& c, const Spacing& target) {
  validate_case(c);
  const Dims3 out_dims = resampled_dims(c.dims(), c.spacing_mm, target);
  VolumeCase out;
  out.case_id = c.case_id;
  out.spacing_mm = target;
  out.pre_contrast = resample_image(c.pre_contrast, c.spacing_mm, target, out_dims);
  out.post_contrast = resample_image(c.post_contrast, c.spacing_mm, target, out_dims);
  out.tumor_mask = resample_mask(c.tumor_mask, c.spacing_mm, target, out_dims);
  return out;
}

template <typename T>
Grid3<T> reflect_pad(const Grid3<T>& in, const Dims3& target) {
  const Dims3 d = in.dims();
  const Dims3 out_dims{std::max(d.h, target.h), std::max(d.w, target.w), std::max(d.z, target.z)};
  if (out_dims == d) return in;
  Grid3<T> out(out_dims);
  for (Index i = 0; i < out_dims.h; ++i)
    for (Index j = 0; j < out_dims.w; ++j)
      for (Index k = 0; k < out_dims.z; ++k)
        out.at(i, j, k) = in.at(reflect_index(i, d.h), reflect_index(j, d.w), reflect_index(k, d.z));
  return out;
}

template <typename T>
Grid3<T> crop(const Grid3<T>& in, const Dims3& origin, const Dims3& dims) {
  const Dims3 d = in.dims();
  for (int a = 0; a < 3; ++a)
    if (origin[a] < 0 || origin[a] + dims[a] > d[a])
      throw InvalidInputError("crop window out of bounds on axis " + std::to_string(a));
  Grid3<T> out(dims);
  for (Index i = 0; i < dims.h; ++i)
    for (Index j = 0; j < dims.w; ++j)
      std::copy_n(&in.at(origin.h + i, origin.w + j, origin.z), dims.z, &out.at(i, j, 0));
  return out;
}

template Grid3<float> reflect_pad(const Grid3<float>&, const Dims3&);
template Grid3<std::uint8_t> reflect_pad(const Grid3<std::uint8_t>&, const Dims3&);
template Grid3<float> crop(const Grid3<float>&, const Dims3&, const Dims3&);
template Grid3<std::uint8_t> crop(const Grid3<std::uint8_t>&, const Dims3&, const Dims3&);

VolumeCase reflect_pad_case(const VolumeCase& c, const Dims3& min_dims) {
  VolumeCase out;
  out.case_id = c.case_id;
  out.spacing_mm = c.spacing_mm;
  out.pre_contrast = reflect_pad(c.pre_contrast, min_dims);
  out.post_contrast = reflect_pad(c.post_contrast, min_dims);
  out.tumor_mask = reflect_pad(c.tumor_mask, min_dims);
  return out;
}

// ---- synthetic -----------------------------------------------------------------

void validate_synthetic_spec(const SyntheticSpec& s) {
  for (int a = 0; a < 3; ++a) {
    if (s.grid_size[a] < 32) throw ConfigError("synthetic grid_size components must be >= 32");
    if (!(s.spacing_mm[a] > 0.0)) throw ConfigError("synthetic spacing must be positive");
  }
  if (s.n_tumors < 0) throw ConfigError("n_tumors must be >= 0");
  if (!(s.tumor_radius_range_mm[0] > 0.0) || s.tumor_radius_range_mm[0] > s.tumor_radius_range_mm[1])
    throw ConfigError("tumor_radius_range_mm must satisfy 0 < low <= high");
  if (!(s.enhancement_gain >= 0.0)) throw ConfigError("enhancement_gain must be >= 0");
  if (!(s.noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
}

std::string synthetic_spec_to_json(const SyntheticSpec& s, int indent) {
  json j;
  j["grid_size"] = {s.grid_size.h, s.grid_size.w, s.grid_size.z};
  j["n_tumors"] = s.n_tumors;
  j["tumor_radius_range_mm"] = s.tumor_radius_range_mm;
  j["enhancement_gain"] = s.enhancement_gain;
  j["noise_sigma"] = s.noise_sigma;
  j["background_texture_scale"] = s.background_texture_scale;
  j["seed"] = s.seed;
  j["spacing_mm"] = s.spacing_mm;
  return j.dump(indent);
}

SyntheticSpec synthetic_spec_from_json(const std::string& text) {
  SyntheticSpec s;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw ConfigError("synthetic spec must be a JSON object");
    static const char* known[] = {"grid_size", "n_tumors", "tumor_radius_range_mm", "enhancement_gain",
                                  "noise_sigma", "background_texture_scale", "seed", "spacing_mm"};
    for (auto it = j.begin(); it != j.end(); ++it)
      if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return it.key() == k; }) ==
          std::end(known))
        throw ConfigError("unknown key '" + it.key() + "' in synthetic spec");
    if (j.contains("grid_size")) {
      auto g = j.at("grid_size").get<std::vector<Index>>();
      if (g.size() != 3) throw ConfigError("grid_size must have three entries");
      s.grid_size = {g[0], g[1], g[2]};
    }
    if (j.contains("n_tumors")) s.n_tumors = j.at("n_tumors").get<int>();
    if (j.contains("tumor_radius_range_mm")) s.tumor_radius_range_mm = j.at("tumor_radius_range_mm").get<std::array<double, 2>>();
    if (j.contains("enhancement_gain")) s.enhancement_gain = j.at("enhancement_gain").get<double>();
    if (j.contains("noise_sigma")) s.noise_sigma = j.at("noise_sigma").get<double>();
    if (j.contains("background_texture_scale")) s.background_texture_scale = j.at("background_texture_scale").get<double>();
    if (j.contains("seed")) s.seed = j.at("seed").get<std::int64_t>();
    if (j.contains("spacing_mm")) s.spacing_mm = j.at("spacing_mm").get<std::array<double, 3>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid synthetic spec: ") + e.what());
  }
  validate_synthetic_spec(s);
  return s;
}

VolumeCase generate_synthetic_case(const SyntheticSpec& spec, const std::string& case_id) {
  validate_synthetic_spec(spec);
  std::mt19937_64 rng(static_cast<std::uint64_t>(spec.seed));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const Dims3 d = spec.grid_size;

  // Low-frequency texture: a handful of random plane waves.
  constexpr int kWaves = 6;
  struct Wave {
    double kx, ky, kz, phase;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < kWaves; ++i) {
    auto freq = [&] { return (0.5 + 2.5 * unif(rng)) * (unif(rng) < 0.5 ? -1.0 : 1.0); };
    waves.push_back({freq(), freq(), freq(), 2.0 * std::numbers::pi * unif(rng)});
  }

  struct Ball {
    double cx, cy, cz, r;
  };
  std::vector<Ball> balls;
  for (int t = 0; t < spec.n_tumors; ++t) {
    const double r = spec.tumor_radius_range_mm[0] +
                     (spec.tumor_radius_range_mm[1] - spec.tumor_radius_range_mm[0]) * unif(rng);
    double c[3];
    for (int a = 0; a < 3; ++a) {
      const double extent = static_cast<double>(d[a]) * spec.spacing_mm[a];
      const double lo = r + 2.0 * spec.spacing_mm[a];
      const double hi = extent - lo;
      c[a] = lo < hi ? lo + (hi - lo) * unif(rng) : 0.5 * extent;
    }
    balls.push_back({c[0], c[1], c[2], r});
  }

  VolumeCase out;
  out.case_id = case_id;
  out.spacing_mm = spec.spacing_mm;
  out.pre_contrast = Volume(d);
  out.post_contrast = Volume(d);
  out.tumor_mask = Mask(d);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double wave_norm = 1.0 / std::sqrt(static_cast<double>(kWaves));
  constexpr double kEdgeMm = 0.5;

  for (Index i = 0; i < d.h; ++i) {
    const double x = (static_cast<double>(i) + 0.5) * spec.spacing_mm[0];
    for (Index j = 0; j < d.w; ++j) {
      const double y = (static_cast<double>(j) + 0.5) * spec.spacing_mm[1];
      for (Index k = 0; k < d.z; ++k) {
        const double z = (static_cast<double>(k) + 0.5) * spec.spacing_mm[2];
        double tex = 0.0;
        for (const auto& w : waves)
          tex += std::cos(2.0 * std::numbers::pi *
                              (w.kx * static_cast<double>(i) / static_cast<double>(d.h) +
                               w.ky * static_cast<double>(j) / static_cast<double>(d.w) +
                               w.kz * static_cast<double>(k) / static_cast<double>(d.z)) +
                          w.phase);
        const double background = 1.0 + spec.background_texture_scale * wave_norm * tex;
        double enh = 0.0;
        bool inside = false;
        for (const auto& b : balls) {
          const double dist = std::sqrt((x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy) + (z - b.cz) * (z - b.cz));
          if (dist <= b.r) inside = true;
          enh = std::max(enh, 1.0 / (1.0 + std::exp((dist - b.r) / kEdgeMm)));
        }
        double pre = background;
        double post = background + spec.enhancement_gain * enh;
        if (spec.noise_sigma > 0.0) {
          pre += spec.noise_sigma * noise(rng);
          post += spec.noise_sigma * noise(rng);
        }
        out.pre_contrast.at(i, j, k) = static_cast<float>(pre);
        out.post_contrast.at(i, j, k) = static_cast<float>(post);
        out.tumor_mask.at(i, j, k) = inside ? 1 : 0;
      }
    }
  }
  return out;
}

// ---- file formats ----------------------------------------------------------------

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string raw_stem(const std::string& path) {
  if (ends_with(path, ".json")) return path.substr(0, path.size() - 5);
  if (ends_with(path, ".bin")) return path.substr(0, path.size() - 4);
  return path;
}

template <typename V>
V byteswap_value(V v) {
  unsigned char b[sizeof(V)];
  std::memcpy(b, &v, sizeof(V));
  std::reverse(b, b + sizeof(V));
  std::memcpy(&v, b, sizeof(V));
  return v;
}

void save_raw(const Volume& grid, const Spacing& spacing, const std::string& path) {
  const std::string stem = raw_stem(path);
  json h;
  h["shape"] = {grid.dims().h, grid.dims().w, grid.dims().z};
  h["spacing"] = spacing;
  h["dtype"] = "f32";
  h["byte_order"] = "LE";
  h["order"] = "C";
  {
    std::ofstream js(stem + ".json");
    if (!js) throw IoError("cannot write " + stem + ".json");
    js << h.dump(2) << "\n";
  }
  std::ofstream bin(stem + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot write " + stem + ".bin");
  if constexpr (std::endian::native == std::endian::little) {
    bin.write(reinterpret_cast<const char*>(grid.data().data()),
              static_cast<std::streamsize>(grid.data().size() * sizeof(float)));
  } else {
    for (float v : grid.data()) {
      float s = byteswap_value(v);
      bin.write(reinterpret_cast<const char*>(&s), sizeof s);
    }
  }
  if (!bin) throw IoError("failed writing " + stem + ".bin");
}

LoadedVolume load_raw(const std::string& path) {
  const std::string stem = raw_stem(path);
  json h;
  {
    std::ifstream js(stem + ".json");
    if (!js) throw IoError("cannot open " + stem + ".json");
    try {
      js >> h;
    } catch (const json::exception& e) {
      throw IoError(stem + ".json: malformed header: " + e.what());
    }
  }
  LoadedVolume out;
  Dims3 d;
  try {
    auto shape = h.at("shape").get<std::vector<Index>>();
    auto spacing = h.at("spacing").get<std::vector<double>>();
    if (shape.size() != 3 || spacing.size() != 3) throw IoError(stem + ".json: shape/spacing must have 3 entries");
    if (h.at("dtype").get<std::string>() != "f32") throw IoError(stem + ".json: unsupported dtype");
    if (h.value("byte_order", std::string("LE")) != "LE") throw IoError(stem + ".json: unsupported byte order");
    if (h.value("order", std::string("C")) != "C") throw IoError(stem + ".json: unsupported memory order");
    d = {shape[0], shape[1], shape[2]};
    for (int a = 0; a < 3; ++a) {
      if (d[a] <= 0) throw IoError(stem + ".json: non-positive shape");
      if (!(spacing[static_cast<std::size_t>(a)] > 0.0)) throw IoError(stem + ".json: non-positive spacing");
      out.spacing[static_cast<std::size_t>(a)] = spacing[static_cast<std::size_t>(a)];
    }
  } catch (const json::exception& e) {
    throw IoError(stem + ".json: malformed header: " + e.what());
  }
  std::ifstream bin(stem + ".bin", std::ios::binary | std::ios::ate);
  if (!bin) throw IoError("cannot open " + stem + ".bin");
  const auto bytes = static_cast<std::size_t>(bin.tellg());
  if (bytes != static_cast<std::size_t>(d.count()) * sizeof(float))
    throw IoError(stem + ".bin: size " + std::to_string(bytes) + " does not match shape " + d.str());
  bin.seekg(0);
  std::vector<float> data(static_cast<std::size_t>(d.count()));
  bin.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
  if (!bin) throw IoError("failed reading " + stem + ".bin");
  if constexpr (std::endian::native != std::endian::little)
    for (auto& v : data) v = byteswap_value(v);
  out.grid = Volume(d, std::move(data));
  return out;
}

// NIfTI-1 single-file layout.
constexpr int kNiftiHeader = 348;
constexpr int kNiftiDataOffset = 352;

template <typename V>
void put(std::vector<unsigned char>& buf, std::size_t off, V v) {
  std::memcpy(buf.data() + off, &v, sizeof(V));
}

template <typename V>
V get(const std::vector<unsigned char>& buf, std::size_t off, bool swap) {
  V v;
  std::memcpy(&v, buf.data() + off, sizeof(V));
  return swap ? byteswap_value(v) : v;
}

void save_nifti(const Volume& grid, const Spacing& spacing, const std::string& path, bool gz) {
  std::vector<unsigned char> hdr(kNiftiDataOffset, 0);
  const Dims3 d = grid.dims();
  put<std::int32_t>(hdr, 0, kNiftiHeader);
  const std::int16_t dim[8] = {3, static_cast<std::int16_t>(d.h), static_cast<std::int16_t>(d.w),
                               static_cast<std::int16_t>(d.z), 1, 1, 1, 1};
  if (d.h > 32767 || d.w > 32767 || d.z > 32767) throw IoError(path + ": volume too large for NIfTI-1");
  for (int i = 0; i < 8; ++i) put<std::int16_t>(hdr, 40 + 2 * i, dim[i]);
  put<std::int16_t>(hdr, 70, 16);  // DT_FLOAT32
  put<std::int16_t>(hdr, 72, 32);
  const float pixdim[8] = {1.0f, static_cast<float>(spacing[0]), static_cast<float>(spacing[1]),
                           static_cast<float>(spacing[2]), 1.0f, 1.0f, 1.0f, 1.0f};
  for (int i = 0; i < 8; ++i) put<float>(hdr, 76 + 4 * i, pixdim[i]);
  put<float>(hdr, 108, static_cast<float>(kNiftiDataOffset));
  put<float>(hdr, 112, 1.0f);
  put<float>(hdr, 116, 0.0f);
  hdr[123] = 2;  // NIFTI_UNITS_MM
  put<std::int16_t>(hdr, 254, 1);  // sform_code: scanner
  put<float>(hdr, 280, static_cast<float>(spacing[0]));
  put<float>(hdr, 296 + 4, static_cast<float>(spacing[1]));
  put<float>(hdr, 312 + 8, static_cast<float>(spacing[2]));
  std::memcpy(hdr.data() + 344, "n+1\0", 4);

  // NIfTI stores x fastest; our grids store z fastest.
  std::vector<float> data(static_cast<std::size_t>(d.count()));
  for (Index i = 0; i < d.h; ++i)
    for (Index j = 0; j < d.w; ++j)
      for (Index k = 0; k < d.z; ++k)
        data[static_cast<std::size_t>(i + d.h * (j + d.w * k))] = grid.at(i, j, k);

  gzFile f = gzopen(path.c_str(), gz ? "wb6" : "wbT");
  if (!f) throw IoError("cannot write " + path);
  bool ok = gzwrite(f, hdr.data(), static_cast<unsigned>(hdr.size())) == static_cast<int>(hdr.size());
  const std::size_t bytes = data.size() * sizeof(float);
  ok = ok && gzwrite(f, data.data(), static_cast<unsigned>(bytes)) == static_cast<int>(bytes);
  ok = (gzclose(f) == Z_OK) && ok;
  if (!ok) throw IoError("failed writing " + path);
}

LoadedVolume load_nifti(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open " + path);
  std::vector<unsigned char> hdr(kNiftiHeader);
  if (gzread(f, hdr.data(), kNiftiHeader) != kNiftiHeader) {
    gzclose(f);
    throw IoError(path + ": truncated NIfTI header");
  }
  bool swap = false;
  if (get<std::int32_t>(hdr, 0, false) != kNiftiHeader) {
    swap = true;
    if (get<std::int32_t>(hdr, 0, true) != kNiftiHeader) {
      gzclose(f);
      throw IoError(path + ": malformed NIfTI header (sizeof_hdr)");
    }
  }
  auto fail = [&](const std::string& m) {
    gzclose(f);
    throw IoError(path + ": " + m);
  };
  if (std::memcmp(hdr.data() + 344, "n+1", 3) != 0) fail("only single-file NIfTI-1 (n+1) is supported");
  const auto ndim = get<std::int16_t>(hdr, 40, swap);
  if (ndim < 3 || ndim > 7) fail("unsupported dimensionality");
  Dims3 d{get<std::int16_t>(hdr, 42, swap), get<std::int16_t>(hdr, 44, swap), get<std::int16_t>(hdr, 46, swap)};
  for (int i = 4; i <= ndim; ++i)
    if (get<std::int16_t>(hdr, 40 + 2 * static_cast<std::size_t>(i), swap) > 1) fail("only 3D volumes are supported");
  if (d.h <= 0 || d.w <= 0 || d.z <= 0) fail("non-positive dimension");
  const auto datatype = get<std::int16_t>(hdr, 70, swap);
  LoadedVolume out;
  for (int a = 0; a < 3; ++a) {
    const float p = get<float>(hdr, 80 + 4 * static_cast<std::size_t>(a), swap);
    if (!(p > 0.0f)) fail("non-positive pixdim");
    out.spacing[static_cast<std::size_t>(a)] = static_cast<double>(p);
  }
  const float vox_offset = get<float>(hdr, 108, swap);
  float slope = get<float>(hdr, 112, swap);
  const float inter = get<float>(hdr, 116, swap);
  if (slope == 0.0f || !std::isfinite(slope)) slope = 1.0f;

  std::size_t elem = 0;
  switch (datatype) {
    case 2: elem = 1; break;    // uint8
    case 4: elem = 2; break;    // int16
    case 8: elem = 4; break;    // int32
    case 16: elem = 4; break;   // float32
    case 64: elem = 8; break;   // float64
    case 256: elem = 1; break;  // int8
    case 512: elem = 2; break;  // uint16
    default: fail("unsupported datatype " + std::to_string(datatype));
  }
  const auto skip = static_cast<long>(vox_offset) - kNiftiHeader;
  if (skip < 0) fail("vox_offset inside header");
  std::vector<unsigned char> pad(static_cast<std::size_t>(skip));
  if (skip > 0 && gzread(f, pad.data(), static_cast<unsigned>(skip)) != skip) fail("truncated extension block");
  const std::size_t n = static_cast<std::size_t>(d.count());
  std::vector<unsigned char> raw(n * elem);
  if (gzread(f, raw.data(), static_cast<unsigned>(raw.size())) != static_cast<int>(raw.size()))
    fail("data shorter than header shape " + d.str());
  gzclose(f);

  auto value = [&](std::size_t idx) -> double {
    const unsigned char* p = raw.data() + idx * elem;
    auto rd = [&](auto tag) {
      using V = decltype(tag);
      V v;
      std::memcpy(&v, p, sizeof(V));
      return static_cast<double>(swap ? byteswap_value(v) : v);
    };
    switch (datatype) {
      case 2: return rd(std::uint8_t{});
      case 4: return rd(std::int16_t{});
      case 8: return rd(std::int32_t{});
      case 16: return rd(float{});
      case 64: return rd(double{});
      case 256: return rd(std::int8_t{});
      default: return rd(std::uint16_t{});
    }
  };
  out.grid = Volume(d);
  for (Index i = 0; i < d.h; ++i)
    for (Index j = 0; j < d.w; ++j)
      for (Index k = 0; k < d.z; ++k)
        out.grid.at(i, j, k) = static_cast<float>(
            value(static_cast<std::size_t>(i + d.h * (j + d.w * k))) * static_cast<double>(slope) + inter);
  return out;
}

}  // namespace

VolumeFormat format_for_path(const std::string& path) {
  if (ends_with(path, ".nii.gz")) return VolumeFormat::NiftiGz;
  if (ends_with(path, ".nii")) return VolumeFormat::Nifti;
  return VolumeFormat::Raw;
}

std::string extension_for(VolumeFormat fmt) {
  switch (fmt) {
    case VolumeFormat::Nifti: return ".nii";
    case VolumeFormat::NiftiGz: return ".nii.gz";
    default: return "";
  }
}

void save_volume(const Volume& grid, const Spacing& spacing, const std::string& path) {
  for (double s : spacing)
    if (!(s > 0.0)) throw IoError(path + ": spacing must be positive");
  switch (format_for_path(path)) {
    case VolumeFormat::Raw: save_raw(grid, spacing, path); break;
    case VolumeFormat::Nifti: save_nifti(grid, spacing, path, false); break;
    case VolumeFormat::NiftiGz: save_nifti(grid, spacing, path, true); break;
  }
}

LoadedVolume load_volume(const std::string& path) {
  return format_for_path(path) == VolumeFormat::Raw ? load_raw(path) : load_nifti(path);
}

void save_mask(const Mask& mask, const Spacing& spacing, const std::string& path) {
  Volume v(mask.dims());
  for (Index i = 0; i < mask.size(); ++i) v[i] = mask[i] ? 1.0f : 0.0f;
  save_volume(v, spacing, path);
}

std::pair<Mask, Spacing> load_mask(const std::string& path) {
  LoadedVolume lv = load_volume(path);
  Mask m(lv.grid.dims());
  for (Index i = 0; i < m.size(); ++i) {
    const float v = lv.grid[i];
    if (v == 0.0f) m[i] = 0;
    else if (v == 1.0f) m[i] = 1;
    else throw IoError(path + ": mask contains non-binary value " + std::to_string(v));
  }
  return {std::move(m), lv.spacing};
}

std::string find_volume(const std::string& stem) {
  if (fs::exists(stem + ".json") && fs::exists(stem + ".bin")) return stem;
  for (const char* ext : {".nii.gz", ".nii"})
    if (fs::exists(stem + ext)) return stem + ext;
  return {};
}

}  // namespace plhn
