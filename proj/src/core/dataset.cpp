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

#include "dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "log.hpp"

namespace plhn {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// `name` minus a volume extension, or empty when it is not a volume file.
std::string volume_stem(const std::string& name) {
  for (const char* ext : {".nii.gz", ".nii", ".json"}) {
    const std::string e = ext;
    if (name.size() > e.size() && name.compare(name.size() - e.size(), e.size(), e) == 0)
      return name.substr(0, name.size() - e.size());
  }
  return {};
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

CaseFiles resolve(const std::string& dir, const std::string& id) {
  const std::string base = (fs::path(dir) / id).string();
  return {id, find_volume(base + "_pre"), find_volume(base + "_post"), find_volume(base + "_mask")};
}

}  // namespace

std::vector<std::string> scan_volume_ids(const std::string& dir, const std::string& suffix) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::set<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string stem = volume_stem(e.path().filename().string());
    if (stem.size() <= suffix.size() || stem.compare(stem.size() - suffix.size(), suffix.size(), suffix) != 0) continue;
    if (find_volume((fs::path(dir) / stem).string()).empty()) continue;
    ids.insert(stem.substr(0, stem.size() - suffix.size()));
  }
  return {ids.begin(), ids.end()};
}

std::vector<CaseFiles> scan_cases(const std::string& dir) {
  std::vector<CaseFiles> out;
  const fs::path manifest = fs::path(dir) / "manifest.json";
  if (fs::exists(manifest)) {
    json j;
    try {
      j = json::parse(read_text(manifest.string()));
      for (const auto& id : j.at("ids")) out.push_back(resolve(dir, id.get<std::string>()));
    } catch (const json::exception& e) {
      throw IoError("malformed manifest " + manifest.string() + ": " + e.what());
    }
    for (const auto& c : out)
      if (c.pre.empty() || c.post.empty()) throw IoError("case " + c.id + " listed in the manifest is missing files");
    return out;
  }
  for (const auto& id : scan_volume_ids(dir, "_pre")) {
    CaseFiles c = resolve(dir, id);
    if (!c.post.empty()) out.push_back(std::move(c));
  }
  return out;
}

SynthResult write_synthetic_dataset(const SyntheticSpec& spec, int count, const std::string& dir, VolumeFormat format) {
  validate_synthetic_spec(spec);
  if (count < 0) throw ConfigError("count must be >= 0");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  SynthResult r;
  json seeds = json::array();
  for (int i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "case_%03d", i);
    SyntheticSpec s = spec;
    s.seed = spec.seed + i;
    const VolumeCase c = generate_synthetic_case(s, id);
    const std::string base = (fs::path(dir) / id).string(), ext = extension_for(format);
    save_volume(c.pre_contrast, c.spacing_mm, base + "_pre" + ext);
    save_volume(c.post_contrast, c.spacing_mm, base + "_post" + ext);
    save_mask(c.tumor_mask, c.spacing_mm, base + "_mask" + ext);
    r.ids.push_back(id);
    seeds.push_back(s.seed);
  }
  const std::string spec_json = synthetic_spec_to_json(spec, -1);
  json m;
  m["ids"] = r.ids;
  m["seeds"] = seeds;
  m["spec"] = json::parse(spec_json);
  m["spec_hash"] = fnv1a_hex(spec_json);
  m["format"] = format == VolumeFormat::Raw ? "raw" : (format == VolumeFormat::Nifti ? "nifti" : "nifti_gz");
  const std::string text = m.dump(2) + "\n";
  r.manifest_path = (fs::path(dir) / "manifest.json").string();
  std::ofstream out(r.manifest_path, std::ios::binary);
  if (!(out << text)) throw IoError("cannot write " + r.manifest_path);
  r.manifest_hash = fnv1a_hex(text);
  return r;
}

VolumeCase load_case(const CaseFiles& f) {
  if (f.pre.empty() || f.post.empty()) throw IoError("case " + f.id + ": missing pre/post volume");
  if (f.mask.empty()) throw IoError("case " + f.id + ": missing tumour mask");
  VolumeCase c;
  c.case_id = f.id;
  LoadedVolume pre = load_volume(f.pre), post = load_volume(f.post);
  auto [mask, msp] = load_mask(f.mask);
  c.pre_contrast = std::move(pre.grid);
  c.post_contrast = std::move(post.grid);
  c.tumor_mask = std::move(mask);
  c.spacing_mm = pre.spacing;
  validate_case(c);
  return c;
}

std::vector<VolumeCase> load_training_cases(const std::string& dir, const NetworkConfig& cfg) {
  std::vector<VolumeCase> out;
  for (const auto& f : scan_cases(dir)) {
    VolumeCase c = resample_case(load_case(f), cfg.target_spacing_mm);
    const Dims3 d = c.dims(), P = cfg.patch_dims;
    if (d.h < P.h || d.w < P.w || d.z < P.z) c = reflect_pad_case(c, P);
    out.push_back(std::move(c));
  }
  if (out.empty()) throw IoError("no cases found in " + dir);
  return out;
}

}  // namespace plhn
