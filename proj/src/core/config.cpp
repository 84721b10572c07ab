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

#include "config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace plhn {
namespace {

using nlohmann::json;

void add(std::vector<ConfigViolation>& v, std::string field, std::string msg) {
  v.push_back({std::move(field), std::move(msg)});
}

const char* distance_name(DistanceKind d) { return d == DistanceKind::Learned ? "learned" : "cosine"; }
const char* scope_name(AssignScope s) { return s == AssignScope::WithinClass ? "class" : "all"; }

json dims_json(const Dims3& d) { return json::array({d.h, d.w, d.z}); }

Dims3 dims_from(const json& j, const std::string& key) {
  if (!j.is_array() || j.size() != 3) throw ConfigError(key + " must be an array of three integers");
  Dims3 d;
  for (int a = 0; a < 3; ++a) {
    if (!j[a].is_number_integer()) throw ConfigError(key + " must be an array of three integers");
    d[a] = j[a].get<Index>();
  }
  return d;
}

template <typename V>
void read(const json& obj, const char* key, V& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    if constexpr (std::is_same_v<V, bool>) {
      if (!it->is_boolean()) throw ConfigError(std::string(key) + " must be a boolean");
    } else if constexpr (std::is_integral_v<V>) {
      if (!it->is_number_integer()) throw ConfigError(std::string(key) + " must be an integer");
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!it->is_number()) throw ConfigError(std::string(key) + " must be a number");
    }
    out = it->get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string(key) + ": " + e.what());
  }
}

void reject_unknown(const json& obj, const std::set<std::string>& known, const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

}  // namespace

std::vector<ConfigViolation> check_patch_dims(const Dims3& dims, int window) {
  std::vector<ConfigViolation> v;
  const char* names[3] = {"H", "W", "Z"};
  for (int a = 0; a < 3; ++a) {
    if (dims[a] <= 0) {
      add(v, "patch_dims", std::string(names[a]) + " must be positive");
    } else if (dims[a] % 8 != 0) {
      add(v, "patch_dims", std::string(names[a]) + " not divisible by 8");
    } else if (window > 0 && (dims[a] / 8) % window != 0) {
      add(v, "patch_dims", std::string(names[a]) + "/8 not divisible by Ws");
    }
  }
  return v;
}

std::vector<ConfigViolation> validate_config(const NetworkConfig& c) {
  std::vector<ConfigViolation> v;
  if (c.M <= 0) add(v, "M", "M must be positive");
  if (c.Hs <= 0) add(v, "Hs", "Hs must be positive");
  if (c.T < 1) add(v, "T", "T must be at least 1");
  if (c.Ws <= 0) add(v, "Ws", "Ws must be positive");
  if (c.C != 2) add(v, "C", "C must be 2 (tumor and background) for binary masks");
  if (c.K < 1) add(v, "K", "K must be at least 1");
  if (c.heads < 0) add(v, "heads", "heads must be non-negative");
  if (c.Hs > 0 && c.Hs % c.num_heads() != 0) add(v, "heads", "Hs not divisible by head count");
  if (c.mlp_ratio < 1) add(v, "mlp_ratio", "mlp_ratio must be at least 1");
  if (c.dn_hidden < 0) add(v, "dn_hidden", "dn_hidden must be non-negative");
  if (!(c.leaky_slope >= 0.0 && c.leaky_slope < 1.0)) add(v, "leaky_slope", "leaky_slope outside [0,1)");
  if (!(c.bn_momentum > 0.0 && c.bn_momentum <= 1.0)) add(v, "bn_momentum", "bn_momentum outside (0,1]");
  if (!(c.bn_eps > 0.0)) add(v, "bn_eps", "bn_eps must be positive");
  if (!(c.tau > 0.0)) add(v, "tau", "tau must be positive");
  if (!(c.eta >= 0.0 && c.eta <= 1.0)) add(v, "eta", "eta outside [0,1]");
  if (!(c.lambda1 >= 0.0)) add(v, "lambda1", "lambda1 must be non-negative");
  if (!(c.lambda2 >= 0.0)) add(v, "lambda2", "lambda2 must be non-negative");
  if (c.kmeans_iters < 0) add(v, "kmeans_iters", "kmeans_iters must be non-negative");
  if (c.empty_slot_reinit < 1) add(v, "empty_slot_reinit", "empty_slot_reinit must be at least 1");
  for (auto& x : check_patch_dims(c.patch_dims, c.Ws)) v.push_back(x);
  for (int a = 0; a < 3; ++a) {
    if (c.stride[a] <= 0) add(v, "stride", "stride components must be positive");
    else if (c.stride[a] > c.patch_dims[a]) add(v, "stride", "stride exceeds patch size");
    if (!(c.target_spacing_mm[a] > 0.0)) add(v, "target_spacing_mm", "spacing components must be positive");
  }
  if (c.stage1_epochs <= 0) add(v, "stage1_epochs", "stage1_epochs must be positive");
  if (c.stage2_epochs <= 0) add(v, "stage2_epochs", "stage2_epochs must be positive");
  if (!(c.stage1_lr > 0.0)) add(v, "stage1_lr", "stage1_lr must be positive");
  if (!(c.stage2_lr > 0.0)) add(v, "stage2_lr", "stage2_lr must be positive");
  if (!(c.weight_decay >= 0.0)) add(v, "weight_decay", "weight_decay must be non-negative");
  if (!(c.sgd_momentum >= 0.0 && c.sgd_momentum < 1.0)) add(v, "sgd_momentum", "sgd_momentum outside [0,1)");
  if (!(c.lr_power >= 0.0)) add(v, "lr_power", "lr_power must be non-negative");
  if (!(c.lr_floor >= 0.0)) add(v, "lr_floor", "lr_floor must be non-negative");
  if (c.batch_cases <= 0) add(v, "batch_cases", "batch_cases must be positive");
  if (c.val_every <= 0) add(v, "val_every", "val_every must be positive");
  if (c.flags.use_fusion && !c.flags.use_prototypes) add(v, "flags.use_fusion", "use_fusion requires use_prototypes");
  return v;
}

void require_valid(const NetworkConfig& cfg) {
  const auto v = validate_config(cfg);
  if (v.empty()) return;
  std::string msg = "invalid config:";
  for (const auto& x : v) msg += " [" + x.field + "] " + x.message + ";";
  throw ConfigError(msg);
}

std::string config_to_json(const NetworkConfig& c, int indent) {
  json j;
  j["M"] = c.M;
  j["Hs"] = c.Hs;
  j["T"] = c.T;
  j["Ws"] = c.Ws;
  j["C"] = c.C;
  j["K"] = c.K;
  j["heads"] = c.heads;
  j["mlp_ratio"] = c.mlp_ratio;
  j["dn_hidden"] = c.dn_hidden;
  j["leaky_slope"] = c.leaky_slope;
  j["bn_momentum"] = c.bn_momentum;
  j["bn_eps"] = c.bn_eps;
  j["tau"] = c.tau;
  j["eta"] = c.eta;
  j["lambda1"] = c.lambda1;
  j["lambda2"] = c.lambda2;
  j["distance"] = distance_name(c.distance);
  j["assign_scope"] = scope_name(c.assign_scope);
  j["kmeans_iters"] = c.kmeans_iters;
  j["empty_slot_reinit"] = c.empty_slot_reinit;
  j["patch_dims"] = dims_json(c.patch_dims);
  j["stride"] = dims_json(c.stride);
  j["target_spacing_mm"] = c.target_spacing_mm;
  j["stage1_epochs"] = c.stage1_epochs;
  j["stage2_epochs"] = c.stage2_epochs;
  j["stage1_lr"] = c.stage1_lr;
  j["stage2_lr"] = c.stage2_lr;
  j["weight_decay"] = c.weight_decay;
  j["sgd_momentum"] = c.sgd_momentum;
  j["lr_power"] = c.lr_power;
  j["lr_floor"] = c.lr_floor;
  j["batch_cases"] = c.batch_cases;
  j["val_every"] = c.val_every;
  j["seed"] = c.seed;
  j["deterministic"] = c.deterministic;
  j["flags"] = {{"use_transformer", c.flags.use_transformer},
                {"use_encoder2", c.flags.use_encoder2},
                {"use_prototypes", c.flags.use_prototypes},
                {"use_fusion", c.flags.use_fusion},
                {"two_stage", c.flags.two_stage}};
  return j.dump(indent);
}

NetworkConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");

  static const std::set<std::string> known = {
      "M", "Hs", "T", "Ws", "C", "K", "heads", "mlp_ratio", "dn_hidden", "leaky_slope", "bn_momentum",
      "bn_eps", "tau", "eta", "lambda1", "lambda2", "distance", "assign_scope", "kmeans_iters",
      "empty_slot_reinit", "patch_dims", "stride", "target_spacing_mm", "stage1_epochs", "stage2_epochs",
      "stage1_lr", "stage2_lr", "weight_decay", "sgd_momentum", "lr_power", "lr_floor", "batch_cases",
      "val_every", "seed", "deterministic", "flags"};
  reject_unknown(j, known, "config");

  NetworkConfig c;
  read(j, "M", c.M);
  read(j, "Hs", c.Hs);
  read(j, "T", c.T);
  read(j, "Ws", c.Ws);
  read(j, "C", c.C);
  read(j, "K", c.K);
  read(j, "heads", c.heads);
  read(j, "mlp_ratio", c.mlp_ratio);
  read(j, "dn_hidden", c.dn_hidden);
  read(j, "leaky_slope", c.leaky_slope);
  read(j, "bn_momentum", c.bn_momentum);
  read(j, "bn_eps", c.bn_eps);
  read(j, "tau", c.tau);
  read(j, "eta", c.eta);
  read(j, "lambda1", c.lambda1);
  read(j, "lambda2", c.lambda2);
  read(j, "kmeans_iters", c.kmeans_iters);
  read(j, "empty_slot_reinit", c.empty_slot_reinit);
  read(j, "stage1_epochs", c.stage1_epochs);
  read(j, "stage2_epochs", c.stage2_epochs);
  read(j, "stage1_lr", c.stage1_lr);
  read(j, "stage2_lr", c.stage2_lr);
  read(j, "weight_decay", c.weight_decay);
  read(j, "sgd_momentum", c.sgd_momentum);
  read(j, "lr_power", c.lr_power);
  read(j, "lr_floor", c.lr_floor);
  read(j, "batch_cases", c.batch_cases);
  read(j, "val_every", c.val_every);
  read(j, "seed", c.seed);
  read(j, "deterministic", c.deterministic);

  if (auto it = j.find("distance"); it != j.end()) {
    const std::string s = it->is_string() ? it->get<std::string>() : "";
    if (s == "learned") c.distance = DistanceKind::Learned;
    else if (s == "cosine") c.distance = DistanceKind::Cosine;
    else throw ConfigError("distance must be \"learned\" or \"cosine\"");
  }
  if (auto it = j.find("assign_scope"); it != j.end()) {
    const std::string s = it->is_string() ? it->get<std::string>() : "";
    if (s == "class") c.assign_scope = AssignScope::WithinClass;
    else if (s == "all") c.assign_scope = AssignScope::AllSlots;
    else throw ConfigError("assign_scope must be \"class\" or \"all\"");
  }
  if (auto it = j.find("patch_dims"); it != j.end()) c.patch_dims = dims_from(*it, "patch_dims");
  if (auto it = j.find("stride"); it != j.end()) c.stride = dims_from(*it, "stride");
  if (auto it = j.find("target_spacing_mm"); it != j.end()) {
    if (!it->is_array() || it->size() != 3) throw ConfigError("target_spacing_mm must be an array of three numbers");
    for (int a = 0; a < 3; ++a) {
      if (!(*it)[a].is_number()) throw ConfigError("target_spacing_mm must be an array of three numbers");
      c.target_spacing_mm[a] = (*it)[a].get<double>();
    }
  }
  if (auto it = j.find("flags"); it != j.end()) {
    if (!it->is_object()) throw ConfigError("flags must be an object");
    reject_unknown(*it, {"use_transformer", "use_encoder2", "use_prototypes", "use_fusion", "two_stage"}, "flags");
    read(*it, "use_transformer", c.flags.use_transformer);
    read(*it, "use_encoder2", c.flags.use_encoder2);
    read(*it, "use_prototypes", c.flags.use_prototypes);
    read(*it, "use_fusion", c.flags.use_fusion);
    read(*it, "two_stage", c.flags.two_stage);
  }
  return c;
}

NetworkConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return config_from_json(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void save_config(const NetworkConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config file: " + path);
  out << config_to_json(cfg) << "\n";
  if (!out) throw IoError("failed writing config file: " + path);
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const NetworkConfig& cfg) { return fnv1a_hex(config_to_json(cfg, -1)); }

}  // namespace plhn
