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

#include "checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace plhn {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'P', 'L', 'H', 'N', 'C', 'K', 'P', 'T'};

struct Writer {
  json index = json::object();
  std::string data;

  void add(const std::string& name, const std::string& dtype, const std::vector<Index>& shape, const void* p,
           std::size_t bytes) {
    index[name] = {{"dtype", dtype}, {"shape", shape}, {"offset", data.size()}, {"nbytes", bytes}};
    data.append(static_cast<const char*>(p), bytes);
  }
  void add(const std::string& name, const Tensor<float>& t) {
    add(name, "f32", t.shape(), t.data(), static_cast<std::size_t>(t.numel()) * sizeof(float));
  }
};

struct Reader {
  const json& index;
  const std::string& data;
  const std::string& path;

  const json& entry(const std::string& name, const char* dtype) const {
    if (!index.contains(name)) throw IoError(path + ": missing array " + name);
    const json& e = index.at(name);
    if (e.at("dtype") != dtype) throw IoError(path + ": array " + name + " has dtype " + e.at("dtype").get<std::string>());
    const auto off = e.at("offset").get<std::size_t>(), n = e.at("nbytes").get<std::size_t>();
    if (off + n > data.size()) throw IoError(path + ": array " + name + " is truncated");
    return e;
  }
  void read(const std::string& name, const char* dtype, void* dst, std::size_t bytes) const {
    const json& e = entry(name, dtype);
    if (e.at("nbytes").get<std::size_t>() != bytes) throw IoError(path + ": array " + name + " has the wrong size");
    std::memcpy(dst, data.data() + e.at("offset").get<std::size_t>(), bytes);
  }
  void read(const std::string& name, Tensor<float>& t) const {
    const json& e = entry(name, "f32");
    if (e.at("shape").get<std::vector<Index>>() != t.shape())
      throw IoError(path + ": array " + name + " has shape " + e.at("shape").dump() + ", expected " + t.shape_str());
    read(name, "f32", t.data(), static_cast<std::size_t>(t.numel()) * sizeof(float));
  }
};

}  // namespace

void save_checkpoint(const std::string& path, HybridNet<float>& net, const TrainState& st) {
  const NetworkConfig& cfg = net.config();
  Writer w;
  for (auto* p : net.params()) w.add("param/" + p->name, p->value);
  for (auto* b : net.buffers()) w.add("buffer/" + b->name, b->value);
  for (const auto& [name, v] : st.momentum) w.add("momentum/" + name, v);
  if (st.bank.initialized) {
    w.add("bank.mu", "f64", {st.bank.slots(), st.bank.M}, st.bank.mu.data(), st.bank.mu.size() * sizeof(double));
    w.add("bank.empty_streak", "i64", {st.bank.slots()}, st.bank.empty_streak.data(),
          st.bank.empty_streak.size() * sizeof(std::int64_t));
  }

  json meta;
  meta["format_version"] = 1;
  meta["config"] = json::parse(config_to_json(cfg, -1));
  meta["config_hash"] = config_hash(cfg);
  meta["stage"] = st.stage;
  meta["epoch"] = st.epoch;
  meta["iteration"] = st.iteration;
  meta["stage_complete"] = st.stage_complete;
  meta["best_dsc"] = st.best_dsc;
  meta["best_epoch"] = st.best_epoch;
  meta["rng"] = st.rng;
  meta["bank"] = {{"initialized", st.bank.initialized}, {"C", st.bank.C},         {"K", st.bank.K},
                  {"M", st.bank.M},                     {"eta", st.bank.eta},     {"update_count", st.bank.update_count}};
  meta["data_hash"] = fnv1a_hex(w.data);
  const std::string header = json{{"meta", meta}, {"arrays", w.index}}.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path);
    std::uint64_t n = header.size();
    unsigned char len[8];
    for (int i = 0; i < 8; ++i) len[i] = static_cast<unsigned char>(n >> (8 * i));
    out.write(kMagic, 8);
    out.write(reinterpret_cast<const char*>(len), 8);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(w.data.data(), static_cast<std::streamsize>(w.data.size()));
    if (!out) throw IoError("short write to checkpoint " + path);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  unsigned char len[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw IoError(path + " is not a checkpoint");
  if (!in.read(reinterpret_cast<char*>(len), 8)) throw IoError(path + ": truncated header");
  std::uint64_t n = 0;
  for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(len[i]) << (8 * i);
  if (n > (1ull << 30)) throw IoError(path + ": implausible header length");
  std::string header(n, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(n))) throw IoError(path + ": truncated header");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  LoadedCheckpoint ck;
  try {
    const json h = json::parse(header);
    const json& meta = h.at("meta");
    if (meta.at("data_hash") != fnv1a_hex(data)) throw IoError(path + ": payload checksum mismatch");
    ck.cfg = config_from_json(meta.at("config").dump());
    ck.config_hash = meta.at("config_hash").get<std::string>();
    if (ck.config_hash != config_hash(ck.cfg)) throw ConfigError(path + ": config hash does not match stored config");
    TrainState& st = ck.state;
    st.stage = meta.at("stage").get<int>();
    st.epoch = meta.at("epoch").get<int>();
    st.iteration = meta.at("iteration").get<std::int64_t>();
    st.stage_complete = meta.at("stage_complete").get<bool>();
    st.best_dsc = meta.at("best_dsc").get<double>();
    st.best_epoch = meta.at("best_epoch").get<int>();
    st.rng = meta.at("rng").get<std::string>();

    ck.net = std::make_unique<HybridNet<float>>(ck.cfg);
    const Reader r{h.at("arrays"), data, path};
    for (auto* p : ck.net->params()) r.read("param/" + p->name, p->value);
    for (auto* b : ck.net->buffers()) r.read("buffer/" + b->name, b->value);
    for (auto* p : ck.net->params()) {
      const std::string key = "momentum/" + p->name;
      if (!r.index.contains(key)) continue;
      Tensor<float> v(p->value.shape());
      r.read(key, v);
      st.momentum.emplace(p->name, std::move(v));
    }
    const json& b = meta.at("bank");
    if (b.at("initialized").get<bool>()) {
      st.bank = PrototypeBank(b.at("C").get<int>(), b.at("K").get<int>(), b.at("M").get<int>(), b.at("eta").get<double>());
      st.bank.update_count = b.at("update_count").get<std::int64_t>();
      r.read("bank.mu", "f64", st.bank.mu.data(), st.bank.mu.size() * sizeof(double));
      r.read("bank.empty_streak", "i64", st.bank.empty_streak.data(), st.bank.empty_streak.size() * sizeof(std::int64_t));
      st.bank.initialized = true;
    }
  } catch (const json::exception& e) {
    throw IoError(path + ": malformed checkpoint header: " + e.what());
  }
  return ck;
}

ActiveParts checkpoint_parts(const LoadedCheckpoint& ck) {
  ActiveParts p = active_parts(ck.cfg, ck.state.stage);
  if (p.prototypes && !ck.state.bank.initialized) p.prototypes = false;
  return p;
}

std::unique_ptr<Segmenter> load_segmenter(const std::string& path) {
  LoadedCheckpoint ck = load_checkpoint(path);
  const ActiveParts parts = checkpoint_parts(ck);
  return std::make_unique<Segmenter>(std::move(ck.net), std::move(ck.state.bank), parts);
}

}  // namespace plhn
