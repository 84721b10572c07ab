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

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dataset.hpp"
#include "trainer.hpp"

using namespace plhn;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("plhn_unit_" + name);
  fs::remove_all(p);
  return p;
}

NetworkConfig micro() {
  NetworkConfig cfg;
  cfg.M = 4;
  cfg.Hs = 32;
  cfg.T = 1;
  cfg.Ws = 1;
  cfg.K = 2;
  cfg.patch_dims = {16, 16, 8};
  cfg.stride = {16, 16, 8};
  cfg.stage1_epochs = 2;
  cfg.stage2_epochs = 1;
  cfg.batch_cases = 1;
  cfg.val_every = 1;
  cfg.seed = 3;
  return cfg;
}

std::vector<VolumeCase> micro_cases(int n) {
  std::vector<VolumeCase> out;
  for (int i = 0; i < n; ++i) {
    SyntheticSpec s;
    s.grid_size = {32, 32, 32};
    s.tumor_radius_range_mm = {4.0, 6.0};
    s.seed = 100 + i;
    out.push_back(generate_synthetic_case(s, "c" + std::to_string(i)));
  }
  return out;
}

}  // namespace

TEST_CASE("poly learning rate") {
  CHECK(step_lr(0, 100, 0.01) == 0.01);
  CHECK(step_lr(100, 100, 0.01) == 1e-6);
  CHECK(step_lr(50, 100, 0.01) == doctest::Approx(0.005359).epsilon(1e-4));
  CHECK(std::abs(step_lr(50, 100, 0.01) - 0.01 * std::pow(0.5, 0.9)) < 1e-12);
  CHECK_THROWS_AS(step_lr(101, 100, 0.01), InvalidInputError);
}

TEST_CASE("sgd with momentum and weight decay") {
  nn::Param<float> p("w", {2});
  p.value[0] = 1.0f;
  p.value[1] = -2.0f;
  p.grad[0] = 0.5f;
  p.grad[1] = 0.0f;
  std::map<std::string, Tensor<float>> v;
  sgd_step({&p}, v, 0.1, 0.9, 0.01);
  CHECK(v["w"][0] == doctest::Approx(0.51f));
  CHECK(p.value[0] == doctest::Approx(1.0f - 0.051f));
  sgd_step({&p}, v, 0.1, 0.9, 0.0);
  CHECK(v["w"][0] == doctest::Approx(0.9f * 0.51f + 0.5f));
}

TEST_CASE("synthetic dataset round trip") {
  const fs::path dir = scratch("synth");
  SyntheticSpec spec;
  spec.grid_size = {32, 32, 32};
  spec.seed = 7;
  const SynthResult a = write_synthetic_dataset(spec, 2, dir.string());
  CHECK(a.ids == std::vector<std::string>{"case_000", "case_001"});
  const SynthResult b = write_synthetic_dataset(spec, 2, dir.string());
  CHECK(a.manifest_hash == b.manifest_hash);
  const auto files = scan_cases(dir.string());
  REQUIRE(files.size() == 2);
  const VolumeCase c = load_case(files[1]);
  spec.seed = 8;
  const VolumeCase ref = generate_synthetic_case(spec, "case_001");
  CHECK(c.tumor_mask == ref.tumor_mask);
  CHECK(scan_volume_ids(dir.string(), "_mask") == a.ids);
  const SynthResult empty = write_synthetic_dataset(spec, 0, (dir / "empty").string());
  CHECK(empty.ids.empty());
  fs::remove_all(dir);
}

TEST_CASE("two-stage training: gating, bank counters, checkpoints, resume") {
  const fs::path out = scratch("train");
  const NetworkConfig cfg = micro();
  const auto cases = micro_cases(2);

  TrainOptions opt;
  opt.out_dir = out.string();
  const TrainReport r = train(cfg, cases, {}, opt);
  CHECK(r.state.stage == 2);
  CHECK(r.state.stage_complete);
  // 1 stage-2 epoch of 2 iterations, one bank update per iteration
  CHECK(r.state.bank.update_count == 2);
  CHECK(fs::exists(r.best_ckpt));
  CHECK(fs::exists(r.last_ckpt));
  CHECK(fs::exists(r.stage1_ckpt));

  HybridNet<float> init(cfg);
  init.init(static_cast<std::uint64_t>(cfg.seed));
  LoadedCheckpoint s1 = load_checkpoint(r.stage1_ckpt);
  LoadedCheckpoint s2 = load_checkpoint(r.last_ckpt);
  auto frozen = [](HybridNet<float>& n) {
    auto v = n.transformer_params();
    for (auto* p : n.prototype_params()) v.push_back(p);
    return v;
  };
  const auto i0 = frozen(init), a1 = frozen(*s1.net), a2 = frozen(*s2.net);
  REQUIRE(i0.size() == a1.size());
  bool changed = false;
  for (std::size_t k = 0; k < i0.size(); ++k) {
    CHECK(i0[k]->value == a1[k]->value);
    changed = changed || !(i0[k]->value == a2[k]->value);
  }
  CHECK(changed);
  CHECK(s2.state.bank.initialized);

  // resuming the final stage from the stage-1 checkpoint reproduces the log bitwise
  const std::string log_full = slurp(r.log_csv);
  TrainOptions again = opt;
  again.only_stage = 2;
  train(cfg, cases, {}, again);
  CHECK(slurp(r.log_csv) == log_full);
  fs::remove_all(out);
}

TEST_CASE("stage 2 without a stage-1 checkpoint is refused") {
  const fs::path out = scratch("nostage1");
  TrainOptions opt;
  opt.out_dir = out.string();
  opt.only_stage = 2;
  CHECK_THROWS_AS(train(micro(), micro_cases(1), {}, opt), ConfigError);
  fs::remove_all(out);
}

TEST_CASE("backbone-only ablation trains and stores no optional parameters") {
  const fs::path out = scratch("e1d");
  NetworkConfig cfg = micro();
  cfg.flags = {false, false, false, false, true};
  TrainOptions opt;
  opt.out_dir = out.string();
  opt.validate = false;
  const TrainReport r = train(cfg, micro_cases(1), {}, opt);
  LoadedCheckpoint ck = load_checkpoint(r.last_ckpt);
  CHECK(ck.net->transformer_params().empty());
  CHECK(ck.net->prototype_params().empty());
  const auto seg = load_segmenter(r.last_ckpt);
  CHECK_FALSE(seg->parts().prototypes);
  fs::remove_all(out);
}
