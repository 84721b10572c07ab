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

#include "plhn/plhn.h"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>
#include <string>

#include <json.hpp>

#include "checkpoint.hpp"
#include "dataset.hpp"
#include "log.hpp"
#include "network.hpp"
#include "pipeline.hpp"
#include "trainer.hpp"

using nlohmann::json;

struct plhn_config {
  plhn::NetworkConfig cfg;
};

struct plhn_model {
  std::unique_ptr<plhn::Segmenter> seg;
  std::string path;
  std::string config_hash;
  int stage = 0;
  int epoch = 0;
};

namespace {

thread_local std::string g_last_error;

plhn_status fail(plhn_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

template <typename F>
plhn_status guard(F&& f) {
  try {
    g_last_error.clear();
    f();
    return PLHN_OK;
  } catch (const plhn::Error& e) {
    return fail(static_cast<plhn_status>(static_cast<int>(e.kind())), e.what());
  } catch (const json::exception& e) {
    return fail(PLHN_ERR_INVALID, std::string("invalid JSON: ") + e.what());
  } catch (const std::bad_alloc&) {
    return fail(PLHN_ERR_INTERNAL, "out of memory");
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(PLHN_ERR_IO, e.what());
  } catch (const std::exception& e) {
    return fail(PLHN_ERR_INTERNAL, e.what());
  }
}

char* dup(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (!p) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

void put(char** out, const std::string& s) {
  if (out) *out = dup(s);
}

void require(const void* p, const char* what) {
  if (!p) throw plhn::InvalidInputError(std::string(what) + " must not be NULL");
}

std::string opt_str(const char* s) { return s ? s : ""; }

plhn::VolumeFormat parse_format(const char* f) {
  const std::string s = opt_str(f);
  if (s.empty() || s == "raw") return plhn::VolumeFormat::Raw;
  if (s == "nifti") return plhn::VolumeFormat::Nifti;
  if (s == "nifti_gz") return plhn::VolumeFormat::NiftiGz;
  throw plhn::InvalidInputError("unknown volume format '" + s + "' (raw, nifti, nifti_gz)");
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

extern "C" {

const char* plhn_version(void) { return PLHN_VERSION_STRING; }

const char* plhn_last_error(void) { return g_last_error.c_str(); }

void plhn_string_free(char* s) { std::free(s); }

void plhn_set_log_callback(plhn_log_fn fn, void* user) {
  if (!fn) {
    plhn::log::set_sink({});
    return;
  }
  plhn::log::set_sink([fn, user](plhn::log::Level l, const std::string& m) {
    fn(static_cast<plhn_log_level>(static_cast<int>(l)), m.c_str(), user);
  });
}

void plhn_set_log_level(plhn_log_level level) {
  plhn::log::set_min_level(static_cast<plhn::log::Level>(static_cast<int>(level)));
}

plhn_status plhn_config_default(plhn_config** out) {
  return guard([&] {
    require(out, "out");
    *out = new plhn_config{};
  });
}

plhn_status plhn_config_from_json(const char* text, plhn_config** out) {
  return guard([&] {
    require(text, "json");
    require(out, "out");
    auto c = std::make_unique<plhn_config>();
    c->cfg = plhn::config_from_json(text);
    plhn::require_valid(c->cfg);
    *out = c.release();
  });
}

plhn_status plhn_config_load(const char* path, plhn_config** out) {
  return guard([&] {
    require(path, "path");
    require(out, "out");
    auto c = std::make_unique<plhn_config>();
    c->cfg = plhn::load_config(path);
    plhn::require_valid(c->cfg);
    *out = c.release();
  });
}

plhn_status plhn_config_update(plhn_config* cfg, const char* patch) {
  return guard([&] {
    require(cfg, "cfg");
    require(patch, "json");
    json base = json::parse(plhn::config_to_json(cfg->cfg, -1));
    base.merge_patch(json::parse(patch));
    plhn::NetworkConfig next = plhn::config_from_json(base.dump());
    plhn::require_valid(next);
    cfg->cfg = next;
  });
}

plhn_status plhn_config_to_json(const plhn_config* cfg, char** out_json) {
  return guard([&] {
    require(cfg, "cfg");
    put(out_json, plhn::config_to_json(cfg->cfg));
  });
}

void plhn_config_free(plhn_config* cfg) { delete cfg; }

plhn_status plhn_inspect(const plhn_config* cfg, const int64_t* dims, char** out_json) {
  return guard([&] {
    require(cfg, "cfg");
    const plhn::Dims3 d = dims ? plhn::Dims3{dims[0], dims[1], dims[2]} : cfg->cfg.patch_dims;
    for (int a = 0; a < 3; ++a)
      if (d[a] <= 0 || d[a] % (8 * cfg->cfg.Ws) != 0)
        throw plhn::InvalidInputError("input dims " + d.str() + " must be positive multiples of 8*Ws");
    json rows = json::array();
    std::int64_t params = 0;
    double flops = 0.0;
    for (const auto& r : plhn::cost_table(cfg->cfg, d)) {
      rows.push_back({{"module", r.name}, {"params", r.params}, {"flops", r.flops}});
      params += r.params;
      flops += r.flops;
    }
    put(out_json, json{{"input_dims", {d.h, d.w, d.z}},
                       {"params", params},
                       {"flops", flops},
                       {"gflops", flops / 1e9},
                       {"modules", rows},
                       {"config_hash", plhn::config_hash(cfg->cfg)}}
                      .dump(2));
  });
}

plhn_status plhn_synth(const char* spec_json, int count, const char* out_dir, const char* format, char** out_json) {
  return guard([&] {
    require(spec_json, "spec_json");
    require(out_dir, "out_dir");
    const plhn::SyntheticSpec spec = plhn::synthetic_spec_from_json(spec_json);
    const auto r = plhn::write_synthetic_dataset(spec, count, out_dir, parse_format(format));
    put(out_json,
        json{{"ids", r.ids}, {"manifest", r.manifest_path}, {"manifest_hash", r.manifest_hash}}.dump(2));
  });
}

plhn_status plhn_train(const plhn_config* cfg, const char* data_dir, const char* val_dir, const char* out_dir,
                       const char* resume, int stage, plhn_epoch_fn on_epoch, void* user, char** out_json) {
  return guard([&] {
    require(cfg, "cfg");
    require(data_dir, "data_dir");
    require(out_dir, "out_dir");
    const plhn::NetworkConfig& c = cfg->cfg;
    plhn::require_valid(c);
    const auto cases = plhn::load_training_cases(data_dir, c);
    std::vector<plhn::VolumeCase> val;
    if (val_dir && *val_dir) val = plhn::load_training_cases(val_dir, c);
    plhn::TrainOptions opt;
    opt.out_dir = out_dir;
    opt.resume = opt_str(resume);
    opt.only_stage = stage;
    plhn::EpochCallback cb;
    if (on_epoch)
      cb = [&](const plhn::EpochSummary& e) {
        const json j{{"stage", e.stage},
                     {"epoch", e.epoch},
                     {"mean_total", e.mean_total},
                     {"mean_seg_loss", e.mean_seg_loss},
                     {"val_dsc", opt_json(e.val_dsc)}};
        on_epoch(j.dump().c_str(), user);
      };
    const plhn::TrainReport r = plhn::train(c, cases, val, opt, cb);
    put(out_json, json{{"stage", r.state.stage},
                       {"epoch", r.state.epoch},
                       {"iteration", r.state.iteration},
                       {"best_dsc", r.state.best_dsc},
                       {"best_epoch", r.state.best_epoch},
                       {"bank_updates", r.state.bank.update_count},
                       {"last_ckpt", r.last_ckpt},
                       {"best_ckpt", r.best_ckpt},
                       {"stage1_ckpt", r.stage1_ckpt},
                       {"log_csv", r.log_csv},
                       {"config", r.config_snapshot}}
                      .dump(2));
  });
}

plhn_status plhn_model_load(const char* checkpoint, plhn_model** out) {
  return guard([&] {
    require(checkpoint, "checkpoint");
    require(out, "out");
    plhn::LoadedCheckpoint ck = plhn::load_checkpoint(checkpoint);
    auto m = std::make_unique<plhn_model>();
    m->path = checkpoint;
    m->config_hash = ck.config_hash;
    m->stage = ck.state.stage;
    m->epoch = ck.state.epoch;
    const plhn::ActiveParts parts = plhn::checkpoint_parts(ck);
    m->seg = std::make_unique<plhn::Segmenter>(std::move(ck.net), std::move(ck.state.bank), parts);
    *out = m.release();
  });
}

plhn_status plhn_model_info(const plhn_model* model, char** out_json) {
  return guard([&] {
    require(model, "model");
    put(out_json, json{{"checkpoint", model->path},
                       {"config_hash", model->config_hash},
                       {"stage", model->stage},
                       {"epoch", model->epoch},
                       {"transformer", model->seg->parts().transformer},
                       {"prototypes", model->seg->parts().prototypes},
                       {"config", json::parse(plhn::config_to_json(model->seg->config(), -1))}}
                      .dump(2));
  });
}

void plhn_model_free(plhn_model* model) { delete model; }

plhn_status plhn_plan_inference(const char* input, const char* roi, char** out_json) {
  return guard([&] {
    require(input, "input");
    json arr = json::array();
    for (const auto& j : plhn::plan_inference(input, opt_str(roi)))
      arr.push_back({{"id", j.id}, {"pre", j.pre}, {"post", j.post}, {"roi", j.roi}});
    put(out_json, arr.dump(2));
  });
}

plhn_status plhn_infer_case(plhn_model* model, const char* id, const char* pre, const char* post, const char* roi,
                            const char* out_dir, const char* format, char** out_json) {
  return guard([&] {
    require(model, "model");
    require(id, "id");
    require(pre, "pre");
    require(post, "post");
    require(out_dir, "out_dir");
    const plhn::InferJob job{id, pre, post, opt_str(roi)};
    const auto o = plhn::infer_to_files(job, *model->seg, out_dir, parse_format(format));
    std::int64_t fg = 0;
    for (auto v : o.prediction.mask.data()) fg += v;
    put(out_json, json{{"id", o.id},
                       {"mask", o.mask_path},
                       {"prob", o.prob_path},
                       {"sidecar", o.sidecar_path},
                       {"windows", o.prediction.windows},
                       {"foreground_voxels", fg},
                       {"runtime_s", o.prediction.seconds}}
                      .dump(2));
  });
}

plhn_status plhn_eval(const char* pred_dir, const char* gt_dir, const char* out_prefix, const char* overlay_dir,
                      int threads, char** out_json) {
  return guard([&] {
    require(pred_dir, "pred_dir");
    require(gt_dir, "gt_dir");
    require(out_prefix, "out_prefix");
    const auto report = plhn::evaluate_directories(pred_dir, gt_dir, threads, opt_str(overlay_dir));
    plhn::write_report(report, out_prefix);
    put(out_json, plhn::report_json(report));
  });
}

}  // extern "C"
