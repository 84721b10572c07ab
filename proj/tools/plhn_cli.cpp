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

// Command-line front end; talks to the library only through the C interface.
#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "plhn/plhn.h"

using nlohmann::json;

namespace {

// Owns a string returned by the library.
struct LibString {
  char* p = nullptr;
  ~LibString() { plhn_string_free(p); }
  std::string str() const { return p ? p : ""; }
};

struct ConfigHandle {
  plhn_config* p = nullptr;
  ~ConfigHandle() { plhn_config_free(p); }
};

struct ModelHandle {
  plhn_model* p = nullptr;
  ~ModelHandle() { plhn_model_free(p); }
};

// Thrown to unwind with a library status.
struct Failure {
  int code;
};

void check(plhn_status s) {
  if (s != PLHN_OK) {
    std::fprintf(stderr, "error: %s\n", plhn_last_error());
    throw Failure{static_cast<int>(s)};
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    std::fprintf(stderr, "error: cannot read %s\n", path.c_str());
    throw Failure{PLHN_ERR_IO};
  }
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int default_threads() {
  if (const char* env = std::getenv("PLHN_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

void log_to_stderr(plhn_log_level level, const char* msg, void*) {
  static const char* names[] = {"debug", "info", "warning", "error"};
  std::fprintf(stderr, "[plhn %s] %s\n", names[level], msg);
}

struct Options {
  int threads = default_threads();
  bool deterministic = false;
  bool quiet = false;
  bool verbose = false;

  // synth
  std::string spec, out, format = "raw";
  int count = 1;
  // train
  std::string config, data, val, resume;
  int stage = 0;
  // infer
  std::string ckpt, in, roi;
  // eval
  std::string pred, gt, overlay_dir;
  bool overlay = false;
  // inspect
  std::string input_dims;
};

int cmd_synth(const Options& o) {
  // --spec is a JSON file; a literal JSON object is accepted too
  const std::string spec = !o.spec.empty() && o.spec.front() == '{' ? o.spec : read_file(o.spec);
  LibString r;
  check(plhn_synth(spec.c_str(), o.count, o.out.c_str(), o.format.c_str(), &r.p));
  const json j = json::parse(r.str());
  std::printf("wrote %zu cases to %s\nmanifest %s (hash %s)\n", j["ids"].size(), o.out.c_str(),
              j["manifest"].get<std::string>().c_str(), j["manifest_hash"].get<std::string>().c_str());
  return 0;
}

void print_epoch(const char* epoch_json, void*) {
  const json e = json::parse(epoch_json);
  std::printf("stage %d epoch %d  loss %.6f  seg %.6f", e["stage"].get<int>(), e["epoch"].get<int>(),
              e["mean_total"].get<double>(), e["mean_seg_loss"].get<double>());
  if (!e["val_dsc"].is_null()) std::printf("  val_dsc %.4f", e["val_dsc"].get<double>());
  std::printf("\n");
  std::fflush(stdout);
}

int cmd_train(const Options& o) {
  ConfigHandle cfg;
  check(plhn_config_load(o.config.c_str(), &cfg.p));
  if (o.deterministic) check(plhn_config_update(cfg.p, R"({"deterministic": true})"));
  LibString r;
  check(plhn_train(cfg.p, o.data.c_str(), o.val.empty() ? nullptr : o.val.c_str(), o.out.c_str(),
                   o.resume.empty() ? nullptr : o.resume.c_str(), o.stage, print_epoch, nullptr, &r.p));
  const json j = json::parse(r.str());
  std::printf("done: stage %d, best val DSC %.4f\nlast %s\nbest %s\nlog  %s\n", j["stage"].get<int>(),
              j["best_dsc"].get<double>(), j["last_ckpt"].get<std::string>().c_str(),
              j["best_ckpt"].get<std::string>().c_str(), j["log_csv"].get<std::string>().c_str());
  return 0;
}

int cmd_infer(const Options& o) {
  LibString plan;
  check(plhn_plan_inference(o.in.c_str(), o.roi.empty() ? nullptr : o.roi.c_str(), &plan.p));
  const json jobs = json::parse(plan.str());
  const int workers = std::max(1, std::min<int>(o.deterministic ? 1 : o.threads, static_cast<int>(jobs.size())));

  std::vector<std::string> results(jobs.size()), errors(jobs.size());
  std::vector<int> codes(jobs.size(), 0);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    ModelHandle model;  // handles are single-threaded: one model per worker
    if (plhn_model_load(o.ckpt.c_str(), &model.p) != PLHN_OK) {
      for (std::size_t i; (i = next++) < jobs.size();) {
        codes[i] = PLHN_ERR_IO;
        errors[i] = plhn_last_error();
      }
      return;
    }
    for (std::size_t i; (i = next++) < jobs.size();) {
      const json& jb = jobs[i];
      const std::string id = jb["id"], pre = jb["pre"], post = jb["post"], roi = jb["roi"];
      LibString r;
      const plhn_status s = plhn_infer_case(model.p, id.c_str(), pre.c_str(), post.c_str(),
                                            roi.empty() ? nullptr : roi.c_str(), o.out.c_str(), o.format.c_str(), &r.p);
      codes[i] = s;
      if (s == PLHN_OK) results[i] = r.str();
      else errors[i] = plhn_last_error();
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < workers; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  int rc = 0;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (codes[i] != 0) {
      std::fprintf(stderr, "error: case %s: %s\n", jobs[i]["id"].get<std::string>().c_str(), errors[i].c_str());
      if (rc == 0) rc = codes[i];
      continue;
    }
    const json r = json::parse(results[i]);
    std::printf("%s: %lld foreground voxels, %zu windows, %.2fs -> %s\n", r["id"].get<std::string>().c_str(),
                static_cast<long long>(r["foreground_voxels"].get<std::int64_t>()), r["windows"].get<std::size_t>(),
                r["runtime_s"].get<double>(), r["mask"].get<std::string>().c_str());
  }
  return rc;
}

std::string fmt_opt(const json& v, const char* f) {
  if (v.is_null()) return "n/a";
  char b[64];
  std::snprintf(b, sizeof b, f, v.get<double>());
  return b;
}

int cmd_eval(const Options& o) {
  std::string overlay = o.overlay_dir;
  if (o.overlay && overlay.empty()) overlay = o.out + "_overlays";
  LibString r;
  check(plhn_eval(o.pred.c_str(), o.gt.c_str(), o.out.c_str(), overlay.empty() ? nullptr : overlay.c_str(),
                  o.deterministic ? 1 : o.threads, &r.p));
  const json j = json::parse(r.str());
  std::printf("%zu cases\n", j["cases"].size());
  for (const char* m : {"dsc", "ppv", "sen", "asd_mm", "hd95_mm"}) {
    const json& a = j["aggregate"][m];
    std::printf("  %-8s %s +- %s  (n=%lld, missing=%lld)\n", m, fmt_opt(a["mean"], "%.4f").c_str(),
                fmt_opt(a["half_width_95"], "%.4f").c_str(), static_cast<long long>(a["n"].get<std::int64_t>()),
                static_cast<long long>(a["missing"].get<std::int64_t>()));
  }
  return 0;
}

int cmd_inspect(const Options& o) {
  ConfigHandle cfg;
  if (o.config.empty()) check(plhn_config_default(&cfg.p));
  else check(plhn_config_load(o.config.c_str(), &cfg.p));
  std::int64_t dims[3];
  const std::int64_t* dp = nullptr;
  if (!o.input_dims.empty()) {
    char x1 = 0, x2 = 0;
    long long a = 0, b = 0, c = 0;
    std::istringstream is(o.input_dims);
    if (!(is >> a >> x1 >> b >> x2 >> c) || (x1 != 'x' && x1 != 'X') || (x2 != 'x' && x2 != 'X')) {
      std::fprintf(stderr, "error: --input-dims expects HxWxZ, got '%s'\n", o.input_dims.c_str());
      return PLHN_ERR_INVALID;
    }
    dims[0] = a;
    dims[1] = b;
    dims[2] = c;
    dp = dims;
  }
  LibString r;
  check(plhn_inspect(cfg.p, dp, &r.p));
  const json j = json::parse(r.str());
  std::printf("input %lldx%lldx%lld\n", static_cast<long long>(j["input_dims"][0].get<std::int64_t>()),
              static_cast<long long>(j["input_dims"][1].get<std::int64_t>()),
              static_cast<long long>(j["input_dims"][2].get<std::int64_t>()));
  std::printf("%-14s %14s %14s\n", "module", "params", "GFLOPs");
  for (const auto& m : j["modules"])
    std::printf("%-14s %14lld %14.3f\n", m["module"].get<std::string>().c_str(),
                static_cast<long long>(m["params"].get<std::int64_t>()), m["flops"].get<double>() / 1e9);
  std::printf("%-14s %14lld %14.3f\n", "total", static_cast<long long>(j["params"].get<std::int64_t>()),
              j["gflops"].get<double>());
  std::printf("params %.3fM  FLOPs %.2fG\n", static_cast<double>(j["params"].get<std::int64_t>()) / 1e6,
              j["gflops"].get<double>());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PLHN breast-tumour segmentation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(plhn_version()));
  Options o;
  app.add_option("--threads", o.threads, "Worker threads for per-case parallelism in infer/eval (env PLHN_THREADS)")
      ->check(CLI::PositiveNumber);
  app.add_flag("--deterministic", o.deterministic, "Force the single-threaded, bitwise-reproducible mode");
  app.add_flag("-q,--quiet", o.quiet, "Only print warnings and errors");
  app.add_flag("-v,--verbose", o.verbose, "Print debug messages");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with a manifest");
  synth->add_option("--spec", o.spec, "Synthetic spec JSON file (or an inline JSON object)")->required();
  synth->add_option("--out", o.out, "Output directory")->required();
  synth->add_option("--count", o.count, "Number of cases")->check(CLI::NonNegativeNumber);
  synth->add_option("--format", o.format, "Volume format")->check(CLI::IsMember({"raw", "nifti", "nifti_gz"}));

  auto* train = app.add_subcommand("train", "Train with the two-stage (or joint) schedule");
  train->add_option("--config", o.config, "Network/training config JSON")->required();
  train->add_option("--data", o.data, "Training dataset directory")->required();
  train->add_option("--out", o.out, "Output directory for checkpoints, log and config snapshot")->required();
  train->add_option("--val", o.val, "Validation dataset directory (default: the training cases)");
  train->add_option("--resume", o.resume, "Checkpoint to resume from");
  train->add_option("--stage", o.stage, "Run only this stage of the two-stage schedule")->check(CLI::IsMember({1, 2}));

  auto* infer = app.add_subcommand("infer", "Segment volumes with a trained checkpoint");
  infer->add_option("--ckpt", o.ckpt, "Checkpoint file")->required();
  infer->add_option("--in", o.in, "Dataset directory, or a case stem with <stem>_pre/<stem>_post")->required();
  infer->add_option("--out", o.out, "Output directory")->required();
  infer->add_option("--roi", o.roi, "Breast ROI mask (a directory of <id>_roi files for directory input)");
  infer->add_option("--format", o.format, "Output volume format")->check(CLI::IsMember({"raw", "nifti", "nifti_gz"}));

  auto* eval = app.add_subcommand("eval", "Score predicted masks against ground truth");
  eval->add_option("--pred", o.pred, "Directory of <id>_mask predictions")->required();
  eval->add_option("--gt", o.gt, "Directory of <id>_mask ground truth")->required();
  eval->add_option("--out", o.out, "Report path prefix; writes <out>.csv and <out>.json")->required();
  eval->add_flag("--overlay", o.overlay, "Write per-slice PNG contour overlays to <out>_overlays");
  eval->add_option("--overlay-dir", o.overlay_dir, "Overlay directory (implies --overlay)");

  auto* inspect = app.add_subcommand("inspect", "Parameter count and FLOP estimate");
  inspect->add_option("--config", o.config, "Config JSON (default: the built-in defaults)");
  inspect->add_option("--input-dims", o.input_dims, "Input size HxWxZ (default: the patch size)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : PLHN_ERR_INVALID;
  }

  plhn_set_log_callback(log_to_stderr, nullptr);
  plhn_set_log_level(o.verbose ? PLHN_LOG_DEBUG : (o.quiet ? PLHN_LOG_WARN : PLHN_LOG_INFO));
  try {
    if (app.got_subcommand(synth)) return cmd_synth(o);
    if (app.got_subcommand(train)) return cmd_train(o);
    if (app.got_subcommand(infer)) return cmd_infer(o);
    if (app.got_subcommand(eval)) return cmd_eval(o);
    if (app.got_subcommand(inspect)) return cmd_inspect(o);
  } catch (const Failure& f) {
    return f.code;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return PLHN_ERR_INTERNAL;
  }
  return PLHN_ERR_INVALID;
}
