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

/* C interface to the PLHN breast-tumour segmentation library.
 *
 * Conventions:
 *  - Every fallible call returns a plhn_status; on failure plhn_last_error() describes it
 *    (thread-local, valid until the next call on the same thread).
 *  - Strings returned through `char**` are owned by the caller and released with plhn_string_free.
 *  - Structured results are JSON documents.
 *  - Handles are opaque; a handle must not be used from two threads at once.
 */
#ifndef PLHN_PLHN_H
#define PLHN_PLHN_H

#include <stdint.h>

#if defined(_WIN32)
#if defined(PLHN_BUILDING_LIBRARY)
#define PLHN_API __declspec(dllexport)
#else
#define PLHN_API __declspec(dllimport)
#endif
#else
#define PLHN_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Values double as CLI exit codes. */
typedef enum plhn_status {
  PLHN_OK = 0,
  PLHN_ERR_INTERNAL = 1,
  PLHN_ERR_INVALID = 2, /* bad arguments, config or input data */
  PLHN_ERR_IO = 3,
  PLHN_ERR_NUMERIC = 4  /* e.g. training diverged */
} plhn_status;

typedef enum plhn_log_level {
  PLHN_LOG_DEBUG = 0,
  PLHN_LOG_INFO = 1,
  PLHN_LOG_WARN = 2,
  PLHN_LOG_ERROR = 3
} plhn_log_level;

typedef struct plhn_config plhn_config;
typedef struct plhn_model plhn_model;

typedef void (*plhn_log_fn)(plhn_log_level level, const char* message, void* user);
/* Receives one JSON object per finished epoch. */
typedef void (*plhn_epoch_fn)(const char* epoch_json, void* user);

PLHN_API const char* plhn_version(void);
PLHN_API const char* plhn_last_error(void);
PLHN_API void plhn_string_free(char* s);

/* NULL restores logging to stderr. */
PLHN_API void plhn_set_log_callback(plhn_log_fn fn, void* user);
PLHN_API void plhn_set_log_level(plhn_log_level level);

/* ---- configuration ---- */
PLHN_API plhn_status plhn_config_default(plhn_config** out);
PLHN_API plhn_status plhn_config_from_json(const char* json, plhn_config** out);
PLHN_API plhn_status plhn_config_load(const char* path, plhn_config** out);
/* Applies the keys of `json` on top of `cfg` and re-validates. */
PLHN_API plhn_status plhn_config_update(plhn_config* cfg, const char* json);
PLHN_API plhn_status plhn_config_to_json(const plhn_config* cfg, char** out_json);
PLHN_API void plhn_config_free(plhn_config* cfg);

/* Parameter count, FLOP estimate and per-module table. `dims` (H, W, Z) may be NULL for the
 * configured patch size. */
PLHN_API plhn_status plhn_inspect(const plhn_config* cfg, const int64_t* dims, char** out_json);

/* ---- data ---- */
/* `format` is "raw", "nifti" or "nifti_gz" (NULL: raw). Result: ids, manifest path and hash. */
PLHN_API plhn_status plhn_synth(const char* spec_json, int count, const char* out_dir, const char* format,
                                char** out_json);

/* ---- training ---- */
/* `val_dir` and `resume` may be NULL; `stage` is 0 for the full schedule, 1 or 2 for one stage. */
PLHN_API plhn_status plhn_train(const plhn_config* cfg, const char* data_dir, const char* val_dir,
                                const char* out_dir, const char* resume, int stage, plhn_epoch_fn on_epoch,
                                void* user, char** out_json);

/* ---- inference ---- */
PLHN_API plhn_status plhn_model_load(const char* checkpoint, plhn_model** out);
PLHN_API plhn_status plhn_model_info(const plhn_model* model, char** out_json);
PLHN_API void plhn_model_free(plhn_model* model);

/* Expands `input` (dataset directory or case stem) into a JSON array of jobs {id, pre, post, roi}. */
PLHN_API plhn_status plhn_plan_inference(const char* input, const char* roi, char** out_json);
/* Segments one case; `roi` may be NULL. Writes `<out_dir>/<id>_mask`, `<id>_prob`, `<id>.json`. */
PLHN_API plhn_status plhn_infer_case(plhn_model* model, const char* id, const char* pre, const char* post,
                                     const char* roi, const char* out_dir, const char* format, char** out_json);

/* ---- evaluation ---- */
/* Writes `<out_prefix>.csv` and `.json`; `overlay_dir` may be NULL. Result: the report JSON. */
PLHN_API plhn_status plhn_eval(const char* pred_dir, const char* gt_dir, const char* out_prefix,
                               const char* overlay_dir, int threads, char** out_json);

#ifdef __cplusplus
}
#endif

#endif /* PLHN_PLHN_H */
