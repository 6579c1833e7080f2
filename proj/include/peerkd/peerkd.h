/* SPDX-License-Identifier: Apache-2.0
 *
 * C API of the peerkd training engine. All functions return a status code;
 * on failure peerkd_last_error() describes what went wrong. Objects are
 * opaque handles owned by the caller and released with the matching _free.
 */
#ifndef PEERKD_H
#define PEERKD_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum peerkd_status {
    PEERKD_OK = 0,
    PEERKD_ERR_ARG = 1,     /* invalid argument / contract violation */
    PEERKD_ERR_CONFIG = 2,  /* configuration parse or validation error */
    PEERKD_ERR_IO = 3,      /* file missing, truncated, or unwritable */
    PEERKD_ERR_NUMERIC = 4, /* non-finite value encountered */
    PEERKD_ERR_INTERNAL = 5
} peerkd_status;

typedef struct peerkd_config peerkd_config;
typedef struct peerkd_checkpoint peerkd_checkpoint;

const char* peerkd_version(void);
const char* peerkd_status_name(peerkd_status status);

/* Message of the most recent failure on this thread; empty string if none. */
const char* peerkd_last_error(void);

/* Releases strings returned through char** out-parameters. */
void peerkd_string_free(char* s);

/* --- configuration ------------------------------------------------------ */

peerkd_status peerkd_config_default(peerkd_config** out);
peerkd_status peerkd_config_load(const char* path, peerkd_config** out);
/* key is "section.name", e.g. "optim.lr". */
peerkd_status peerkd_config_set(peerkd_config* cfg, const char* key, const char* value);
peerkd_status peerkd_config_validate(const peerkd_config* cfg);
/* Serialized config text (caller frees with peerkd_string_free). */
peerkd_status peerkd_config_dump(const peerkd_config* cfg, char** text_out);
void peerkd_config_free(peerkd_config* cfg);

/* --- training & evaluation ---------------------------------------------- */

/* Runs the training loop; artifacts land in the configured output directory.
 * On success *summary_json_out holds the run summary (caller frees). */
peerkd_status peerkd_train(const peerkd_config* cfg, char** summary_json_out);

/* Evaluates a checkpoint on the dataset described by cfg's [data] section.
 * mode: "target", "ensemble", or "peerJ". split: "test" or "train". */
peerkd_status peerkd_evaluate(const peerkd_config* cfg, const char* checkpoint_path,
                              const char* mode, const char* split, double* top1_error_out);

/* --- checkpoints --------------------------------------------------------- */

peerkd_status peerkd_checkpoint_open(const char* path, peerkd_checkpoint** out);
/* JSON description: kind, metadata, per-component parameter/buffer counts. */
peerkd_status peerkd_checkpoint_info(const peerkd_checkpoint* ckpt, char** json_out);
/* Writes target.ckpt and (when present) ensemble.ckpt deployment files
 * extracted from a train-state checkpoint into out_dir. */
peerkd_status peerkd_checkpoint_export(const peerkd_checkpoint* ckpt, const char* out_dir);
void peerkd_checkpoint_free(peerkd_checkpoint* ckpt);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* PEERKD_H */
