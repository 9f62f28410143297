#ifndef LEVYTD_H
#define LEVYTD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum LevytdStatus {
  Ok = 0,
  NullPointer = 1,
  InvalidArgument = 2,
  InvalidConfig = 3,
  Diverged = 4,
  Io = 5,
  Internal = 6,
} LevytdStatus;

/**
 * Opaque experiment configuration.
 */
typedef struct LevytdConfig LevytdConfig;

/**
 * Opaque result of one completed training run.
 */
typedef struct LevytdRun LevytdRun;

/**
 * Library version as a static NUL-terminated string.
 */
const char *levytd_version(void);

/**
 * Message of the most recent error on this thread; empty when none.
 * The pointer stays valid until the next failing call on the thread.
 */
const char *levytd_last_error(void);

/**
 * Fresh configuration with the benchmark defaults. Free with
 * `levytd_config_free`.
 */
struct LevytdConfig *levytd_config_new(void);

/**
 * Set one configuration field by its config-file key (`problem`, `d`, `M`,
 * `N`, `iterations`, `td_step`, `T`, `lambda`, `jump`, `jump_params`,
 * `epsilon`, `theta`, `lr0`, `lr_drop_every`, `lr_drop_factor`, `seed`,
 * `out_dir`, `log_every`, `paths`).
 *
 * # Safety
 * `config` must come from `levytd_config_new`; `key` and `value` must be
 * NUL-terminated strings.
 */
enum LevytdStatus levytd_config_set(struct LevytdConfig *config,
                                    const char *key,
                                    const char *value);

/**
 * Apply a flat `key = value` config file on top of the current values.
 *
 * # Safety
 * `config` must come from `levytd_config_new`; `path` must be a
 * NUL-terminated string.
 */
enum LevytdStatus levytd_config_load_file(struct LevytdConfig *config, const char *path);

/**
 * # Safety
 * `config` must be null or a pointer from `levytd_config_new`, not freed
 * twice.
 */
void levytd_config_free(struct LevytdConfig *config);

/**
 * Train the configuration and return a result handle in `out`. No files
 * are written; pair with `levytd_run_artifacts` for the CSV outputs.
 *
 * # Safety
 * `config` must come from `levytd_config_new`; `out` must point to
 * writable storage for one pointer.
 */
enum LevytdStatus levytd_train(const struct LevytdConfig *config, struct LevytdRun **out);

/**
 * Run the configuration end to end, writing `metrics.csv`,
 * `trajectories.csv`, and `summary.txt` under its output directory.
 *
 * # Safety
 * `config` must come from `levytd_config_new`.
 */
enum LevytdStatus levytd_run_artifacts(const struct LevytdConfig *config);

/**
 * Final network estimate of Y₀ = u(0, ξ). NaN for a null handle.
 *
 * # Safety
 * `run` must be null or a pointer from `levytd_train`.
 */
double levytd_run_y0(const struct LevytdRun *run);

/**
 * Exact Y₀ of the problem, NaN when unknown or for a null handle.
 *
 * # Safety
 * `run` must be null or a pointer from `levytd_train`.
 */
double levytd_run_exact_y0(const struct LevytdRun *run);

/**
 * |estimate − exact| / |exact|. NaN for a null handle.
 *
 * # Safety
 * `run` must be null or a pointer from `levytd_train`.
 */
double levytd_run_rel_error(const struct LevytdRun *run);

/**
 * Optimizer steps taken. 0 for a null handle.
 *
 * # Safety
 * `run` must be null or a pointer from `levytd_train`.
 */
uint64_t levytd_run_updates(const struct LevytdRun *run);

/**
 * Wall-clock training time in seconds. NaN for a null handle.
 *
 * # Safety
 * `run` must be null or a pointer from `levytd_train`.
 */
double levytd_run_seconds(const struct LevytdRun *run);

/**
 * # Safety
 * `run` must be null or a pointer from `levytd_train`, not freed twice.
 */
void levytd_run_free(struct LevytdRun *run);

#endif  /* LEVYTD_H */
