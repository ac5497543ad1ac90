#ifndef GSTUDA_H
#define GSTUDA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function.
 */
typedef enum GstudaStatus {
  GSTUDA_STATUS_OK = 0,
  GSTUDA_STATUS_NULL_POINTER = 1,
  GSTUDA_STATUS_INVALID_ARGUMENT = 2,
  GSTUDA_STATUS_CONFIG = 3,
  GSTUDA_STATUS_IO = 4,
  GSTUDA_STATUS_FORMAT = 5,
  GSTUDA_STATUS_DIVERGED = 6,
  GSTUDA_STATUS_NON_FINITE = 7,
  GSTUDA_STATUS_BUFFER_TOO_SMALL = 8,
  GSTUDA_STATUS_OUTPUT_EXISTS = 9,
  GSTUDA_STATUS_PANIC = 10,
  GSTUDA_STATUS_OTHER = 11,
} GstudaStatus;

/**
 * Experiment configuration handle.
 */
typedef struct GstudaConfig GstudaConfig;

/**
 * Translator model handle.
 */
typedef struct GstudaModel GstudaModel;

/**
 * Finished experiment handle: the aggregated report and any cell failures.
 */
typedef struct GstudaReport GstudaReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, empty if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *gstuda_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gstuda_version(void);

/**
 * Creates a configuration with every default.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum GstudaStatus gstuda_config_default(struct GstudaConfig **out);

/**
 * Parses configuration text over the defaults.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` as in [`gstuda_config_default`].
 */
enum GstudaStatus gstuda_config_parse(const char *text, struct GstudaConfig **out);

/**
 * Reads and parses a configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` as in [`gstuda_config_default`].
 */
enum GstudaStatus gstuda_config_load(const char *path, struct GstudaConfig **out);

/**
 * Assigns one `key.path` to `value`, using the config file's syntax. The
 * config is left unchanged if the result would not validate.
 *
 * # Safety
 * `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum GstudaStatus gstuda_config_set(struct GstudaConfig *cfg, const char *key, const char *value);

/**
 * Writes the resolved config text into `buf`.
 *
 * # Safety
 * `cfg` must be a live handle; `buf` must hold `capacity` bytes (or be null
 * to query the size through `needed`).
 */
enum GstudaStatus gstuda_config_to_text(const struct GstudaConfig *cfg,
                                        char *buf,
                                        size_t capacity,
                                        size_t *needed);

/**
 * Releases a config handle; null is ignored.
 *
 * # Safety
 * `cfg` must come from this library and not be used afterwards.
 */
void gstuda_config_free(struct GstudaConfig *cfg);

/**
 * Generates the datasets of `cfg` into `out_dir`.
 *
 * # Safety
 * `cfg` must be a live handle and `out_dir` a NUL-terminated string.
 */
enum GstudaStatus gstuda_generate(const struct GstudaConfig *cfg, const char *out_dir, bool force);

/**
 * Runs the experiment into the config's `output_dir`. Cell failures do not
 * fail the call; count them with [`gstuda_report_failure_count`].
 *
 * # Safety
 * `cfg` must be a live handle; `out` as in [`gstuda_config_default`].
 */
enum GstudaStatus gstuda_run(const struct GstudaConfig *cfg, bool force, struct GstudaReport **out);

/**
 * Re-evaluates a finished run directory.
 *
 * # Safety
 * `run_dir` must be a NUL-terminated string; `out` as in [`gstuda_config_default`].
 */
enum GstudaStatus gstuda_eval(const char *run_dir, struct GstudaReport **out);

/**
 * Renders the figures of a run directory.
 *
 * # Safety
 * `run_dir` must be a NUL-terminated string.
 */
enum GstudaStatus gstuda_plot(const char *run_dir);

/**
 * Writes the report as CSV (`method,metric,mean,sd`).
 *
 * # Safety
 * `report` must be a live handle; `buf` as in [`gstuda_config_to_text`].
 */
enum GstudaStatus gstuda_report_csv(const struct GstudaReport *report,
                                    char *buf,
                                    size_t capacity,
                                    size_t *needed);

/**
 * Mean and seed SD of `metric` (`l1`, `ssim` or `psnr`) for a report row.
 *
 * # Safety
 * `report` must be a live handle, `method` and `metric` NUL-terminated
 * strings, `mean` and `sd` writable.
 */
enum GstudaStatus gstuda_report_value(const struct GstudaReport *report,
                                      const char *method,
                                      const char *metric,
                                      double *mean,
                                      double *sd);

/**
 * Number of (cell, seed) pairs that failed; 0 for a null handle.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
size_t gstuda_report_failure_count(const struct GstudaReport *report);

/**
 * Releases a report handle; null is ignored.
 *
 * # Safety
 * `report` must come from this library and not be used afterwards.
 */
void gstuda_report_free(struct GstudaReport *report);

/**
 * Loads a translator from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` as in [`gstuda_config_default`].
 */
enum GstudaStatus gstuda_model_load(const char *path, struct GstudaModel **out);

/**
 * Deterministic prediction of one image.
 *
 * # Safety
 * `model` must be a live handle; `input` and `output` must each hold
 * `height * width` doubles.
 */
enum GstudaStatus gstuda_model_predict(const struct GstudaModel *model,
                                       const double *input,
                                       size_t height,
                                       size_t width,
                                       double *output);

/**
 * Monte Carlo dropout uncertainty of one image with `k` passes. Maps are
 * reported with the intensity range mapped to `[0, 1]`; `variance_unit` is
 * the range width the model's variance head was trained in (1 by default).
 * Any output pointer may be null to skip that map.
 *
 * # Safety
 * `model` must be a live handle; `input` and every non-null output must hold
 * `height * width` doubles.
 */
enum GstudaStatus gstuda_model_uncertainty(const struct GstudaModel *model,
                                           const double *input,
                                           size_t height,
                                           size_t width,
                                           size_t k,
                                           uint64_t seed,
                                           double variance_unit,
                                           double *epistemic,
                                           double *aleatoric,
                                           double *total);

/**
 * Releases a model handle; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void gstuda_model_free(struct GstudaModel *model);

/**
 * Keeps the `floor(rho * n)` smallest uncertainties (ties by index) as 1.
 *
 * # Safety
 * `u` and `weights` must each hold `n` doubles.
 */
enum GstudaStatus gstuda_binary_mask(const double *u, size_t n, double rho, double *weights);

/**
 * `exp(-u)` per element.
 *
 * # Safety
 * `u` and `weights` must each hold `n` doubles.
 */
enum GstudaStatus gstuda_continuous_mask(const double *u, size_t n, double *weights);

/**
 * Image quality metric of `pred` against `truth`, both on `[0, 255]`.
 *
 * # Safety
 * `pred` and `truth` must each hold `height * width` doubles; `value` must
 * be writable.
 */
enum GstudaStatus gstuda_metric(const char *metric,
                                const double *pred,
                                const double *truth,
                                size_t height,
                                size_t width,
                                double *value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GSTUDA_H */
