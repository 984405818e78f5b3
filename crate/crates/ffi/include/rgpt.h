#ifndef RGPT_H
#define RGPT_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function.
 */
typedef enum RgptStatus {
  RGPT_STATUS_OK = 0,
  RGPT_STATUS_INVALID_ARGUMENT = 1,
  RGPT_STATUS_CONFIG_ERROR = 2,
  RGPT_STATUS_NUMERIC_ERROR = 3,
  RGPT_STATUS_IO_ERROR = 4,
  RGPT_STATUS_RETRIEVAL_ERROR = 5,
  RGPT_STATUS_PANIC = 6,
} RgptStatus;

/**
 * An experiment configuration, starting from defaults.
 */
typedef struct RgptConfig RgptConfig;

/**
 * A loaded memory bank.
 */
typedef struct RgptMemoryBank RgptMemoryBank;

/**
 * Metrics of a finished experiment.
 */
typedef struct RgptReport RgptReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *rgpt_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into the library on this thread.
 */
const char *rgpt_last_error_message(void);

/**
 * Loads a memory bank file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RgptStatus rgpt_memory_load(const char *path, struct RgptMemoryBank **out);

/**
 * Releases a bank; null is ignored.
 *
 * # Safety
 * `bank` must come from [`rgpt_memory_load`] and not be used afterwards.
 */
void rgpt_memory_free(struct RgptMemoryBank *bank);

/**
 * Number of entries in a bank.
 *
 * # Safety
 * `bank` must be a live handle and `out` a valid pointer.
 */
enum RgptStatus rgpt_memory_count(const struct RgptMemoryBank *bank, size_t *out);

/**
 * Embedding width `d` of a bank (the query length for top-K search).
 *
 * # Safety
 * `bank` must be a live handle and `out` a valid pointer.
 */
enum RgptStatus rgpt_memory_width(const struct RgptMemoryBank *bank, size_t *out);

/**
 * Exact cosine top-`k` over the bank's text (`modality = 0`) or image
 * (`modality = 1`) global embeddings. Writes `k` ids and scores in rank
 * order. When `has_exclude` is nonzero, `exclude_id` is never returned.
 *
 * # Safety
 * `query` must hold `query_len` doubles; `out_ids` and `out_scores` must
 * hold `k` elements each.
 */
enum RgptStatus rgpt_memory_topk(const struct RgptMemoryBank *bank,
                                 const double *query,
                                 size_t query_len,
                                 uint32_t modality,
                                 size_t k,
                                 uint8_t has_exclude,
                                 uint64_t exclude_id,
                                 uint64_t *out_ids,
                                 double *out_scores);

/**
 * Creates a configuration holding the defaults.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum RgptStatus rgpt_config_new(struct RgptConfig **out);

/**
 * Sets one `key` to `value`, as in a configuration file line.
 *
 * # Safety
 * `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum RgptStatus rgpt_config_set(struct RgptConfig *cfg, const char *key, const char *value);

/**
 * Applies a `key=value` configuration file on top of the current values.
 *
 * # Safety
 * `cfg` must be a live handle; `path` a NUL-terminated string.
 */
enum RgptStatus rgpt_config_load_file(struct RgptConfig *cfg, const char *path);

/**
 * Releases a configuration; null is ignored.
 *
 * # Safety
 * `cfg` must come from [`rgpt_config_new`] and not be used afterwards.
 */
void rgpt_config_free(struct RgptConfig *cfg);

/**
 * Generates data, trains and evaluates one configuration.
 *
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum RgptStatus rgpt_run_experiment(const struct RgptConfig *cfg, struct RgptReport **out);

/**
 * Reads a metric by name: `accuracy`, `auroc`, `f1_micro` or `f1_sample`.
 * An undefined AUROC (single-class test set) returns `NumericError`.
 *
 * # Safety
 * `report` must be a live handle, `name` a NUL-terminated string and `out`
 * a valid pointer.
 */
enum RgptStatus rgpt_report_metric(const struct RgptReport *report, const char *name, double *out);

/**
 * Serializes a report to JSON. Free the string with [`rgpt_string_free`].
 *
 * # Safety
 * `report` must be a live handle and `out` a valid pointer.
 */
enum RgptStatus rgpt_report_to_json(const struct RgptReport *report, char **out);

/**
 * Releases a report; null is ignored.
 *
 * # Safety
 * `report` must come from [`rgpt_run_experiment`] and not be used afterwards.
 */
void rgpt_report_free(struct RgptReport *report);

/**
 * Releases a string returned by the library; null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void rgpt_string_free(char *s);

/**
 * Rank-based AUROC of `scores` against 0/1 `labels`; ties count one half.
 *
 * # Safety
 * `scores` and `labels` must hold `len` elements; `out` must be valid.
 */
enum RgptStatus rgpt_auroc(const double *scores, const uint8_t *labels, size_t len, double *out);

/**
 * Runs the finite-difference gradient suite and reports the worst relative
 * error across all modules.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum RgptStatus rgpt_gradcheck(double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RGPT_H */
