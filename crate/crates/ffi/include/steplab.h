#ifndef STEPLAB_H
#define STEPLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Values accepted as the `method` argument of `sl_run_step_uncertainties`.
typedef enum SlMethod {
  SL_METHOD_UHEAD = 0,
  SL_METHOD_MAX_PROB = 1,
  SL_METHOD_MEAN_ENTROPY = 2,
  SL_METHOD_PERPLEXITY = 3,
  SL_METHOD_SELF_CERTAINTY = 4,
} SlMethod;

// Result code of every fallible call.
typedef enum SlStatus {
  SL_STATUS_OK = 0,
  SL_STATUS_NULL_POINTER = 1,
  SL_STATUS_INVALID_ARGUMENT = 2,
  // Output buffer too small; the required length was still written.
  SL_STATUS_BUFFER_TOO_SMALL = 3,
  SL_STATUS_CONFIG_INVALID = 4,
  SL_STATUS_DATA_ERROR = 5,
  SL_STATUS_HASH_MISMATCH = 6,
  SL_STATUS_MISSING_FILE = 7,
  SL_STATUS_DEGENERATE_LABELS = 8,
  SL_STATUS_RUNTIME = 9,
  SL_STATUS_PANIC = 10,
} SlStatus;

// A finished run: language model, uncertainty head and feature layout.
typedef struct SlRun SlRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *sl_version(void);

// Copies the last error message of this thread, NUL-terminated, into
// `buf` (truncating to `cap - 1` bytes). Returns the untruncated length.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
uintptr_t sl_last_error(char *buf, uintptr_t cap);

// Average precision of `scores` against binary `labels` (nonzero is
// positive), higher scores ranked first.
//
// # Safety
// `labels` and `scores` must point to `n` readable elements; `out` must
// be writable.
enum SlStatus sl_pr_auc(const uint8_t *labels, const double *scores, uintptr_t n, double *out);

// Splits text into token ids.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must hold `cap` ids;
// `out_len` must be writable.
enum SlStatus sl_tokenize(const char *text, uint32_t *out, uintptr_t cap, uintptr_t *out_len);

// Opens a finished run directory, verifying the manifest entries it
// reads. On success `*out` owns a handle to release with `sl_run_free`.
//
// # Safety
// `dir` must be a NUL-terminated path; `out` must be writable.
enum SlStatus sl_run_open(const char *dir, struct SlRun **out);

// Releases a handle from `sl_run_open`. Null is ignored.
//
// # Safety
// `run` must be null or a handle not yet freed.
void sl_run_free(struct SlRun *run);

// Number of trainable parameters of the run's uncertainty head.
//
// # Safety
// `run` must be a live handle; `out` must be writable.
enum SlStatus sl_run_uhead_parameters(const struct SlRun *run, uintptr_t *out);

// Uncertainty of every step in a chain, higher meaning more likely
// wrong. `tokens` holds the prompt followed by the generated chain;
// `method` is one of the `SlMethod` values.
//
// # Safety
// `run` must be a live handle; `tokens` must hold `n_tokens` ids; `out`
// must hold `cap` values; `out_len` must be writable.
enum SlStatus sl_run_step_uncertainties(const struct SlRun *run,
                                        const uint32_t *tokens,
                                        uintptr_t n_tokens,
                                        uintptr_t prompt_len,
                                        int32_t method,
                                        double *out,
                                        uintptr_t cap,
                                        uintptr_t *out_len);

// Static description of a status code.
const char *sl_status_name(enum SlStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STEPLAB_H */
