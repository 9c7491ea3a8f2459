#ifndef KALAB_H
#define KALAB_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by all functions.
 */
typedef enum KalabStatus {
  KALAB_STATUS_OK = 0,
  KALAB_STATUS_NULL_ARGUMENT = 1,
  KALAB_STATUS_INVALID_UTF8 = 2,
  KALAB_STATUS_IO = 3,
  KALAB_STATUS_CONFIG = 4,
  KALAB_STATUS_CHECKPOINT = 5,
  KALAB_STATUS_VOCABULARY = 6,
  KALAB_STATUS_OVERLENGTH = 7,
  KALAB_STATUS_BUFFER_TOO_SMALL = 8,
  KALAB_STATUS_INVALID_ARGUMENT = 9,
  KALAB_STATUS_METRICS = 10,
  KALAB_STATUS_INTERNAL = 11,
  KALAB_STATUS_PANIC = 12,
} KalabStatus;

/**
 * An opened run directory: config, regenerated world and vocabulary, and
 * the loaded model weights.
 */
typedef struct KalabRun KalabRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message (NUL-terminated,
 * truncated to `cap`). Returns the full length including the terminator;
 * 1 means no error is recorded.
 *
 * # Safety
 * `buf` must be valid for `cap` bytes or null when `cap` is 0.
 */
size_t kalab_last_error(char *buf, size_t cap);

/**
 * Static, NUL-terminated crate version.
 */
const char *kalab_version(void);

/**
 * Opens a run directory. `checkpoint` may be null to pick `final.ckpt` or
 * the latest step checkpoint. Free the handle with [`kalab_run_free`].
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum KalabStatus kalab_run_open(const char *dir, const char *checkpoint, struct KalabRun **out);

/**
 * Releases a handle from [`kalab_run_open`]. Null is ignored.
 *
 * # Safety
 * `run` must come from `kalab_run_open` and not be used afterwards.
 */
void kalab_run_free(struct KalabRun *run);

/**
 * Vocabulary size of the run, or 0 for a null handle.
 *
 * # Safety
 * `run` must be a live handle or null.
 */
size_t kalab_run_vocab_size(const struct KalabRun *run);

/**
 * Maximum prompt plus generation length of the model, or 0 for null.
 *
 * # Safety
 * `run` must be a live handle or null.
 */
size_t kalab_run_context_len(const struct KalabRun *run);

/**
 * Tokenizes whitespace-separated text into ids.
 *
 * # Safety
 * `text` must be NUL-terminated; `ids` valid for `cap` elements.
 */
enum KalabStatus kalab_encode(const struct KalabRun *run,
                              const char *text,
                              uint32_t *ids,
                              size_t cap,
                              size_t *out_len);

/**
 * Turns ids back into text.
 *
 * # Safety
 * `ids` valid for `n` elements; `buf` valid for `cap` bytes.
 */
enum KalabStatus kalab_decode(const struct KalabRun *run,
                              const uint32_t *ids,
                              size_t n,
                              char *buf,
                              size_t cap,
                              size_t *out_len);

/**
 * Greedy continuation of `prompt`; writes only the `max_new` new ids.
 *
 * # Safety
 * `prompt` valid for `n` elements; `out` valid for `cap` elements.
 */
enum KalabStatus kalab_generate(const struct KalabRun *run,
                                const uint32_t *prompt,
                                size_t n,
                                size_t max_new,
                                uint32_t *out,
                                size_t cap,
                                size_t *out_len);

/**
 * Text-in, text-out greedy completion. The prompt is preceded by the
 * document separator, as during evaluation.
 *
 * # Safety
 * `prompt` must be NUL-terminated; `buf` valid for `cap` bytes.
 */
enum KalabStatus kalab_complete(const struct KalabRun *run,
                                const char *prompt,
                                size_t max_new,
                                char *buf,
                                size_t cap,
                                size_t *out_len);

/**
 * Runs the three evaluation scenarios on the loaded weights and returns
 * the metric records as JSON lines.
 *
 * # Safety
 * `buf` valid for `cap` bytes.
 */
enum KalabStatus kalab_evaluate(const struct KalabRun *run, char *buf, size_t cap, size_t *out_len);

/**
 * Validates metric JSON lines and reports how many records they hold.
 *
 * # Safety
 * `text` must be NUL-terminated; `count` writable.
 */
enum KalabStatus kalab_metrics_count(const char *text, size_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KALAB_H */
