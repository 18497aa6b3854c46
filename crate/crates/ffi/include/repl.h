#ifndef REPL_H
#define REPL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum ReplStatus {
  REPL_STATUS_OK = 0,
  REPL_STATUS_NULL_ARGUMENT = 1,
  REPL_STATUS_INVALID_UTF8 = 2,
  REPL_STATUS_CONFIG = 3,
  REPL_STATUS_SHAPE = 4,
  REPL_STATUS_INVALID_ARGUMENT = 5,
  REPL_STATUS_DATASET = 6,
  REPL_STATUS_CHECKPOINT = 7,
  REPL_STATUS_IO = 8,
  REPL_STATUS_RUNTIME = 9,
  REPL_STATUS_BUFFER_TOO_SMALL = 10,
  REPL_STATUS_PANIC = 11,
} ReplStatus;

/**
 * An inference-only model: folded, no tape, no coefficients.
 */
typedef struct ReplModel ReplModel;

/**
 * A trainable network built from a spec and seed.
 */
typedef struct ReplNetwork ReplNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *repl_version(void);

/**
 * Message of the last failure on this thread, or NULL if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *repl_last_error(void);

/**
 * Builds a network from a TOML model description (the `[model]` table of
 * an experiment config, without the header) and an initialization seed.
 *
 * # Safety
 * `spec_toml` must be a NUL-terminated string; `out` must be writable.
 */
enum ReplStatus repl_network_new(const char *spec_toml, uint64_t seed, struct ReplNetwork **out);

/**
 * Loads a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum ReplStatus repl_network_load(const char *path, struct ReplNetwork **out);

/**
 * Writes a training checkpoint without optimizer state.
 *
 * # Safety
 * `net` must come from this library; `path` must be NUL-terminated.
 */
enum ReplStatus repl_network_save(const struct ReplNetwork *net, const char *path);

/**
 * Number of trainable scalars.
 *
 * # Safety
 * `net` must come from this library; `out` must be writable.
 */
enum ReplStatus repl_network_trainable_count(const struct ReplNetwork *net, uint64_t *out);

/**
 * Folds the network (eval mode) into an inference model.
 *
 * # Safety
 * `net` must come from this library; `out` must be writable.
 */
enum ReplStatus repl_network_export(const struct ReplNetwork *net, struct ReplModel **out);

/**
 * # Safety
 * `net` must come from this library and not be used afterwards. NULL is a
 * no-op.
 */
void repl_network_free(struct ReplNetwork *net);

/**
 * Loads any checkpoint as an inference model; training checkpoints are
 * folded on load and single-precision ones are widened.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum ReplStatus repl_model_load(const char *path, struct ReplModel **out);

/**
 * Writes a deploy checkpoint.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum ReplStatus repl_model_save(const struct ReplModel *model, const char *path);

/**
 * Input sample shape `[channels, height, width]` and class count.
 *
 * # Safety
 * `model` must come from this library; `shape` must point to three
 * writable values and `classes` to one.
 */
enum ReplStatus repl_model_dims(const struct ReplModel *model, size_t *shape, size_t *classes);

/**
 * Logits for `batch` samples laid out `[batch, C, H, W]`. `out` receives
 * `batch * classes` values and must hold at least `out_len`.
 *
 * # Safety
 * `input` must point to `batch * C * H * W` readable values and `out` to
 * `out_len` writable ones.
 */
enum ReplStatus repl_model_forward(const struct ReplModel *model,
                                   const double *input,
                                   size_t batch,
                                   double *out,
                                   size_t out_len);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. NULL is
 * a no-op.
 */
void repl_model_free(struct ReplModel *model);

/**
 * JSON cost report (parameters, FLOPs, activation memory) for a TOML model
 * description. Copies at most `len` bytes including the terminating NUL
 * into `buf` and stores the full size needed in `needed`; returns
 * `BufferTooSmall` when it did not fit. `buf` may be NULL to query the size.
 *
 * # Safety
 * `spec_toml` must be NUL-terminated; `buf` must hold `len` bytes unless
 * NULL; `needed` must be writable.
 */
enum ReplStatus repl_cost_report_json(const char *spec_toml,
                                      size_t batch,
                                      char *buf,
                                      size_t len,
                                      size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REPL_H */
