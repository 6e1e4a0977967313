#ifndef ICLPROBE_H
#define ICLPROBE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IclStatus {
  ICL_STATUS_OK = 0,
  ICL_STATUS_NULL_POINTER = 1,
  ICL_STATUS_INVALID_UTF8 = 2,
  ICL_STATUS_IO = 3,
  /**
   * Malformed container, JSON or config.
   */
  ICL_STATUS_PARSE = 4,
  ICL_STATUS_MISSING_TENSOR = 5,
  ICL_STATUS_SHAPE_MISMATCH = 6,
  ICL_STATUS_OUT_OF_RANGE = 7,
  /**
   * Zero vectors, constant sequences and other undefined results.
   */
  ICL_STATUS_NUMERIC = 8,
  ICL_STATUS_INVALID_ARGUMENT = 9,
  ICL_STATUS_BUFFER_TOO_SMALL = 10,
  /**
   * A Rust panic was caught at the boundary.
   */
  ICL_STATUS_INTERNAL = 11,
} IclStatus;

typedef struct IclBm25 IclBm25;

typedef struct IclModel IclModel;

typedef struct IclTensorStore IclTensorStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *icl_last_error_message(void);

/**
 * Static, nul-terminated version string.
 */
const char *icl_version(void);

/**
 * Mean cosine between `query` (length `dim`) and each row of `labels`
 * (row-major, `k x dim`).
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum IclStatus icl_affinity(const double *query,
                            const double *labels,
                            size_t k,
                            size_t dim,
                            double *out);

/**
 * Trace of the population covariance of the `k x dim` rows, divided by `k`.
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum IclStatus icl_diversity(const double *labels, size_t k, size_t dim, double *out);

/**
 * Spearman rank correlation with average ranks for ties.
 *
 * # Safety
 * `xs` and `ys` must each hold `n` values.
 */
enum IclStatus icl_spearman(const double *xs, const double *ys, size_t n, double *out);

/**
 * # Safety
 * `path` must be a nul-terminated string; `out` a valid pointer.
 */
enum IclStatus icl_store_load(const char *path, struct IclTensorStore **out);

/**
 * Element count of tensor `name`.
 *
 * # Safety
 * `store` must come from [`icl_store_load`].
 */
enum IclStatus icl_store_numel(const struct IclTensorStore *store, const char *name, size_t *out);

/**
 * Copies tensor `name`, widened to `f32`, into `buf` (capacity `len`).
 *
 * # Safety
 * `buf` must be writable for `len` floats.
 */
enum IclStatus icl_store_read_f32(const struct IclTensorStore *store,
                                  const char *name,
                                  float *buf,
                                  size_t len);

/**
 * # Safety
 * `store` must come from [`icl_store_load`] and not be used afterwards.
 */
void icl_store_free(struct IclTensorStore *store);

/**
 * Loads weights from a tensor container and the matching config JSON.
 *
 * # Safety
 * Paths must be nul-terminated strings; `out` a valid pointer.
 */
enum IclStatus icl_model_load(const char *weights_path,
                              const char *config_path,
                              struct IclModel **out);

/**
 * # Safety
 * `model` must come from [`icl_model_load`].
 */
enum IclStatus icl_model_vocab_size(const struct IclModel *model, size_t *out);

/**
 * Final-position logits (`vocab_size` floats) for `tokens`.
 *
 * # Safety
 * `tokens` must hold `n_tokens` ids; `logits` must be writable for `len` floats.
 */
enum IclStatus icl_model_last_logits(const struct IclModel *model,
                                     const uint32_t *tokens,
                                     size_t n_tokens,
                                     float *logits,
                                     size_t len);

/**
 * # Safety
 * `model` must come from [`icl_model_load`] and not be used afterwards.
 */
void icl_model_free(struct IclModel *model);

/**
 * Indexes `n_docs` nul-terminated documents.
 *
 * # Safety
 * `docs` must point to `n_docs` valid strings.
 */
enum IclStatus icl_bm25_build(const char *const *docs,
                              size_t n_docs,
                              double k1,
                              double b,
                              struct IclBm25 **out);

/**
 * # Safety
 * `index` must come from [`icl_bm25_build`]; `query` must be nul-terminated.
 */
enum IclStatus icl_bm25_score(const struct IclBm25 *index,
                              const char *query,
                              size_t doc,
                              double *out);

/**
 * # Safety
 * `index` must come from [`icl_bm25_build`] and not be used afterwards.
 */
void icl_bm25_free(struct IclBm25 *index);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ICLPROBE_H */
