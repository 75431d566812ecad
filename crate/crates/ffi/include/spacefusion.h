#ifndef SPACEFUSION_H
#define SPACEFUSION_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SfStatus {
  SF_STATUS_OK = 0,
  SF_STATUS_NULL_POINTER = 1,
  SF_STATUS_INVALID_ARGUMENT = 2,
  SF_STATUS_IO = 3,
  SF_STATUS_DATA = 4,
  SF_STATUS_NUMERICAL = 5,
  SF_STATUS_CHECKPOINT = 6,
  SF_STATUS_INTERNAL = 7,
} SfStatus;

/**
 * Loaded checkpoint: model plus vocabulary.
 */
typedef struct SfModel SfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sf_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next library call on the same thread.
 */
const char *sf_last_error_message(void);

/**
 * Loads a checkpoint directory into `*out`.
 *
 * # Safety
 * `dir` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum SfStatus sf_model_load(const char *dir, struct SfModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from `sf_model_load` and not be freed twice.
 */
void sf_model_free(struct SfModel *model);

/**
 * Dimension of the latent vectors written by `sf_model_encode_context`; 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t sf_model_latent_dim(const struct SfModel *model);

/**
 * Noise-free context latent written into `out[0..len]`; `len` must equal the latent dimension.
 *
 * # Safety
 * `model` must be a live handle, `context` a NUL-terminated string and `out`
 * valid for `len` writes.
 */
enum SfStatus sf_model_encode_context(const struct SfModel *model,
                                      const char *context,
                                      double *out,
                                      size_t len);

/**
 * Samples `pool_size` perturbations of radius `radius` (negative: the
 * checkpoint's radius), ranks them with length bonus `lambda` and writes up to
 * `count` responses joined by `\n` into `*out` (free with `sf_string_free`).
 *
 * # Safety
 * `model` must be a live handle, `context` a NUL-terminated string and `out` a valid pointer.
 */
enum SfStatus sf_model_generate(const struct SfModel *model,
                                const char *context,
                                size_t count,
                                double radius,
                                size_t pool_size,
                                double lambda,
                                uint64_t seed,
                                char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void sf_string_free(char *s);

/**
 * Sentence BLEU-4 of whitespace-tokenized strings.
 *
 * # Safety
 * Both strings must be NUL-terminated and `out` valid.
 */
enum SfStatus sf_bleu4(const char *reference, const char *hypothesis, double *out);

/**
 * Multi-reference precision, recall and F1 (each in [0, 1]) of whitespace-tokenized strings.
 *
 * # Safety
 * `refs` and `hyps` must hold `n_refs` and `n_hyps` NUL-terminated strings; the outputs must be valid.
 */
enum SfStatus sf_multi_ref_scores(const char *const *refs,
                                  size_t n_refs,
                                  const char *const *hyps,
                                  size_t n_hyps,
                                  double *out_precision,
                                  double *out_recall,
                                  double *out_f1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPACEFUSION_H */
