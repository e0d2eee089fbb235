#ifndef CONVSLU_H
#define CONVSLU_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum ConvsluStatus {
  CONVSLU_STATUS_OK = 0,
  CONVSLU_STATUS_NULL_POINTER = 1,
  CONVSLU_STATUS_INVALID_ARGUMENT = 2,
  CONVSLU_STATUS_SHAPE = 3,
  CONVSLU_STATUS_IMPOSSIBLE_ALIGNMENT = 4,
  CONVSLU_STATUS_BUFFER_TOO_SMALL = 5,
  CONVSLU_STATUS_IO = 6,
  CONVSLU_STATUS_FORMAT = 7,
  CONVSLU_STATUS_NUMERIC = 8,
  CONVSLU_STATUS_INTERNAL = 9,
} ConvsluStatus;

/**
 * Feature front end with fixed normalization statistics.
 */
typedef struct ConvsluFeatureExtractor ConvsluFeatureExtractor;

/**
 * A loaded transducer checkpoint.
 */
typedef struct ConvsluModel ConvsluModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until
 * the next call on the same thread.
 */
const char *convslu_last_error(void);

/**
 * Transducer loss over a `frames × (target_len+1) × vocab` row-major
 * lattice of log-probabilities. `grad` may be NULL; otherwise it receives
 * the gradient with the lattice's shape.
 *
 * # Safety
 * Pointers must reference buffers of the stated sizes.
 */
enum ConvsluStatus convslu_rnnt_loss(const double *log_probs,
                                     size_t frames,
                                     size_t vocab,
                                     size_t blank,
                                     const uint32_t *target,
                                     size_t target_len,
                                     double *loss,
                                     double *grad);

/**
 * CTC loss over `frames × vocab` row-major frame log-probabilities.
 * `grad` may be NULL.
 *
 * # Safety
 * Pointers must reference buffers of the stated sizes.
 */
enum ConvsluStatus convslu_ctc_loss(const double *log_probs,
                                    size_t frames,
                                    size_t vocab,
                                    size_t blank,
                                    const uint32_t *target,
                                    size_t target_len,
                                    double *loss,
                                    double *grad);

/**
 * Width of one output feature frame (240).
 */
size_t convslu_feature_dim(void);

/**
 * Number of feature frames produced for `num_samples` input samples.
 */
size_t convslu_feature_frames(size_t num_samples);

/**
 * Creates a feature extractor. `stats_path` names a JSON file of
 * normalization statistics; NULL means no normalization.
 *
 * # Safety
 * `stats_path` must be NULL or a NUL-terminated string; `out` must be valid.
 */
enum ConvsluStatus convslu_extractor_new(const char *stats_path,
                                         struct ConvsluFeatureExtractor **out);

/**
 * # Safety
 * `handle` must come from [`convslu_extractor_new`] or be NULL.
 */
void convslu_extractor_free(struct ConvsluFeatureExtractor *handle);

/**
 * Extracts features from mono samples in [-1, 1]. Writes up to
 * `capacity_frames` rows of 240 floats into `out` and the true frame
 * count into `frames`; returns `BufferTooSmall` when it does not fit.
 *
 * # Safety
 * Pointers must reference buffers of the stated sizes.
 */
enum ConvsluStatus convslu_extract(const struct ConvsluFeatureExtractor *handle,
                                   const float *samples,
                                   size_t num_samples,
                                   uint32_t sample_rate,
                                   float *out,
                                   size_t capacity_frames,
                                   size_t *frames);

/**
 * Loads a transducer checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
enum ConvsluStatus convslu_model_load(const char *path, struct ConvsluModel **out);

/**
 * # Safety
 * `handle` must come from [`convslu_model_load`] or be NULL.
 */
void convslu_model_free(struct ConvsluModel *handle);

/**
 * Output vocabulary size including blank, or 0 for a NULL handle.
 *
 * # Safety
 * `handle` must be valid or NULL.
 */
size_t convslu_model_outputs(const struct ConvsluModel *handle);

/**
 * Width of the per-utterance history input (0 or 128).
 *
 * # Safety
 * `handle` must be valid or NULL.
 */
size_t convslu_model_history_dim(const struct ConvsluModel *handle);

/**
 * Copies the NUL-terminated name of output `k` into `buf`. `len` receives
 * the name's byte length without the terminator.
 *
 * # Safety
 * `buf` must hold `capacity` bytes.
 */
enum ConvsluStatus convslu_model_token_name(const struct ConvsluModel *handle,
                                            size_t k,
                                            char *buf,
                                            size_t capacity,
                                            size_t *len);

/**
 * Greedy decoding of `frames × dim` row-major features. `history` holds
 * `history_dim` floats, or is NULL for models without a history input.
 * Emitted output indices go to `tokens`; `len` receives their count.
 *
 * # Safety
 * Pointers must reference buffers of the stated sizes.
 */
enum ConvsluStatus convslu_model_decode(const struct ConvsluModel *handle,
                                        const float *feats,
                                        size_t frames,
                                        size_t dim,
                                        const float *history,
                                        size_t history_len,
                                        uint32_t *tokens,
                                        size_t capacity,
                                        size_t *len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONVSLU_H */
