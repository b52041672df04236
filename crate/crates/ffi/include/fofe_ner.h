#ifndef FOFE_NER_H
#define FOFE_NER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum FnerStatus {
  FNER_STATUS_OK = 0,
  FNER_STATUS_NULL_POINTER = 1,
  FNER_STATUS_INVALID_UTF8 = 2,
  FNER_STATUS_IO = 3,
  FNER_STATUS_MODEL_FORMAT = 4,
  FNER_STATUS_INVALID_ARGUMENT = 5,
  FNER_STATUS_MALFORMED_CODE = 6,
  FNER_STATUS_BUFFER_TOO_SMALL = 7,
  FNER_STATUS_INTERNAL = 8,
} FnerStatus;

/**
 * A loaded model.
 */
typedef struct FnerModel FnerModel;

/**
 * Entities found in one sentence.
 */
typedef struct FnerSpans FnerSpans;

/**
 * One entity: tokens `[start, end)`, an index into the model's labels and
 * the probability of that label.
 */
typedef struct FnerSpan {
  size_t start;
  size_t end;
  size_t label;
  double probability;
} FnerSpan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *fner_last_error(void);

/**
 * Library version as a NUL-terminated string with static lifetime.
 */
const char *fner_version(void);

/**
 * Loads a model file into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FnerStatus fner_model_load(const char *path, struct FnerModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`fner_model_load`] and not be freed twice.
 */
void fner_model_free(struct FnerModel *model);

/**
 * Number of labels, the trailing `NONE` class included; 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fner_model_label_count(const struct FnerModel *model);

/**
 * Name of label `index`, or null when out of range. Owned by the model.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
const char *fner_model_label_name(const struct FnerModel *model, size_t index);

/**
 * Decoding threshold the model was saved with.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
double fner_model_threshold(const struct FnerModel *model);

/**
 * Overrides the decoding threshold; must lie in `[0, 1]`.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum FnerStatus fner_model_set_threshold(struct FnerModel *model, double threshold);

/**
 * Tags one tokenized sentence. On success `*out` holds the entities in
 * textual order; release it with [`fner_spans_free`].
 *
 * # Safety
 * `tokens` must point to `n_tokens` NUL-terminated strings.
 */
enum FnerStatus fner_tag(const struct FnerModel *model,
                         const char *const *tokens,
                         size_t n_tokens,
                         struct FnerSpans **out);

/**
 * Number of entities; 0 for null.
 *
 * # Safety
 * `spans` must be null or a live handle.
 */
size_t fner_spans_len(const struct FnerSpans *spans);

/**
 * Copies entity `index` into `*out`.
 *
 * # Safety
 * `spans` must be a live handle and `out` a valid pointer.
 */
enum FnerStatus fner_spans_get(const struct FnerSpans *spans, size_t index, struct FnerSpan *out);

/**
 * Releases a span list. Null is ignored.
 *
 * # Safety
 * `spans` must come from [`fner_tag`] and not be freed twice.
 */
void fner_spans_free(struct FnerSpans *spans);

/**
 * Writes the `vocab_size`-dimensional code of an index sequence to `out`,
 * right to left when `reverse` is set.
 *
 * # Safety
 * `indices` must point to `n` values and `out` to `vocab_size` doubles.
 */
enum FnerStatus fner_fofe_encode(double alpha,
                                 size_t vocab_size,
                                 const size_t *indices,
                                 size_t n,
                                 bool reverse,
                                 double *out);

/**
 * Recovers the index sequence of a code (`alpha <= 0.5`). `*out_len`
 * receives the sequence length; when it exceeds `capacity` nothing is
 * written to `out` and [`FnerStatus::BufferTooSmall`] is returned.
 *
 * # Safety
 * `values` must point to `n_values` doubles, `out` to `capacity` slots.
 */
enum FnerStatus fner_fofe_decode(double alpha,
                                 const double *values,
                                 size_t n_values,
                                 size_t *out,
                                 size_t capacity,
                                 size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FOFE_NER_H */
