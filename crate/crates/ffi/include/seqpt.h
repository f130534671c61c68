#ifndef SEQPT_H
#define SEQPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SEQPT_OK 0

/**
 * A required pointer argument was null.
 */
#define SEQPT_ERR_NULL 1

/**
 * A string argument was not UTF-8.
 */
#define SEQPT_ERR_UTF8 2

#define SEQPT_ERR_IO 3

/**
 * Corrupt, truncated or incompatible checkpoint.
 */
#define SEQPT_ERR_FORMAT 4

/**
 * The request does not fit the model (no classifier head, bad token id, empty input).
 */
#define SEQPT_ERR_INVALID 5

/**
 * Internal failure; the message has details.
 */
#define SEQPT_ERR_INTERNAL 6

/**
 * Opaque model handle.
 */
typedef struct SeqptModel SeqptModel;

/**
 * Library version as a static NUL-terminated string.
 */
const char *seqpt_version(void);

/**
 * Message for the last failed call on this thread ("" if none). Valid
 * until the next failing call on the same thread.
 */
const char *seqpt_last_error(void);

/**
 * Loads a checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
int32_t seqpt_model_load(const char *path, struct SeqptModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from `seqpt_model_load` and not be used afterwards.
 */
void seqpt_model_free(struct SeqptModel *model);

/**
 * Number of output classes (0 for models without a classifier head).
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t seqpt_model_num_classes(const struct SeqptModel *model);

/**
 * Vocabulary size including the special tokens (0 for row models).
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t seqpt_model_vocab_size(const struct SeqptModel *model);

/**
 * Predicted class of one encoded document (`ids[0..len]`, normally ending in EOS).
 *
 * # Safety
 * `model` must be a live handle, `ids` must point to `len` values and
 * `out_class` must be writable.
 */
int32_t seqpt_model_classify(const struct SeqptModel *model,
                             const uint32_t *ids,
                             size_t len,
                             size_t *out_class);

#endif  /* SEQPT_H */
