#ifndef C2F_CAPTION_H
#define C2F_CAPTION_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum C2fStatus {
  C2F_STATUS_OK = 0,
  C2F_STATUS_NULL_ARGUMENT = 1,
  C2F_STATUS_INVALID_ARGUMENT = 2,
  C2F_STATUS_IO = 3,
  C2F_STATUS_CHECKPOINT = 4,
  C2F_STATUS_NUMERIC = 5,
  C2F_STATUS_BUFFER_TOO_SMALL = 6,
  C2F_STATUS_INTERNAL = 7,
} C2fStatus;

/**
 * A reference corpus for CIDEr. Opaque.
 */
typedef struct C2fCorpus C2fCorpus;

/**
 * A loaded model. Opaque.
 */
typedef struct C2fModel C2fModel;

/**
 * One object of a scene. `shape`: 0 circle, 1 square, 2 triangle.
 * `color`: 0 red, 1 green, 2 blue. `cell` is `row * grid + col`.
 */
typedef struct C2fObject {
  uint32_t cell;
  uint32_t shape;
  uint32_t color;
} C2fObject;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *c2f_last_error(void);

/**
 * Library version as a static string.
 */
const char *c2f_version(void);

/**
 * Loads a checkpoint file into a new model handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum C2fStatus c2f_model_load(const char *path, struct C2fModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`c2f_model_load`] and not be used afterwards.
 */
void c2f_model_free(struct C2fModel *model);

/**
 * Number of decoding stages, `N_f + 1`.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum C2fStatus c2f_model_num_stages(const struct C2fModel *model, size_t *out);

/**
 * Side length `k` of the feature grid.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum C2fStatus c2f_model_grid_side(const struct C2fModel *model, size_t *out);

/**
 * Feature width `d_v` of each grid cell.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum C2fStatus c2f_model_feature_dim(const struct C2fModel *model, size_t *out);

/**
 * Decodes a scene given as objects and writes `stage`'s caption into `buf`.
 * `beam` = 0 decodes greedily; a positive width runs beam search on the
 * final stage.
 *
 * # Safety
 * `objects` must point to `n_objects` values, `buf` to `cap` writable bytes,
 * and `written` must be valid or null.
 */
enum C2fStatus c2f_decode_scene(const struct C2fModel *model,
                                const struct C2fObject *objects,
                                size_t n_objects,
                                size_t stage,
                                size_t beam,
                                char *buf,
                                size_t cap,
                                size_t *written);

/**
 * Decodes raw features, `k*k` rows of `d_v` values in row-major order.
 *
 * # Safety
 * `features` must point to `len` doubles; see [`c2f_decode_scene`] for the rest.
 */
enum C2fStatus c2f_decode_features(const struct C2fModel *model,
                                   const double *features,
                                   size_t len,
                                   size_t stage,
                                   size_t beam,
                                   char *buf,
                                   size_t cap,
                                   size_t *written);

/**
 * BLEU-`n_max` of a whitespace-tokenised candidate against references.
 *
 * # Safety
 * `candidate` must be a NUL-terminated string, `refs` must point to `n_refs`
 * such strings, and `out` must be valid.
 */
enum C2fStatus c2f_bleu(const char *candidate,
                        const char *const *refs,
                        size_t n_refs,
                        size_t n_max,
                        double *out);

/**
 * Builds a CIDEr corpus from `n_refs` reference sentences, the i-th of which
 * describes image `image_ids[i]`.
 *
 * # Safety
 * `image_ids` and `refs` must each point to `n_refs` values and `out` must be valid.
 */
enum C2fStatus c2f_corpus_new(const uint64_t *image_ids,
                              const char *const *refs,
                              size_t n_refs,
                              struct C2fCorpus **out);

/**
 * Releases a corpus. Null is ignored.
 *
 * # Safety
 * `corpus` must come from [`c2f_corpus_new`] and not be used afterwards.
 */
void c2f_corpus_free(struct C2fCorpus *corpus);

/**
 * CIDEr of `candidate` against the references of `image_id`.
 *
 * # Safety
 * `corpus` must be a live handle, `candidate` a NUL-terminated string and
 * `out` valid.
 */
enum C2fStatus c2f_corpus_cider(const struct C2fCorpus *corpus,
                                uint64_t image_id,
                                const char *candidate,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* C2F_CAPTION_H */
