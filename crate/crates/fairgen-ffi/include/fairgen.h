/* C interface to the fairgen pipeline. Generated by cbindgen; do not edit. */

#ifndef FAIRGEN_H
#define FAIRGEN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum FairgenStatus {
  FAIRGEN_STATUS_OK = 0,
  /**
   * Internal failure (I/O, integrity, backend, ...).
   */
  FAIRGEN_STATUS_INTERNAL = 1,
  /**
   * Invalid configuration or argument value.
   */
  FAIRGEN_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A required prior computation is missing.
   */
  FAIRGEN_STATUS_MISSING_DEPENDENCY = 3,
  /**
   * Numerical failure (non-finite values, degenerate input).
   */
  FAIRGEN_STATUS_NUMERICAL = 4,
  /**
   * A required pointer was null.
   */
  FAIRGEN_STATUS_NULL_POINTER = 5,
} FairgenStatus;

/**
 * Opaque toy embedding backend (seeded random projection + prompt
 * vocabulary), the desk-scale CLIP substitute.
 */
typedef struct FairgenEmbedder FairgenEmbedder;

/**
 * Opaque adversarial group-weight state.
 */
typedef struct FairgenGroupWeights FairgenGroupWeights;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the message of the most recent error on this thread into `buf`
 * (NUL-terminated, truncated to `len`). Returns the full message length in
 * bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be null (query mode).
 */
uintptr_t fairgen_last_error(char *buf, uintptr_t len);

/**
 * Number of generator clusters for a group of the given size:
 * min(size/20, 20), floored at 1.
 */
uint32_t fairgen_cluster_count_rule(uintptr_t smallest_group_size);

/**
 * Cosine similarity of two `dim`-vectors.
 *
 * # Safety
 * `a` and `b` must point to `dim` doubles; `out` must be writable.
 */
enum FairgenStatus fairgen_cosine_similarity(const double *a,
                                             const double *b,
                                             uintptr_t dim,
                                             double *out);

/**
 * Fréchet distance between the Gaussian fits of two row-major embedding
 * matrices (`a_rows x dim` and `b_rows x dim`).
 *
 * # Safety
 * `a` and `b` must point to `a_rows * dim` and `b_rows * dim` doubles;
 * `out` must be writable.
 */
enum FairgenStatus fairgen_frechet_distance(const double *a,
                                            uintptr_t a_rows,
                                            const double *b,
                                            uintptr_t b_rows,
                                            uintptr_t dim,
                                            double *out);

/**
 * Mean negative log-likelihood of row-major probability rows
 * (`rows x classes`) against integer labels.
 *
 * # Safety
 * `probs` must point to `rows * classes` doubles, `labels` to `rows` values;
 * `out` must be writable.
 */
enum FairgenStatus fairgen_ce_loss(const double *probs,
                                   uintptr_t rows,
                                   uintptr_t classes,
                                   const uint32_t *labels,
                                   double *out);

/**
 * Supervised contrastive loss over row-major features (`rows x dim`).
 * `negatives_only` selects the denominator form (non-zero: negatives only).
 *
 * # Safety
 * `features` must point to `rows * dim` doubles, `labels` to `rows` values;
 * `out` must be writable.
 */
enum FairgenStatus fairgen_supcon_loss(const double *features,
                                       uintptr_t rows,
                                       uintptr_t dim,
                                       const uint32_t *labels,
                                       double tau,
                                       int32_t negatives_only,
                                       double *out);

/**
 * alpha-weighted filter score. `centroid` may be null only when alpha >= 1.
 *
 * # Safety
 * `centroid` must be null or point to one double; `out` must be writable.
 */
enum FairgenStatus fairgen_combined_score(double alpha,
                                          double label_score,
                                          const double *centroid,
                                          double *out);

/**
 * Uniform weights over `n_groups` with exponentiated-gradient step `eta`.
 * Returns null on invalid arguments.
 */
struct FairgenGroupWeights *fairgen_group_weights_new(uintptr_t n_groups, double eta);

/**
 * One robust update. `losses[i]` is the mean loss of group i; `present[i]`
 * zero marks a group absent from the batch (its weight is kept). Writes the
 * weighted loss to `out`.
 *
 * # Safety
 * `handle` must come from `fairgen_group_weights_new`; `losses` and
 * `present` must point to `n` values; `out` must be writable.
 */
enum FairgenStatus fairgen_group_weights_step(struct FairgenGroupWeights *handle,
                                              const double *losses,
                                              const uint8_t *present,
                                              uintptr_t n,
                                              double *out);

/**
 * Copy the current weight distribution into `out` (length = group count).
 *
 * # Safety
 * `handle` must come from `fairgen_group_weights_new`; `out` must hold `n`
 * doubles where `n` matches the handle's group count.
 */
enum FairgenStatus fairgen_group_weights_get(const struct FairgenGroupWeights *handle,
                                             double *out,
                                             uintptr_t n);

/**
 * # Safety
 * `handle` must come from `fairgen_group_weights_new` and not be freed twice.
 */
void fairgen_group_weights_free(struct FairgenGroupWeights *handle);

/**
 * Render a catalog prompt. `dataset` is one of waterbirds/celeba/utkface/
 * shapes; `strategy` one of vanilla/lora_per_group/dreambooth_per_group/
 * clustered_dreambooth. Non-zero `transfer` selects severe-mode transfer
 * prompts. On success `*positive_out` (and `*negative_out`, which may be set
 * to null) hold NUL-terminated strings owned by the caller; release them
 * with `fairgen_string_free`.
 *
 * # Safety
 * String arguments must be NUL-terminated; `positive_out` and `negative_out`
 * must be writable pointer slots.
 */
enum FairgenStatus fairgen_render_prompt(const char *dataset,
                                         const char *strategy,
                                         const char *class_label,
                                         const char *bias_label,
                                         int32_t transfer,
                                         char **positive_out,
                                         char **negative_out);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void fairgen_string_free(char *s);

/**
 * Backend for square `image_size` x `image_size` RGB images embedding into
 * `dim` dimensions. Returns null on invalid arguments.
 */
struct FairgenEmbedder *fairgen_embedder_new(uint64_t seed, uintptr_t dim, uintptr_t image_size);

/**
 * Embed an image given as `image_size * image_size * 3` interleaved RGB
 * floats in [0, 1]. Writes `dim` doubles to `out`.
 *
 * # Safety
 * `handle` must come from `fairgen_embedder_new`; `pixels` must hold
 * `pixels_len` floats; `out` must hold the embedder's dimension in doubles.
 */
enum FairgenStatus fairgen_embedder_embed_image(const struct FairgenEmbedder *handle,
                                                const float *pixels,
                                                uintptr_t pixels_len,
                                                double *out);

/**
 * Embed a text prompt. Writes `dim` doubles to `out`.
 *
 * # Safety
 * `handle` must come from `fairgen_embedder_new`; `prompt` must be
 * NUL-terminated; `out` must hold the embedder's dimension in doubles.
 */
enum FairgenStatus fairgen_embedder_embed_text(const struct FairgenEmbedder *handle,
                                               const char *prompt,
                                               double *out);

/**
 * # Safety
 * `handle` must come from `fairgen_embedder_new` and not be freed twice.
 */
void fairgen_embedder_free(struct FairgenEmbedder *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FAIRGEN_H */
