#ifndef MIXLOC_H
#define MIXLOC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum {
  MIXLOC_STATUS_OK = 0,
  MIXLOC_STATUS_NULL_POINTER = 1,
  MIXLOC_STATUS_INVALID_ARGUMENT = 2,
  MIXLOC_STATUS_DIMENSION = 3,
  MIXLOC_STATUS_DOMAIN = 4,
  MIXLOC_STATUS_CONFIG = 5,
  MIXLOC_STATUS_IO = 6,
  MIXLOC_STATUS_FORMAT = 7,
  MIXLOC_STATUS_NON_FINITE = 8,
  MIXLOC_STATUS_BUFFER_TOO_SMALL = 9,
  MIXLOC_STATUS_PANIC = 10,
} MixlocStatus;

/**
 * One sampled mixture of `k` scenes.
 */
typedef struct MixlocMixture MixlocMixture;

/**
 * A trained model with its training configuration.
 */
typedef struct MixlocModel MixlocModel;

/**
 * A generated world: class signatures plus the scene generator settings.
 */
typedef struct MixlocWorld MixlocWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *mixloc_last_error(void);

/**
 * Builds a world from a JSON world spec; null or `"{}"` gives the defaults.
 */
MixlocStatus mixloc_world_new(const char *spec_json, MixlocWorld **out);

void mixloc_world_free(MixlocWorld *world);

/**
 * Grid side length `g`; maps and masks have `g*g` cells per image.
 */
MixlocStatus mixloc_world_grid(const MixlocWorld *world, size_t *out);

/**
 * Samples a mixture of `k` distinct classes, fully determined by `seed`.
 */
MixlocStatus mixloc_mixture_sample(const MixlocWorld *world,
                                   size_t k,
                                   uint64_t seed,
                                   MixlocMixture **out);

void mixloc_mixture_free(MixlocMixture *mixture);

MixlocStatus mixloc_mixture_k(const MixlocMixture *mixture, size_t *out);

MixlocStatus mixloc_mixture_class_id(const MixlocMixture *mixture, size_t scene, size_t *out);

/**
 * Copies the `g*g` ground-truth mask of scene `scene` (row-major, 0/1).
 */
MixlocStatus mixloc_mixture_mask(const MixlocMixture *mixture,
                                 size_t scene,
                                 double *buf,
                                 size_t len);

/**
 * Trains from a JSON config (null means all defaults).
 */
MixlocStatus mixloc_train(const char *config_json, MixlocModel **out);

MixlocStatus mixloc_model_load(const char *dir, MixlocModel **out);

MixlocStatus mixloc_model_save(const MixlocModel *model, const char *dir);

void mixloc_model_free(MixlocModel *model);

/**
 * Number of audio heads, i.e. maps per mixture.
 */
MixlocStatus mixloc_model_heads(const MixlocModel *model, size_t *out);

/**
 * Writes one localization map per head, each `g × (k·g)` with the mixture's
 * images side by side, head-major: `len >= heads * g * k * g`.
 */
MixlocStatus mixloc_model_localize(const MixlocModel *model,
                                   const MixlocMixture *mixture,
                                   double *buf,
                                   size_t len);

/**
 * Evaluates on `split` ("train", "val" or "test") of the model's own
 * dataset and returns the report as a JSON string; release it with
 * [`mixloc_string_free`]. `max_examples == 0` evaluates the whole split.
 */
MixlocStatus mixloc_model_evaluate(const MixlocModel *model,
                                   const char *split,
                                   size_t max_examples,
                                   char **out_json);

void mixloc_string_free(char *s);

/**
 * Average precision of `n` scores against a 0/1 mask of the same length.
 */
MixlocStatus mixloc_pixel_ap(const double *scores, const double *mask, size_t n, double *out);

/**
 * IoU between `{scores >= t}` and a 0/1 mask.
 */
MixlocStatus mixloc_iou_at(const double *scores,
                           const double *mask,
                           size_t n,
                           double t,
                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIXLOC_H */
