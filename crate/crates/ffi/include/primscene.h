#ifndef PRIMSCENE_H
#define PRIMSCENE_H

#include <stddef.h>
#include <stdint.h>

/**
 * Result codes.
 */
typedef enum PsStatus {
  PS_STATUS_OK = 0,
  PS_STATUS_NULL_POINTER = 1,
  PS_STATUS_INVALID_ARGUMENT = 2,
  PS_STATUS_IO = 3,
  PS_STATUS_PARSE = 4,
  PS_STATUS_FORMAT = 5,
  PS_STATUS_NUMERIC = 6,
  PS_STATUS_DENOISER_UNAVAILABLE = 7,
  PS_STATUS_PROTOCOL = 8,
  PS_STATUS_CALLBACK = 9,
  PS_STATUS_PANIC = 10,
} PsStatus;

/**
 * Opaque scene layout.
 */
typedef struct PsLayout PsLayout;

/**
 * Opaque noise schedule, remembering the base schedule it was strided from.
 */
typedef struct PsSchedule PsSchedule;

/**
 * Oriented box: center, row-major rotation and full extents.
 */
typedef struct PsBox {
  double center[3];
  double rotation[9];
  double extents[3];
} PsBox;

/**
 * Noise-prediction callback. Reads `h·w·c` values from `z_t` (channels
 * fastest), writes as many to `out` and returns 0 on success. `t` is a
 * base-schedule timestep and `label` is −1 when unconditioned. It may be
 * called from any thread.
 */
typedef int32_t (*PsDenoiseFn)(void *user,
                               const double *z_t,
                               size_t h,
                               size_t w,
                               size_t c,
                               size_t t,
                               int32_t label,
                               double *out);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; valid until the next
 * failing call on the same thread.
 */
const char *ps_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ps_version(void);

enum PsStatus ps_layout_load(const char *path, struct PsLayout **out);

/**
 * Deterministic synthetic street scene for `seed`.
 */
enum PsStatus ps_layout_synth(uint64_t seed, struct PsLayout **out);

enum PsStatus ps_layout_save(const struct PsLayout *layout, const char *path);

/**
 * Number of existing (non-padding) primitives.
 */
enum PsStatus ps_layout_primitive_count(const struct PsLayout *layout, size_t *out);

/**
 * Releases a layout; null is ignored.
 */
void ps_layout_free(struct PsLayout *layout);

/**
 * Voxel IoU and mIoU (percent) of two layouts on a grid of `dims` voxels
 * of edge `voxel` meters, with the default origin.
 */
enum PsStatus ps_voxel_iou(const struct PsLayout *truth,
                           const struct PsLayout *pred,
                           const size_t *dims,
                           double voxel,
                           double *out_iou,
                           double *out_miou);

/**
 * Cholesky code `(l11, l21, l22, l31, l32, l33)` of rotation `rotation`
 * (3×3) and full edge lengths `scale`.
 */
enum PsStatus ps_cholesky_encode(const double *rotation, const double *scale, double *out);

/**
 * Rotation (3×3) and descending edge lengths of a Cholesky code.
 */
enum PsStatus ps_cholesky_decode(const double *code, double *out_rotation, double *out_scale);

/**
 * Minimum-cost assignment of an `n × n` cost matrix: row `i` goes to
 * column `out_perm[i]`.
 */
enum PsStatus ps_hungarian(const double *cost, size_t n, size_t *out_perm, double *out_cost);

enum PsStatus ps_iou3d(const struct PsBox *a, const struct PsBox *b, double *out);

/**
 * Bytes and MiB of a dense voxel grid with 4-byte cells.
 */
enum PsStatus ps_memory_voxel(const size_t *dims, uint64_t *out_bytes, double *out_mib);

/**
 * Fréchet distance between two `d`-dimensional Gaussians.
 */
enum PsStatus ps_frechet(size_t d,
                         const double *mean_a,
                         const double *cov_a,
                         const double *mean_b,
                         const double *cov_b,
                         double *out);

/**
 * k-NN manifold precision and recall of `n_gen` generated against
 * `n_real` real feature rows of dimension `d`.
 */
enum PsStatus ps_precision_recall(const float *real,
                                  size_t n_real,
                                  const float *generated,
                                  size_t n_gen,
                                  size_t d,
                                  size_t k,
                                  double *out_precision,
                                  double *out_recall);

/**
 * Linear beta schedule with `steps` steps.
 */
enum PsStatus ps_schedule_linear(size_t steps,
                                 double beta_start,
                                 double beta_end,
                                 struct PsSchedule **out);

/**
 * Uniformly strided copy of `schedule`'s base with `steps` steps.
 */
enum PsStatus ps_schedule_respaced(const struct PsSchedule *schedule,
                                   size_t steps,
                                   struct PsSchedule **out);

size_t ps_schedule_len(const struct PsSchedule *schedule);

/**
 * `ᾱ_t` for `0 ≤ t ≤ len`.
 */
enum PsStatus ps_schedule_alpha_bar(const struct PsSchedule *schedule, size_t t, double *out);

void ps_schedule_free(struct PsSchedule *schedule);

/**
 * Ancestral sampling of an `h × w × c` latent into `out`.
 */
enum PsStatus ps_sample(PsDenoiseFn denoise,
                        void *user,
                        double mean,
                        double variance,
                        const struct PsSchedule *schedule,
                        size_t h,
                        size_t w,
                        size_t c,
                        int32_t label,
                        uint64_t seed,
                        double *out);

/**
 * Masked sampling: entries with `mask[i] != 0` are synthesized, the others
 * reproduce `known`. `jump`/`resample` control the resampling schedule.
 */
enum PsStatus ps_repaint(PsDenoiseFn denoise,
                         void *user,
                         double mean,
                         double variance,
                         const struct PsSchedule *schedule,
                         const double *known,
                         const uint8_t *mask,
                         size_t h,
                         size_t w,
                         size_t c,
                         int32_t label,
                         size_t jump,
                         size_t resample,
                         uint64_t seed,
                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRIMSCENE_H */
