#ifndef GFS_PRUNE_H
#define GFS_PRUNE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GfsStatus {
  GFS_STATUS_OK = 0,
  GFS_STATUS_NULL_POINTER = 1,
  GFS_STATUS_INVALID_ARGUMENT = 2,
  GFS_STATUS_IO = 3,
  GFS_STATUS_FORMAT = 4,
  GFS_STATUS_NUMERICAL = 5,
  GFS_STATUS_BOUND_VIOLATION = 6,
  GFS_STATUS_PANIC = 7,
} GfsStatus;

typedef enum GfsActivation {
  GFS_ACTIVATION_SIGMOID = 0,
  GFS_ACTIVATION_TANH = 1,
  GFS_ACTIVATION_RELU = 2,
} GfsActivation;

typedef enum GfsHead {
  GFS_HEAD_LINEAR = 0,
  GFS_HEAD_SIGMOID = 1,
} GfsHead;

typedef enum GfsCriterion {
  GFS_CRITERION_L2 = 0,
  GFS_CRITERION_BCE = 1,
} GfsCriterion;

typedef struct GfsDataset GfsDataset;

typedef struct GfsNet GfsNet;

/**
 * Outcome of a greedy run: the per-step losses and the neuron multiset.
 */
typedef struct GfsPruneResult GfsPruneResult;

/**
 * Training hyperparameters for [`gfs_net_train`].
 */
typedef struct GfsTrainOptions {
  size_t iterations;
  double learning_rate;
  size_t batch_size;
  double momentum;
  double weight_decay;
  uint64_t seed;
  enum GfsCriterion criterion;
} GfsTrainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *gfs_last_error(void);

/**
 * Loads an IDX image/label file pair (gzip accepted); pixels scaled to [0, 1].
 *
 * # Safety
 * `images` and `labels` must be NUL-terminated strings; `out` must be writable.
 */
enum GfsStatus gfs_dataset_load_idx(const char *images,
                                    const char *labels,
                                    struct GfsDataset **out);

/**
 * Unit-norm Gaussian rows with linear-threshold (`binary != 0`) or noisy
 * linear labels.
 *
 * # Safety
 * `out` must be writable.
 */
enum GfsStatus gfs_dataset_synthetic(size_t m,
                                     size_t d,
                                     uint64_t seed,
                                     bool binary,
                                     struct GfsDataset **out);

/**
 * Copies a row-major `m × d` feature block and `m` labels.
 *
 * # Safety
 * `features` must point to `m * d` doubles and `labels` to `m` doubles.
 */
enum GfsStatus gfs_dataset_from_arrays(const double *features,
                                       const double *labels,
                                       size_t m,
                                       size_t d,
                                       struct GfsDataset **out);

/**
 * # Safety
 * `ds` must come from this library or be null.
 */
size_t gfs_dataset_len(const struct GfsDataset *ds);

/**
 * # Safety
 * `ds` must come from this library or be null.
 */
size_t gfs_dataset_dim(const struct GfsDataset *ds);

/**
 * # Safety
 * `ds` must come from this library or be null; it is invalid afterwards.
 */
void gfs_dataset_free(struct GfsDataset *ds);

/**
 * Width-`width` network with i.i.d. standard normal weights.
 *
 * # Safety
 * `out` must be writable.
 */
enum GfsStatus gfs_net_new(size_t width,
                           size_t dim,
                           uint64_t seed,
                           enum GfsActivation act,
                           enum GfsHead out_head,
                           struct GfsNet **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum GfsStatus gfs_net_load(const char *path, struct GfsNet **out);

/**
 * # Safety
 * `net` must come from this library; `path` must be a NUL-terminated string.
 */
enum GfsStatus gfs_net_save(const struct GfsNet *net, const char *path);

/**
 * # Safety
 * `net` must come from this library or be null.
 */
size_t gfs_net_width(const struct GfsNet *net);

/**
 * Output for one input of length `dim`.
 *
 * # Safety
 * `x` must point to `dim` doubles and `out` must be writable.
 */
enum GfsStatus gfs_net_forward(const struct GfsNet *net, const double *x, size_t dim, double *out);

/**
 * Trains `net` in place; the final full-dataset loss goes to `final_loss`
 * when it is not null. On failure the network is left unchanged.
 *
 * # Safety
 * `net`, `ds` and `opts` must be valid; `final_loss` may be null.
 */
enum GfsStatus gfs_net_train(struct GfsNet *net,
                             const struct GfsDataset *ds,
                             const struct GfsTrainOptions *opts,
                             double *final_loss);

/**
 * Mean loss of the dense network on `ds`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum GfsStatus gfs_net_loss(const struct GfsNet *net,
                            const struct GfsDataset *ds,
                            enum GfsCriterion crit,
                            double *out);

/**
 * # Safety
 * `net` must come from this library or be null; it is invalid afterwards.
 */
void gfs_net_free(struct GfsNet *net);

/**
 * `iterations` steps of full-batch greedy forward selection on the polytope loss.
 *
 * # Safety
 * `net` and `ds` must be valid; `out` must be writable.
 */
enum GfsStatus gfs_prune(const struct GfsNet *net,
                         const struct GfsDataset *ds,
                         size_t iterations,
                         struct GfsPruneResult **out);

/**
 * Greedy steps taken.
 *
 * # Safety
 * `res` must come from [`gfs_prune`] or be null.
 */
size_t gfs_prune_result_steps(const struct GfsPruneResult *res);

/**
 * Copies the loss after each step into `buf`, which holds `len` doubles.
 *
 * # Safety
 * `buf` must point to `len` writable doubles.
 */
enum GfsStatus gfs_prune_result_losses(const struct GfsPruneResult *res, double *buf, size_t len);

/**
 * Copies the neuron chosen at each step into `buf`.
 *
 * # Safety
 * `buf` must point to `len` writable elements.
 */
enum GfsStatus gfs_prune_result_chosen(const struct GfsPruneResult *res, size_t *buf, size_t len);

/**
 * Copies the per-neuron selection counts (length = width) into `buf`.
 *
 * # Safety
 * `buf` must point to `len` writable elements.
 */
enum GfsStatus gfs_prune_result_counts(const struct GfsPruneResult *res, size_t *buf, size_t len);

/**
 * # Safety
 * `res` must come from [`gfs_prune`] or be null; it is invalid afterwards.
 */
void gfs_prune_result_free(struct GfsPruneResult *res);

/**
 * Training accuracy of the network restricted to the pruned multiset.
 *
 * # Safety
 * All pointers must be valid.
 */
enum GfsStatus gfs_pruned_accuracy(const struct GfsNet *net,
                                   const struct GfsPruneResult *res,
                                   const struct GfsDataset *ds,
                                   double *out);

/**
 * SGD pre-training threshold `−ln k / ln(1 − c d/m²)`.
 *
 * # Safety
 * `out` must be writable.
 */
enum GfsStatus gfs_sgd_threshold(size_t k, size_t m, size_t d, double c, double *out);

/**
 * GD pre-training threshold `−ln k / ln(1 − c d/m)`.
 *
 * # Safety
 * `out` must be writable.
 */
enum GfsStatus gfs_gd_threshold(size_t k, size_t m, size_t d, double c, double *out);

/**
 * Deterministic bound on the greedy loss after `k` steps.
 */
double gfs_lemma1_bound(size_t k, double loss_u1, double diameter, double dense_loss);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GFS_PRUNE_H */
