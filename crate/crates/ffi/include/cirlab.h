#ifndef CIRLAB_H
#define CIRLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every call.
 */
typedef enum CirlabStatus {
  CIRLAB_OK = 0,
  CIRLAB_ERR_NULL_POINTER = 1,
  CIRLAB_ERR_INVALID_ARGUMENT = 2,
  CIRLAB_ERR_IO = 3,
  CIRLAB_ERR_FORMAT = 4,
  CIRLAB_ERR_ZERO_NORM = 5,
  CIRLAB_ERR_TIE = 6,
  CIRLAB_ERR_NON_BIJECTIVE = 7,
  CIRLAB_ERR_BUFFER_TOO_SMALL = 8,
  CIRLAB_ERR_PANIC = 9,
} CirlabStatus;

/**
 * Opaque embedding store.
 */
typedef struct CirlabStore CirlabStore;

typedef struct CirlabCollapseConfig {
  size_t m;
  size_t p;
  size_t d;
  double tau;
  size_t steps;
  double step_size;
  uint64_t seed;
  bool tie_v_to_u;
} CirlabCollapseConfig;

typedef struct CirlabBoundReport {
  double loss_maxsim;
  double loss_standard;
  double gap;
  double p1;
  double p2;
  double bound;
  double log_bound;
  bool assumption_holds;
  bool proposition_ok;
  bool corollary_ok;
} CirlabBoundReport;

typedef struct CirlabCollapseResult {
  double final_objective;
  double etf_error;
  double alignment_error;
  /**
   * Objective values available (`steps + 1`), whether or not they fit
   * in the caller's trace buffer.
   */
  size_t trace_len;
} CirlabCollapseResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cirlab_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `cap > 0`). Returns the full message length
 * including the NUL, or 0 when no error is recorded.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t cirlab_last_error(char *buf, size_t cap);

/**
 * Defaults of the collapse lab.
 */
struct CirlabCollapseConfig cirlab_collapse_config_default(void);

/**
 * Loads a TEMB file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CirlabStatus cirlab_store_load(const char *path, struct CirlabStore **out);

/**
 * Writes a TEMB file.
 *
 * # Safety
 * `store` must come from this library; `path` must be NUL-terminated.
 */
enum CirlabStatus cirlab_store_save(const struct CirlabStore *store, const char *path);

/**
 * Seeded synthetic store; `clusters = 0` draws items independently.
 *
 * # Safety
 * `out` must be writable.
 */
enum CirlabStatus cirlab_store_synth(size_t n,
                                     size_t p,
                                     size_t d,
                                     uint64_t seed,
                                     size_t clusters,
                                     double noise,
                                     struct CirlabStore **out);

/**
 * Builds a store from `n * p * d` floats. `ids` may be null, in which case
 * items are named by index; otherwise it holds `n` NUL-terminated strings.
 *
 * # Safety
 * `data` must hold `n * p * d` floats; `ids` must be null or hold `n`
 * valid strings; `out` must be writable.
 */
enum CirlabStatus cirlab_store_from_f32(size_t n,
                                        size_t p,
                                        size_t d,
                                        const float *data,
                                        const char *const *ids,
                                        struct CirlabStore **out);

/**
 * Releases a store. Null is ignored.
 *
 * # Safety
 * `store` must be null or an unreleased handle from this library.
 */
void cirlab_store_free(struct CirlabStore *store);

/**
 * Shape of a store.
 *
 * # Safety
 * `store` must be a valid handle; the out pointers must be writable.
 */
enum CirlabStatus cirlab_store_shape(const struct CirlabStore *store,
                                     size_t *n,
                                     size_t *p,
                                     size_t *d);

/**
 * Copies item `index`'s id into `buf` with a trailing NUL. `needed`
 * receives the byte count including the NUL.
 *
 * # Safety
 * `store` must be valid; `buf` must hold `cap` bytes; `needed` writable.
 */
enum CirlabStatus cirlab_store_id(const struct CirlabStore *store,
                                  size_t index,
                                  char *buf,
                                  size_t cap,
                                  size_t *needed);

/**
 * MaxSim of two token stacks (`pa × d` and `pb × d` floats). Rows are
 * normalized first.
 *
 * # Safety
 * `a` and `b` must hold the stated number of floats; `out` writable.
 */
enum CirlabStatus cirlab_maxsim(const float *a,
                                size_t pa,
                                const float *b,
                                size_t pb,
                                size_t d,
                                double *out);

/**
 * Row-major `rows × cols` MaxSim scores into `out`, which must hold at
 * least `queries.n * candidates.n` values. `threads = 0` uses every core.
 *
 * # Safety
 * Handles must be valid; `out` must hold `cap` doubles.
 */
enum CirlabStatus cirlab_score_matrix(const struct CirlabStore *queries,
                                      const struct CirlabStore *candidates,
                                      size_t threads,
                                      double *out,
                                      size_t cap);

/**
 * MaxSim InfoNCE objective of `n` query/target pairs.
 *
 * # Safety
 * `queries` and `targets` must each hold `n * p * d` doubles.
 */
enum CirlabStatus cirlab_infonce(const double *queries,
                                 const double *targets,
                                 size_t n,
                                 size_t p,
                                 size_t d,
                                 double tau,
                                 double *out);

/**
 * Gradient of the objective with respect to the raw inputs, written to
 * `grad_queries` and `grad_targets` (`n * p * d` doubles each).
 *
 * # Safety
 * All four buffers must hold `n * p * d` doubles.
 */
enum CirlabStatus cirlab_infonce_grad(const double *queries,
                                      const double *targets,
                                      size_t n,
                                      size_t p,
                                      size_t d,
                                      double tau,
                                      double *grad_queries,
                                      double *grad_targets);

/**
 * Evaluates both objectives and the bound on one batch.
 *
 * # Safety
 * `queries` and `targets` must each hold `n * p * d` doubles.
 */
enum CirlabStatus cirlab_verify_bounds(const double *queries,
                                       const double *targets,
                                       size_t n,
                                       size_t p,
                                       size_t d,
                                       double tau,
                                       struct CirlabBoundReport *out);

/**
 * Runs the collapse lab. The first `min(trace_cap, steps + 1)` objective
 * values are written to `trace` when it is non-null.
 *
 * # Safety
 * `cfg` readable, `out` writable, `trace` null or `trace_cap` doubles.
 */
enum CirlabStatus cirlab_collapse(const struct CirlabCollapseConfig *cfg,
                                  double *trace,
                                  size_t trace_cap,
                                  struct CirlabCollapseResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CIRLAB_H */
