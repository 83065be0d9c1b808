#ifndef DFM_H
#define DFM_H

/* Generated by cbindgen from the dfm-ffi crate. Do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Integration rule for [`dfm_generate`].
typedef enum DfmSolver {
  DFM_SOLVER_EULER = 0,
  DFM_SOLVER_MIDPOINT = 1,
  DFM_SOLVER_RK4 = 2,
} DfmSolver;

// Result of every fallible ABI call. Zero is success; 1 through 4 mirror
// the CLI exit codes (I/O, configuration, numeric failure, invalid input);
// the rest are failures of the ABI boundary itself.
typedef enum DfmStatus {
  DFM_STATUS_OK = 0,
  DFM_STATUS_IO = 1,
  DFM_STATUS_CONFIG = 2,
  DFM_STATUS_NUMERIC = 3,
  DFM_STATUS_INPUT = 4,
  DFM_STATUS_NULL_POINTER = 5,
  DFM_STATUS_UTF8 = 6,
  DFM_STATUS_PANIC = 7,
} DfmStatus;

// Opaque handle to a fixed random-projection embedder.
typedef struct DfmEmbedder DfmEmbedder;

// Opaque handle to a velocity-field model.
typedef struct DfmModel DfmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string. Never null; do not
// free it.
const char *dfm_version(void);

// Message for the most recent failure on the calling thread, or an empty
// string if the last call succeeded. Valid until this thread's next call
// into the library; do not free it.
const char *dfm_last_error_message(void);

// Creates a freshly initialized model. On success writes a handle to
// `out`; release it with [`dfm_model_free`].
//
// # Safety
// `out` must be a valid pointer to a `DfmModel*`.
enum DfmStatus dfm_model_new(size_t d,
                             size_t hidden,
                             size_t depth,
                             size_t classes,
                             size_t pitches,
                             size_t velocities,
                             uint64_t seed,
                             struct DfmModel **out);

// Loads a model from a checkpoint file written by [`dfm_model_save`] or
// the CLI trainer.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer to a
// `DfmModel*`.
enum DfmStatus dfm_model_load(const char *path, struct DfmModel **out);

// Saves a model to a checkpoint file readable by [`dfm_model_load`] and
// the CLI.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum DfmStatus dfm_model_save(const struct DfmModel *model, const char *path);

// Releases a model handle. Passing null is a no-op.
//
// # Safety
// `model` must be null or a handle obtained from this library that has not
// been freed yet.
void dfm_model_free(struct DfmModel *model);

// The model's data dimension, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t dfm_model_dim(const struct DfmModel *model);

// Evaluates the velocity distribution at state `x` (length `d`, which must
// equal the model's dimension), time `t` in [0, 1], and the given condition
// ids. Writes the predicted mean to `mu_out` (model dimension values) and
// the shared log-variance to `log_var_out` (one value).
//
// # Safety
// `model` must be a live handle; `x` must point to `d` doubles; `mu_out`
// must have room for the model dimension; `log_var_out` for one double.
enum DfmStatus dfm_forward(const struct DfmModel *model,
                           const double *x,
                           size_t d,
                           double t,
                           size_t class_id,
                           size_t pitch_id,
                           size_t velocity_id,
                           double *mu_out,
                           double *log_var_out);

// Draws one sample for a condition by integrating from fresh noise, and
// writes it to `out` (model dimension values). The stream is derived from
// `seed` and `sample_index` exactly as the CLI's `sample` command derives
// per-sample streams, so a given (seed, index) pair reproduces the CLI's
// output bit for bit under the same sampler settings.
//
// # Safety
// `model` must be a live handle and `out` must have room for the model
// dimension.
enum DfmStatus dfm_generate(const struct DfmModel *model,
                            size_t class_id,
                            size_t pitch_id,
                            size_t velocity_id,
                            size_t num_steps,
                            enum DfmSolver solver,
                            double tau,
                            uint64_t seed,
                            uint64_t sample_index,
                            double *out);

// Candidate-count-indexed sampling temperature: the schedule used by
// best-of-N search, `min(tau_max, tau0 * sqrt(2 ln(N+1)))`.
double dfm_temperature(uint64_t n, double tau0, double tau_max);

// Creates the fixed random-projection embedder used for scoring. On
// success writes a handle to `out`; release it with [`dfm_embedder_free`].
//
// # Safety
// `out` must be a valid pointer to a `DfmEmbedder*`.
enum DfmStatus dfm_embedder_new(size_t d,
                                size_t embed_dim,
                                uint64_t seed,
                                struct DfmEmbedder **out);

// Releases an embedder handle. Passing null is a no-op.
//
// # Safety
// `embedder` must be null or a handle obtained from this library that has
// not been freed yet.
void dfm_embedder_free(struct DfmEmbedder *embedder);

// The embedder's output dimension, or 0 for a null handle.
//
// # Safety
// `embedder` must be null or a live handle.
size_t dfm_embedder_dim(const struct DfmEmbedder *embedder);

// Embeds a sample of length `d` (the embedder's input dimension) into a
// unit vector written to `out` (embedder output dimension values).
//
// # Safety
// `embedder` must be a live handle, `x` must point to `d` doubles, and
// `out` must have room for the embedder's output dimension.
enum DfmStatus dfm_embed(const struct DfmEmbedder *embedder,
                         const double *x,
                         size_t d,
                         double *out);

// Cosine similarity between two vectors of equal length `len`, written to
// `out`. Fails with the input-domain status if either vector has (near)
// zero norm, matching the scoring rules used by search.
//
// # Safety
// `a` and `b` must point to `len` doubles each; `out` to one double.
enum DfmStatus dfm_cosine(const double *a, const double *b, size_t len, double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* DFM_H */
