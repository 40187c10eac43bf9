#ifndef HQCNF_H
#define HQCNF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum HqcnfStatus {
  HQCNF_STATUS_OK = 0,
  HQCNF_STATUS_NULL_POINTER = 1,
  HQCNF_STATUS_INVALID_ARGUMENT = 2,
  HQCNF_STATUS_DIMENSION = 3,
  HQCNF_STATUS_NUMERIC = 4,
  HQCNF_STATUS_PARSE = 5,
  HQCNF_STATUS_IO = 6,
  HQCNF_STATUS_VERSION = 7,
  HQCNF_STATUS_CONFIG = 8,
  HQCNF_STATUS_PANIC = 9,
} HqcnfStatus;

// Circuit layout of the quantum blocks.
typedef enum HqcnfAnsatz {
  HQCNF_ANSATZ_RY_CNOT = 0,
  HQCNF_ANSATZ_RZ_RY_RZ_CNOT = 1,
} HqcnfAnsatz;

// Opaque model handle.
typedef struct HqcnfModel HqcnfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *hqcnf_version(void);

// Message of the last failed call on this thread, or null if it succeeded.
// The pointer stays valid until the next call into the library on this thread.
const char *hqcnf_last_error_message(void);

// Builds a freshly initialised model. With `hybrid` false the qubit and
// circuit arguments are ignored.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum HqcnfStatus hqcnf_model_new(size_t dim,
                                 size_t coupling_layers,
                                 bool hybrid,
                                 size_t n_qubits,
                                 enum HqcnfAnsatz ansatz,
                                 size_t circuit_layers,
                                 uint64_t seed,
                                 struct HqcnfModel **out);

// Loads a model from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum HqcnfStatus hqcnf_model_load(const char *path, struct HqcnfModel **out);

// Writes the model to a checkpoint file.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum HqcnfStatus hqcnf_model_save(const struct HqcnfModel *model, const char *path);

// Releases a handle. Null is a no-op.
//
// # Safety
// `model` must be null or a handle not yet freed.
void hqcnf_model_free(struct HqcnfModel *model);

// Data dimension of the model, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t hqcnf_model_dim(const struct HqcnfModel *model);

// Number of trainable scalars, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t hqcnf_model_param_count(const struct HqcnfModel *model);

// Data to latent: writes `z` (length `len`) and the log-determinant.
//
// # Safety
// `x` and `z_out` must hold `len` doubles; `logdet_out` must be writable.
enum HqcnfStatus hqcnf_model_forward(const struct HqcnfModel *model,
                                     const double *x,
                                     size_t len,
                                     double *z_out,
                                     double *logdet_out);

// Latent to data.
//
// # Safety
// `z` and `x_out` must hold `len` doubles.
enum HqcnfStatus hqcnf_model_inverse(const struct HqcnfModel *model,
                                     const double *z,
                                     size_t len,
                                     double *x_out);

// Exact log-density of `x` under the model.
//
// # Safety
// `x` must hold `len` doubles; `out` must be writable.
enum HqcnfStatus hqcnf_model_log_prob(const struct HqcnfModel *model,
                                      const double *x,
                                      size_t len,
                                      double *out);

// Draws `count` samples into `out`, row-major with `out_len == count * dim`.
// Deterministic for a given seed.
//
// # Safety
// `out` must hold `out_len` doubles.
enum HqcnfStatus hqcnf_model_sample(const struct HqcnfModel *model,
                                    size_t count,
                                    uint64_t seed,
                                    double *out,
                                    size_t out_len);

// Fréchet distance between two row-major sample sets of width `dim`.
// Each set needs at least two rows.
//
// # Safety
// `real` must hold `n_real * dim` doubles and `generated` `n_generated * dim`.
enum HqcnfStatus hqcnf_fid(const double *real,
                           size_t n_real,
                           const double *generated,
                           size_t n_generated,
                           size_t dim,
                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HQCNF_H */
