#ifndef CPC_LAB_H
#define CPC_LAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Values accepted by `which` in `cpc_model_representation`.
#define CPC_REPR_C 0

#define CPC_REPR_Z 1

#define CPC_REPR_MEAN_C 2

#define CPC_REPR_MEAN_Z 3

typedef enum CpcStatus {
  CPC_STATUS_OK = 0,
  CPC_STATUS_NULL_POINTER = 1,
  CPC_STATUS_INVALID_ARGUMENT = 2,
  CPC_STATUS_SHAPE = 3,
  // The output buffer is too small; the required size was still written.
  CPC_STATUS_BUFFER_TOO_SMALL = 4,
  CPC_STATUS_IO = 5,
  CPC_STATUS_PARSE = 6,
  CPC_STATUS_CONFIG = 7,
  CPC_STATUS_PANIC = 8,
} CpcStatus;

// Opaque model handle.
typedef struct CpcModel CpcModel;

// Static dimensions of a model.
typedef struct CpcDims {
  size_t input_channels;
  size_t latent_dim;
  size_t context_dim;
  size_t horizons;
  size_t receptive_field;
  size_t total_stride;
} CpcDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or "" after a success.
// Valid until the next call into this library on the same thread.
const char *cpc_last_error(void);

// Library version, a static NUL-terminated string.
const char *cpc_version(void);

// Creates a freshly initialized model. `config_json` is a model config
// object; NULL selects the defaults.
//
// # Safety
// `config_json` is NULL or a NUL-terminated string; `out` is writable.
enum CpcStatus cpc_model_new(const char *config_json, uint64_t seed, struct CpcModel **out);

// Loads a model checkpoint written by `cpc-lab train` or `cpc_model_save`.
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum CpcStatus cpc_model_load(const char *path, struct CpcModel **out);

// # Safety
// `model` is a live handle; `path` is a NUL-terminated string.
enum CpcStatus cpc_model_save(const struct CpcModel *model, const char *path);

// Releases a handle. NULL is ignored.
//
// # Safety
// `model` is NULL or a handle not yet freed.
void cpc_model_free(struct CpcModel *model);

// # Safety
// `model` is a live handle; `out` is writable.
enum CpcStatus cpc_model_dims(const struct CpcModel *model, struct CpcDims *out);

// Number of latent frames produced from `input_len` raw samples.
//
// # Safety
// `model` is a live handle; `out` is writable.
enum CpcStatus cpc_model_latent_len(const struct CpcModel *model, size_t input_len, size_t *out);

// Per-frame features of one sequence. `x` holds `input_channels × input_len`
// values, channel-major. The result is `rows × cols` (frames × feature
// width); `rows`/`cols` are written even when the buffer is too small.
//
// # Safety
// `model` is a live handle; `x` has `input_channels × input_len` values;
// `out` has room for `out_cap` values; `rows` and `cols` are writable.
enum CpcStatus cpc_model_representation(const struct CpcModel *model,
                                        uint32_t which,
                                        const double *x,
                                        size_t input_len,
                                        double *out,
                                        size_t out_cap,
                                        size_t *rows,
                                        size_t *cols);

// `zᵀ W_k c` for horizon `k` (1-based).
//
// # Safety
// `model` is a live handle; `z` has `latent_dim` values; `c` has
// `context_dim` values; `out` is writable.
enum CpcStatus cpc_model_score(const struct CpcModel *model,
                               size_t k,
                               const double *z,
                               const double *c,
                               double *out);

// InfoNCE loss of one candidate set of `n` log-scores.
//
// # Safety
// `log_scores` has `n` values; `out` is writable.
enum CpcStatus cpc_infonce_loss(const double *log_scores, size_t n, size_t positive, double *out);

// `log(n) − mean_loss`.
//
// # Safety
// `out` is writable.
enum CpcStatus cpc_mi_lower_bound(double mean_loss, size_t n, double *out);

// Posterior over which of `n` candidates is the positive, given density
// ratios; writes `n` values.
//
// # Safety
// `ratios` and `out` have `n` values.
enum CpcStatus cpc_optimal_posterior(const double *ratios, size_t n, double *out);

// Mutual information of `dim` independent pairs with correlation `rho`.
//
// # Safety
// `out` is writable.
enum CpcStatus cpc_gaussian_mi(size_t dim, double rho, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CPC_LAB_H */
