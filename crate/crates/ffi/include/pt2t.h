#ifndef PT2T_H
#define PT2T_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum Pt2tScaleDtype {
  PT2T_SCALE_DTYPE_F32 = 0,
  PT2T_SCALE_DTYPE_F16 = 1,
} Pt2tScaleDtype;

typedef enum Pt2tStatus {
  PT2T_STATUS_OK = 0,
  PT2T_STATUS_NULL_POINTER = 1,
  PT2T_STATUS_INVALID_ARGUMENT = 2,
  PT2T_STATUS_IO = 3,
  PT2T_STATUS_FORMAT = 4,
  PT2T_STATUS_CHECKSUM = 5,
  PT2T_STATUS_NUMERIC = 6,
  PT2T_STATUS_BUFFER_TOO_SMALL = 7,
  PT2T_STATUS_PANIC = 8,
} Pt2tStatus;

// Opaque packed ternary tensor.
typedef struct Pt2tTensor Pt2tTensor;

// Quantization options. Obtain defaults from [`pt2t_config_default`].
typedef struct Pt2tConfig {
  size_t group_size;
  double lambda_frac;
  size_t max_iters;
  enum Pt2tScaleDtype scale_dtype;
  bool ssr;
  bool aga;
  bool itf;
  bool compensation;
} Pt2tConfig;

// Errors measured right after quantization.
typedef struct Pt2tStats {
  double e_w;
  double e_x;
  double bits_per_weight;
  double itf_iters_mean;
} Pt2tStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Valid until
// the next pt2t call on the same thread.
const char *pt2t_last_error(void);

struct Pt2tConfig pt2t_config_default(void);

// Quantizes a row-major `rows x cols` f32 matrix.
//
// `calib` holds `samples x cols` activations, row-major; pass null (with
// `samples == 0`) to quantize against an identity Gram. `config` may be
// null for defaults and `stats` may be null. On success `*out` receives a
// handle owned by the caller.
//
// # Safety
// Non-null pointers must be valid for the stated element counts.
enum Pt2tStatus pt2t_quantize(const float *weights,
                              size_t rows,
                              size_t cols,
                              const float *calib,
                              size_t samples,
                              const struct Pt2tConfig *config,
                              struct Pt2tTensor **out,
                              struct Pt2tStats *stats);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum Pt2tStatus pt2t_tensor_read(const char *path, struct Pt2tTensor **out);

// # Safety
// `tensor` must be a live handle and `path` a NUL-terminated string.
enum Pt2tStatus pt2t_tensor_write(const struct Pt2tTensor *tensor, const char *path);

// Writes the shape and group size; any output pointer may be null.
//
// # Safety
// `tensor` must be a live handle; non-null outputs must be writable.
enum Pt2tStatus pt2t_tensor_shape(const struct Pt2tTensor *tensor,
                                  size_t *rows,
                                  size_t *cols,
                                  size_t *group_size);

// Expands the tensor into `out` (row-major f32, original column order).
// `len` must be at least rows * cols.
//
// # Safety
// `tensor` must be a live handle and `out` valid for `len` writes.
enum Pt2tStatus pt2t_tensor_dequantize(const struct Pt2tTensor *tensor, float *out, size_t len);

// Output error of the tensor against reference weights and activations,
// recomputed from the packed data. Null `calib` uses an identity Gram.
//
// # Safety
// Pointers must be valid for the tensor's shape and `samples`.
enum Pt2tStatus pt2t_tensor_output_error(const struct Pt2tTensor *tensor,
                                         const float *weights,
                                         const float *calib,
                                         size_t samples,
                                         double *e_x);

// # Safety
// `tensor` must be null or a handle not yet freed.
void pt2t_tensor_free(struct Pt2tTensor *tensor);

// Library version as a static NUL-terminated string.
const char *pt2t_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PT2T_H */
