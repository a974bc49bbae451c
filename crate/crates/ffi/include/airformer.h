#ifndef AIRFORMER_H
#define AIRFORMER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every function.
typedef enum AfStatus {
  AF_STATUS_OK = 0,
  AF_STATUS_NULL_POINTER = 1,
  AF_STATUS_INVALID_ARGUMENT = 2,
  AF_STATUS_IO = 3,
  AF_STATUS_CHECKPOINT = 4,
  AF_STATUS_DIMENSION = 5,
  AF_STATUS_VALIDATION = 6,
  AF_STATUS_UNDEFINED_METRIC = 7,
  AF_STATUS_INTERNAL = 8,
} AfStatus;

// Region partition of a station set.
typedef struct AfDartboard AfDartboard;

// Trained model with its normalization statistics and station layout.
typedef struct AfModel AfModel;

// Shape of a forecast call.
typedef struct AfModelDims {
  size_t stations;
  size_t input_steps;
  size_t horizon;
  size_t measurements;
  size_t outputs;
  size_t parameters;
} AfModelDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *af_version(void);

// Copies the last error of this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length without the NUL, or
// 0 when there is no error.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t af_last_error_message(char *buf, size_t len);

// Loads a checkpoint written by the `train` command.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AfStatus af_model_load(const char *path, struct AfModel **out);

// # Safety
// `model` must be null or a handle from [`af_model_load`] not yet freed.
void af_model_free(struct AfModel *model);

// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum AfStatus af_model_dims(const struct AfModel *model, struct AfModelDims *out);

// Forecasts from one input window in original units.
//
// `values` and `observed` are `[T, N, D]` row-major with stations in
// checkpoint order; `observed` may be null when everything is observed,
// and unobserved values are ignored. `out` receives `[τ, N, D_out]`.
//
// # Safety
// Buffers must hold the lengths given; `model` must be a live handle.
enum AfStatus af_model_forecast(const struct AfModel *model,
                                const double *values,
                                const uint8_t *observed,
                                size_t len,
                                double *out,
                                size_t out_len);

// Builds the partition for `n` stations given in degrees.
//
// # Safety
// `lat`, `lon` must hold `n` values, `radii_km` `n_radii` values, and `out`
// must be a valid pointer.
enum AfStatus af_dartboard_new(const double *lat,
                               const double *lon,
                               size_t n,
                               const double *radii_km,
                               size_t n_radii,
                               size_t n_sectors,
                               double sector_offset_deg,
                               struct AfDartboard **out);

// # Safety
// `board` must be null or a handle from [`af_dartboard_new`] not yet freed.
void af_dartboard_free(struct AfDartboard *board);

// Number of regions `M`, or 0 for a null handle.
//
// # Safety
// `board` must be null or a live handle.
size_t af_dartboard_num_regions(const struct AfDartboard *board);

// Region of `station` relative to `query`; -1 when it lies outside.
//
// # Safety
// `board` must be a live handle and `region` a valid pointer.
enum AfStatus af_dartboard_region_of(const struct AfDartboard *board,
                                     size_t query,
                                     size_t station,
                                     int64_t *region);

// MAE and RMSE over entries with a nonzero mask (all entries when `mask` is null).
//
// # Safety
// Buffers must hold `len` values; outputs must be valid pointers.
enum AfStatus af_mae_rmse(const double *pred,
                          const double *truth,
                          const uint8_t *mask,
                          size_t len,
                          double *mae,
                          double *rmse);

// Marks steps above `level` whose next step differs by more than `jump`;
// `observed` may be null.
//
// # Safety
// Buffers must hold `len` entries.
enum AfStatus af_sudden_change_mask(const double *series,
                                    const uint8_t *observed,
                                    size_t len,
                                    double level,
                                    double jump,
                                    uint8_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AIRFORMER_H */
