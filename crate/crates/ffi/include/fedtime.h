#ifndef FEDTIME_H
#define FEDTIME_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum FtStatus {
  FT_STATUS_OK = 0,
  /**
   * Null pointer, bad length or invalid UTF-8.
   */
  FT_STATUS_INVALID_ARGUMENT = 1,
  /**
   * A configuration value was rejected.
   */
  FT_STATUS_CONFIG = 2,
  /**
   * A runtime failure inside the library.
   */
  FT_STATUS_RUNTIME = 3,
  /**
   * A checkpoint could not be read or decoded.
   */
  FT_STATUS_CHECKPOINT = 4,
  /**
   * A panic was caught at the boundary.
   */
  FT_STATUS_PANIC = 5,
} FtStatus;

/**
 * Opaque trained model.
 */
typedef struct FtModel FtModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *ft_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ft_version(void);

/**
 * Loads a checkpoint file into a new handle written to `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FtStatus ft_model_load(const char *path, struct FtModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`ft_model_load`] and not be used afterwards.
 */
void ft_model_free(struct FtModel *model);

/**
 * Look-back length L the model expects, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ft_model_lookback(const struct FtModel *model);

/**
 * Forecast horizon T, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ft_model_horizon(const struct FtModel *model);

/**
 * Channel count M, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ft_model_channels(const struct FtModel *model);

/**
 * Forecasts `rows` univariate windows. `inputs` holds `rows × L` values in
 * row-major order, `channels` the channel index of each row, and `out`
 * receives `rows × T` values.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum FtStatus ft_model_forecast(const struct FtModel *model,
                                const double *inputs,
                                const size_t *channels,
                                size_t rows,
                                double *out,
                                size_t out_len);

/**
 * Runs `train` for a TOML config file. `out_dir` may be null to keep the
 * configured directory. Final test MSE and MAE are written when the
 * pointers are non-null.
 *
 * # Safety
 * String arguments must be NUL-terminated; output pointers null or valid.
 */
enum FtStatus ft_train(const char *config_path, const char *out_dir, double *mse, double *mae);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDTIME_H */
