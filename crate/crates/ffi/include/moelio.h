#ifndef MOELIO_H
#define MOELIO_H

#include <stddef.h>
#include <stdint.h>

// Result of every fallible call. Values 2 to 4 match the command-line exit codes.
typedef enum MoelioStatus {
  MOELIO_STATUS_OK = 0,
  // A required pointer argument was null.
  MOELIO_STATUS_NULL_POINTER = 1,
  // Invalid or inconsistent configuration.
  MOELIO_STATUS_CONFIG = 2,
  // Unreadable, malformed or unsuitable input data.
  MOELIO_STATUS_DATA = 3,
  // Numerical failure inside the filter or network.
  MOELIO_STATUS_NUMERIC = 4,
  // Argument out of range, such as a bad index or non-UTF-8 string.
  MOELIO_STATUS_INVALID_ARGUMENT = 5,
  // Internal panic caught at the boundary.
  MOELIO_STATUS_INTERNAL = 6,
} MoelioStatus;

// Run configuration.
typedef struct MoelioConfig MoelioConfig;

// Trained velocity network.
typedef struct MoelioModel MoelioModel;

// Output of one filter run.
typedef struct MoelioRun MoelioRun;

// Body-frame velocity with diagonal variance.
typedef struct MoelioVelocity {
  double v[3];
  double var[3];
} MoelioVelocity;

// One IMU sample: time (s), angular rate (rad/s) and specific force (m/s²), body frame.
typedef struct MoelioImuSample {
  double t;
  double gyro[3];
  double accel[3];
} MoelioImuSample;

// Filter output at one epoch, navigation frame.
typedef struct MoelioNavRecord {
  double t;
  // Body-to-navigation attitude, w x y z.
  double q[4];
  double v[3];
  double p[3];
  double gyro_bias[3];
  double accel_bias[3];
  // Covariance diagonal: attitude, velocity, position, gyro bias, accel bias.
  double p_diag[15];
} MoelioNavRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *moelio_last_error(void);

// Library version as a static NUL-terminated string.
const char *moelio_version(void);

// Default run configuration.
//
// # Safety
// `out` must be a valid pointer to writable storage for a handle.
enum MoelioStatus moelio_config_default(struct MoelioConfig **out);

// Parses `section.key = value` configuration text.
//
// # Safety
// `text` must be a NUL-terminated string and `out` a valid handle slot.
enum MoelioStatus moelio_config_parse(const char *text, struct MoelioConfig **out);

// Loads a configuration file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid handle slot.
enum MoelioStatus moelio_config_load(const char *path, struct MoelioConfig **out);

// # Safety
// `cfg` must be null or a handle from a `moelio_config_*` constructor, freed once.
void moelio_config_free(struct MoelioConfig *cfg);

// Loads a network checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid handle slot.
enum MoelioStatus moelio_model_load(const char *path, struct MoelioModel **out);

// Decodes a checkpoint held in memory.
//
// # Safety
// `bytes` must point to `len` readable bytes and `out` be a valid handle slot.
enum MoelioStatus moelio_model_from_bytes(const uint8_t *bytes,
                                          size_t len,
                                          struct MoelioModel **out);

// Input window length the network expects.
//
// # Safety
// `model` must be a valid model handle.
size_t moelio_model_window_len(const struct MoelioModel *model);

// Predicts body velocity for one window of `9 × len` values, row-major:
// gyro xyz, specific force xyz and body-frame gravity direction xyz, one
// column per epoch.
//
// # Safety
// `model` must be a valid model handle, `window` must point to
// `9 * len` doubles and `out` to writable storage.
enum MoelioStatus moelio_model_predict(const struct MoelioModel *model,
                                       const double *window,
                                       size_t len,
                                       struct MoelioVelocity *out);

// # Safety
// `model` must be null or a handle from a `moelio_model_*` constructor, freed once.
void moelio_model_free(struct MoelioModel *model);

// Runs the filter over `n` IMU samples at the configured rate. With a
// null `model` the filter only propagates.
//
// # Safety
// `cfg` must be a valid config handle, `model` null or a valid model
// handle, `imu` must point to `n` samples and `out` be a valid handle slot.
enum MoelioStatus moelio_fuse(const struct MoelioConfig *cfg,
                              const struct MoelioModel *model,
                              const struct MoelioImuSample *imu,
                              size_t n,
                              struct MoelioRun **out);

// Number of output epochs.
//
// # Safety
// `run` must be a valid run handle.
size_t moelio_run_len(const struct MoelioRun *run);

// Number of accepted velocity updates.
//
// # Safety
// `run` must be a valid run handle.
size_t moelio_run_updates(const struct MoelioRun *run);

// Copies epoch `i` of the run into `out`.
//
// # Safety
// `run` must be a valid run handle and `out` point to writable storage.
enum MoelioStatus moelio_run_record(const struct MoelioRun *run,
                                    size_t i,
                                    struct MoelioNavRecord *out);

// # Safety
// `run` must be null or a handle from [`moelio_fuse`], freed once.
void moelio_run_free(struct MoelioRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOELIO_H */
