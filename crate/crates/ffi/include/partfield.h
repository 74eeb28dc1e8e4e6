#ifndef PARTFIELD_H
#define PARTFIELD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes shared by every function.
 */
typedef enum PfStatus {
  PF_STATUS_OK = 0,
  PF_STATUS_INVALID_ARGUMENT = 1,
  PF_STATUS_CONFIG = 2,
  PF_STATUS_IO = 3,
  PF_STATUS_FORMAT = 4,
  PF_STATUS_LOAD = 5,
  PF_STATUS_NULL_POINTER = 6,
  PF_STATUS_BUFFER_TOO_SMALL = 7,
  PF_STATUS_INTERNAL = 8,
} PfStatus;

/*
 Opaque semantic field.
 */
typedef struct PfField PfField;

/*
 Opaque trained policy.
 */
typedef struct PfPolicy PfPolicy;

/*
 One observation as flat arrays. `part_of[i]` names the part (`0..num_parts`)
 of point `i`; the rotation is row-major.
 */
typedef struct PfObservation {
  size_t num_points;
  size_t feature_dim;
  const double *xyz;
  const double *source_a;
  const double *source_b;
  size_t num_parts;
  const size_t *part_of;
  const double *pose_rotation;
  const double *pose_translation;
  size_t robot_dim;
  const double *robot;
} PfObservation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the last error message of this thread into `buf` (NUL-terminated,
 truncated to `len`) and returns the full message length, or 0 when no
 error has been recorded.

 # Safety
 `buf` must be null or point to `len` writable bytes.
 */
size_t pf_last_error_message(char *buf, size_t len);

/*
 Builds a field from `n` points (`xyz`, 3n values) and an `n × dim`
 row-major feature block.

 # Safety
 `xyz` and `features` must hold `3n` and `n·dim` readable values; `out`
 must be writable.
 */
enum PfStatus pf_field_new(const double *xyz,
                           const double *features,
                           size_t n,
                           size_t dim,
                           struct PfField **out);

/*
 Reads a field text file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PfStatus pf_field_read(const char *path, struct PfField **out);

/*
 # Safety
 `field` must be a live handle; `path` a NUL-terminated string.
 */
enum PfStatus pf_field_write(const struct PfField *field, const char *path);

/*
 Number of points, or 0 for a null handle.

 # Safety
 `field` must be null or a live handle.
 */
size_t pf_field_len(const struct PfField *field);

/*
 Feature dimension, or 0 for a null handle.

 # Safety
 `field` must be null or a live handle.
 */
size_t pf_field_feature_dim(const struct PfField *field);

/*
 Copies positions (3 per point) and features (`dim` per point) out.
 Either buffer may be null to skip it.

 # Safety
 Non-null buffers must hold `xyz_len` / `features_len` writable values.
 */
enum PfStatus pf_field_copy(const struct PfField *field,
                            double *xyz,
                            size_t xyz_len,
                            double *features,
                            size_t features_len);

/*
 Moves the field rigidly by a row-major rotation (9 values) and a
 translation (3 values); features are copied unchanged.

 # Safety
 `rotation` and `translation` must hold 9 and 3 readable values.
 */
enum PfStatus pf_field_propagate(const struct PfField *field,
                                 const double *rotation,
                                 const double *translation,
                                 struct PfField **out);

/*
 # Safety
 `field` must be null or a handle not yet freed.
 */
void pf_field_free(struct PfField *field);

/*
 Farthest-point sampling of `k` indices from `n` points.

 # Safety
 `xyz` must hold `3n` readable values and `out_indices` `k` writable ones.
 */
enum PfStatus pf_farthest_point_sample(const double *xyz,
                                       size_t n,
                                       size_t k,
                                       uint64_t seed,
                                       size_t *out_indices);

/*
 Writes `<out_prefix>.txt` and `<out_prefix>.png` for a field file.

 # Safety
 Both arguments must be NUL-terminated strings.
 */
enum PfStatus pf_visualize_field(const char *field_path, const char *out_prefix);

/*
 Loads a policy checkpoint.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PfStatus pf_policy_load(const char *path, struct PfPolicy **out);

/*
 Action chunk shape (`horizon × action_dim`) and the expected feature and
 robot-state dimensions.

 # Safety
 `policy` must be a live handle; outputs may be null to skip them.
 */
enum PfStatus pf_policy_dims(const struct PfPolicy *policy,
                             size_t *horizon,
                             size_t *action_dim,
                             size_t *feature_dim,
                             size_t *robot_dim);

/*
 Samples an action chunk (row-major `horizon × action_dim`) into `out`.

 # Safety
 `policy` must be a live handle, `obs` must describe readable arrays of the
 stated sizes, and `out` must hold `out_len` writable values.
 */
enum PfStatus pf_policy_act(const struct PfPolicy *policy,
                            const struct PfObservation *obs,
                            uint64_t seed,
                            double *out,
                            size_t out_len);

/*
 # Safety
 `policy` must be null or a handle not yet freed.
 */
void pf_policy_free(struct PfPolicy *policy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PARTFIELD_H */
