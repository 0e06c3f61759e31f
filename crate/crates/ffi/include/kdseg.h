#ifndef KDSEG_H
#define KDSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum KdsegStatus {
  KDSEG_STATUS_OK = 0,
  KDSEG_STATUS_NULL_POINTER = 1,
  KDSEG_STATUS_INVALID_ARGUMENT = 2,
  KDSEG_STATUS_SHAPE = 3,
  KDSEG_STATUS_CHECKPOINT = 4,
  KDSEG_STATUS_NIFTI = 5,
  KDSEG_STATUS_IO = 6,
  /**
   * The destination buffer is too small; nothing was written.
   */
  KDSEG_STATUS_BUFFER_TOO_SMALL = 7,
  /**
   * A panic or otherwise unexpected failure inside the library.
   */
  KDSEG_STATUS_INTERNAL = 8,
} KdsegStatus;

typedef enum KdsegBlend {
  KDSEG_BLEND_UNIFORM = 0,
  KDSEG_BLEND_GAUSSIAN = 1,
} KdsegBlend;

/**
 * An integer label map with voxel spacing.
 */
typedef struct KdsegLabelMap KdsegLabelMap;

/**
 * A loaded network (frozen; inference only).
 */
typedef struct KdsegNetwork KdsegNetwork;

/**
 * A single-channel image with voxel spacing.
 */
typedef struct KdsegVolume KdsegVolume;

/**
 * Static facts about a network.
 */
typedef struct KdsegNetworkInfo {
  uint32_t num_classes;
  uint32_t input_channels;
  uint32_t num_stages;
  uint32_t patch_size[3];
  /**
   * Channel-width scale as a decimal, e.g. 0.25.
   */
  double alpha;
  uint64_t params;
  /**
   * Multiply-accumulates x2 for one patch.
   */
  uint64_t flops_per_patch;
  uint64_t peak_activation_bytes;
} KdsegNetworkInfo;

/**
 * Sliding-window settings. A zero patch size means the network's own.
 */
typedef struct KdsegWindowConfig {
  uint32_t patch_size[3];
  double overlap;
  enum KdsegBlend blend;
  double gaussian_sigma_scale;
} KdsegWindowConfig;

/**
 * Class-mean metrics; NaN marks a mean over no defined classes.
 */
typedef struct KdsegMetrics {
  double mean_dice;
  double mean_nsd;
  double mean_hd95;
  /**
   * Classes scored (background excluded unless requested).
   */
  uint32_t classes_scored;
} KdsegMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *kdseg_version(void);

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *kdseg_last_error(void);

/**
 * Loads a checkpoint file. The network is frozen.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum KdsegStatus kdseg_network_load(const char *path, struct KdsegNetwork **out);

/**
 * Loads a checkpoint from memory. The network is frozen.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `out` must be writable.
 */
enum KdsegStatus kdseg_network_from_bytes(const uint8_t *data,
                                          size_t len,
                                          struct KdsegNetwork **out);

/**
 * # Safety
 * `net` must be null or a handle from this library, not yet freed.
 */
void kdseg_network_free(struct KdsegNetwork *net);

/**
 * # Safety
 * `net` must be a live handle; `info` must be writable.
 */
enum KdsegStatus kdseg_network_info(const struct KdsegNetwork *net, struct KdsegNetworkInfo *info);

/**
 * Writes the SHA-256 of the checkpoint encoding as 64 hex digits plus a NUL.
 *
 * # Safety
 * `net` must be a live handle; `buf` must hold `len` writable bytes.
 */
enum KdsegStatus kdseg_network_hash(const struct KdsegNetwork *net, char *buf, size_t len);

/**
 * Reads a NIfTI-1 image (`.nii` or `.nii.gz`).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum KdsegStatus kdseg_volume_read(const char *path, struct KdsegVolume **out);

/**
 * Copies a `D*H*W` float buffer (x fastest) into a new volume.
 *
 * # Safety
 * `dims` and `spacing` must point to 3 values; `data` to `D*H*W` floats.
 */
enum KdsegStatus kdseg_volume_from_data(const size_t *dims,
                                        const double *spacing,
                                        const float *data,
                                        struct KdsegVolume **out);

/**
 * # Safety
 * `vol` must be null or a handle from this library, not yet freed.
 */
void kdseg_volume_free(struct KdsegVolume *vol);

/**
 * # Safety
 * `vol` must be a live handle; `dims` must hold 3 writable values.
 */
enum KdsegStatus kdseg_volume_dims(const struct KdsegVolume *vol, size_t *dims);

/**
 * Reads a NIfTI-1 label map.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum KdsegStatus kdseg_labelmap_read(const char *path, struct KdsegLabelMap **out);

/**
 * Writes a label map; gzipped when the path ends in `.gz`.
 *
 * # Safety
 * `lm` must be a live handle; `path` a NUL-terminated string.
 */
enum KdsegStatus kdseg_labelmap_write(const struct KdsegLabelMap *lm, const char *path);

/**
 * # Safety
 * `lm` must be null or a handle from this library, not yet freed.
 */
void kdseg_labelmap_free(struct KdsegLabelMap *lm);

/**
 * # Safety
 * `lm` must be a live handle; `dims` must hold 3 writable values.
 */
enum KdsegStatus kdseg_labelmap_dims(const struct KdsegLabelMap *lm, size_t *dims);

/**
 * Copies the labels (x fastest) into `buf`, which must hold `D*H*W` values.
 *
 * # Safety
 * `lm` must be a live handle; `buf` must hold `len` writable values.
 */
enum KdsegStatus kdseg_labelmap_labels(const struct KdsegLabelMap *lm, uint16_t *buf, size_t len);

/**
 * Default window settings: the network's patch, overlap 0.5, Gaussian blend.
 */
struct KdsegWindowConfig kdseg_window_config_default(void);

/**
 * Sliding-window prediction of a label map. `config` may be null for defaults.
 *
 * # Safety
 * `net` and `vol` must be live handles; `config` null or readable; `out` writable.
 */
enum KdsegStatus kdseg_predict(const struct KdsegNetwork *net,
                               const struct KdsegVolume *vol,
                               const struct KdsegWindowConfig *config,
                               struct KdsegLabelMap **out);

/**
 * Dice / NSD / HD95 class means of `pred` against `reference`.
 * `num_classes == 0` infers the class count from the largest label.
 *
 * # Safety
 * `pred` and `reference` must be live handles; `out` writable.
 */
enum KdsegStatus kdseg_evaluate(const struct KdsegLabelMap *pred,
                                const struct KdsegLabelMap *reference,
                                double nsd_tolerance_mm,
                                bool include_background,
                                uint32_t num_classes,
                                struct KdsegMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KDSEG_H */
