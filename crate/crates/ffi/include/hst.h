#ifndef HST_H
#define HST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a call. `HST_OK` is zero; everything else is a failure whose
 * message can be fetched with `hst_last_error`.
 */
typedef enum HstStatus {
  HST_STATUS_OK = 0,
  HST_STATUS_NULL_POINTER = 1,
  HST_STATUS_INVALID_ARGUMENT = 2,
  HST_STATUS_DIMENSION = 3,
  HST_STATUS_LAYOUT = 4,
  HST_STATUS_CONFIG = 5,
  HST_STATUS_WIRING = 6,
  HST_STATUS_CONTRACT = 7,
  HST_STATUS_FORMAT = 8,
  HST_STATUS_CORRUPT = 9,
  HST_STATUS_NON_FINITE = 10,
  HST_STATUS_AUDIT = 11,
  HST_STATUS_IO = 12,
  HST_STATUS_BUFFER_TOO_SMALL = 13,
  HST_STATUS_PANIC = 14,
} HstStatus;

/**
 * An in-memory image dataset.
 */
typedef struct HstDataset HstDataset;

/**
 * A model with its run configuration.
 */
typedef struct HstModel HstModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 */
size_t hst_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hst_version(void);

/**
 * Freshly initialised model of the default configuration.
 */
enum HstStatus hst_model_new_default(uint64_t seed, struct HstModel **out);

/**
 * Freshly initialised model from a TOML run configuration; the seed is
 * `train.seed`.
 */
enum HstStatus hst_model_from_toml(const char *toml, struct HstModel **out);

/**
 * Loads a checkpoint written for the configuration at `config_path`.
 */
enum HstStatus hst_model_load(const char *config_path,
                              const char *checkpoint_path,
                              struct HstModel **out);

/**
 * Writes the model parameters as a checkpoint at step 0.
 */
enum HstStatus hst_model_save(const struct HstModel *model, const char *path);

void hst_model_free(struct HstModel *model);

size_t hst_model_num_classes(const struct HstModel *model);

size_t hst_model_image_size(const struct HstModel *model);

/**
 * Trainable and frozen scalar counts.
 */
enum HstStatus hst_model_param_counts(const struct HstModel *model,
                                      uint64_t *trainable,
                                      uint64_t *frozen);

/**
 * Logits `[batch, num_classes]` written row-major into `logits`.
 */
enum HstStatus hst_model_classify(const struct HstModel *model,
                                  const float *images,
                                  size_t batch,
                                  size_t height,
                                  size_t width,
                                  float *logits,
                                  size_t logits_len);

/**
 * Shape `[batch, channels, h, w]` of pyramid level `stage` (0..4) for
 * `height × width` inputs.
 */
enum HstStatus hst_model_pyramid_shape(const struct HstModel *model,
                                       size_t stage,
                                       size_t batch,
                                       size_t height,
                                       size_t width,
                                       size_t *shape);

/**
 * Feature map of pyramid level `stage`, row-major `[B, C, H/s, W/s]`.
 */
enum HstStatus hst_model_pyramid(const struct HstModel *model,
                                 const float *images,
                                 size_t batch,
                                 size_t height,
                                 size_t width,
                                 size_t stage,
                                 float *out,
                                 size_t out_len);

/**
 * Classification accuracy over a dataset.
 */
enum HstStatus hst_model_evaluate(const struct HstModel *model,
                                  const struct HstDataset *dataset,
                                  double *accuracy);

/**
 * Reads an HSTD file.
 */
enum HstStatus hst_dataset_read(const char *path, struct HstDataset **out);

/**
 * Synthetic shape dataset; sample `i` has label `i % num_classes`.
 */
enum HstStatus hst_dataset_generate(size_t num_classes,
                                    size_t samples_per_class,
                                    size_t image_size,
                                    size_t patch_size,
                                    double noise_std,
                                    uint64_t seed,
                                    struct HstDataset **out);

enum HstStatus hst_dataset_write(const struct HstDataset *dataset, const char *path);

size_t hst_dataset_len(const struct HstDataset *dataset);

/**
 * Copies image `index` (`3 × H × W` floats) into `out`.
 */
enum HstStatus hst_dataset_image(const struct HstDataset *dataset,
                                 size_t index,
                                 float *out,
                                 size_t out_len);

enum HstStatus hst_dataset_label(const struct HstDataset *dataset, size_t index, uint32_t *label);

void hst_dataset_free(struct HstDataset *dataset);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HST_H */
