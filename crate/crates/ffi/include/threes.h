/* C interface for the spectral backdoor toolkit. */

#ifndef THREES_H
#define THREES_H

/* Generated by cbindgen from threes-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum ThreesStatus {
  THREES_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  THREES_STATUS_NULL_POINTER = 1,
  /**
   * An argument was out of range or inconsistent.
   */
  THREES_STATUS_INVALID_ARGUMENT = 2,
  /**
   * File could not be read or written.
   */
  THREES_STATUS_IO = 3,
  /**
   * The operation ran but could not produce a result
   * (e.g. no frequency passed the extraction threshold).
   */
  THREES_STATUS_FAILED = 4,
} ThreesStatus;

/**
 * Threshold interpretation for trigger extraction.
 */
typedef enum ThreesThresholdMode {
  /**
   * Compare |F_ori − F_tail| against delta directly.
   */
  THREES_THRESHOLD_MODE_ABSOLUTE = 0,
  /**
   * Compare the difference relative to |F_ori|.
   */
  THREES_THRESHOLD_MODE_RELATIVE = 1,
} ThreesThresholdMode;

/**
 * Opaque labeled image set.
 */
typedef struct ThreesDataset ThreesDataset;

/**
 * Opaque trained classifier.
 */
typedef struct ThreesModel ThreesModel;

/**
 * Opaque extracted trigger.
 */
typedef struct ThreesTrigger ThreesTrigger;

/**
 * Training options mirrored across the boundary.
 */
typedef struct ThreesTrainOptions {
  uintptr_t epochs;
  uintptr_t batch_size;
  double learning_rate;
  uint64_t seed;
} ThreesTrainOptions;

/**
 * Poisoning options mirrored across the boundary.
 */
typedef struct ThreesPoisonOptions {
  /**
   * Fraction of eligible samples to poison, in [0,1].
   */
  double poison_rate;
  /**
   * Spectral blend weight in [0,1].
   */
  double rho;
  /**
   * Per-pixel deviation cap in [0,255] units.
   */
  double tau;
  uintptr_t target_class;
  uint64_t seed;
} ThreesPoisonOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread. Never NULL.
 */
const char *threes_last_error(void);

/**
 * Release a dataset handle. NULL is accepted and ignored.
 */
void threes_dataset_free(struct ThreesDataset *handle);

/**
 * Release a model handle. NULL is accepted and ignored.
 */
void threes_model_free(struct ThreesModel *handle);

/**
 * Release a trigger handle. NULL is accepted and ignored.
 */
void threes_trigger_free(struct ThreesTrigger *handle);

/**
 * Generate `n` synthetic digit samples (28×28×1, 10 balanced classes).
 */
enum ThreesStatus threes_dataset_generate(uintptr_t n, uint64_t seed, struct ThreesDataset **out);

/**
 * Load an IDX image/label file pair (the MNIST container format).
 */
enum ThreesStatus threes_dataset_load_idx(const char *image_path,
                                          const char *label_path,
                                          struct ThreesDataset **out);

uintptr_t threes_dataset_len(const struct ThreesDataset *dataset);

/**
 * Image dimensions of the set; all-zero for an empty set.
 */
enum ThreesStatus threes_dataset_shape(const struct ThreesDataset *dataset,
                                       uintptr_t *height,
                                       uintptr_t *width,
                                       uintptr_t *channels);

/**
 * Copy sample `index` into `pixels` (length `pixels_len` must equal
 * height·width·channels) and its label into `label`.
 */
enum ThreesStatus threes_dataset_sample(const struct ThreesDataset *dataset,
                                        uintptr_t index,
                                        double *pixels,
                                        uintptr_t pixels_len,
                                        uintptr_t *label);

/**
 * Train the standard small CNN (2 conv blocks + dense layer) on `dataset`.
 */
enum ThreesStatus threes_model_train(const struct ThreesDataset *dataset,
                                     const struct ThreesTrainOptions *options,
                                     struct ThreesModel **out);

enum ThreesStatus threes_model_save(const struct ThreesModel *model, const char *path);

enum ThreesStatus threes_model_load(const char *path, struct ThreesModel **out);

/**
 * Classify one image; `pixels` is height·width·channels values in [0,255].
 */
enum ThreesStatus threes_model_predict(const struct ThreesModel *model,
                                       const double *pixels,
                                       uintptr_t height,
                                       uintptr_t width,
                                       uintptr_t channels,
                                       uintptr_t *out_class);

/**
 * Fraction of `dataset` classified correctly.
 */
enum ThreesStatus threes_model_accuracy(const struct ThreesModel *model,
                                        const struct ThreesDataset *dataset,
                                        double *out_accuracy);

/**
 * Extract a spectral trigger from `sample_ids` (indices into `dataset`,
 * `sample_count` of them) toward `target_class`.
 */
enum ThreesStatus threes_trigger_extract(const struct ThreesModel *model,
                                         const struct ThreesDataset *dataset,
                                         const uintptr_t *sample_ids,
                                         uintptr_t sample_count,
                                         uintptr_t target_class,
                                         double delta,
                                         enum ThreesThresholdMode mode,
                                         struct ThreesTrigger **out);

/**
 * Number of frequency slots the trigger occupies.
 */
uintptr_t threes_trigger_len(const struct ThreesTrigger *trigger);

enum ThreesStatus threes_trigger_save(const struct ThreesTrigger *trigger, const char *path);

enum ThreesStatus threes_trigger_load(const char *path, struct ThreesTrigger **out);

/**
 * Build a poisoned copy of `dataset`: selected samples carry the trigger and
 * the target label; everything else is untouched.
 */
enum ThreesStatus threes_poison_dataset(const struct ThreesDataset *dataset,
                                        const struct ThreesTrigger *trigger,
                                        const struct ThreesPoisonOptions *options,
                                        struct ThreesDataset **out,
                                        uintptr_t *out_poisoned_count);

/**
 * Poison one image in place: embed the trigger spectrally, then cap every
 * pixel change at `tau` and clip to [0,255]. `pixels` is read and rewritten.
 */
enum ThreesStatus threes_poison_image(const struct ThreesTrigger *trigger,
                                      const struct ThreesPoisonOptions *options,
                                      double *pixels,
                                      uintptr_t height,
                                      uintptr_t width,
                                      uintptr_t channels);

/**
 * PSNR between two equally-shaped images; identical inputs give +infinity.
 */
enum ThreesStatus threes_psnr(const double *a,
                              const double *b,
                              uintptr_t height,
                              uintptr_t width,
                              uintptr_t channels,
                              double *out_db);

/**
 * Global SSIM between two equally-shaped images, in [-1, 1].
 */
enum ThreesStatus threes_ssim(const double *a,
                              const double *b,
                              uintptr_t height,
                              uintptr_t width,
                              uintptr_t channels,
                              double *out_ssim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* THREES_H */
