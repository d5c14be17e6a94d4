#ifndef CODA_H
#define CODA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CodaStatus {
  CODA_STATUS_OK = 0,
  CODA_STATUS_NULL_POINTER = 1,
  CODA_STATUS_INVALID_ARGUMENT = 2,
  CODA_STATUS_IO = 3,
  CODA_STATUS_CONFIG = 4,
  CODA_STATUS_DATA = 5,
  CODA_STATUS_CHECKPOINT = 6,
  CODA_STATUS_TRAINING = 7,
  CODA_STATUS_EVALUATION = 8,
  CODA_STATUS_PANIC = 9,
} CodaStatus;

typedef enum CodaStage {
  CODA_STAGE_M1 = 0,
  CODA_STAGE_M2 = 1,
  CODA_STAGE_MIXED = 2,
} CodaStage;

/**
 * Run configuration.
 */
typedef struct CodaConfig CodaConfig;

/**
 * Training and evaluation samples.
 */
typedef struct CodaDataset CodaDataset;

/**
 * Network weights plus the severity threshold used for routing.
 */
typedef struct CodaModel CodaModel;

/**
 * A training run in progress.
 */
typedef struct CodaTrainer CodaTrainer;

/**
 * Losses of one training step.
 */
typedef struct CodaStepStats {
  /**
   * Iteration index of the step just taken.
   */
  uint64_t iter;
  /**
   * A `CodaStage` value.
   */
  uint32_t stage;
  float l_s;
  float l_t;
  float l_fd;
  float total;
} CodaStepStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread. Valid until the next
 * call into the library from this thread.
 */
const char *coda_last_error_message(void);

const char *coda_version(void);

enum CodaStatus coda_config_default(struct CodaConfig **out);

/**
 * Parse and validate a JSON run configuration.
 */
enum CodaStatus coda_config_from_json(const char *json, struct CodaConfig **out);

enum CodaStatus coda_config_load(const char *path, struct CodaConfig **out);

/**
 * Set the iteration count; stage budgets scale along.
 */
enum CodaStatus coda_config_set_iters(struct CodaConfig *cfg, uint64_t iters);

enum CodaStatus coda_config_set_seed(struct CodaConfig *cfg, uint64_t seed);

/**
 * Write the 64-hex-digit config hash plus a NUL into `buf` (`len` ≥ 65).
 */
enum CodaStatus coda_config_hash(const struct CodaConfig *cfg, char *buf, size_t len);

void coda_config_free(struct CodaConfig *cfg);

/**
 * Generate the synthetic benchmark described by `cfg` in memory.
 */
enum CodaStatus coda_dataset_generate(const struct CodaConfig *cfg, struct CodaDataset **out);

/**
 * Load a dataset directory written by `coda gen-data`.
 */
enum CodaStatus coda_dataset_load(const char *dir, struct CodaDataset **out);

enum CodaStatus coda_dataset_sizes(const struct CodaDataset *ds, size_t *train, size_t *eval);

void coda_dataset_free(struct CodaDataset *ds);

/**
 * Start a run. The trainer keeps its own reference to the dataset.
 */
enum CodaStatus coda_trainer_new(const struct CodaConfig *cfg,
                                 const struct CodaDataset *ds,
                                 struct CodaTrainer **out);

/**
 * Continue a run from a checkpoint saved with [`coda_trainer_save`].
 */
enum CodaStatus coda_trainer_resume(const struct CodaConfig *cfg,
                                    const struct CodaDataset *ds,
                                    const char *checkpoint,
                                    struct CodaTrainer **out);

enum CodaStatus coda_trainer_done(const struct CodaTrainer *tr, bool *done);

/**
 * One optimization step. `stats` may be null.
 */
enum CodaStatus coda_trainer_step(struct CodaTrainer *tr, struct CodaStepStats *stats);

enum CodaStatus coda_trainer_save(const struct CodaTrainer *tr, const char *path);

/**
 * Copy of the current teacher network.
 */
enum CodaStatus coda_trainer_model(const struct CodaTrainer *tr, struct CodaModel **out);

void coda_trainer_free(struct CodaTrainer *tr);

/**
 * Teacher network of a checkpoint.
 */
enum CodaStatus coda_model_load(const char *checkpoint, struct CodaModel **out);

/**
 * Per-pixel class ids for a planar RGB image (`3*h*w` floats in `[0,1]`,
 * channel-major). `labels` receives `h*w` bytes. With `savpt` the image is
 * routed through its severity branch; without, the plain network runs.
 */
enum CodaStatus coda_model_predict(const struct CodaModel *m,
                                   const float *rgb,
                                   size_t h,
                                   size_t w,
                                   bool savpt,
                                   uint8_t *labels);

/**
 * Overall mIoU in `[0,1]` on the dataset's evaluation split.
 */
enum CodaStatus coda_model_evaluate(const struct CodaModel *m,
                                    const struct CodaDataset *ds,
                                    bool savpt,
                                    double *miou);

void coda_model_free(struct CodaModel *m);

/**
 * `*high` is true when the share of luma pixels below `sigma` exceeds `tau`.
 */
enum CodaStatus coda_severity_classify(const float *rgb,
                                       size_t h,
                                       size_t w,
                                       double sigma,
                                       double tau,
                                       bool *high);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CODA_H */
