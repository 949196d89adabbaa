/* C interface to the bilogit adversarially robust trainer. */

#ifndef BILOGIT_H
#define BILOGIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a call. Anything but OK leaves outputs untouched unless the
 * function documents otherwise.
 */
typedef enum BilogitStatus {
  BILOGIT_STATUS_OK = 0,
  /**
   * Null pointer, bad dimension, or an argument outside its range.
   */
  BILOGIT_STATUS_INVALID_ARGUMENT = 1,
  /**
   * A file's contents did not match its format.
   */
  BILOGIT_STATUS_PARSE_ERROR = 2,
  /**
   * The solver stopped without an acceptable point.
   */
  BILOGIT_STATUS_SOLVER_FAILED = 3,
  /**
   * The requested metric has no defined value on this data.
   */
  BILOGIT_STATUS_UNDEFINED_METRIC = 4,
  BILOGIT_STATUS_IO_ERROR = 5,
  /**
   * An internal invariant broke; the call was contained.
   */
  BILOGIT_STATUS_INTERNAL = 6,
} BilogitStatus;

/**
 * Labeled feature rows with optional timestamps.
 */
typedef struct BilogitDataset BilogitDataset;

/**
 * Trained logistic-regression weights.
 */
typedef struct BilogitModel BilogitModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version of this library as a static nul-terminated string.
 */
const char *bilogit_version(void);

/**
 * Builds a dataset from row-major features, one 0/1 label per row, and
 * optional timestamps (null for none). Copies everything; the caller keeps
 * ownership of the input buffers.
 *
 * # Safety
 * `features` must point to rows*cols doubles, `labels` to rows doubles, and
 * `timestamps` to rows 64-bit integers when non-null.
 */
struct BilogitDataset *bilogit_dataset_new(const double *features,
                                           const double *labels,
                                           const int64_t *timestamps,
                                           uintptr_t rows,
                                           uintptr_t cols,
                                           enum BilogitStatus *status);

/**
 * Loads a corpus file (timestamp, label, features with a header row).
 *
 * # Safety
 * `path` must be a nul-terminated string.
 */
struct BilogitDataset *bilogit_dataset_load(const char *path, enum BilogitStatus *status);

/**
 * Number of rows; 0 on null.
 */
uintptr_t bilogit_dataset_rows(const struct BilogitDataset *ds);

/**
 * Number of feature columns; 0 on null.
 */
uintptr_t bilogit_dataset_cols(const struct BilogitDataset *ds);

/**
 * Releases a dataset. Null is a no-op.
 */
void bilogit_dataset_free(struct BilogitDataset *ds);

/**
 * Fits the plain logistic baseline. `rho` > 0 enables the ridge penalty
 * with that divisor; any other value disables it.
 *
 * # Safety
 * `ds` must be a live dataset handle or null.
 */
struct BilogitModel *bilogit_train_classic(const struct BilogitDataset *ds,
                                           double rho,
                                           uint64_t seed,
                                           enum BilogitStatus *status);

/**
 * Trains against the worst-case adversary: seeds `m` malicious rows from
 * the dataset, warm-starts at the classic fit, and solves the stationarity
 * system. `constrained` nonzero keeps the cosine-similarity budget `delta`;
 * zero trains the unconstrained variant (delta is then ignored but must
 * still be a finite number). `rho` as in bilogit_train_classic.
 *
 * Null with BILOGIT_STATUS_SOLVER_FAILED means the iteration stopped
 * without an acceptable point.
 *
 * # Safety
 * `ds` must be a live dataset handle or null.
 */
struct BilogitModel *bilogit_train_bilevel(const struct BilogitDataset *ds,
                                           double delta,
                                           uintptr_t m,
                                           double rho,
                                           uint64_t seed,
                                           int constrained,
                                           enum BilogitStatus *status);

/**
 * Loads a saved model file.
 *
 * # Safety
 * `path` must be a nul-terminated string.
 */
struct BilogitModel *bilogit_model_load(const char *path, enum BilogitStatus *status);

/**
 * Writes a model file (version header, one weight per line).
 *
 * # Safety
 * `model` must be a live model handle or null; `path` nul-terminated.
 */
enum BilogitStatus bilogit_model_save(const struct BilogitModel *model, const char *path);

/**
 * Number of weights; 0 on null.
 */
uintptr_t bilogit_model_dim(const struct BilogitModel *model);

/**
 * Copies the weights into `out`, which must hold exactly
 * bilogit_model_dim(model) doubles.
 *
 * # Safety
 * `model` must be a live model handle or null; `out` must point to `len`
 * doubles.
 */
enum BilogitStatus bilogit_model_weights(const struct BilogitModel *model,
                                         double *out,
                                         uintptr_t len);

/**
 * Sigmoid score of one feature vector; NaN on error.
 *
 * # Safety
 * `model` must be a live model handle or null; `features` must point to
 * `len` doubles.
 */
double bilogit_predict(const struct BilogitModel *model,
                       const double *features,
                       uintptr_t len,
                       enum BilogitStatus *status);

/**
 * P4 score of the model on a dataset at the given threshold. Writes the
 * score to `out`; BILOGIT_STATUS_UNDEFINED_METRIC (with `out` = NaN) when
 * the denominator vanishes.
 *
 * # Safety
 * `model` and `ds` must be live handles or null; `out` must be writable.
 */
enum BilogitStatus bilogit_p4(const struct BilogitModel *model,
                              const struct BilogitDataset *ds,
                              double threshold,
                              double *out);

/**
 * Releases a model. Null is a no-op.
 */
void bilogit_model_free(struct BilogitModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BILOGIT_H */
