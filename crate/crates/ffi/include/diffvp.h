#ifndef DIFFVP_H
#define DIFFVP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of finding classes.
 */
#define DVP_NUM_CLASSES 18

/**
 * Result of every call.
 */
typedef enum DvpStatus {
  DVP_STATUS_OK = 0,
  DVP_STATUS_NULL_POINTER = 1,
  DVP_STATUS_INVALID_ARGUMENT = 2,
  DVP_STATUS_SHAPE = 3,
  DVP_STATUS_IO = 4,
  DVP_STATUS_CHECKPOINT = 5,
  DVP_STATUS_DEGENERATE_SAMPLES = 6,
  DVP_STATUS_PANIC = 7,
  DVP_STATUS_OTHER = 8,
} DvpStatus;

/**
 * Which ROUGE score [`dvp_rouge`] computes.
 */
typedef enum DvpRouge {
  DVP_ROUGE_ONE = 0,
  DVP_ROUGE_TWO = 1,
  DVP_ROUGE_L = 2,
} DvpRouge;

/**
 * A synthetic case: volume, report and labels.
 */
typedef struct DvpCase DvpCase;

/**
 * A frozen classifier loaded from a `train-classifier` directory.
 */
typedef struct DvpClassifier DvpClassifier;

/**
 * Micro-averaged clinical efficacy scores.
 */
typedef struct DvpCeScores {
  double precision;
  double recall;
  double f1;
} DvpCeScores;

typedef struct DvpWelch {
  double t;
  double dof;
  double p_two_sided;
} DvpWelch;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *dvp_last_error(void);

/**
 * Library version, a static NUL-terminated string.
 */
const char *dvp_version(void);

/**
 * `1 − Π(1 − p_i)` over `n` cell probabilities in [0, 1].
 */
enum DvpStatus dvp_noisy_or(const float *probs, size_t n, float *out);

/**
 * Token weights of the local difference operator for two `[n, d]`
 * row-major token sets. Writes `n` weights.
 */
enum DvpStatus dvp_local_weights(const float *target,
                                 const float *reference,
                                 size_t n,
                                 size_t d,
                                 float *out);

/**
 * Weighted sum of token residuals for two `[n, d]` token sets. Writes
 * `d` values.
 */
enum DvpStatus dvp_local_delta(const float *target,
                               const float *reference,
                               size_t n,
                               size_t d,
                               float *out);

/**
 * BLEU-`order` (1 to 4) in percent between whitespace-tokenised texts.
 */
enum DvpStatus dvp_bleu(const char *candidate, const char *reference, uint32_t order, double *out);

enum DvpStatus dvp_rouge(const char *candidate,
                         const char *reference,
                         enum DvpRouge variant,
                         double *out);

enum DvpStatus dvp_meteor(const char *candidate, const char *reference, double *out);

/**
 * Finding labels a report text asserts, as 18 bytes of 0 or 1.
 */
enum DvpStatus dvp_report_labels(const char *report, uint8_t *out);

/**
 * Micro-averaged CE scores over `n_cases` rows of 18 labels each.
 */
enum DvpStatus dvp_ce_scores(const uint8_t *predicted,
                             const uint8_t *truth,
                             size_t n_cases,
                             struct DvpCeScores *out);

/**
 * Welch's t-test between two samples of at least two values each.
 */
enum DvpStatus dvp_welch(const double *a,
                         size_t n_a,
                         const double *b,
                         size_t n_b,
                         struct DvpWelch *out);

/**
 * Generates the synthetic case for `seed` with the given active classes
 * (indices below 18). Free with [`dvp_case_free`].
 */
enum DvpStatus dvp_case_generate(uint64_t seed,
                                 const uint32_t *classes,
                                 size_t n_classes,
                                 struct DvpCase **out);

void dvp_case_free(struct DvpCase *case_);

/**
 * Volume extents (slices, height, width) and a borrowed pointer to its
 * voxels, valid until the case is freed.
 */
enum DvpStatus dvp_case_volume(const struct DvpCase *case_, size_t *extents, const float **voxels);

/**
 * Borrowed NUL-terminated report text, valid until the case is freed.
 */
enum DvpStatus dvp_case_report(const struct DvpCase *case_, const char **report);

enum DvpStatus dvp_case_labels(const struct DvpCase *case_, uint8_t *out);

/**
 * Loads a classifier directory written by `diffvp train-classifier`.
 */
enum DvpStatus dvp_classifier_load(const char *dir, struct DvpClassifier **out);

void dvp_classifier_free(struct DvpClassifier *classifier);

/**
 * Per-class probabilities (18 floats) for a volume of `n` voxels laid
 * out as the classifier's extents.
 */
enum DvpStatus dvp_classifier_predict(const struct DvpClassifier *classifier,
                                      const float *voxels,
                                      size_t n,
                                      float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFFVP_H */
