#ifndef LDM_H
#define LDM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LdmStatus {
  LDM_STATUS_OK = 0,
  LDM_STATUS_NULL_POINTER = 1,
  LDM_STATUS_INVALID_ARGUMENT = 2,
  LDM_STATUS_SHAPE_MISMATCH = 3,
  LDM_STATUS_CONFIG_INVALID = 4,
  LDM_STATUS_NUMERICAL_BLOWUP = 5,
  LDM_STATUS_SINGULAR = 6,
  LDM_STATUS_IO = 7,
  LDM_STATUS_INTERNAL = 8,
} LdmStatus;

/**
 * A parsed experiment config.
 */
typedef struct LdmConfig LdmConfig;

/**
 * A linear-Gaussian state-space model.
 */
typedef struct LdmKalman LdmKalman;

/**
 * The report of a finished run.
 */
typedef struct LdmReport LdmReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ldm_version(void);

/**
 * Message of the last failed call on this thread, empty if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *ldm_last_error(void);

/**
 * Kozachenko-Leonenko entropy in nats of `n` samples of dimension `d`.
 *
 * # Safety
 * `data` must point to `n * d` readable doubles and `out` to one writable
 * double.
 */
enum LdmStatus ldm_entropy_knn(const double *data,
                               size_t n,
                               size_t d,
                               size_t k,
                               double p_norm,
                               double discard_top_frac,
                               double *out_nats);

/**
 * Gaussian-kernel KDE entropy in nats with bandwidth `h`.
 *
 * # Safety
 * As for [`ldm_entropy_knn`].
 */
enum LdmStatus ldm_entropy_kde(const double *data, size_t n, size_t d, double h, double *out_nats);

/**
 * Entropy in nats of the Gaussian with the sample covariance of `data`.
 *
 * # Safety
 * As for [`ldm_entropy_knn`].
 */
enum LdmStatus ldm_entropy_logdet(const double *data, size_t n, size_t d, double *out_nats);

/**
 * Mean absolute correlation of recovered to true sources under the best
 * one-to-one matching. Both arrays are `[n, k]`.
 *
 * # Safety
 * `s_hat` and `s_true` must each point to `n * k` readable doubles.
 */
enum LdmStatus ldm_source_recovery_score(const double *s_hat,
                                         const double *s_true,
                                         size_t n,
                                         size_t k,
                                         double *out_score);

/**
 * Overall test-split R² of an affine probe from `z` (`[n, d]`) to
 * `target` (`[n, k]`).
 *
 * # Safety
 * `z` must point to `n * d` and `target` to `n * k` readable doubles.
 */
enum LdmStatus ldm_affine_probe_r2(const double *z,
                                   const double *target,
                                   size_t n,
                                   size_t d,
                                   size_t k,
                                   uint64_t seed,
                                   double *out_r2);

/**
 * Builds a Kalman model with hidden size `n` and observation size `m`:
 * transition `f [n,n]`, process noise `q [n,n]`, observation map `a [m,n]`,
 * observation noise `r [m,m]`, initial mean `h0 [n]` and covariance
 * `p0 [n,n]`. Release with [`ldm_kalman_free`].
 *
 * # Safety
 * Every matrix pointer must reference the stated number of doubles and
 * `out_model` must be writable.
 */
enum LdmStatus ldm_kalman_new(size_t n,
                              size_t m,
                              const double *f,
                              const double *q,
                              const double *a,
                              const double *r,
                              const double *h0,
                              const double *p0,
                              struct LdmKalman **out_model);

/**
 * Predictive log-likelihood of `z_seq` (`[t_len, m]`). `out_per_step`
 * may be null; otherwise it receives `t_len` values.
 *
 * # Safety
 * `model` must come from [`ldm_kalman_new`], `z_seq` must point to
 * `t_len * m` doubles and `out_per_step`, if not null, to `t_len` writable
 * doubles.
 */
enum LdmStatus ldm_kalman_loglik(const struct LdmKalman *model,
                                 const double *z_seq,
                                 size_t t_len,
                                 double *out_total,
                                 double *out_per_step);

/**
 * # Safety
 * `model` must be null or come from [`ldm_kalman_new`] and not be used
 * afterwards.
 */
void ldm_kalman_free(struct LdmKalman *model);

/**
 * Parses a TOML experiment config. Release with [`ldm_config_free`].
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out_config` writable.
 */
enum LdmStatus ldm_config_parse(const char *toml, struct LdmConfig **out_config);

/**
 * Number of violations in `config`; the first is left in
 * [`ldm_last_error`].
 *
 * # Safety
 * `config` must come from [`ldm_config_parse`] and `out_count` be writable.
 */
enum LdmStatus ldm_config_validate(const struct LdmConfig *config, size_t *out_count);

/**
 * Replaces the seed and, when `steps >= 0`, the number of training steps.
 *
 * # Safety
 * `config` must come from [`ldm_config_parse`].
 */
enum LdmStatus ldm_config_override(struct LdmConfig *config, uint64_t seed, int64_t steps);

/**
 * Trains and evaluates `config`, writing artifacts under `out_dir`.
 * Release the report with [`ldm_report_free`].
 *
 * # Safety
 * `config` must come from [`ldm_config_parse`], `out_dir` must be a
 * NUL-terminated path and `out_report` writable.
 */
enum LdmStatus ldm_run(const struct LdmConfig *config,
                       const char *out_dir,
                       struct LdmReport **out_report);

/**
 * Looks up a final metric by name.
 *
 * # Safety
 * `report` must come from [`ldm_run`], `name` must be NUL-terminated and
 * `out_value` writable.
 */
enum LdmStatus ldm_report_metric(const struct LdmReport *report,
                                 const char *name,
                                 double *out_value);

/**
 * The config hash of the run as a NUL-terminated hex string owned by the
 * report.
 *
 * # Safety
 * `report` must come from [`ldm_run`]. The string lives as long as the
 * report.
 */
const char *ldm_report_config_hash(const struct LdmReport *report);

/**
 * # Safety
 * `config` must be null or come from [`ldm_config_parse`].
 */
void ldm_config_free(struct LdmConfig *config);

/**
 * # Safety
 * `report` must be null or come from [`ldm_run`].
 */
void ldm_report_free(struct LdmReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LDM_H */
