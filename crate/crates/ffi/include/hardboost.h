#ifndef HARDBOOST_H
#define HARDBOOST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Values 2 to 4 match the command-line exit codes.
typedef enum HbStatus {
  HB_STATUS_OK = 0,
  // Null pointer, bad length or non-UTF-8 string.
  HB_STATUS_INVALID_ARGUMENT = 1,
  HB_STATUS_CONFIG = 2,
  HB_STATUS_DATA = 3,
  HB_STATUS_NUMERIC = 4,
  // A panic inside the library.
  HB_STATUS_INTERNAL = 5,
} HbStatus;

// Generated synthetic dataset.
typedef struct HbDataset HbDataset;

// Trained models with their combination weights.
typedef struct HbEnsemble HbEnsemble;

// Per-sample boosting weights.
typedef struct HbWeightTable HbWeightTable;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *hb_last_error(void);

// Library version as a static string.
const char *hb_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void hb_string_free(char *s);

// Margin logit `s·cos(m_s·θ + m_a) − m_c` for the true class, `s·cos θ`
// otherwise.
//
// # Safety
// `out` must be valid for one write.
enum HbStatus hb_margin_logit(double theta,
                              double m_s,
                              double m_a,
                              double m_c,
                              double scale,
                              bool is_positive,
                              double *out);

// Softmax probability of entry `label` among `n` logits.
//
// # Safety
// `logits` must point to `n` values; `out` must be valid for one write.
enum HbStatus hb_softmax_prob(const double *logits, size_t n, size_t label, double *out);

// Per-sample scale `s − clip(d̂, ±0.33)·s`.
double hb_adapt_scale(double base_scale, double d_hat);

// New table with weight 1 for each of the `n` distinct ids.
//
// # Safety
// `ids` must point to `n` values; `out` must be valid for one write.
enum HbStatus hb_weight_table_new(const uint64_t *ids,
                                  size_t n,
                                  double alpha,
                                  struct HbWeightTable **out);

// One boosting update `d ← d·p^(−α)`. Every id in the table needs a
// probability. The input table is left unchanged; the result is a new handle.
//
// # Safety
// `ids` and `probs` must point to `n` values each; `table` must be live.
enum HbStatus hb_weight_table_update(const struct HbWeightTable *table,
                                     const uint64_t *ids,
                                     const double *probs,
                                     size_t n,
                                     struct HbWeightTable **out);

// Weight of `id`.
//
// # Safety
// `table` must be live; `out` must be valid for one write.
enum HbStatus hb_weight_table_get(const struct HbWeightTable *table, uint64_t id, double *out);

// Number of samples in the table; 0 for null.
//
// # Safety
// `table` must be live or null.
size_t hb_weight_table_len(const struct HbWeightTable *table);

// # Safety
// `table` must come from this library and not be freed twice.
void hb_weight_table_free(struct HbWeightTable *table);

// Generates a dataset. `config_toml` is a config document (only `[gen]` is
// used) or null for defaults.
//
// # Safety
// `config_toml` must be null or nul-terminated; `out` must be valid.
enum HbStatus hb_dataset_generate(const char *config_toml, struct HbDataset **out);

// # Safety
// `path` must be nul-terminated; `out` must be valid.
enum HbStatus hb_dataset_load(const char *path, struct HbDataset **out);

// # Safety
// `dataset` must be live; `path` must be nul-terminated.
enum HbStatus hb_dataset_save(const struct HbDataset *dataset, const char *path);

// Number of training samples; 0 for null.
//
// # Safety
// `dataset` must be live or null.
size_t hb_dataset_train_len(const struct HbDataset *dataset);

// # Safety
// `dataset` must come from this library and not be freed twice.
void hb_dataset_free(struct HbDataset *dataset);

// Runs the boosting pipeline into `run_dir`, the same layout `hardboost
// train` writes. `config_toml` may be null for defaults (only `[train]` is
// used).
//
// # Safety
// `dataset` must be live; strings must be nul-terminated or null where
// allowed.
enum HbStatus hb_train(const struct HbDataset *dataset,
                       const char *config_toml,
                       const char *run_dir,
                       bool resume);

// Loads the ensemble of a finished run. `betas` may be null to use the
// stored weights; otherwise it must hold one value per round.
//
// # Safety
// `run_dir` must be nul-terminated; `betas` must point to `n_betas` values
// or be null.
enum HbStatus hb_ensemble_load(const char *run_dir,
                               const double *betas,
                               size_t n_betas,
                               struct HbEnsemble **out);

// Number of models; 0 for null.
//
// # Safety
// `ensemble` must be live or null.
size_t hb_ensemble_len(const struct HbEnsemble *ensemble);

// Match score of two raw inputs of length `dim`.
//
// # Safety
// `a` and `b` must point to `dim` values; `out` must be valid.
enum HbStatus hb_ensemble_score(const struct HbEnsemble *ensemble,
                                const double *a,
                                const double *b,
                                size_t dim,
                                double *out);

// # Safety
// `ensemble` must come from this library and not be freed twice.
void hb_ensemble_free(struct HbEnsemble *ensemble);

// Evaluates `ensemble` on the held-out split. On success `*out_json` holds a
// JSON report to release with `hb_string_free`.
//
// # Safety
// Handles must be live; `out_json` must be valid.
enum HbStatus hb_evaluate(const struct HbDataset *dataset,
                          const struct HbEnsemble *ensemble,
                          char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HARDBOOST_H */
