#ifndef ELICIT_H
#define ELICIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum ElicitStatus {
  ELICIT_STATUS_OK = 0,
  ELICIT_STATUS_NULL_POINTER = 1,
  ELICIT_STATUS_INVALID_ARGUMENT = 2,
  ELICIT_STATUS_PARSE = 3,
  ELICIT_STATUS_IO = 4,
  ELICIT_STATUS_RUN = 5,
  // The quantity is undefined for the input (for example an AUC with an empty class).
  ELICIT_STATUS_UNDEFINED = 6,
  ELICIT_STATUS_PANIC = 7,
} ElicitStatus;

// Opaque snippet bank handle.
typedef struct ElicitBank ElicitBank;

// Opaque belief-state handle.
typedef struct ElicitBelief ElicitBelief;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Valid until
// the next call into the library from the same thread.
const char *elicit_last_error(void);

// Library version as a static NUL-terminated string.
const char *elicit_version(void);

// Releases a string returned by the library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void elicit_string_free(char *s);

// Loads a JSON-lines snippet bank.
//
// # Safety
// `path` must be a valid C string; `out` a valid pointer.
enum ElicitStatus elicit_bank_load(const char *path, struct ElicitBank **out);

// Generates a synthetic bank.
//
// # Safety
// `out` must be a valid pointer.
enum ElicitStatus elicit_bank_synthesize(size_t patients,
                                         size_t snippets_per_patient,
                                         uint64_t seed,
                                         struct ElicitBank **out);

// Number of snippets in the bank.
//
// # Safety
// `bank` must be a live handle; `out` a valid pointer.
enum ElicitStatus elicit_bank_len(const struct ElicitBank *bank, size_t *out);

// Number of distinct patients in the bank.
//
// # Safety
// `bank` must be a live handle; `out` a valid pointer.
enum ElicitStatus elicit_bank_patient_count(const struct ElicitBank *bank, size_t *out);

// Releases a bank handle. Null is ignored.
//
// # Safety
// `bank` must come from this library and not be freed twice.
void elicit_bank_free(struct ElicitBank *bank);

// Rule-based detection. Bit `i - 1` of `out_mask` is set when trait Fi is found.
//
// # Safety
// `response` must be a valid C string; `out_mask` a valid pointer.
enum ElicitStatus elicit_detect_rule(const char *response, uint16_t *out_mask);

// Fresh Beta(1, 1) belief over all traits with confirmation threshold `tau`.
//
// # Safety
// `out` must be a valid pointer.
enum ElicitStatus elicit_belief_new(double tau, struct ElicitBelief **out);

// One turn of evidence: traits in `detected_mask` count as positive, all others negative.
//
// # Safety
// `b` must be a live handle.
enum ElicitStatus elicit_belief_update(struct ElicitBelief *b, uint16_t detected_mask);

// Posterior mean for trait `trait_index` (1 to 10).
//
// # Safety
// `b` must be a live handle; `out` a valid pointer.
enum ElicitStatus elicit_belief_mean(struct ElicitBelief *b, uint8_t trait_index, double *out);

// Differential entropy (nats) of trait `trait_index` (1 to 10).
//
// # Safety
// `b` must be a live handle; `out` a valid pointer.
enum ElicitStatus elicit_belief_entropy(struct ElicitBelief *b, uint8_t trait_index, double *out);

// Confirmed traits as a bitmask.
//
// # Safety
// `b` must be a live handle; `out_mask` a valid pointer.
enum ElicitStatus elicit_belief_confirmed_mask(struct ElicitBelief *b, uint16_t *out_mask);

// Releases a belief handle. Null is ignored.
//
// # Safety
// `b` must come from this library and not be freed twice.
void elicit_belief_free(struct ElicitBelief *b);

// Per-turn probability that a trait with base rate `theta` is expressed;
// `penalty` is subtracted from the logit when `confirmed` is true.
//
// # Safety
// `out` must be a valid pointer.
enum ElicitStatus elicit_emission_probability(double theta,
                                              bool confirmed,
                                              double penalty,
                                              double *out);

// Runs one deterministic episode (heuristic selector, template realiser,
// rule detector, hashed encoder) and returns the log as JSON.
// `mode` is "tpa" or "random"; `turns` 0 means the default budget.
//
// # Safety
// `bank` must be a live handle; strings valid C strings; `out_json` a valid pointer.
enum ElicitStatus elicit_run_episode_json(const struct ElicitBank *bank,
                                          const char *patient_id,
                                          const char *mode,
                                          uint64_t seed,
                                          size_t turns,
                                          char **out_json);

// Metrics (coverage, precision, recall, F1, AUCC, per-turn coverage) for
// one episode log given as JSON.
//
// # Safety
// `log_json` must be a valid C string; `out_json` a valid pointer.
enum ElicitStatus elicit_metrics_from_log_json(const char *log_json, char **out_json);

// Pairwise AUC of positive against negative scores. Returns
// `Undefined` when either array is empty.
//
// # Safety
// `pos` and `neg` must point to `n_pos` and `n_neg` doubles; `out` a valid pointer.
enum ElicitStatus elicit_trait_auc(const double *pos,
                                   size_t n_pos,
                                   const double *neg,
                                   size_t n_neg,
                                   double *out);

// Smoothed KL(p || q) over `n` entries.
//
// # Safety
// `p` and `q` must point to `n` doubles; `out` a valid pointer.
enum ElicitStatus elicit_kl_divergence(const double *p, const double *q, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ELICIT_H */
