#ifndef SOUNDMIND_H
#define SOUNDMIND_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Answer labels; `SM_LABEL_NONE` means no parseable answer.
 */
#define SM_LABEL_NONE -1

#define SM_LABEL_ENTAILED 0

#define SM_LABEL_NOT_ENTAILED 1

/**
 * Output modalities.
 */
#define SM_MODALITY_TEXT_OUT 0

#define SM_MODALITY_AUDIO_OUT 1

#define SM_MODALITY_BOTH 2

/**
 * Result code of every entry point.
 */
typedef enum {
  SM_STATUS_OK = 0,
  SM_STATUS_NULL_POINTER = 1,
  SM_STATUS_INVALID_UTF8 = 2,
  SM_STATUS_INVALID_ARGUMENT = 3,
  SM_STATUS_IO = 4,
  SM_STATUS_PARSE = 5,
  SM_STATUS_PANIC = 6,
} SmStatus;

/**
 * Opaque handle to a loaded policy checkpoint.
 */
typedef struct SmPolicy SmPolicy;

/**
 * Reward weights and update hyperparameters.
 */
typedef struct {
  double lambda1;
  double lambda2;
  double lambda3;
  double lambda4;
  double lambda5;
  double beta;
  double epsilon;
  uint32_t answer_window;
} SmRewardWeights;

/**
 * Per-term reward. Terms of an inactive stream are 0 with the matching
 * `*_active` flag cleared.
 */
typedef struct {
  double format_text;
  double format_audio;
  double answer;
  double length_text;
  double length_audio;
  double total;
  uint8_t text_active;
  uint8_t audio_active;
} SmRewardBreakdown;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failed call on this thread, or null. The
 * pointer stays valid until the next call into this library on the thread.
 */
const char *sm_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sm_version(void);

/**
 * Writes the default reward weights.
 */
SmStatus sm_reward_weights_default(SmRewardWeights *out);

/**
 * Extracts the answer from the tail of `rendering`; writes a label code
 * (`SM_LABEL_NONE` when absent).
 *
 * # Safety
 * `rendering` must be a NUL-terminated string; `out_label` must be writable.
 */
SmStatus sm_extract_answer(const char *rendering, uint32_t window, int32_t *out_label);

/**
 * Scores a response given its text rendering and audio transcript (either
 * may be empty), the true label, and reference lengths in words.
 *
 * # Safety
 * String arguments must be NUL-terminated; `weights` readable; `out` writable.
 */
SmStatus sm_score_response(const char *text,
                           const char *audio,
                           int32_t truth_label,
                           uint64_t text_reference_len,
                           uint64_t audio_reference_len,
                           const SmRewardWeights *weights,
                           int32_t modality,
                           SmRewardBreakdown *out);

/**
 * Word error rate after lowercasing and punctuation stripping.
 *
 * # Safety
 * Both strings must be NUL-terminated; `out` must be writable.
 */
SmStatus sm_word_error_rate(const char *hypothesis, const char *reference, double *out);

/**
 * Decides by truth table whether `major ∧ minor` entails `conclusion`.
 * Formulas use atoms A–D with `not/and/or/if … then` or `~ & | ->`.
 *
 * # Safety
 * Strings must be NUL-terminated; `out_label` must be writable.
 */
SmStatus sm_entailment(const char *major,
                       const char *minor,
                       const char *conclusion,
                       int32_t *out_label);

/**
 * Loads a policy checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
SmStatus sm_policy_load(const char *path, SmPolicy **out);

/**
 * Releases a handle from [`sm_policy_load`]. Null is ignored.
 *
 * # Safety
 * `policy` must be null or a live handle not freed before.
 */
void sm_policy_free(SmPolicy *policy);

/**
 * Number of response tokens of the policy.
 *
 * # Safety
 * `policy` must be a live handle; `out` must be writable.
 */
SmStatus sm_policy_vocab_size(const SmPolicy *policy, size_t *out);

/**
 * Next-token log-probabilities for a task and a generated prefix.
 * `out` must hold `out_len >= vocab size` doubles; exactly vocab-size
 * entries are written.
 *
 * # Safety
 * Strings must be NUL-terminated; `prefix` must point to `prefix_len` ids
 * (may be null when `prefix_len` is 0); `out` must be writable for `out_len`.
 */
SmStatus sm_policy_log_probs(const SmPolicy *policy,
                             const char *major,
                             const char *minor,
                             const char *conclusion,
                             int32_t modality,
                             const uint32_t *prefix,
                             size_t prefix_len,
                             double *out,
                             size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOUNDMIND_H */
