#ifndef GEDI_H
#define GEDI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>

/**
 * Result codes returned by every fallible call.
 */
typedef enum GediStatus {
  GEDI_STATUS_OK = 0,
  GEDI_STATUS_NULL_POINTER = 1,
  /**
   * Out-of-range ids, unknown names, bad hyperparameters, invalid UTF-8.
   */
  GEDI_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Unreadable files, parse errors, vocab mismatches.
   */
  GEDI_STATUS_DATA = 3,
  /**
   * Non-finite or degenerate numbers.
   */
  GEDI_STATUS_NUMERICAL = 4,
  GEDI_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  GEDI_STATUS_INTERNAL = 6,
} GediStatus;

/**
 * Opaque handle to a generation config.
 */
typedef struct GediConfig GediConfig;

/**
 * Opaque handle to a trained model.
 */
typedef struct GediModel GediModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null.
 *
 * The pointer stays valid until the next call into this library from the
 * same thread.
 */
const char *gedi_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gedi_version(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum GediStatus gedi_model_load(const char *path, struct GediModel **out);

/**
 * Writes a model to a checkpoint file.
 *
 * # Safety
 * `model` must come from [`gedi_model_load`]; `path` must be NUL-terminated.
 */
enum GediStatus gedi_model_save(const struct GediModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`gedi_model_load`] and not be used afterwards.
 */
void gedi_model_free(struct GediModel *model);

/**
 * Number of ordinary tokens, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t gedi_model_vocab_size(const struct GediModel *model);

/**
 * Number of classes, or 0 for a null handle. A binarized model reports its
 * class names; an unconditional model reports 1.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t gedi_model_class_count(const struct GediModel *model);

/**
 * Looks up a class id by name.
 *
 * # Safety
 * `model` must be a live handle, `name` NUL-terminated and `out` writable.
 */
enum GediStatus gedi_model_class_id(const struct GediModel *model, const char *name, size_t *out);

/**
 * Encodes whitespace-separated token names into ids.
 *
 * # Safety
 * `text` must be NUL-terminated; `out` must hold `capacity` ids.
 */
enum GediStatus gedi_model_encode(const struct GediModel *model,
                                  const char *text,
                                  size_t *out,
                                  size_t capacity,
                                  size_t *out_len);

/**
 * Decodes ids into space-separated token names, NUL-terminated.
 *
 * `out_len` receives the byte length including the terminator.
 *
 * # Safety
 * `tokens` must hold `len` ids; `out` must hold `capacity` bytes.
 */
enum GediStatus gedi_model_decode(const struct GediModel *model,
                                  const size_t *tokens,
                                  size_t len,
                                  char *out,
                                  size_t capacity,
                                  size_t *out_len);

/**
 * Sequence log-probability under control code `code`.
 *
 * # Safety
 * `tokens` must hold `len` ids and `out` be writable.
 */
enum GediStatus gedi_sequence_logprob(const struct GediModel *model,
                                      size_t code,
                                      const size_t *tokens,
                                      size_t len,
                                      double *out);

/**
 * Classifies a token sequence.
 *
 * `posterior` may be null; otherwise it receives one probability per class
 * and `capacity` must be at least [`gedi_model_class_count`].
 *
 * # Safety
 * `tokens` must hold `len` ids; `out_class` must be writable.
 */
enum GediStatus gedi_classify(const struct GediModel *model,
                              const size_t *tokens,
                              size_t len,
                              size_t *out_class,
                              double *posterior,
                              size_t capacity);

/**
 * Creates a generation config from a named preset, or the defaults when
 * `preset` is null.
 *
 * # Safety
 * `preset` must be null or NUL-terminated; `out` must be writable.
 */
enum GediStatus gedi_config_new(const char *preset, struct GediConfig **out);

/**
 * Releases a config. Null is ignored.
 *
 * # Safety
 * `config` must come from [`gedi_config_new`] and not be used afterwards.
 */
void gedi_config_free(struct GediConfig *config);

/**
 * Sets the posterior exponent ω.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum GediStatus gedi_config_set_omega(struct GediConfig *config, double omega);

/**
 * Sets the cumulative-mass floor ρ.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum GediStatus gedi_config_set_rho(struct GediConfig *config, double rho);

/**
 * Sets the posterior keep threshold τ.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum GediStatus gedi_config_set_tau(struct GediConfig *config, double tau);

/**
 * Sets the repetition penalty.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum GediStatus gedi_config_set_repetition_penalty(struct GediConfig *config, double penalty);

/**
 * Sets the generation length limit.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum GediStatus gedi_config_set_max_new_tokens(struct GediConfig *config, size_t max_new_tokens);

/**
 * Turns candidate filtering on or off.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum GediStatus gedi_config_set_filter(struct GediConfig *config, bool filter);

/**
 * Overrides the desired class's prior bias for guided generation.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum GediStatus gedi_config_set_target_bias(struct GediConfig *config, double bias);

/**
 * Guided greedy generation: `base` proposes, `guide` steers toward
 * `class_id`. Only the new tokens are written to `out`.
 *
 * # Safety
 * Handles must be live; `prompt` must hold `prompt_len` ids and `out`
 * `capacity` ids.
 */
enum GediStatus gedi_generate(const struct GediModel *base,
                              const struct GediModel *guide,
                              const struct GediConfig *config,
                              size_t class_id,
                              const size_t *prompt,
                              size_t prompt_len,
                              size_t *out,
                              size_t capacity,
                              size_t *out_len);

/**
 * Greedy class-conditional generation from one model.
 *
 * # Safety
 * As for [`gedi_generate`].
 */
enum GediStatus gedi_direct_generate(const struct GediModel *model,
                                     const struct GediConfig *config,
                                     size_t class_id,
                                     const size_t *prompt,
                                     size_t prompt_len,
                                     size_t *out,
                                     size_t capacity,
                                     size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEDI_H */
