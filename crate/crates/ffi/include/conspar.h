#ifndef CONSPAR_H
#define CONSPAR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ConsparStatus {
  CONSPAR_STATUS_OK = 0,
  CONSPAR_STATUS_NULL_POINTER = 1,
  CONSPAR_STATUS_INVALID_UTF8 = 2,
  CONSPAR_STATUS_INVALID_ARGUMENT = 3,
  CONSPAR_STATUS_IO = 4,
  CONSPAR_STATUS_PARSE = 5,
  CONSPAR_STATUS_DATA = 6,
  CONSPAR_STATUS_OUT_OF_RANGE = 7,
  CONSPAR_STATUS_BUFFER_TOO_SMALL = 8,
  CONSPAR_STATUS_NO_RESULT = 9,
  CONSPAR_STATUS_PANIC = 10,
} ConsparStatus;

typedef enum ConsparVariant {
  CONSPAR_VARIANT_OLD = 0,
  CONSPAR_VARIANT_NEW = 1,
} ConsparVariant;

/**
 * Utterances with their labelled scenes.
 */
typedef struct ConsparCorpus ConsparCorpus;

/**
 * A typed grammar over one of the two languages.
 */
typedef struct ConsparGrammar ConsparGrammar;

/**
 * Trained scorer weights and the language they belong to.
 */
typedef struct ConsparModel ConsparModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *conspar_last_error(void);

/**
 * Library version as a static string.
 */
const char *conspar_version(void);

/**
 * # Safety
 * `out_grammar` must be a valid pointer to writable storage for one handle.
 */
enum ConsparStatus conspar_grammar_new(enum ConsparVariant variant,
                                       struct ConsparGrammar **out_grammar);

/**
 * # Safety
 * `grammar` must come from `conspar_grammar_new` and not be freed twice.
 */
void conspar_grammar_free(struct ConsparGrammar *grammar);

/**
 * Number of production rules.
 *
 * # Safety
 * `grammar` must be a live handle.
 */
enum ConsparStatus conspar_grammar_num_actions(const struct ConsparGrammar *grammar, size_t *out_n);

/**
 * # Safety
 * `path` must be a nul-terminated string; `out_corpus` writable.
 */
enum ConsparStatus conspar_corpus_load(const char *path, struct ConsparCorpus **out_corpus);

/**
 * Synthetic corpus of `n` utterances drawn from `seed`.
 *
 * # Safety
 * `out_corpus` must be writable.
 */
enum ConsparStatus conspar_corpus_generate(uint64_t seed,
                                           size_t n,
                                           struct ConsparCorpus **out_corpus);

/**
 * # Safety
 * `corpus` must be a live handle or null.
 */
void conspar_corpus_free(struct ConsparCorpus *corpus);

/**
 * # Safety
 * `corpus` must be a live handle.
 */
enum ConsparStatus conspar_corpus_len(const struct ConsparCorpus *corpus, size_t *out_len);

/**
 * Evaluates `program` on every scene of utterance `index`. Writes up to
 * `cap` results into `out_values` and the scene count into `out_len`;
 * fails with `BufferTooSmall` when `cap` is short.
 *
 * # Safety
 * Handles must be live; `out_values` must hold `cap` bools.
 */
enum ConsparStatus conspar_execute(const struct ConsparGrammar *grammar,
                                   const char *program,
                                   const struct ConsparCorpus *corpus,
                                   size_t index,
                                   bool *out_values,
                                   size_t cap,
                                   size_t *out_len);

/**
 * F1 between two sets of action ids. Duplicates are ignored.
 *
 * # Safety
 * `a` and `b` must point to `a_len` and `b_len` ids (either may be null when its length is 0).
 */
enum ConsparStatus conspar_pair_consistency(const uint16_t *a,
                                            size_t a_len,
                                            const uint16_t *b,
                                            size_t b_len,
                                            double *out_f1);

/**
 * Loads a checkpoint written by `conspar train`.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out_model` writable.
 */
enum ConsparStatus conspar_model_load(const char *path, struct ConsparModel **out_model);

/**
 * An untrained model (all weights zero).
 *
 * # Safety
 * `out_model` must be writable.
 */
enum ConsparStatus conspar_model_new(enum ConsparVariant variant, struct ConsparModel **out_model);

/**
 * # Safety
 * `model` must be a live handle or null.
 */
void conspar_model_free(struct ConsparModel *model);

/**
 * Top-1 program for `utterance`, nul-terminated in `buf`. `out_needed`
 * receives the size including the terminator, also when `cap` is short.
 *
 * # Safety
 * `model` must be live; `buf` must hold `cap` bytes.
 */
enum ConsparStatus conspar_model_parse(const struct ConsparModel *model,
                                       const char *utterance,
                                       size_t beam_size,
                                       size_t max_len,
                                       char *buf,
                                       size_t cap,
                                       size_t *out_needed);

/**
 * Accuracy over scenes and consistency over utterances of the model's
 * top-1 programs on `corpus`.
 *
 * # Safety
 * Handles must be live; outputs writable.
 */
enum ConsparStatus conspar_model_evaluate(const struct ConsparModel *model,
                                          const struct ConsparCorpus *corpus,
                                          size_t beam_size,
                                          size_t max_len,
                                          double *out_accuracy,
                                          double *out_consistency);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONSPAR_H */
