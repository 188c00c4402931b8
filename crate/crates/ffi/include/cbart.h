#ifndef CBART_H
#define CBART_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum CbartStatus {
  CBART_STATUS_OK = 0,
  CBART_STATUS_NULL_POINTER = 1,
  CBART_STATUS_INVALID_UTF8 = 2,
  CBART_STATUS_INVALID_ARGUMENT = 3,
  CBART_STATUS_IO = 4,
  CBART_STATUS_UNKNOWN_KEYWORD = 5,
  CBART_STATUS_RUNTIME = 6,
  CBART_STATUS_PANIC = 7,
} CbartStatus;

typedef enum CbartStrategy {
  CBART_STRATEGY_GREEDY = 0,
  CBART_STRATEGY_TOP_K = 1,
  CBART_STRATEGY_TOP_P = 2,
} CbartStrategy;

/*
 Opaque model handle.
 */
typedef struct CbartModel CbartModel;

/*
 Decoding options. Obtain defaults from [`cbart_decode_options_default`].
 */
typedef struct CbartDecodeOptions {
  enum CbartStrategy strategy;
  uint32_t k;
  double p;
  double theta;
  uint32_t num_sequences;
  uint32_t max_steps;
  uint64_t seed;
} CbartDecodeOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

struct CbartDecodeOptions cbart_decode_options_default(void);

/*
 Loads an edit-model checkpoint and, when `lm_checkpoint` is not null, a
 ranking language model. On success `*out` receives a handle to release
 with [`cbart_model_free`].

 # Safety
 `checkpoint` must be a NUL-terminated path, `lm_checkpoint` null or a
 NUL-terminated path, and `out` a valid pointer.
 */
enum CbartStatus cbart_model_load(const char *checkpoint,
                                  const char *lm_checkpoint,
                                  struct CbartModel **out);

/*
 # Safety
 `model` must be null or a handle from [`cbart_model_load`] not yet freed.
 */
void cbart_model_free(struct CbartModel *model);

/*
 Vocabulary size of the loaded model, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t cbart_model_vocab_size(const struct CbartModel *model);

/*
 Generates a sentence for tab-separated `keywords`. On success `*out_json`
 receives a JSON object with the fields `keywords`, `output`, `steps`,
 `decoder_passes`, `nll` and `elapsed_ms`. `options` may be null for the
 defaults.

 # Safety
 `model` must be a live handle, `keywords` a NUL-terminated string,
 `options` null or valid, and `out_json` a valid pointer.
 */
enum CbartStatus cbart_generate(const struct CbartModel *model,
                                const char *keywords,
                                const struct CbartDecodeOptions *options,
                                char **out_json);

/*
 # Safety
 `s` must be null or a string returned by this library, not yet freed.
 */
void cbart_string_free(char *s);

/*
 Message of the last failed call on this thread, or null. The pointer
 stays valid until the next call into the library on the same thread.
 */
const char *cbart_last_error(void);

/*
 Static, NUL-terminated version string.
 */
const char *cbart_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CBART_H */
