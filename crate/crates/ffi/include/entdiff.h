#ifndef ENTDIFF_H
#define ENTDIFF_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result codes shared by every function.
typedef enum EntdiffStatus {
  ENTDIFF_STATUS_OK = 0,
  ENTDIFF_STATUS_NULL_ARGUMENT = 1,
  ENTDIFF_STATUS_INVALID_ARGUMENT = 2,
  ENTDIFF_STATUS_DATA = 3,
  ENTDIFF_STATUS_NUMERICAL = 4,
  ENTDIFF_STATUS_CHECKPOINT = 5,
  ENTDIFF_STATUS_IO = 6,
  ENTDIFF_STATUS_PANIC = 7,
} EntdiffStatus;

// Opaque handle to a loaded model.
typedef struct EntdiffModel EntdiffModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread; empty after success.
// The pointer stays valid until the next call on the same thread.
const char *entdiff_last_error(void);

// Library version as a static nul-terminated string.
const char *entdiff_version(void);

// Load a checkpoint file into `*out`.
//
// # Safety
// `path` must be a nul-terminated string and `out` a writable pointer.
enum EntdiffStatus entdiff_model_load(const char *path, struct EntdiffModel **out);

// Release a model. Null is ignored.
//
// # Safety
// `model` must come from [`entdiff_model_load`] and not be used afterwards.
void entdiff_model_free(struct EntdiffModel *model);

// Number of leaves in the model's schema, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t entdiff_model_leaf_count(const struct EntdiffModel *model);

// Schema fingerprint of the model as a new string.
//
// # Safety
// `model` must be a live handle and `out` a writable pointer.
enum EntdiffStatus entdiff_model_fingerprint(const struct EntdiffModel *model, char **out);

// Draw `n` entities and return them as JSON lines. `leap` above the leaf
// count is clamped.
//
// # Safety
// `model` must be a live handle and `out` a writable pointer.
enum EntdiffStatus entdiff_sample_jsonl(const struct EntdiffModel *model,
                                        size_t n,
                                        size_t leap,
                                        uint64_t seed,
                                        char **out);

// Fill the absent leaves of every JSON line in `input`. `point` selects
// deterministic values instead of draws.
//
// # Safety
// `model` must be a live handle, `input` a nul-terminated string and `out`
// a writable pointer.
enum EntdiffStatus entdiff_impute_jsonl(const struct EntdiffModel *model,
                                        const char *input,
                                        size_t leap,
                                        uint64_t seed,
                                        bool point,
                                        char **out);

// Generate a built-in toy dataset as CSV text.
//
// # Safety
// `name` must be a nul-terminated string and `out` a writable pointer.
enum EntdiffStatus entdiff_toy_csv(const char *name,
                                   size_t n,
                                   double noise,
                                   uint64_t seed,
                                   char **out);

// Release a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void entdiff_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENTDIFF_H */
