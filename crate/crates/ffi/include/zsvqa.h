#ifndef ZSVQA_H
#define ZSVQA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ZsvqaMode {
  ZSVQA_MODE_MULTIPLICATIVE = 0,
  ZSVQA_MODE_ORDER = 1,
  ZSVQA_MODE_ORDER_REVERSED = 2,
} ZsvqaMode;

typedef enum ZsvqaStatus {
  ZSVQA_STATUS_OK = 0,
  ZSVQA_STATUS_NULL_POINTER = 1,
  ZSVQA_STATUS_INVALID_UTF8 = 2,
  ZSVQA_STATUS_IO = 3,
  ZSVQA_STATUS_FORMAT = 4,
  ZSVQA_STATUS_CONFIG = 5,
  ZSVQA_STATUS_LOOKUP = 6,
  ZSVQA_STATUS_SHAPE = 7,
  ZSVQA_STATUS_STATE = 8,
  ZSVQA_STATUS_NUMERICAL = 9,
  ZSVQA_STATUS_SPLIT = 10,
  ZSVQA_STATUS_INVALID_ARGUMENT = 11,
  ZSVQA_STATUS_PANIC = 12,
} ZsvqaStatus;

/*
 A checkpoint plus the encoder that feeds it.
 */
typedef struct ZsvqaModel ZsvqaModel;

/*
 Loaded feature stores.
 */
typedef struct ZsvqaStores ZsvqaStores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. Valid until the
 next failing call on the same thread; do not free.
 */
const char *zsvqa_last_error(void);

/*
 Porter stem of one lowercase word. `*out` receives a string to release
 with [`zsvqa_string_free`].

 # Safety
 `word` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ZsvqaStatus zsvqa_porter_stem(const char *word, char **out);

/*
 # Safety
 `s` must come from this library or be NULL.
 */
void zsvqa_string_free(char *s);

/*
 Open the image feature file and the optional detection and exemplar
 files (NULL to skip).

 # Safety
 String arguments must be NULL or NUL-terminated; `out` must be valid.
 */
enum ZsvqaStatus zsvqa_stores_open(const char *images,
                                   const char *detections,
                                   const char *exemplars,
                                   struct ZsvqaStores **out);

/*
 # Safety
 `stores` must come from [`zsvqa_stores_open`] or be NULL.
 */
void zsvqa_stores_free(struct ZsvqaStores *stores);

/*
 Load a checkpoint. `dataset` (may be NULL) should be the dataset file the
 model was trained on, so that stemmed words map exactly as in training;
 without it words are stemmed one by one.

 # Safety
 String arguments must be NULL or NUL-terminated; `out` must be valid.
 */
enum ZsvqaStatus zsvqa_model_load(const char *checkpoint,
                                  const char *dataset,
                                  struct ZsvqaModel **out);

/*
 # Safety
 `model` must come from [`zsvqa_model_load`] or be NULL.
 */
void zsvqa_model_free(struct ZsvqaModel *model);

/*
 Score the 4 candidate answers of one question; writes 4 values in (0, 1)
 to `scores_out`.

 # Safety
 Handles must be live, strings NUL-terminated, `choices` must hold
 `n_choices` pointers and `scores_out` room for `n_choices` doubles.
 */
enum ZsvqaStatus zsvqa_model_score(const struct ZsvqaModel *model,
                                   const struct ZsvqaStores *stores,
                                   const char *image_id,
                                   const char *question,
                                   const char *const *choices,
                                   size_t n_choices,
                                   double *scores_out);

/*
 Index of the best-scoring candidate; ties go to the lowest index.

 # Safety
 As for [`zsvqa_model_score`], with `index_out` a valid pointer.
 */
enum ZsvqaStatus zsvqa_model_predict(const struct ZsvqaModel *model,
                                     const struct ZsvqaStores *stores,
                                     const char *image_id,
                                     const char *question,
                                     const char *const *choices,
                                     size_t n_choices,
                                     size_t *index_out);

/*
 Finite-difference check of the model gradients on a random draw;
 writes the worst relative error. `mode` is a [`ZsvqaMode`] value.

 # Safety
 `max_error_out` must be a valid pointer.
 */
enum ZsvqaStatus zsvqa_gradcheck(uint32_t mode,
                                 size_t dims,
                                 uint64_t seed,
                                 double eps,
                                 double *max_error_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ZSVQA_H */
