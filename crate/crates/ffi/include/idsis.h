#ifndef IDSIS_H
#define IDSIS_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Status codes; 0 is success.
 */
typedef enum IdsisStatus {
  IDSIS_STATUS_OK = 0,
  IDSIS_STATUS_NULL_POINTER = 1,
  IDSIS_STATUS_INVALID_UTF8 = 2,
  IDSIS_STATUS_BUFFER_TOO_SMALL = 3,
  IDSIS_STATUS_CONFIG = 10,
  IDSIS_STATUS_VALIDATION = 11,
  IDSIS_STATUS_SHAPE = 12,
  IDSIS_STATUS_INGESTION = 13,
  IDSIS_STATUS_CHECKPOINT = 14,
  IDSIS_STATUS_MISSING_PREREQUISITE = 20,
  IDSIS_STATUS_STATE = 21,
  IDSIS_STATUS_NUMERIC = 30,
  IDSIS_STATUS_QUALITY_GATE = 31,
  IDSIS_STATUS_DIVERGENCE = 32,
  IDSIS_STATUS_IO = 40,
  IDSIS_STATUS_JSON = 41,
  IDSIS_STATUS_PANIC = 99,
} IdsisStatus;

/**
 * Trained face recognizer.
 */
typedef struct IdsisEmbedder IdsisEmbedder;

/**
 * Trained synthesizer.
 */
typedef struct IdsisSynthesizer IdsisSynthesizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message on this thread into `buf` (NUL-terminated,
 * truncated to fit). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t idsis_last_error(char *buf, size_t len);

/**
 * Library version, static NUL-terminated string.
 */
const char *idsis_version(void);

/**
 * Load a recognizer checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for a write.
 */
enum IdsisStatus idsis_embedder_load(const char *path, struct IdsisEmbedder **out);

/**
 * # Safety
 * `h` must be null or a handle from [`idsis_embedder_load`], freed once.
 */
void idsis_embedder_free(struct IdsisEmbedder *h);

/**
 * Embedding width, 0 for a null handle.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
size_t idsis_embedder_dim(const struct IdsisEmbedder *h);

/**
 * Input image side, 0 for a null handle.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
size_t idsis_embedder_resolution(const struct IdsisEmbedder *h);

/**
 * Unit-norm embedding of one image into `out` (`out_len` ≥ dim).
 *
 * # Safety
 * `image` must hold `3·R·R` floats; `out` must be valid for `out_len`.
 */
enum IdsisStatus idsis_embedder_embed(const struct IdsisEmbedder *h,
                                      const float *image,
                                      float *out,
                                      size_t out_len);

/**
 * Cosine similarity of two images under a recognizer.
 *
 * # Safety
 * `a` and `b` must hold `3·R·R` floats; `score` must be valid for a write.
 */
enum IdsisStatus idsis_embedder_score(const struct IdsisEmbedder *h,
                                      const float *a,
                                      const float *b,
                                      double *score);

/**
 * Load a synthesizer checkpoint (training checkpoints work too).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for a write.
 */
enum IdsisStatus idsis_synthesizer_load(const char *path, struct IdsisSynthesizer **out);

/**
 * # Safety
 * `h` must be null or a handle from [`idsis_synthesizer_load`], freed once.
 */
void idsis_synthesizer_free(struct IdsisSynthesizer *h);

/**
 * # Safety
 * `h` must be null or a live handle.
 */
size_t idsis_synthesizer_resolution(const struct IdsisSynthesizer *h);

/**
 * # Safety
 * `h` must be null or a live handle.
 */
size_t idsis_synthesizer_classes(const struct IdsisSynthesizer *h);

/**
 * Generate from `labels` with styles read from (`style_image`,
 * `style_labels`) and the identity of `identity_image` under `fr`.
 * Reconstruction passes the same image and labels for all three.
 *
 * # Safety
 * Images hold `3·R·R` floats, label maps `R·R` bytes; `out` is valid for
 * `out_len` floats.
 */
enum IdsisStatus idsis_synthesizer_generate(const struct IdsisSynthesizer *h,
                                            const struct IdsisEmbedder *fr,
                                            const uint8_t *labels,
                                            const float *style_image,
                                            const uint8_t *style_labels,
                                            const float *identity_image,
                                            float *out,
                                            size_t out_len);

/**
 * Threshold accepting at most `far` of the impostor scores.
 *
 * # Safety
 * `scores` holds `n` values; `tau` is valid for a write.
 */
enum IdsisStatus idsis_calibrate_threshold(const double *scores, size_t n, double far, double *tau);

/**
 * Fréchet distance between Gaussians fit to two row-major sample sets of
 * width `dim`.
 *
 * # Safety
 * `a` holds `na·dim` values, `b` holds `nb·dim`; `out` is valid for a write.
 */
enum IdsisStatus idsis_frechet_distance(const double *a,
                                        size_t na,
                                        const double *b,
                                        size_t nb,
                                        size_t dim,
                                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IDSIS_H */
