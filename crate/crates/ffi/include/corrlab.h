#ifndef CORRLAB_H
#define CORRLAB_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum CorrlabStatus {
  CORRLAB_OK = 0,
  CORRLAB_NULL_POINTER = 1,
  CORRLAB_INVALID_ARGUMENT = 2,
  CORRLAB_IO = 3,
  CORRLAB_FORMAT = 4,
  CORRLAB_CONFIG = 5,
  CORRLAB_NOT_FOUND = 6,
  CORRLAB_GEOMETRY = 7,
  CORRLAB_DATA = 8,
  CORRLAB_PANIC = 9
} CorrlabStatus;

typedef struct CorrlabDataset CorrlabDataset;
typedef struct CorrlabParams CorrlabParams;

const char *corrlab_version(void);

/* Message of the last failure on this thread, empty after success. */
const char *corrlab_last_error(void);

CorrlabStatus corrlab_dataset_load(const char *manifest_path, CorrlabDataset **out);
void corrlab_dataset_free(CorrlabDataset *ds);
CorrlabStatus corrlab_dataset_counts(const CorrlabDataset *ds, size_t *images, size_t *pairs);

CorrlabStatus corrlab_params_initial(uint64_t seed, CorrlabParams **out);
CorrlabStatus corrlab_params_load(const char *path, CorrlabParams **out);
CorrlabStatus corrlab_params_save(const CorrlabParams *params, const char *path);
void corrlab_params_free(CorrlabParams *params);

/* Images: interleaved RGB floats in [0, 1], row-major, 3*w*h values.
   Points: interleaved x, y doubles, 2*n values. */
CorrlabStatus corrlab_match_keypoints(const CorrlabParams *params,
                                      const float *src_rgb, size_t src_width, size_t src_height,
                                      const float *tgt_rgb, size_t tgt_width, size_t tgt_height,
                                      const double *tgt_xy, size_t n, double *out_src_xy);

CorrlabStatus corrlab_pck(const double *pred_xy, const double *gt_xy, size_t n,
                          double alpha, double height, double width, double *out);

/* split: 0 train, 1 val, 2 test. */
CorrlabStatus corrlab_evaluate(const CorrlabParams *params, const CorrlabDataset *ds,
                               uint32_t split, double alpha, double *out);

CorrlabStatus corrlab_corrupt(const float *rgb, size_t width, size_t height,
                              const char *kind, uint8_t severity, uint64_t seed, float *out_rgb);

#ifdef __cplusplus
}
#endif

#endif
