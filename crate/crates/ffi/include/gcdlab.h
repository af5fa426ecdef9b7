#ifndef GCDLAB_H
#define GCDLAB_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GcdStatus {
  GCD_STATUS_OK = 0,
  GCD_STATUS_NULL_ARGUMENT = 1,
  GCD_STATUS_CONFIG = 2,
  GCD_STATUS_NUMERIC = 3,
  GCD_STATUS_MISSING_ARTIFACT = 4,
  GCD_STATUS_IO = 5,
  GCD_STATUS_INVALID_INPUT = 6,
  GCD_STATUS_CAPACITY = 7,
  GCD_STATUS_BUFFER_TOO_SMALL = 8,
  GCD_STATUS_PANIC = 9,
} GcdStatus;

typedef struct GcdCascade GcdCascade;

typedef struct GcdConfig GcdConfig;

typedef struct GcdGraph GcdGraph;

typedef struct GcdSample GcdSample;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message. Returns the number of
 * bytes needed including the NUL; nothing is written if `cap` is smaller.
 */
uintptr_t gcd_last_error_message(char *buf, uintptr_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gcd_version(void);

/**
 * `preset` is 0 for the small smoke preset, 1 for the desk-scale one.
 */
enum GcdStatus gcd_config_preset(uint32_t preset,
                                 const char *root,
                                 uint64_t seed,
                                 struct GcdConfig **out);

enum GcdStatus gcd_config_load(const char *path, struct GcdConfig **out);

enum GcdStatus gcd_config_save(const struct GcdConfig *cfg, const char *path);

/**
 * Hex content hash of the configuration (independent of the output root).
 */
enum GcdStatus gcd_config_hash(const struct GcdConfig *cfg,
                               char *buf,
                               uintptr_t cap,
                               uintptr_t *needed);

void gcd_config_free(struct GcdConfig *cfg);

/**
 * Runs every stage with caching and writes the ablation table path into
 * `buf`.
 */
enum GcdStatus gcd_run_pipeline(const struct GcdConfig *cfg,
                                char *buf,
                                uintptr_t cap,
                                uintptr_t *needed);

enum GcdStatus gcd_graph_load(const char *path, struct GcdGraph **out);

enum GcdStatus gcd_graph_save(const struct GcdGraph *g, const char *path);

/**
 * Node count, or 0 for a null handle.
 */
uintptr_t gcd_graph_num_nodes(const struct GcdGraph *g);

uintptr_t gcd_graph_num_edges(const struct GcdGraph *g);

/**
 * Class of node `v` (1-based); 0 if out of range.
 */
uint8_t gcd_graph_node_class(const struct GcdGraph *g, uintptr_t v);

/**
 * Writes the `(row, col)` center of node `v`.
 */
enum GcdStatus gcd_graph_node_com(const struct GcdGraph *g, uintptr_t v, double *com);

enum GcdStatus gcd_graph_remove_node(const struct GcdGraph *g, uintptr_t v, struct GcdGraph **out);

enum GcdStatus gcd_graph_change_class(const struct GcdGraph *g,
                                      uintptr_t v,
                                      uint8_t class_,
                                      uintptr_t num_classes,
                                      struct GcdGraph **out);

enum GcdStatus gcd_graph_interpolate(const struct GcdGraph *a,
                                     const struct GcdGraph *b,
                                     double t,
                                     struct GcdGraph **out);

void gcd_graph_free(struct GcdGraph *g);

enum GcdStatus gcd_cascade_load(const char *path, struct GcdCascade **out);

/**
 * Draws one sample. `graph` may be null for unconditional generation;
 * `steps == 0` keeps each stage's configured step count.
 */
enum GcdStatus gcd_cascade_sample(const struct GcdCascade *c,
                                  const struct GcdGraph *graph,
                                  uint64_t seed,
                                  uintptr_t steps,
                                  struct GcdSample **out);

void gcd_cascade_free(struct GcdCascade *c);

enum GcdStatus gcd_sample_dims(const struct GcdSample *s, uintptr_t *height, uintptr_t *width);

/**
 * Copies the `height * width * 3` row-major RGB values in `[0, 1]`.
 */
enum GcdStatus gcd_sample_image(const struct GcdSample *s, double *buf, uintptr_t len);

/**
 * Copies per-pixel instance ids (0 = background).
 */
enum GcdStatus gcd_sample_instance_ids(const struct GcdSample *s, uint32_t *buf, uintptr_t len);

/**
 * Copies per-pixel classes (0 = background).
 */
enum GcdStatus gcd_sample_classes(const struct GcdSample *s, uint8_t *buf, uintptr_t len);

uintptr_t gcd_sample_instance_count(const struct GcdSample *s);

void gcd_sample_free(struct GcdSample *s);

/**
 * Fréchet distance between Gaussians fitted to two row-major feature sets.
 */
enum GcdStatus gcd_fid(const double *real,
                       uintptr_t n_real,
                       const double *gen,
                       uintptr_t n_gen,
                       uintptr_t dim,
                       double *out);

/**
 * Improved precision and recall in `[0, 1]` with `k`-NN radii.
 */
enum GcdStatus gcd_precision_recall(const double *real,
                                    uintptr_t n_real,
                                    const double *gen,
                                    uintptr_t n_gen,
                                    uintptr_t dim,
                                    uintptr_t k,
                                    double *precision,
                                    double *recall);

/**
 * Dice and AJI (both in `[0, 100]`) from two labeled masks given as
 * per-pixel instance ids plus per-pixel classes.
 */
enum GcdStatus gcd_segmentation_scores(const uint32_t *pred_ids,
                                       const uint8_t *pred_classes,
                                       const uint32_t *gt_ids,
                                       const uint8_t *gt_classes,
                                       uintptr_t height,
                                       uintptr_t width,
                                       double *dice,
                                       double *aji);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GCDLAB_H */
