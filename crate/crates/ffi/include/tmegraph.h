#ifndef TMEGRAPH_H
#define TMEGRAPH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum TgStatus {
  TG_STATUS_OK = 0,
  TG_STATUS_NULL_POINTER = 1,
  TG_STATUS_INVALID_ARGUMENT = 2,
  TG_STATUS_VALIDATION = 3,
  TG_STATUS_PARSE = 4,
  TG_STATUS_SHAPE = 5,
  TG_STATUS_EMPTY = 6,
  TG_STATUS_NON_FINITE = 7,
  TG_STATUS_MODEL_MISMATCH = 8,
  TG_STATUS_IO = 9,
  TG_STATUS_BUFFER_TOO_SMALL = 10,
  TG_STATUS_PANIC = 11,
} TgStatus;

// Spatial graph handle.
typedef struct TgGraph TgGraph;

// Trained model handle.
typedef struct TgModel TgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call into the library from this thread.
const char *tg_last_error(void);

// Release a string returned by the library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void tg_string_free(char *s);

// Build a radius graph: nodes at `points` (`n` x,y pairs), edges between
// points strictly closer than `k`. `features` holds `n * feature_dim`
// values row by row and may be null when `feature_dim` is 0.
//
// # Safety
// Pointers must reference arrays of the stated lengths; `out` must be
// writable.
enum TgStatus tg_graph_build(const double *points,
                             size_t n,
                             const double *features,
                             size_t feature_dim,
                             double k,
                             struct TgGraph **out);

// Release a graph. Null is ignored.
//
// # Safety
// `g` must come from this library and not have been freed.
void tg_graph_free(struct TgGraph *g);

// Node and edge counts.
//
// # Safety
// `g` must be a live graph; outputs may be null when not wanted.
enum TgStatus tg_graph_counts(const struct TgGraph *g, size_t *n_nodes, size_t *n_edges);

// Copy the edge list as `(u, v)` pairs with `u < v` into `pairs`, which
// holds room for `capacity` pairs.
//
// # Safety
// `pairs` must hold `2 * capacity` writable values.
enum TgStatus tg_graph_edges(const struct TgGraph *g, size_t *pairs, size_t capacity);

// Attach phenotype labels, one per node, as indices into
// cd4, cd8, cd20, foxp3, ck.
//
// # Safety
// `labels` must hold `n` values.
enum TgStatus tg_graph_set_labels(struct TgGraph *g, const uint8_t *labels, size_t n);

// Number of entries in the metric catalog.
size_t tg_metric_count(void);

// Catalog name of metric `i`, or null when out of range. The string is
// owned by the library and lives for the whole process.
const char *tg_metric_name(size_t i);

// Compute the metric vector of a labelled cell graph into `out`, which
// holds `len` values (at least `tg_metric_count()`).
//
// # Safety
// `out` must hold `len` writable values.
enum TgStatus tg_metric_vector(const struct TgGraph *g, double *out, size_t len);

// Serialize a graph to JSON. Release the result with `tg_string_free`.
//
// # Safety
// `out` must be writable.
enum TgStatus tg_graph_to_json(const struct TgGraph *g, char **out);

// Parse a graph from JSON.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum TgStatus tg_graph_from_json(const char *json, struct TgGraph **out);

// Load a trained model from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum TgStatus tg_model_load(const char *path, struct TgModel **out);

// Release a model. Null is ignored.
//
// # Safety
// `m` must come from this library and not have been freed.
void tg_model_free(struct TgModel *m);

// Number of output classes.
//
// # Safety
// `m` must be a live model.
enum TgStatus tg_model_n_classes(const struct TgModel *m, size_t *out);

// Classify the RoI stored in a graph bundle written by `tmegraph build`.
// Writes class probabilities into `probs` (`len` values, at least the
// class count) and the predicted class into `pred`.
//
// # Safety
// `bundle` must be a NUL-terminated string; `probs` must hold `len`
// writable values; `pred` may be null.
enum TgStatus tg_model_classify(const struct TgModel *m,
                                const char *bundle,
                                double *probs,
                                size_t len,
                                size_t *pred);

// Integrated-gradient node attributions for the predicted class, using
// `n_points` Gauss-Legendre nodes. `node_ig` receives one value per tile
// in bundle order (`len` values, at least the tile count); `n_tiles` the
// tile count; `gap` the completeness gap. Outputs other than `node_ig`
// may be null.
//
// # Safety
// `bundle` must be a NUL-terminated string; `node_ig` must hold `len`
// writable values.
enum TgStatus tg_model_integrated_gradients(const struct TgModel *m,
                                            const char *bundle,
                                            size_t n_points,
                                            double *node_ig,
                                            size_t len,
                                            size_t *n_tiles,
                                            double *gap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TMEGRAPH_H */
