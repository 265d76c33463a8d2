#ifndef LMAR_H
#define LMAR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LmarStatus {
  LMAR_STATUS_OK = 0,
  LMAR_STATUS_NULL_POINTER = 1,
  LMAR_STATUS_INVALID_ARGUMENT = 2,
  LMAR_STATUS_DIM_MISMATCH = 3,
  LMAR_STATUS_ZERO_VECTOR = 4,
  LMAR_STATUS_EMPTY_INDEX = 5,
  LMAR_STATUS_IO = 6,
  LMAR_STATUS_PARSE_FAILURE = 7,
  LMAR_STATUS_INVALID_PARAMS = 8,
  LMAR_STATUS_ZERO_DOCUMENT_TOKENS = 9,
  LMAR_STATUS_BUFFER_TOO_SMALL = 10,
  LMAR_STATUS_PANIC = 11,
} LmarStatus;

typedef enum LmarSchema {
  LMAR_SCHEMA_TRIPLET_LABEL = 0,
  LMAR_SCHEMA_CLUSTER_DESCRIPTION = 1,
  LMAR_SCHEMA_QA_GRADE = 2,
  LMAR_SCHEMA_QA_PAIRS = 3,
} LmarSchema;

/*
 Linear adapter `normalize(W v)`.
 */
typedef struct LmarAdapter LmarAdapter;

/*
 Result of one clustering run.
 */
typedef struct LmarClusters LmarClusters;

/*
 Brute-force cosine index over unit rows.
 */
typedef struct LmarIndex LmarIndex;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failure on this thread, or null. The pointer stays
 valid until the next failing call on the same thread.
 */
const char *lmar_last_error(void);

/*
 Number of tokens in a NUL-terminated UTF-8 string.

 # Safety
 `text` must be a valid C string and `out` writable.
 */
enum LmarStatus lmar_count_tokens(const char *text, size_t *out);

/*
 LLM tokens per document token.

 # Safety
 `out` must be writable.
 */
enum LmarStatus lmar_tcdt(uint64_t input_tokens,
                          uint64_t output_tokens,
                          uint64_t document_tokens,
                          double *out);

/*
 Evidence term-frequency score of `n_retrieved` retrieved texts.

 # Safety
 `evidence` and each of the `n_retrieved` entries of `retrieved` must be
 valid C strings; `out` must be writable.
 */
enum LmarStatus lmar_tf_score(const char *evidence,
                              const char *const *retrieved,
                              size_t n_retrieved,
                              double *out);

/*
 Parses an LLM reply against `schema` and writes the result as a JSON
 string to `*json_out`, to be released with [`lmar_string_free`].

 # Safety
 `content` must be a valid C string and `json_out` writable.
 */
enum LmarStatus lmar_parse_structured(const char *content, enum LmarSchema schema, char **json_out);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not be freed twice.
 */
void lmar_string_free(char *s);

/*
 Deterministic local embedding of `text` into `out[0..dim]`.

 # Safety
 `text` must be a valid C string and `out` hold `dim` doubles.
 */
enum LmarStatus lmar_stub_embed(const char *text, size_t dim, double *out);

/*
 Builds an index from `n` row-major rows of width `d`; rows are
 normalized and get ids `0..n`.

 # Safety
 `rows` must hold `n * d` doubles and `out` be writable.
 */
enum LmarStatus lmar_index_new(const double *rows, size_t n, size_t d, struct LmarIndex **out);

/*
 Loads an index written by the `embed` stage.

 # Safety
 `path` must be a valid C string and `out` writable.
 */
enum LmarStatus lmar_index_load(const char *path, struct LmarIndex **out);

/*
 Row count and dimension.

 # Safety
 `index` must be a live handle; `n` and `d` writable.
 */
enum LmarStatus lmar_index_shape(const struct LmarIndex *index, size_t *n, size_t *d);

/*
 Writes the best `min(k, n)` ids and similarities, best first, and their
 count to `*n_out`. Ties go to the smaller id.

 # Safety
 `index` must be live, `query` hold `d` doubles, `ids_out` and
 `sims_out` hold `k` entries each (`sims_out` may be null).
 */
enum LmarStatus lmar_index_top_k(const struct LmarIndex *index,
                                 const double *query,
                                 size_t d,
                                 size_t k,
                                 size_t *ids_out,
                                 double *sims_out,
                                 size_t *n_out);

/*
 # Safety
 `index` must come from this library and not be freed twice.
 */
void lmar_index_free(struct LmarIndex *index);

/*
 Partitions the index with seeded sampling-based KNN clustering.

 # Safety
 `index` must be live and `out` writable.
 */
enum LmarStatus lmar_cluster(const struct LmarIndex *index,
                             size_t k,
                             double delta,
                             uint64_t rng_seed,
                             struct LmarClusters **out);

/*
 # Safety
 `clusters` must be live and `out` writable.
 */
enum LmarStatus lmar_clusters_count(const struct LmarClusters *clusters, size_t *out);

/*
 Borrows the member ids of cluster `i`, seed first. The array lives as
 long as the handle.

 # Safety
 `clusters` must be live; `ids` and `len` writable.
 */
enum LmarStatus lmar_clusters_members(const struct LmarClusters *clusters,
                                      size_t i,
                                      const size_t **ids,
                                      size_t *len);

/*
 # Safety
 `clusters` must come from this library and not be freed twice.
 */
void lmar_clusters_free(struct LmarClusters *clusters);

/*
 Identity adapter of width `d`.

 # Safety
 `out` must be writable.
 */
enum LmarStatus lmar_adapter_identity(size_t d, struct LmarAdapter **out);

/*
 Loads an adapter checkpoint.

 # Safety
 `path` must be a valid C string and `out` writable.
 */
enum LmarStatus lmar_adapter_load(const char *path, struct LmarAdapter **out);

/*
 # Safety
 `adapter` must be live; `d_in` and `d_out` writable.
 */
enum LmarStatus lmar_adapter_dims(const struct LmarAdapter *adapter, size_t *d_in, size_t *d_out);

/*
 Writes `normalize(W v)` into `out`.

 # Safety
 `adapter` must be live, `v` hold `d_in` doubles and `out` `d_out`.
 */
enum LmarStatus lmar_adapter_apply(const struct LmarAdapter *adapter,
                                   const double *v,
                                   size_t d_in,
                                   double *out,
                                   size_t d_out);

/*
 # Safety
 `adapter` must come from this library and not be freed twice.
 */
void lmar_adapter_free(struct LmarAdapter *adapter);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LMAR_H */
