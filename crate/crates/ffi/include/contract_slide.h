#ifndef CONTRACT_SLIDE_H
#define CONTRACT_SLIDE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define CS_WORKLOAD_WORDCOUNT 0

#define CS_WORKLOAD_WINDOWED_SUM 1

#define CS_WORKLOAD_HISTOGRAM 2

#define CS_MODE_APPEND 0

#define CS_MODE_FIXED 1

#define CS_MODE_VARIABLE 2

#define CS_OP_APPEND 0

#define CS_OP_REPLACE 1

#define CS_OP_DELETE 2

#define CS_OP_SLIDE 3

typedef enum CsStatus {
  CS_STATUS_OK = 0,
  CS_STATUS_NULL_ARGUMENT = 1,
  CS_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The delta or input breaks the window mode's rules or names an
   * unknown chunk. The engine state is unchanged.
   */
  CS_STATUS_INVALID_DELTA = 3,
  CS_STATUS_UDF_FAILURE = 4,
  CS_STATUS_CORRUPT_MEMO = 5,
  CS_STATUS_JOB_MISMATCH = 6,
  CS_STATUS_IO = 7,
  /**
   * Initial run called twice, or an update before the initial run.
   */
  CS_STATUS_BAD_STATE = 8,
  CS_STATUS_OUT_OF_RANGE = 9,
  CS_STATUS_INTERNAL = 10,
} CsStatus;

/**
 * Opaque engine handle.
 */
typedef struct CsEngine CsEngine;

typedef struct CsJobConfig {
  /**
   * One of the `CS_WORKLOAD_*` values.
   */
  uint32_t workload;
  /**
   * One of the `CS_MODE_*` values.
   */
  uint32_t mode;
  /**
   * Window size for fixed mode; ignored otherwise.
   */
  size_t buckets;
  /**
   * Records per Map split, at least 1.
   */
  size_t split_size;
  uint64_t tree_seed;
  /**
   * Worker threads; 0 uses the available parallelism.
   */
  size_t workers;
} CsJobConfig;

/**
 * A borrowed byte string.
 */
typedef struct CsBytes {
  const uint8_t *ptr;
  size_t len;
} CsBytes;

typedef struct CsChunk {
  uint64_t id;
  const struct CsBytes *records;
  size_t record_count;
} CsChunk;

typedef struct CsRunStats {
  uint64_t n_i;
  uint64_t n_m;
  uint64_t n_mk;
  uint64_t n_o;
  uint64_t map_run;
  uint64_t map_hit;
  uint64_t combine_run;
  uint64_t combine_hit;
  uint64_t reduce_run;
  uint64_t reduce_hit;
  uint64_t combine_stages;
  uint64_t distinct_tasks;
  uint64_t memo_entries;
  uint64_t evicted;
} CsRunStats;

typedef struct CsOp {
  /**
   * One of the `CS_OP_*` values.
   */
  uint32_t kind;
  /**
   * Target of replace and delete.
   */
  uint64_t chunk_id;
  /**
   * Records for append, replace and slide.
   */
  const struct CsBytes *records;
  size_t record_count;
} CsOp;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cs_version(void);

/**
 * Description of the last failed call on this thread, or NULL after a
 * success. Valid until the next call on this thread.
 */
const char *cs_last_error(void);

/**
 * Creates an engine with an empty memo store.
 *
 * # Safety
 * `config` must be valid for reads and `out` valid for writes.
 */
enum CsStatus cs_engine_new(const struct CsJobConfig *config, struct CsEngine **out);

/**
 * Restores an engine from a file written by [`cs_engine_persist`] with the
 * same job configuration. Run a no-op update to recover the output.
 *
 * # Safety
 * `config` must be valid for reads, `path` a NUL-terminated string and `out`
 * valid for writes.
 */
enum CsStatus cs_engine_resume(const struct CsJobConfig *config,
                               const char *path,
                               struct CsEngine **out);

/**
 * Releases an engine. NULL is ignored.
 *
 * # Safety
 * `engine` must be NULL or a live handle; it must not be used afterwards.
 */
void cs_engine_free(struct CsEngine *engine);

/**
 * Runs the job on its initial input. `stats_out` may be NULL.
 *
 * # Safety
 * `chunks` must hold `chunk_count` valid chunks whose record arrays and
 * bytes are readable; `stats_out` must be NULL or valid for writes.
 */
enum CsStatus cs_engine_initial_run(struct CsEngine *engine,
                                    const struct CsChunk *chunks,
                                    size_t chunk_count,
                                    struct CsRunStats *stats_out);

/**
 * Applies one delta made of `op_count` ops. With no ops this re-runs the
 * current input. `stats_out` may be NULL.
 *
 * # Safety
 * `ops` must hold `op_count` valid ops whose record arrays and bytes are
 * readable; `stats_out` must be NULL or valid for writes.
 */
enum CsStatus cs_engine_update(struct CsEngine *engine,
                               const struct CsOp *ops,
                               size_t op_count,
                               struct CsRunStats *stats_out);

/**
 * Writes the memo store and input layout to `path`.
 *
 * # Safety
 * `engine` must be a live handle and `path` a NUL-terminated string.
 */
enum CsStatus cs_engine_persist(const struct CsEngine *engine, const char *path);

/**
 * Number of pairs in the last run's output, sorted by key. 0 for NULL.
 *
 * # Safety
 * `engine` must be NULL or a live handle.
 */
size_t cs_engine_output_len(const struct CsEngine *engine);

/**
 * Borrows output pair `index`.
 *
 * # Safety
 * `engine` must be a live handle; `key` and `value` must be valid for writes.
 */
enum CsStatus cs_engine_output_pair(const struct CsEngine *engine,
                                    size_t index,
                                    struct CsBytes *key,
                                    struct CsBytes *value);

/**
 * Number of chunks in the current window. 0 for NULL.
 *
 * # Safety
 * `engine` must be NULL or a live handle.
 */
size_t cs_engine_chunk_count(const struct CsEngine *engine);

/**
 * Fills `ids` with up to `capacity` chunk ids, oldest first, and stores the
 * number written in `written`.
 *
 * # Safety
 * `engine` must be a live handle, `ids` valid for `capacity` writes and
 * `written` valid for one write.
 */
enum CsStatus cs_engine_chunk_ids(const struct CsEngine *engine,
                                  uint64_t *ids,
                                  size_t capacity,
                                  size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONTRACT_SLIDE_H */
