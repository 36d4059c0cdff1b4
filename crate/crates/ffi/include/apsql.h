#ifndef APSQL_H
#define APSQL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ApsqlStatus {
  APSQL_STATUS_OK = 0,
  APSQL_STATUS_NULL_ARGUMENT = 1,
  APSQL_STATUS_INVALID_UTF8 = 2,
  APSQL_STATUS_CONFIG = 3,
  APSQL_STATUS_CATALOG = 4,
  APSQL_STATUS_NOT_FOUND = 5,
  /**
   * A pipeline stage failed; the message starts with the stage name.
   */
  APSQL_STATUS_STAGE = 6,
  APSQL_STATUS_NO_SQL = 7,
  APSQL_STATUS_EVAL = 8,
  APSQL_STATUS_PANIC = 9,
} ApsqlStatus;

typedef enum ApsqlSchemaStyle {
  APSQL_SCHEMA_STYLE_DDL_LIKE = 0,
  APSQL_SCHEMA_STYLE_COMPACT_LIST = 1,
} ApsqlSchemaStyle;

/**
 * Loaded database catalog.
 */
typedef struct ApsqlCatalog ApsqlCatalog;

/**
 * Configured pipeline with its backend.
 */
typedef struct ApsqlPipeline ApsqlPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. Valid until
 * the next call into this library from the same thread.
 */
const char *apsql_last_error(void);

/**
 * Library version as a static string.
 */
const char *apsql_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void apsql_string_free(char *s);

/**
 * Loads a benchmark tables-metadata file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum ApsqlStatus apsql_catalog_load(const char *path, struct ApsqlCatalog **out);

/**
 * Number of databases in the catalog; 0 for null.
 *
 * # Safety
 * `catalog` must be null or a live handle.
 */
size_t apsql_catalog_len(const struct ApsqlCatalog *catalog);

/**
 * Serializes the schema of `db_id` as prompt text.
 *
 * # Safety
 * `catalog` must be a live handle, `db_id` a NUL-terminated string and
 * `out` writable.
 */
enum ApsqlStatus apsql_catalog_serialize(const struct ApsqlCatalog *catalog,
                                         const char *db_id,
                                         enum ApsqlSchemaStyle style,
                                         char **out);

/**
 * # Safety
 * `catalog` must be null or a handle from [`apsql_catalog_load`] not yet freed.
 */
void apsql_catalog_free(struct ApsqlCatalog *catalog);

/**
 * Builds a pipeline from a TOML config. `replay` may be null; when set,
 * model calls are answered from that transcript.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string, `replay` null or one, and
 * `out` writable.
 */
enum ApsqlStatus apsql_pipeline_open(const char *config_path,
                                     const char *replay,
                                     struct ApsqlPipeline **out);

/**
 * Answers one question. On success `out_sql` receives the SQL.
 *
 * # Safety
 * `pipeline` must be a live handle, strings NUL-terminated, `out_sql` writable.
 */
enum ApsqlStatus apsql_pipeline_ask(const struct ApsqlPipeline *pipeline,
                                    const char *question,
                                    const char *db_id,
                                    char **out_sql);

/**
 * # Safety
 * `pipeline` must be null or a handle from [`apsql_pipeline_open`] not yet freed.
 */
void apsql_pipeline_free(struct ApsqlPipeline *pipeline);

/**
 * Pulls the SQL statement out of a model reply.
 *
 * # Safety
 * `reply` must be a NUL-terminated string and `out_sql` writable.
 */
enum ApsqlStatus apsql_extract_sql(const char *reply, char **out_sql);

/**
 * Token-set Jaccard similarity of two texts, in [0, 1].
 *
 * # Safety
 * `a` and `b` must be NUL-terminated strings and `out` writable.
 */
enum ApsqlStatus apsql_lexical_similarity(const char *a, const char *b, double *out);

/**
 * Scores a predictions file (JSON lines) against a gold questions file and
 * returns the report as JSON. `suite_root` may be null.
 *
 * # Safety
 * Paths must be NUL-terminated strings (`suite_root` may be null) and
 * `out_json` writable.
 */
enum ApsqlStatus apsql_evaluate(const char *predictions,
                                const char *gold,
                                const char *db_root,
                                const char *suite_root,
                                size_t workers,
                                char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* APSQL_H */
