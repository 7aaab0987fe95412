#ifndef TAXOVIS_H
#define TAXOVIS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum TxvStatus {
  TXV_STATUS_OK = 0,
  TXV_STATUS_NULL_POINTER = 1,
  TXV_STATUS_INVALID_UTF8 = 2,
  TXV_STATUS_INVALID_ARGUMENT = 3,
  TXV_STATUS_IO = 4,
  TXV_STATUS_FORMAT = 5,
  TXV_STATUS_TAXONOMY = 6,
  TXV_STATUS_NUMERIC = 7,
  TXV_STATUS_PANIC = 8,
} TxvStatus;

// Trained model checkpoint.
typedef struct TxvCheckpoint TxvCheckpoint;

// Synthetic corpus loaded from disk.
typedef struct TxvCorpus TxvCorpus;

// Unified label space.
typedef struct TxvTaxonomy TxvTaxonomy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null if none.
//
// The pointer stays valid until the next failing call on the same thread.
const char *txv_last_error(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must be null or a pointer obtained from this library that has not
// been freed yet.
void txv_string_free(char *s);

// Builds a label space from a JSON object mapping dataset ids to label lists.
//
// # Safety
// `label_lists_json` must be a valid C string and `out` a valid pointer.
enum TxvStatus txv_taxonomy_from_json(const char *label_lists_json, struct TxvTaxonomy **out);

// Reads a serialized label space such as a corpus's `taxonomy.json`.
//
// # Safety
// `path` must be a valid C string and `out` a valid pointer.
enum TxvStatus txv_taxonomy_read(const char *path, struct TxvTaxonomy **out);

// Number of categories `K`.
//
// # Safety
// `taxonomy` must come from this library; `out` must be valid.
enum TxvStatus txv_taxonomy_size(const struct TxvTaxonomy *taxonomy, size_t *out);

// Global id of a category name.
//
// # Safety
// `taxonomy` must come from this library, `name` must be a valid C string
// and `out` a valid pointer.
enum TxvStatus txv_taxonomy_category_id(const struct TxvTaxonomy *taxonomy,
                                        const char *name,
                                        size_t *out);

// Hex SHA-256 of the serialized label space.
//
// # Safety
// `taxonomy` must come from this library; `out` must be valid.
enum TxvStatus txv_taxonomy_hash(const struct TxvTaxonomy *taxonomy, char **out);

// Pairwise shared-category report, as text.
//
// # Safety
// `taxonomy` must come from this library; `out` must be valid.
enum TxvStatus txv_taxonomy_overlap_report(const struct TxvTaxonomy *taxonomy, char **out);

// # Safety
// `taxonomy` must be null or come from this library and not be freed yet.
void txv_taxonomy_free(struct TxvTaxonomy *taxonomy);

// Writes the unit-norm keyed embedding of `name` into `out[0..d]`.
//
// # Safety
// `name` must be a valid C string and `out` must hold `d` doubles.
enum TxvStatus txv_embedding(const char *name, size_t d, uint64_t seed, double *out);

// Minimum-cost assignment of `g` tracks to `n` queries.
//
// `cost` is row-major `n × g`; `query_of_track[j]` receives the query
// matched to track `j`.
//
// # Safety
// `cost` must hold `n·g` doubles and `query_of_track` room for `g` values.
enum TxvStatus txv_hungarian(const double *cost, size_t n, size_t g, size_t *query_of_track);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a valid C string and `out` a valid pointer.
enum TxvStatus txv_checkpoint_load(const char *path, struct TxvCheckpoint **out);

// Hex SHA-256 of the checkpoint bytes.
//
// # Safety
// `checkpoint` must come from this library; `out` must be valid.
enum TxvStatus txv_checkpoint_hash(const struct TxvCheckpoint *checkpoint, char **out);

// Training iterations recorded in the checkpoint.
//
// # Safety
// `checkpoint` must come from this library; `out` must be valid.
enum TxvStatus txv_checkpoint_iteration(const struct TxvCheckpoint *checkpoint, size_t *out);

// Copy of the checkpoint's label space; free it with [`txv_taxonomy_free`].
//
// # Safety
// `checkpoint` must come from this library; `out` must be valid.
enum TxvStatus txv_checkpoint_taxonomy(const struct TxvCheckpoint *checkpoint,
                                       struct TxvTaxonomy **out);

// # Safety
// `checkpoint` must be null or come from this library and not be freed yet.
void txv_checkpoint_free(struct TxvCheckpoint *checkpoint);

// Writes the stock three-dataset synthetic corpus to `dir`.
//
// # Safety
// `dir` must be a valid C string.
enum TxvStatus txv_synth_stock(uint64_t seed, const char *dir);

// Reads a corpus directory.
//
// # Safety
// `dir` must be a valid C string and `out` a valid pointer.
enum TxvStatus txv_corpus_read(const char *dir, struct TxvCorpus **out);

// # Safety
// `corpus` must be null or come from this library and not be freed yet.
void txv_corpus_free(struct TxvCorpus *corpus);

// Evaluates a checkpoint on a dataset's validation split.
//
// `out_json` receives the metrics (`AP`, `AP50`, `AP75`, `AR1`, `AR10`,
// `per_category`). A nonzero `zero_shot` allows datasets left out of
// training.
//
// # Safety
// `checkpoint` and `corpus` must come from this library, `dataset` must be
// a valid C string and `out_json` a valid pointer.
enum TxvStatus txv_evaluate(const struct TxvCheckpoint *checkpoint,
                            const struct TxvCorpus *corpus,
                            const char *dataset,
                            int32_t zero_shot,
                            char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TAXOVIS_H */
