#ifndef VLSEG_H
#define VLSEG_H

#include <stddef.h>
#include <stdint.h>

// Result code of every exported function.
typedef enum VlsegStatus {
  VLSEG_STATUS_OK = 0,
  VLSEG_STATUS_NULL_POINTER = 1,
  VLSEG_STATUS_INVALID_UTF8 = 2,
  VLSEG_STATUS_INVALID_INPUT = 3,
  VLSEG_STATUS_SHAPE = 4,
  VLSEG_STATUS_PARSE = 5,
  VLSEG_STATUS_IO = 6,
  VLSEG_STATUS_CHECKPOINT = 7,
  VLSEG_STATUS_CONFIG = 8,
  VLSEG_STATUS_BUFFER_TOO_SMALL = 9,
  VLSEG_STATUS_OUT_OF_RANGE = 10,
  VLSEG_STATUS_PANIC = 11,
} VlsegStatus;

// A corpus opened from disk.
typedef struct VlsegDataset VlsegDataset;

// A trained network bound to the prompt embedder of a corpus.
typedef struct VlsegPredictor VlsegPredictor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`). Returns the length the full message needs,
// including the terminator; 1 when there is no error.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t vlseg_last_error(char *buf, size_t len);

// Opens a corpus directory written by `vlseg gen-data`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum VlsegStatus vlseg_dataset_open(const char *path, struct VlsegDataset **out);

// # Safety
// `ds` must be null or a handle from [`vlseg_dataset_open`] not yet freed.
void vlseg_dataset_free(struct VlsegDataset *ds);

// Number of cases over all splits.
//
// # Safety
// `ds` must be a live dataset handle; `out` must be writable.
enum VlsegStatus vlseg_dataset_len(const struct VlsegDataset *ds, size_t *out);

// Spatial extent `[H, W, D]` of case `index`.
//
// # Safety
// `ds` must be a live dataset handle; `dims` must be writable for 3 values.
enum VlsegStatus vlseg_dataset_case_dims(const struct VlsegDataset *ds, size_t index, size_t *dims);

// Copies the intensity volume of case `index` (x-major, then y, then z).
//
// # Safety
// `ds` must be a live dataset handle; `out` must be writable for `len` floats.
enum VlsegStatus vlseg_dataset_case_volume(const struct VlsegDataset *ds,
                                           size_t index,
                                           float *out,
                                           size_t len);

// Loads a checkpoint and binds it to the prompt embedder of `ds`. The
// dataset handle may be freed afterwards.
//
// # Safety
// `checkpoint` must be a NUL-terminated string, `ds` a live dataset handle and
// `out` writable.
enum VlsegStatus vlseg_predictor_load(const char *checkpoint,
                                      const struct VlsegDataset *ds,
                                      struct VlsegPredictor **out);

// # Safety
// `p` must be null or a handle from [`vlseg_predictor_load`] not yet freed.
void vlseg_predictor_free(struct VlsegPredictor *p);

// Probability threshold applied to the finest-scale sigmoid (default 0.5).
//
// # Safety
// `p` must be a live predictor handle.
enum VlsegStatus vlseg_predictor_set_threshold(struct VlsegPredictor *p, double threshold);

// Segments a single-channel volume of extent `dims[0..3]` for `prompt` and
// writes a 0/1 mask of the same layout into `mask`. Writes the number of
// foreground voxels to `foreground` when it is not null.
//
// # Safety
// `p` must be a live predictor handle, `volume` readable and `mask` writable
// for `dims[0] * dims[1] * dims[2]` elements, `dims` readable for 3 values,
// `prompt` a NUL-terminated string.
enum VlsegStatus vlseg_predictor_segment(struct VlsegPredictor *p,
                                         const float *volume,
                                         const size_t *dims,
                                         const char *prompt,
                                         uint8_t *mask,
                                         size_t *foreground);

// Checks an expanded vocabulary against its label schema and writes the
// number of rule violations to `violations`; the first one is described by
// [`vlseg_last_error`]. Documents that do not parse return an error status.
//
// # Safety
// `schema` and `vocab` must be NUL-terminated strings; `violations` writable.
enum VlsegStatus vlseg_validate_vocabulary(const char *schema,
                                           const char *vocab,
                                           size_t *violations);

// Parses a conflict-record document; `has_conflict` receives 0 or 1.
//
// # Safety
// `doc` must be a NUL-terminated string; `has_conflict` writable.
enum VlsegStatus vlseg_check_conflict_record(const char *doc, int32_t *has_conflict);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VLSEG_H */
