#ifndef BANDCONTROL_H
#define BANDCONTROL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BcStatus {
  BC_STATUS_OK = 0,
  BC_STATUS_NULL_POINTER = 1,
  BC_STATUS_INVALID_UTF8 = 2,
  BC_STATUS_PARSE = 3,
  BC_STATUS_TOKENIZE = 4,
  BC_STATUS_MODEL = 5,
  BC_STATUS_METRICS = 6,
  BC_STATUS_IO = 7,
  BC_STATUS_OUT_OF_RANGE = 8,
  BC_STATUS_PANIC = 9,
} BcStatus;

// A trained generator.
typedef struct BcModel BcModel;

// A song in the six-class, quantized form.
typedef struct BcSong BcSong;

// Per-track token sequences of a song under the default vocabulary.
typedef struct BcTokens BcTokens;

// Fidelity metrics of a cover against its reference.
typedef struct BcMetrics {
  double nde;
  double oap;
  double oad;
  double oav;
  double ccs;
  double gcs;
  double ca;
  double ssmd;
} BcMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failure on this thread, or null. Valid until the
// next call into the library on this thread.
const char *bc_last_error(void);

// Static description of a status code.
const char *bc_status_name(enum BcStatus status);

// Parse the line-oriented song text format.
//
// # Safety
// `text` must be a NUL-terminated string; `song` must be writable.
enum BcStatus bc_song_from_text(const char *text, struct BcSong **song);

// Parse a Standard MIDI File, then quantize it and compress its tracks to
// the six instrument classes.
//
// # Safety
// `data` must point to `len` readable bytes; `song` must be writable.
enum BcStatus bc_song_from_midi(const uint8_t *data, size_t len, struct BcSong **song);

// # Safety
// `song` must come from this library or be null.
void bc_song_free(struct BcSong *song);

// # Safety
// `song` must be a live handle; `n_bars` must be writable.
enum BcStatus bc_song_n_bars(const struct BcSong *song, size_t *n_bars);

// # Safety
// `song` must be a live handle; `count` must be writable.
enum BcStatus bc_song_note_count(const struct BcSong *song, size_t *count);

// Song text; release it with `bc_string_free`.
//
// # Safety
// `song` must be a live handle; `text` must be writable.
enum BcStatus bc_song_to_text(const struct BcSong *song, char **text);

// Standard MIDI File bytes; release them with `bc_bytes_free`.
//
// # Safety
// `song` must be a live handle; `data` and `len` must be writable.
enum BcStatus bc_song_to_midi(const struct BcSong *song, uint8_t **data, size_t *len);

// # Safety
// `text` must come from this library or be null.
void bc_string_free(char *text);

// # Safety
// `data` and `len` must be exactly as returned by this library.
void bc_bytes_free(uint8_t *data, size_t len);

// # Safety
// `song` must be a live handle; `tokens` must be writable.
enum BcStatus bc_tokenize(const struct BcSong *song, struct BcTokens **tokens);

// # Safety
// `tokens` must come from this library or be null.
void bc_tokens_free(struct BcTokens *tokens);

// # Safety
// `tokens` must be a live handle; `n` must be writable.
enum BcStatus bc_tokens_n_tracks(const struct BcTokens *tokens, size_t *n);

// Borrow the unpadded ids of one track. The pointer stays valid while the
// handle lives.
//
// # Safety
// `tokens` must be a live handle; `ids` and `len` must be writable.
enum BcStatus bc_tokens_track(const struct BcTokens *tokens,
                              size_t track,
                              const uint32_t **ids,
                              size_t *len);

// # Safety
// `tokens` must be a live handle; `song` must be writable.
enum BcStatus bc_detokenize(const struct BcTokens *tokens, struct BcSong **song);

// Load a checkpoint written by the `train` command.
//
// # Safety
// `path` must be a NUL-terminated string; `model` must be writable.
enum BcStatus bc_model_load(const char *path, struct BcModel **model);

// # Safety
// `model` must come from this library or be null.
void bc_model_free(struct BcModel *model);

// Generate a piece steered by the expert features of `reference`, with the
// same instruments and bar count. `max_len` of 0 uses the model limit.
//
// # Safety
// `model` and `reference` must be live handles; `song` must be writable.
enum BcStatus bc_generate(const struct BcModel *model,
                          const struct BcSong *reference,
                          uint64_t seed,
                          size_t max_len,
                          struct BcSong **song);

// # Safety
// `reference` and `cover` must be live handles; `metrics` must be writable.
enum BcStatus bc_evaluate(const struct BcSong *reference,
                          const struct BcSong *cover,
                          struct BcMetrics *metrics);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BANDCONTROL_H */
