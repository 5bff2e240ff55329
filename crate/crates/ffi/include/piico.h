#ifndef PIICO_H
#define PIICO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define PIICO_PROTOCOL_WIFI 0

#define PIICO_PROTOCOL_BLUETOOTH 1

#define PIICO_PROTOCOL_ZIGBEE 2

typedef enum PiicoStatus {
  PIICO_STATUS_OK = 0,
  // A required pointer was NULL.
  PIICO_STATUS_NULL_ARGUMENT = 1,
  // Unknown protocol, non-UTF-8 text, invalid topic filter, ...
  PIICO_STATUS_INVALID_ARGUMENT = 2,
  // The decoder needs more input before it can yield a frame.
  PIICO_STATUS_NEED_MORE_DATA = 3,
  // A malformed frame was discarded; call `piico_decoder_next` again.
  PIICO_STATUS_MALFORMED_FRAME = 4,
  // Payload empty or longer than 65535 bytes.
  PIICO_STATUS_ENCODE_FAILED = 5,
  // Bytes are not a valid normalized reading.
  PIICO_STATUS_PARSE_FAILED = 6,
  // Sensor input out of range or failing its integrity check.
  PIICO_STATUS_SENSOR_ERROR = 7,
  // A Rust panic was caught at the boundary.
  PIICO_STATUS_INTERNAL = 99,
} PiicoStatus;

// Incremental frame decoder for one transport.
typedef struct PiicoDecoder PiicoDecoder;

// A parsed normalized reading.
typedef struct PiicoReading PiicoReading;

// Library-owned bytes. `data` is NULL when `len` is 0.
typedef struct PiicoBuffer {
  uint8_t *data;
  size_t len;
} PiicoBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static string.
const char *piico_version(void);

// Message for the last failure on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *piico_last_error(void);

// # Safety
// `buf` must be NULL or point to a buffer filled by this library and not yet
// freed. The buffer is reset to empty.
void piico_buffer_free(struct PiicoBuffer *buf);

// # Safety
// `s` must be NULL or a string returned by this library and not yet freed.
void piico_string_free(char *s);

// Frames `payload` for `protocol_id` into `out`.
//
// # Safety
// `payload` must point to `len` readable bytes; `out` must be writable.
enum PiicoStatus piico_frame_encode(uint32_t protocol_id,
                                    const uint8_t *payload,
                                    size_t len,
                                    struct PiicoBuffer *out);

// New decoder, or NULL for an unknown protocol.
struct PiicoDecoder *piico_decoder_new(uint32_t protocol_id);

// # Safety
// `dec` must be NULL or a live decoder.
void piico_decoder_free(struct PiicoDecoder *dec);

// Appends stream bytes, in chunks of any size.
//
// # Safety
// `dec` must be a live decoder; `data` must point to `len` readable bytes.
enum PiicoStatus piico_decoder_push(struct PiicoDecoder *dec, const uint8_t *data, size_t len);

// Buffered bytes not yet consumed, or 0 for NULL.
//
// # Safety
// `dec` must be NULL or a live decoder.
size_t piico_decoder_pending(const struct PiicoDecoder *dec);

// Pops the next frame payload into `out` (`PIICO_STATUS_OK`). Returns
// `PIICO_STATUS_NEED_MORE_DATA` when the buffer holds no complete frame and
// `PIICO_STATUS_MALFORMED_FRAME` after discarding a bad one.
//
// # Safety
// `dec` must be a live decoder; `out` must be writable.
enum PiicoStatus piico_decoder_next(struct PiicoDecoder *dec, struct PiicoBuffer *out);

// Parses a normalized reading (JSON, any key order) into `*out`.
//
// # Safety
// `data` must point to `len` readable bytes; `out` must be writable.
enum PiicoStatus piico_reading_parse(const uint8_t *data, size_t len, struct PiicoReading **out);

// # Safety
// `r` must be NULL or a live reading.
void piico_reading_free(struct PiicoReading *r);

// Canonical JSON form: fixed key order, no whitespace.
//
// # Safety
// `r` must be a live reading; `out` must be writable.
enum PiicoStatus piico_reading_serialize(const struct PiicoReading *r, struct PiicoBuffer *out);

// # Safety
// `r` must be NULL or a live reading.
double piico_reading_value(const struct PiicoReading *r);

// `PIICO_PROTOCOL_*` of the ingress transport, or `UINT32_MAX` for NULL.
//
// # Safety
// `r` must be NULL or a live reading.
uint32_t piico_reading_protocol(const struct PiicoReading *r);

// Field by its JSON key (`"node-id"`, `"date"`, ...) as a new string, or
// NULL for an unknown key. Free with `piico_string_free`.
//
// # Safety
// `r` must be a live reading and `key` a NUL-terminated string.
char *piico_reading_field(const struct PiicoReading *r, const char *key);

// Decodes an 8-byte AM2315 register response.
//
// # Safety
// `payload` must point to 8 readable bytes; the outputs must be writable.
enum PiicoStatus piico_am2315_decode(const uint8_t *payload,
                                     double *temperature_c,
                                     double *humidity_rh);

// Pyranometer output voltage to irradiance in W/m².
//
// # Safety
// `out` must be writable.
enum PiicoStatus piico_davis6450_convert(double volts, double *out);

double piico_rain_tips_to_mm(uint64_t tips);

// Switch closures over `window_s` seconds to km/h.
//
// # Safety
// `out` must be writable.
enum PiicoStatus piico_anemometer_to_kmh(uint64_t closures, double window_s, double *out);

// Compass sector 0..15 (0 = N, clockwise) for a vane divider voltage.
//
// # Safety
// `out` must be writable.
enum PiicoStatus piico_vane_sector(double volts, double vref, uint32_t *out);

// MQTT topic filter match with `+` and `#` wildcards. `*matched` is set
// on success; an invalid filter yields `PIICO_STATUS_INVALID_ARGUMENT`.
//
// # Safety
// `filter` and `topic` must be NUL-terminated strings; `matched` writable.
enum PiicoStatus piico_topic_matches(const char *filter, const char *topic, bool *matched);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIICO_H */
