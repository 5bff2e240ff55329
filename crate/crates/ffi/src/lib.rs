//! C ABI over the piico codecs.
//!
//! Conventions:
//!
//! * Every fallible call returns a [`PiicoStatus`]; `PIICO_STATUS_OK` is 0.
//!   After a failure, [`piico_last_error`] describes it on the calling thread.
//! * Handles (`PiicoDecoder`, `PiicoReading`) are opaque, created by a `*_new`
//!   or `*_parse` call and released with the matching `*_free`. Passing NULL
//!   to a `*_free` is a no-op.
//! * Byte output goes into a [`PiicoBuffer`] owned by the library; release it
//!   with [`piico_buffer_free`]. Strings returned as `char *` are released with
//!   [`piico_string_free`].
//! * Protocols are passed as `PIICO_PROTOCOL_*` integers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use piico::model::{self, NormalizedReading, ProtocolId};
use piico::mqtt::TopicFilter;
use piico::sensors::{self, Am2315Payload};
use piico::transport::{self, Decoded, FrameDecoder};

pub const PIICO_PROTOCOL_WIFI: u32 = 0;
pub const PIICO_PROTOCOL_BLUETOOTH: u32 = 1;
pub const PIICO_PROTOCOL_ZIGBEE: u32 = 2;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiicoStatus {
    Ok = 0,
    /// A required pointer was NULL.
    NullArgument = 1,
    /// Unknown protocol, non-UTF-8 text, invalid topic filter, ...
    InvalidArgument = 2,
    /// The decoder needs more input before it can yield a frame.
    NeedMoreData = 3,
    /// A malformed frame was discarded; call `piico_decoder_next` again.
    MalformedFrame = 4,
    /// Payload empty or longer than 65535 bytes.
    EncodeFailed = 5,
    /// Bytes are not a valid normalized reading.
    ParseFailed = 6,
    /// Sensor input out of range or failing its integrity check.
    SensorError = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 99,
}

/// Library-owned bytes. `data` is NULL when `len` is 0.
#[repr(C)]
#[derive(Debug)]
pub struct PiicoBuffer {
    pub data: *mut u8,
    pub len: usize,
}

impl PiicoBuffer {
    const EMPTY: PiicoBuffer = PiicoBuffer { data: ptr::null_mut(), len: 0 };

    fn from_vec(v: Vec<u8>) -> Self {
        if v.is_empty() {
            return Self::EMPTY;
        }
        let boxed = v.into_boxed_slice();
        let len = boxed.len();
        PiicoBuffer { data: Box::into_raw(boxed) as *mut u8, len }
    }
}

/// Incremental frame decoder for one transport.
pub struct PiicoDecoder {
    inner: FrameDecoder,
}

/// A parsed normalized reading.
pub struct PiicoReading {
    inner: NormalizedReading,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl ToString) {
    let text = CString::new(msg.to_string().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

fn fail(status: PiicoStatus, msg: impl ToString) -> PiicoStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning a panic into `PIICO_STATUS_INTERNAL`.
fn guard(f: impl FnOnce() -> PiicoStatus) -> PiicoStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(PiicoStatus::Internal, "internal panic"))
}

fn protocol(p: u32) -> Result<ProtocolId, PiicoStatus> {
    match p {
        PIICO_PROTOCOL_WIFI => Ok(ProtocolId::Wifi),
        PIICO_PROTOCOL_BLUETOOTH => Ok(ProtocolId::Bluetooth),
        PIICO_PROTOCOL_ZIGBEE => Ok(ProtocolId::Zigbee),
        other => Err(fail(PiicoStatus::InvalidArgument, format!("unknown protocol {other}"))),
    }
}

fn protocol_code(p: ProtocolId) -> u32 {
    match p {
        ProtocolId::Wifi => PIICO_PROTOCOL_WIFI,
        ProtocolId::Bluetooth => PIICO_PROTOCOL_BLUETOOTH,
        ProtocolId::Zigbee => PIICO_PROTOCOL_ZIGBEE,
    }
}

/// # Safety
/// `data` must point to `len` readable bytes unless `len` is 0.
unsafe fn bytes<'a>(data: *const u8, len: usize) -> Result<&'a [u8], PiicoStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(fail(PiicoStatus::NullArgument, "NULL data with nonzero length"));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

/// # Safety
/// `s` must be NULL or a NUL-terminated string.
unsafe fn text<'a>(s: *const c_char, what: &str) -> Result<&'a str, PiicoStatus> {
    if s.is_null() {
        return Err(fail(PiicoStatus::NullArgument, format!("{what} is NULL")));
    }
    CStr::from_ptr(s).to_str().map_err(|_| fail(PiicoStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

macro_rules! out_ptr {
    ($p:expr) => {
        if $p.is_null() {
            return fail(PiicoStatus::NullArgument, concat!(stringify!($p), " is NULL"));
        }
    };
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn piico_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the last failure on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn piico_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `buf` must be NULL or point to a buffer filled by this library and not yet
/// freed. The buffer is reset to empty.
#[no_mangle]
pub unsafe extern "C" fn piico_buffer_free(buf: *mut PiicoBuffer) {
    let Some(b) = buf.as_mut() else { return };
    if !b.data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(b.data, b.len)));
    }
    *b = PiicoBuffer::EMPTY;
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn piico_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Frames `payload` for `protocol_id` into `out`.
///
/// # Safety
/// `payload` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn piico_frame_encode(
    protocol_id: u32,
    payload: *const u8,
    len: usize,
    out: *mut PiicoBuffer,
) -> PiicoStatus {
    out_ptr!(out);
    *out = PiicoBuffer::EMPTY;
    guard(|| {
        let kind = tri!(protocol(protocol_id));
        let payload = tri!(bytes(payload, len));
        match transport::encode(kind, payload) {
            Ok(wire) => {
                *out = PiicoBuffer::from_vec(wire);
                PiicoStatus::Ok
            }
            Err(e) => fail(PiicoStatus::EncodeFailed, e),
        }
    })
}

/// New decoder, or NULL for an unknown protocol.
#[no_mangle]
pub extern "C" fn piico_decoder_new(protocol_id: u32) -> *mut PiicoDecoder {
    match protocol(protocol_id) {
        Ok(kind) => Box::into_raw(Box::new(PiicoDecoder { inner: FrameDecoder::new(kind) })),
        Err(_) => ptr::null_mut(),
    }
}

/// # Safety
/// `dec` must be NULL or a live decoder.
#[no_mangle]
pub unsafe extern "C" fn piico_decoder_free(dec: *mut PiicoDecoder) {
    if !dec.is_null() {
        drop(Box::from_raw(dec));
    }
}

/// Appends stream bytes, in chunks of any size.
///
/// # Safety
/// `dec` must be a live decoder; `data` must point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn piico_decoder_push(dec: *mut PiicoDecoder, data: *const u8, len: usize) -> PiicoStatus {
    out_ptr!(dec);
    let chunk = tri!(bytes(data, len));
    (*dec).inner.push(chunk);
    PiicoStatus::Ok
}

/// Buffered bytes not yet consumed, or 0 for NULL.
///
/// # Safety
/// `dec` must be NULL or a live decoder.
#[no_mangle]
pub unsafe extern "C" fn piico_decoder_pending(dec: *const PiicoDecoder) -> usize {
    dec.as_ref().map_or(0, |d| d.inner.pending())
}

/// Pops the next frame payload into `out` (`PIICO_STATUS_OK`). Returns
/// `PIICO_STATUS_NEED_MORE_DATA` when the buffer holds no complete frame and
/// `PIICO_STATUS_MALFORMED_FRAME` after discarding a bad one.
///
/// # Safety
/// `dec` must be a live decoder; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn piico_decoder_next(dec: *mut PiicoDecoder, out: *mut PiicoBuffer) -> PiicoStatus {
    out_ptr!(dec);
    out_ptr!(out);
    *out = PiicoBuffer::EMPTY;
    guard(|| match (*dec).inner.next_frame() {
        None => PiicoStatus::NeedMoreData,
        Some(Decoded::Frame(frame, _)) => {
            *out = PiicoBuffer::from_vec(frame.into_payload());
            PiicoStatus::Ok
        }
        Some(Decoded::Error(e)) => fail(PiicoStatus::MalformedFrame, e),
    })
}

/// Parses a normalized reading (JSON, any key order) into `*out`.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn piico_reading_parse(data: *const u8, len: usize, out: *mut *mut PiicoReading) -> PiicoStatus {
    out_ptr!(out);
    *out = ptr::null_mut();
    guard(|| {
        let src = tri!(bytes(data, len));
        match model::parse_reading(src) {
            Ok(r) => {
                *out = Box::into_raw(Box::new(PiicoReading { inner: r }));
                PiicoStatus::Ok
            }
            Err(e) => fail(PiicoStatus::ParseFailed, e),
        }
    })
}

/// # Safety
/// `r` must be NULL or a live reading.
#[no_mangle]
pub unsafe extern "C" fn piico_reading_free(r: *mut PiicoReading) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Canonical JSON form: fixed key order, no whitespace.
///
/// # Safety
/// `r` must be a live reading; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn piico_reading_serialize(r: *const PiicoReading, out: *mut PiicoBuffer) -> PiicoStatus {
    out_ptr!(r);
    out_ptr!(out);
    *out = PiicoBuffer::from_vec(model::serialize_reading(&(*r).inner));
    PiicoStatus::Ok
}

/// # Safety
/// `r` must be NULL or a live reading.
#[no_mangle]
pub unsafe extern "C" fn piico_reading_value(r: *const PiicoReading) -> f64 {
    r.as_ref().map_or(f64::NAN, |r| r.inner.value())
}

/// `PIICO_PROTOCOL_*` of the ingress transport, or `UINT32_MAX` for NULL.
///
/// # Safety
/// `r` must be NULL or a live reading.
#[no_mangle]
pub unsafe extern "C" fn piico_reading_protocol(r: *const PiicoReading) -> u32 {
    r.as_ref().map_or(u32::MAX, |r| protocol_code(r.inner.protocol()))
}

/// Field by its JSON key (`"node-id"`, `"date"`, ...) as a new string, or
/// NULL for an unknown key. Free with `piico_string_free`.
///
/// # Safety
/// `r` must be a live reading and `key` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn piico_reading_field(r: *const PiicoReading, key: *const c_char) -> *mut c_char {
    let (Some(r), Ok(key)) = (r.as_ref(), text(key, "key")) else {
        return ptr::null_mut();
    };
    let r = &r.inner;
    let value = match key {
        "node-id" => r.node_id().to_string(),
        "gps" => r.gps().to_string(),
        "protocol" => r.protocol().as_str().to_string(),
        "date" => model::format_timestamp(&r.date()),
        "sensor-id" => r.sensor_id().to_string(),
        "value" => r.value().to_string(),
        "magnitude" => r.magnitude().as_str().to_string(),
        "gate-id" => r.gate_id().to_string(),
        "network-id" => r.network_id().to_string(),
        other => {
            set_error(format!("unknown reading field {other:?}"));
            return ptr::null_mut();
        }
    };
    CString::new(value).map_or(ptr::null_mut(), CString::into_raw)
}

/// Decodes an 8-byte AM2315 register response.
///
/// # Safety
/// `payload` must point to 8 readable bytes; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn piico_am2315_decode(
    payload: *const u8,
    temperature_c: *mut f64,
    humidity_rh: *mut f64,
) -> PiicoStatus {
    out_ptr!(payload);
    out_ptr!(temperature_c);
    out_ptr!(humidity_rh);
    let mut raw = [0u8; 8];
    ptr::copy_nonoverlapping(payload, raw.as_mut_ptr(), 8);
    match sensors::am2315_decode(&Am2315Payload(raw)) {
        Ok((t, h)) => {
            *temperature_c = t;
            *humidity_rh = h;
            PiicoStatus::Ok
        }
        Err(e) => fail(PiicoStatus::SensorError, e),
    }
}

/// Pyranometer output voltage to irradiance in W/m².
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn piico_davis6450_convert(volts: f64, out: *mut f64) -> PiicoStatus {
    out_ptr!(out);
    match sensors::davis6450_convert(volts) {
        Ok(v) => {
            *out = v;
            PiicoStatus::Ok
        }
        Err(e) => fail(PiicoStatus::SensorError, e),
    }
}

#[no_mangle]
pub extern "C" fn piico_rain_tips_to_mm(tips: u64) -> f64 {
    sensors::rain_tips_to_mm(tips)
}

/// Switch closures over `window_s` seconds to km/h.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn piico_anemometer_to_kmh(closures: u64, window_s: f64, out: *mut f64) -> PiicoStatus {
    out_ptr!(out);
    match sensors::anemometer_to_kmh(closures, window_s) {
        Ok(v) => {
            *out = v;
            PiicoStatus::Ok
        }
        Err(e) => fail(PiicoStatus::SensorError, e),
    }
}

/// Compass sector 0..15 (0 = N, clockwise) for a vane divider voltage.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn piico_vane_sector(volts: f64, vref: f64, out: *mut u32) -> PiicoStatus {
    out_ptr!(out);
    match sensors::vane_sector(volts, vref) {
        Ok(i) => {
            *out = i as u32;
            PiicoStatus::Ok
        }
        Err(e) => fail(PiicoStatus::SensorError, e),
    }
}

/// MQTT topic filter match with `+` and `#` wildcards. `*matched` is set
/// on success; an invalid filter yields `PIICO_STATUS_INVALID_ARGUMENT`.
///
/// # Safety
/// `filter` and `topic` must be NUL-terminated strings; `matched` writable.
#[no_mangle]
pub unsafe extern "C" fn piico_topic_matches(
    filter: *const c_char,
    topic: *const c_char,
    matched: *mut bool,
) -> PiicoStatus {
    out_ptr!(matched);
    let filter = tri!(text(filter, "filter"));
    let topic = tri!(text(topic, "topic"));
    match TopicFilter::new(filter) {
        Ok(f) => {
            *matched = f.matches(topic);
            PiicoStatus::Ok
        }
        Err(e) => fail(PiicoStatus::InvalidArgument, e),
    }
}
