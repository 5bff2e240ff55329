//! Byte-level framing for the three simulated radios and the stream links
//! that carry them.
//!
//! Each codec is structurally different so that the gateway has to do real
//! protocol conversion:
//!
//! * WiFi: 4-byte big-endian length prefix, then the payload.
//! * Bluetooth: SLIP-style `0xC0` delimiters with `0xDB` escapes.
//! * ZigBee: XBee API-mode packet, `0x7E`, 16-bit length, payload, checksum.

mod bluetooth;
mod link;
mod wifi;
mod zigbee;

use thiserror::Error;

use crate::model::ProtocolId;

pub use bluetooth::{bt_decode, bt_encode};
pub use link::{connect_link, LinkEndpoint, LinkError, LinkReader, LinkWriter};
pub use wifi::{wifi_decode, wifi_encode};
pub use zigbee::{zb_checksum, zb_decode, zb_encode};

pub const MAX_PAYLOAD: usize = 65_535;

/// A decoded frame, tagged with the transport it was framed for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    kind: ProtocolId,
    payload: Vec<u8>,
}

impl RawFrame {
    pub fn new(kind: ProtocolId, payload: Vec<u8>) -> Result<Self, EncodeError> {
        check_payload_len(payload.len())?;
        Ok(Self { kind, payload })
    }

    pub fn kind(&self) -> ProtocolId {
        self.kind
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn into_payload(self) -> Vec<u8> {
        self.payload
    }

    /// Encodes with the codec matching the frame's kind.
    pub fn encode(&self) -> Vec<u8> {
        // Length was checked at construction.
        encode(self.kind, &self.payload).expect("RawFrame payload length is validated")
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum EncodeError {
    #[error("payload is empty")]
    EmptyPayload,
    #[error("payload of {0} bytes exceeds 65535")]
    PayloadTooLarge(usize),
}

/// Decode failures. Every variant except `NeedMoreData` carries `skip`: the
/// number of leading stream bytes to discard before trying again.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum DecodeError {
    #[error("incomplete frame")]
    NeedMoreData,
    #[error("declared length {declared} outside 1..=65535")]
    LengthOutOfRange { declared: u32, skip: usize },
    #[error("escape byte followed by {byte:#04x}")]
    BadEscape { byte: u8, skip: usize },
    #[error("checksum mismatch: expected {expected:#04x}, got {got:#04x}")]
    ChecksumMismatch { expected: u8, got: u8, skip: usize },
}

impl DecodeError {
    /// Bytes to drop from the stream front; zero for `NeedMoreData`.
    pub fn skip(&self) -> usize {
        match *self {
            DecodeError::NeedMoreData => 0,
            DecodeError::LengthOutOfRange { skip, .. }
            | DecodeError::BadEscape { skip, .. }
            | DecodeError::ChecksumMismatch { skip, .. } => skip,
        }
    }
}

pub(crate) fn check_payload_len(len: usize) -> Result<(), EncodeError> {
    match len {
        0 => Err(EncodeError::EmptyPayload),
        n if n > MAX_PAYLOAD => Err(EncodeError::PayloadTooLarge(n)),
        _ => Ok(()),
    }
}

pub fn encode(kind: ProtocolId, payload: &[u8]) -> Result<Vec<u8>, EncodeError> {
    match kind {
        ProtocolId::Wifi => wifi_encode(payload),
        ProtocolId::Bluetooth => bt_encode(payload),
        ProtocolId::Zigbee => zb_encode(payload),
    }
}

/// Decodes one frame from the front of `stream`, returning it with the
/// number of bytes it occupied.
pub fn decode(kind: ProtocolId, stream: &[u8]) -> Result<(RawFrame, usize), DecodeError> {
    match kind {
        ProtocolId::Wifi => wifi_decode(stream),
        ProtocolId::Bluetooth => bt_decode(stream),
        ProtocolId::Zigbee => zb_decode(stream),
    }
}

/// Incremental decoder over an arbitrarily chunked byte stream.
#[derive(Debug)]
pub struct FrameDecoder {
    kind: ProtocolId,
    buf: Vec<u8>,
    start: usize,
}

/// Outcome of [`FrameDecoder::next_frame`] for a complete unit of input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    /// A frame and its on-wire size.
    Frame(RawFrame, usize),
    /// A malformed frame that was discarded.
    Error(DecodeError),
}

impl FrameDecoder {
    pub fn new(kind: ProtocolId) -> Self {
        Self { kind, buf: Vec::new(), start: 0 }
    }

    pub fn kind(&self) -> ProtocolId {
        self.kind
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start * 2 >= self.buf.len() {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    /// Buffered bytes not yet consumed.
    pub fn pending(&self) -> usize {
        self.buf.len() - self.start
    }

    /// Next frame or discarded error; `None` when more input is needed.
    pub fn next_frame(&mut self) -> Option<Decoded> {
        match decode(self.kind, &self.buf[self.start..]) {
            Ok((frame, used)) => {
                self.start += used;
                Some(Decoded::Frame(frame, used))
            }
            Err(DecodeError::NeedMoreData) => None,
            Err(e) => {
                self.start += e.skip().max(1);
                Some(Decoded::Error(e))
            }
        }
    }
}
