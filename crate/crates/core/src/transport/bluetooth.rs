//! SLIP framing (RFC 1055 byte stuffing) for the simulated Bluetooth serial link.

use super::{check_payload_len, DecodeError, EncodeError, RawFrame};
use crate::model::ProtocolId;

pub const END: u8 = 0xC0;
pub const ESC: u8 = 0xDB;
pub const ESC_END: u8 = 0xDC;
pub const ESC_ESC: u8 = 0xDD;

pub fn bt_encode(payload: &[u8]) -> Result<Vec<u8>, EncodeError> {
    check_payload_len(payload.len())?;
    let mut out = Vec::with_capacity(payload.len() + 2 + payload.len() / 32);
    out.push(END);
    for &b in payload {
        match b {
            END => out.extend_from_slice(&[ESC, ESC_END]),
            ESC => out.extend_from_slice(&[ESC, ESC_ESC]),
            _ => out.push(b),
        }
    }
    out.push(END);
    Ok(out)
}

/// Decodes the first frame. Leading delimiters (idle keep-alives) are skipped
/// and counted as consumed along with the frame.
pub fn bt_decode(stream: &[u8]) -> Result<(RawFrame, usize), DecodeError> {
    let body_start = stream.iter().position(|&b| b != END).ok_or(DecodeError::NeedMoreData)?;
    let body_len = stream[body_start..]
        .iter()
        .position(|&b| b == END)
        .ok_or(DecodeError::NeedMoreData)?;
    let body = &stream[body_start..body_start + body_len];
    let consumed = body_start + body_len + 1;

    let mut payload = Vec::with_capacity(body.len());
    let mut bytes = body.iter();
    while let Some(&b) = bytes.next() {
        if b != ESC {
            payload.push(b);
            continue;
        }
        match bytes.next() {
            Some(&ESC_END) => payload.push(END),
            Some(&ESC_ESC) => payload.push(ESC),
            Some(&other) => return Err(DecodeError::BadEscape { byte: other, skip: consumed }),
            // ESC immediately before the closing delimiter.
            None => return Err(DecodeError::BadEscape { byte: END, skip: consumed }),
        }
    }
    if payload.len() > super::MAX_PAYLOAD {
        return Err(DecodeError::LengthOutOfRange { declared: payload.len() as u32, skip: consumed });
    }
    Ok((RawFrame { kind: ProtocolId::Bluetooth, payload }, consumed))
}
