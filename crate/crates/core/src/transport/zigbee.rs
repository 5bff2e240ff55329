//! XBee API-mode style packets: `0x7E`, u16 BE length, payload, checksum.

use super::{check_payload_len, DecodeError, EncodeError, RawFrame};
use crate::model::ProtocolId;

pub const START: u8 = 0x7E;
const HEADER_LEN: usize = 3;

/// `0xFF - (sum of payload bytes mod 256)`.
pub fn zb_checksum(payload: &[u8]) -> u8 {
    let sum = payload.iter().fold(0u8, |acc, &b| acc.wrapping_add(b));
    0xFF - sum
}

pub fn zb_encode(payload: &[u8]) -> Result<Vec<u8>, EncodeError> {
    check_payload_len(payload.len())?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 1);
    out.push(START);
    out.extend_from_slice(&(payload.len() as u16).to_be_bytes());
    out.extend_from_slice(payload);
    out.push(zb_checksum(payload));
    Ok(out)
}

/// Bytes ahead of the first start delimiter are skipped. A bad frame is
/// reported with `skip` pointing just past its start byte so scanning can
/// resume from there.
pub fn zb_decode(stream: &[u8]) -> Result<(RawFrame, usize), DecodeError> {
    let start = stream.iter().position(|&b| b == START).ok_or(DecodeError::NeedMoreData)?;
    let frame = &stream[start..];
    if frame.len() < HEADER_LEN {
        return Err(DecodeError::NeedMoreData);
    }
    let declared = u16::from_be_bytes([frame[1], frame[2]]);
    if declared == 0 {
        return Err(DecodeError::LengthOutOfRange { declared: 0, skip: start + 1 });
    }
    let len = declared as usize;
    let total = HEADER_LEN + len + 1;
    if frame.len() < total {
        return Err(DecodeError::NeedMoreData);
    }
    let payload = &frame[HEADER_LEN..HEADER_LEN + len];
    let got = frame[HEADER_LEN + len];
    let expected = zb_checksum(payload);
    if got != expected {
        return Err(DecodeError::ChecksumMismatch { expected, got, skip: start + 1 });
    }
    Ok((RawFrame { kind: ProtocolId::Zigbee, payload: payload.to_vec() }, start + total))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_examples() {
        assert_eq!(zb_encode(&[0x10, 0x01]).unwrap(), [0x7E, 0x00, 0x02, 0x10, 0x01, 0xEE]);
        assert_eq!(zb_encode(&[0xFF]).unwrap(), [0x7E, 0x00, 0x01, 0xFF, 0x00]);
        assert_eq!(zb_encode(&[]), Err(EncodeError::EmptyPayload));
    }

    #[test]
    fn known_xbee_frame_validates() {
        // AT command "NI" query from the XBee reference manual.
        let wire = [0x7E, 0x00, 0x04, 0x08, 0x01, 0x4E, 0x49, 0x5F];
        let (frame, used) = zb_decode(&wire).unwrap();
        assert_eq!(frame.payload(), [0x08, 0x01, 0x4E, 0x49]);
        assert_eq!(used, 8);
    }

    #[test]
    fn single_byte_corruption_is_always_detected() {
        let payload: Vec<u8> = (0u8..16).map(|i| i.wrapping_mul(37).wrapping_add(5)).collect();
        let wire = zb_encode(&payload).unwrap();
        for pos in HEADER_LEN..HEADER_LEN + payload.len() {
            for v in 0..=255u8 {
                if v == wire[pos] {
                    continue;
                }
                let mut bad = wire.clone();
                bad[pos] = v;
                assert!(matches!(
                    zb_decode(&bad),
                    Err(DecodeError::ChecksumMismatch { skip: 1, .. })
                ));
            }
        }
    }

    #[test]
    fn garbage_before_start_is_skipped() {
        let mut wire = vec![0x00, 0x13, 0xFF];
        wire.extend(zb_encode(b"abc").unwrap());
        let (frame, used) = zb_decode(&wire).unwrap();
        assert_eq!(frame.payload(), b"abc");
        assert_eq!(used, wire.len());
    }

    #[test]
    fn partial_and_empty_streams_need_more() {
        let wire = zb_encode(b"abc").unwrap();
        for cut in 0..wire.len() {
            assert_eq!(zb_decode(&wire[..cut]), Err(DecodeError::NeedMoreData));
        }
        assert_eq!(zb_decode(&[1, 2, 3]), Err(DecodeError::NeedMoreData));
    }

    #[test]
    fn zero_length_header_is_rejected() {
        assert_eq!(
            zb_decode(&[0x00, 0x7E, 0x00, 0x00, 0xFF]),
            Err(DecodeError::LengthOutOfRange { declared: 0, skip: 2 })
        );
    }
}
