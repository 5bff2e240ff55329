use super::{check_payload_len, DecodeError, EncodeError, RawFrame, MAX_PAYLOAD};
use crate::model::ProtocolId;

const PREFIX_LEN: usize = 4;

pub fn wifi_encode(payload: &[u8]) -> Result<Vec<u8>, EncodeError> {
    check_payload_len(payload.len())?;
    let mut out = Vec::with_capacity(PREFIX_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn wifi_decode(stream: &[u8]) -> Result<(RawFrame, usize), DecodeError> {
    let Some(prefix) = stream.get(..PREFIX_LEN) else {
        return Err(DecodeError::NeedMoreData);
    };
    let declared = u32::from_be_bytes([prefix[0], prefix[1], prefix[2], prefix[3]]);
    if declared == 0 || declared as usize > MAX_PAYLOAD {
        return Err(DecodeError::LengthOutOfRange { declared, skip: PREFIX_LEN });
    }
    let total = PREFIX_LEN + declared as usize;
    let Some(payload) = stream.get(PREFIX_LEN..total) else {
        return Err(DecodeError::NeedMoreData);
    };
    let frame = RawFrame { kind: ProtocolId::Wifi, payload: payload.to_vec() };
    Ok((frame, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_examples() {
        assert_eq!(wifi_encode(b"{}").unwrap(), [0x00, 0x00, 0x00, 0x02, 0x7B, 0x7D]);
        assert_eq!(wifi_encode(&[0xAA]).unwrap(), [0x00, 0x00, 0x00, 0x01, 0xAA]);
        assert_eq!(wifi_encode(&[]), Err(EncodeError::EmptyPayload));
        assert_eq!(wifi_encode(&vec![1; 65_536]), Err(EncodeError::PayloadTooLarge(65_536)));
    }

    #[test]
    fn decode_examples() {
        let wire = wifi_encode(b"hello").unwrap();
        let (frame, used) = wifi_decode(&wire).unwrap();
        assert_eq!((frame.payload(), used), (&b"hello"[..], 9));
        assert_eq!(wifi_decode(&wire[..2]), Err(DecodeError::NeedMoreData));
        assert_eq!(wifi_decode(&wire[..6]), Err(DecodeError::NeedMoreData));
        assert_eq!(
            wifi_decode(&[0, 0, 0, 0, 1]),
            Err(DecodeError::LengthOutOfRange { declared: 0, skip: 4 })
        );
        assert_eq!(
            wifi_decode(&[0, 1, 0, 0]),
            Err(DecodeError::LengthOutOfRange { declared: 65_536, skip: 4 })
        );
    }

    #[test]
    fn trailing_bytes_are_left_alone() {
        let mut wire = wifi_encode(&[7, 8]).unwrap();
        wire.extend_from_slice(&[0, 0]);
        let (_, used) = wifi_decode(&wire).unwrap();
        assert_eq!(used, 6);
    }
}
