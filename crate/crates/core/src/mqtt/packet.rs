//! MQTT 3.1.1 control packets, restricted to QoS 0/1 and the nine packet
//! types the gateway needs.

use thiserror::Error;

use super::topic::{valid_topic_filter, valid_topic_name};

pub const MAX_REMAINING_LENGTH: usize = 268_435_455;
const PROTOCOL_NAME: &[u8] = b"MQTT";
const PROTOCOL_LEVEL: u8 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PacketError {
    #[error("incomplete packet")]
    NeedMoreData,
    #[error("remaining length {0} exceeds 268435455")]
    ValueTooLarge(usize),
    #[error("remaining length uses more than four bytes")]
    MalformedVarint,
    #[error("unsupported packet type {packet_type} (flags {flags:#x})")]
    UnsupportedPacketType { packet_type: u8, flags: u8 },
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
}

fn violation<T>(reason: impl Into<String>) -> Result<T, PacketError> {
    Err(PacketError::ProtocolViolation(reason.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QoS {
    AtMostOnce = 0,
    AtLeastOnce = 1,
}

impl QoS {
    pub fn from_u8(v: u8) -> Option<QoS> {
        match v {
            0 => Some(QoS::AtMostOnce),
            1 => Some(QoS::AtLeastOnce),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectReturnCode {
    Accepted = 0,
    UnacceptableProtocolVersion = 1,
    IdentifierRejected = 2,
    ServerUnavailable = 3,
    BadUsernameOrPassword = 4,
    NotAuthorized = 5,
}

impl ConnectReturnCode {
    fn from_u8(v: u8) -> Option<Self> {
        use ConnectReturnCode::*;
        Some(match v {
            0 => Accepted,
            1 => UnacceptableProtocolVersion,
            2 => IdentifierRejected,
            3 => ServerUnavailable,
            4 => BadUsernameOrPassword,
            5 => NotAuthorized,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub topic: String,
    pub payload: Vec<u8>,
    pub qos: QoS,
    /// Present iff `qos` is at-least-once.
    pub packet_id: Option<u16>,
    pub retain: bool,
    pub dup: bool,
}

impl Publish {
    pub fn new(topic: impl Into<String>, payload: impl Into<Vec<u8>>, qos: QoS) -> Self {
        Self {
            topic: topic.into(),
            payload: payload.into(),
            qos,
            packet_id: None,
            retain: false,
            dup: false,
        }
    }

    pub fn validate(&self) -> Result<(), PacketError> {
        if !valid_topic_name(&self.topic) {
            return violation(format!("invalid publish topic {:?}", self.topic));
        }
        match (self.qos, self.packet_id) {
            (QoS::AtMostOnce, None) if !self.dup => Ok(()),
            (QoS::AtMostOnce, None) => violation("dup flag on a QoS 0 publish"),
            (QoS::AtMostOnce, Some(_)) => violation("QoS 0 publish with a packet id"),
            (QoS::AtLeastOnce, Some(id)) if id != 0 => Ok(()),
            (QoS::AtLeastOnce, _) => violation("QoS 1 publish needs a nonzero packet id"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubackCode {
    Granted(QoS),
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MqttPacket {
    Connect { client_id: String, keep_alive: u16 },
    Connack { session_present: bool, code: ConnectReturnCode },
    Publish(Publish),
    Puback { packet_id: u16 },
    Subscribe { packet_id: u16, filters: Vec<(String, QoS)> },
    Suback { packet_id: u16, granted: Vec<SubackCode> },
    Pingreq,
    Pingresp,
    Disconnect,
}

pub fn encode_remaining_length(n: usize, out: &mut Vec<u8>) -> Result<(), PacketError> {
    if n > MAX_REMAINING_LENGTH {
        return Err(PacketError::ValueTooLarge(n));
    }
    let mut x = n;
    loop {
        let mut byte = (x % 128) as u8;
        x /= 128;
        if x > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if x == 0 {
            return Ok(());
        }
    }
}

/// Returns `(value, bytes consumed)`.
pub fn decode_remaining_length(b: &[u8]) -> Result<(usize, usize), PacketError> {
    let mut value = 0usize;
    let mut multiplier = 1usize;
    for i in 0..4 {
        let Some(&byte) = b.get(i) else {
            return Err(PacketError::NeedMoreData);
        };
        value += (byte & 0x7F) as usize * multiplier;
        if byte & 0x80 == 0 {
            return Ok((value, i + 1));
        }
        multiplier *= 128;
    }
    Err(PacketError::MalformedVarint)
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), PacketError> {
    let len = u16::try_from(s.len())
        .map_err(|_| PacketError::ProtocolViolation("string longer than 65535 bytes".into()))?;
    put_u16(out, len);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

impl MqttPacket {
    fn header_byte(&self) -> u8 {
        match self {
            MqttPacket::Connect { .. } => 0x10,
            MqttPacket::Connack { .. } => 0x20,
            MqttPacket::Publish(p) => {
                0x30 | (u8::from(p.dup) << 3) | ((p.qos as u8) << 1) | u8::from(p.retain)
            }
            MqttPacket::Puback { .. } => 0x40,
            MqttPacket::Subscribe { .. } => 0x82,
            MqttPacket::Suback { .. } => 0x90,
            MqttPacket::Pingreq => 0xC0,
            MqttPacket::Pingresp => 0xD0,
            MqttPacket::Disconnect => 0xE0,
        }
    }

    /// Appends the wire encoding to `out`.
    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), PacketError> {
        let mut body = Vec::new();
        match self {
            MqttPacket::Connect { client_id, keep_alive } => {
                put_str(&mut body, "MQTT")?;
                body.push(PROTOCOL_LEVEL);
                body.push(0x02); // clean session
                put_u16(&mut body, *keep_alive);
                put_str(&mut body, client_id)?;
            }
            MqttPacket::Connack { session_present, code } => {
                body.push(u8::from(*session_present));
                body.push(*code as u8);
            }
            MqttPacket::Publish(p) => {
                p.validate()?;
                put_str(&mut body, &p.topic)?;
                if let Some(id) = p.packet_id {
                    put_u16(&mut body, id);
                }
                body.extend_from_slice(&p.payload);
            }
            MqttPacket::Puback { packet_id } => put_u16(&mut body, *packet_id),
            MqttPacket::Subscribe { packet_id, filters } => {
                if *packet_id == 0 || filters.is_empty() {
                    return violation("subscribe needs a packet id and at least one filter");
                }
                put_u16(&mut body, *packet_id);
                for (filter, qos) in filters {
                    if !valid_topic_filter(filter) {
                        return violation(format!("invalid topic filter {filter:?}"));
                    }
                    put_str(&mut body, filter)?;
                    body.push(*qos as u8);
                }
            }
            MqttPacket::Suback { packet_id, granted } => {
                put_u16(&mut body, *packet_id);
                body.extend(granted.iter().map(|g| match g {
                    SubackCode::Granted(q) => *q as u8,
                    SubackCode::Failure => 0x80,
                }));
            }
            MqttPacket::Pingreq | MqttPacket::Pingresp | MqttPacket::Disconnect => {}
        }
        out.push(self.header_byte());
        encode_remaining_length(body.len(), out)?;
        out.extend_from_slice(&body);
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, PacketError> {
        let mut out = Vec::new();
        self.encode_into(&mut out)?;
        Ok(out)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8, PacketError> {
        let v = *self.buf.get(self.pos).ok_or_else(truncated)?;
        self.pos += 1;
        Ok(v)
    }

    fn u16(&mut self) -> Result<u16, PacketError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], PacketError> {
        let s = self.buf.get(self.pos..self.pos + n).ok_or_else(truncated)?;
        self.pos += n;
        Ok(s)
    }

    fn string(&mut self) -> Result<String, PacketError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec())
            .map_err(|_| PacketError::ProtocolViolation("string is not UTF-8".into()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn finish(&self) -> Result<(), PacketError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            violation("trailing bytes in packet")
        }
    }
}

fn truncated() -> PacketError {
    PacketError::ProtocolViolation("packet body shorter than its fields".into())
}

/// Decodes one packet from the front of `stream`. On `NeedMoreData` nothing
/// is consumed; the caller keeps the bytes and retries with more.
pub fn decode_packet(stream: &[u8]) -> Result<(MqttPacket, usize), PacketError> {
    let Some(&first) = stream.first() else {
        return Err(PacketError::NeedMoreData);
    };
    let (len, len_bytes) = decode_remaining_length(&stream[1..])?;
    let header = 1 + len_bytes;
    let Some(body) = stream.get(header..header + len) else {
        return Err(PacketError::NeedMoreData);
    };
    let packet_type = first >> 4;
    let flags = first & 0x0F;
    let unsupported = PacketError::UnsupportedPacketType { packet_type, flags };
    let mut r = Reader { buf: body, pos: 0 };

    let expect_flags = |want: u8| -> Result<(), PacketError> {
        if flags == want {
            Ok(())
        } else {
            violation(format!("reserved flags {flags:#x} on packet type {packet_type}"))
        }
    };

    let packet = match packet_type {
        1 => {
            expect_flags(0)?;
            if r.string()?.as_bytes() != PROTOCOL_NAME {
                return violation("protocol name is not MQTT");
            }
            let level = r.u8()?;
            if level != PROTOCOL_LEVEL {
                return violation(format!("protocol level {level}, only 4 is supported"));
            }
            let connect_flags = r.u8()?;
            if connect_flags & 0x01 != 0 {
                return violation("reserved connect flag set");
            }
            if connect_flags & 0xFC != 0 {
                // will, username or password
                return Err(unsupported);
            }
            let keep_alive = r.u16()?;
            let client_id = r.string()?;
            MqttPacket::Connect { client_id, keep_alive }
        }
        2 => {
            expect_flags(0)?;
            let ack_flags = r.u8()?;
            if ack_flags & 0xFE != 0 {
                return violation("reserved connack flags");
            }
            let code = ConnectReturnCode::from_u8(r.u8()?)
                .ok_or_else(|| PacketError::ProtocolViolation("unknown connack code".into()))?;
            MqttPacket::Connack { session_present: ack_flags & 1 == 1, code }
        }
        3 => {
            let qos = match (flags >> 1) & 0x03 {
                0 => QoS::AtMostOnce,
                1 => QoS::AtLeastOnce,
                2 => return Err(unsupported),
                _ => return violation("publish with both QoS bits set"),
            };
            let topic = r.string()?;
            let packet_id = match qos {
                QoS::AtMostOnce => None,
                QoS::AtLeastOnce => Some(r.u16()?),
            };
            let p = Publish {
                topic,
                payload: r.rest().to_vec(),
                qos,
                packet_id,
                retain: flags & 0x01 != 0,
                dup: flags & 0x08 != 0,
            };
            p.validate()?;
            MqttPacket::Publish(p)
        }
        4 => {
            expect_flags(0)?;
            MqttPacket::Puback { packet_id: r.u16()? }
        }
        8 => {
            expect_flags(0x02)?;
            let packet_id = r.u16()?;
            let mut filters = Vec::new();
            while r.pos < body.len() {
                let filter = r.string()?;
                if !valid_topic_filter(&filter) {
                    return violation(format!("invalid topic filter {filter:?}"));
                }
                let requested = r.u8()?;
                let qos = match requested {
                    0 | 1 => QoS::from_u8(requested).unwrap(),
                    2 => return Err(unsupported),
                    _ => return violation("reserved bits in requested QoS"),
                };
                filters.push((filter, qos));
            }
            if filters.is_empty() {
                return violation("subscribe without filters");
            }
            MqttPacket::Subscribe { packet_id, filters }
        }
        9 => {
            expect_flags(0)?;
            let packet_id = r.u16()?;
            let granted = r
                .rest()
                .iter()
                .map(|&c| match c {
                    0 => Ok(SubackCode::Granted(QoS::AtMostOnce)),
                    1 => Ok(SubackCode::Granted(QoS::AtLeastOnce)),
                    0x80 => Ok(SubackCode::Failure),
                    _ => Err(unsupported.clone()),
                })
                .collect::<Result<Vec<_>, _>>()?;
            MqttPacket::Suback { packet_id, granted }
        }
        12 => {
            expect_flags(0)?;
            MqttPacket::Pingreq
        }
        13 => {
            expect_flags(0)?;
            MqttPacket::Pingresp
        }
        14 => {
            expect_flags(0)?;
            MqttPacket::Disconnect
        }
        // PUBREC, PUBREL, PUBCOMP, UNSUBSCRIBE, UNSUBACK, reserved
        _ => return Err(unsupported),
    };
    r.finish()?;
    Ok((packet, header + len))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn varint(n: usize) -> Vec<u8> {
        let mut out = Vec::new();
        encode_remaining_length(n, &mut out).unwrap();
        out
    }

    #[test]
    fn varint_examples() {
        assert_eq!(varint(0), [0x00]);
        assert_eq!(varint(127), [0x7F]);
        assert_eq!(varint(128), [0x80, 0x01]);
        assert_eq!(varint(321), [0xC1, 0x02]);
        assert_eq!(varint(16_383), [0xFF, 0x7F]);
        assert_eq!(varint(268_435_455), [0xFF, 0xFF, 0xFF, 0x7F]);
        assert_eq!(
            encode_remaining_length(268_435_456, &mut Vec::new()),
            Err(PacketError::ValueTooLarge(268_435_456))
        );
        assert_eq!(decode_remaining_length(&[0xFF, 0xFF, 0xFF, 0xFF, 0x01]), Err(PacketError::MalformedVarint));
        assert_eq!(decode_remaining_length(&[0x80]), Err(PacketError::NeedMoreData));
    }

    #[test]
    fn fixed_encodings() {
        assert_eq!(MqttPacket::Pingreq.encode().unwrap(), [0xC0, 0x00]);
        assert_eq!(MqttPacket::Pingresp.encode().unwrap(), [0xD0, 0x00]);
        assert_eq!(MqttPacket::Disconnect.encode().unwrap(), [0xE0, 0x00]);
        assert_eq!(MqttPacket::Puback { packet_id: 0x1234 }.encode().unwrap(), [0x40, 0x02, 0x12, 0x34]);
        assert_eq!(
            MqttPacket::Connect { client_id: "gw".into(), keep_alive: 60 }.encode().unwrap(),
            [0x10, 0x0E, 0x00, 0x04, b'M', b'Q', b'T', b'T', 0x04, 0x02, 0x00, 0x3C, 0x00, 0x02, b'g', b'w']
        );
        let mut p = Publish::new("a/b", b"hi".to_vec(), QoS::AtLeastOnce);
        p.packet_id = Some(10);
        p.retain = true;
        assert_eq!(
            MqttPacket::Publish(p).encode().unwrap(),
            [0x33, 0x09, 0x00, 0x03, b'a', b'/', b'b', 0x00, 0x0A, b'h', b'i']
        );
        assert_eq!(
            MqttPacket::Suback {
                packet_id: 1,
                granted: vec![SubackCode::Granted(QoS::AtLeastOnce), SubackCode::Failure]
            }
            .encode()
            .unwrap(),
            [0x90, 0x04, 0x00, 0x01, 0x01, 0x80]
        );
    }

    #[test]
    fn qos2_is_outside_the_subset() {
        // PUBLISH with QoS bits = 2
        let wire = [0x34, 0x07, 0x00, 0x01, b't', 0x00, 0x01, b'x', b'y'];
        assert!(matches!(decode_packet(&wire), Err(PacketError::UnsupportedPacketType { packet_type: 3, .. })));
        // PUBREC
        assert!(matches!(
            decode_packet(&[0x50, 0x02, 0x00, 0x01]),
            Err(PacketError::UnsupportedPacketType { packet_type: 5, .. })
        ));
    }

    #[test]
    fn malformed_packets_are_violations() {
        // publish topic with wildcard
        let wire = [0x30, 0x03, 0x00, 0x01, b'#'];
        assert!(matches!(decode_packet(&wire), Err(PacketError::ProtocolViolation(_))));
        // subscribe with wrong reserved flags
        let wire = [0x80, 0x06, 0x00, 0x01, 0x00, 0x01, b'a', 0x00];
        assert!(matches!(decode_packet(&wire), Err(PacketError::ProtocolViolation(_))));
        // connect with protocol level 5
        let wire = [0x10, 0x0C, 0x00, 0x04, b'M', b'Q', b'T', b'T', 0x05, 0x02, 0x00, 0x3C, 0x00, 0x00];
        assert!(matches!(decode_packet(&wire), Err(PacketError::ProtocolViolation(_))));
        // pingreq with a body
        assert!(matches!(decode_packet(&[0xC0, 0x01, 0x00]), Err(PacketError::ProtocolViolation(_))));
        // qos 1 publish without room for the packet id
        assert!(matches!(decode_packet(&[0x32, 0x03, 0x00, 0x01, b'a']), Err(PacketError::ProtocolViolation(_))));
    }

    #[test]
    fn partial_input_consumes_nothing() {
        let wire = MqttPacket::Publish(Publish::new("x/y", vec![1; 300], QoS::AtMostOnce)).encode().unwrap();
        for cut in 0..wire.len() {
            assert_eq!(decode_packet(&wire[..cut]), Err(PacketError::NeedMoreData));
        }
        let (_, used) = decode_packet(&wire).unwrap();
        assert_eq!(used, wire.len());
    }

    #[test]
    fn encode_rejects_invalid_publish() {
        let no_id = Publish::new("a", vec![], QoS::AtLeastOnce);
        assert!(MqttPacket::Publish(no_id).encode().is_err());
        let wildcard = Publish::new("a/+", vec![], QoS::AtMostOnce);
        assert!(MqttPacket::Publish(wildcard).encode().is_err());
        assert!(MqttPacket::Subscribe { packet_id: 1, filters: vec![("a/#/b".into(), QoS::AtMostOnce)] }
            .encode()
            .is_err());
    }
}
