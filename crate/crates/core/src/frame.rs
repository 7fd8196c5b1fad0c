//! Wire frames.
//!
//! Every message on a link is one frame. Layout, little-endian throughout:
//!
//! ```text
//! magic  u32   0x4D535452
//! kind   u8    0 = HELLO, 1 = DATA, 2 = TERM
//! stream u16   stream id
//! rank   u32   sending endpoint's global rank
//! seq    u64   per (stream, link) counter, DATA/TERM only
//! len    u32   payload byte count
//! payload      len bytes
//! ```
//!
//! HELLO payloads carry `role_flags (u8) | declared_rank (u32) |
//! schema_digest (u64)`; TERM payloads are empty.

use crate::error::{Error, Result};
use crate::schema::MAX_ELEMENT_SIZE;

pub const FRAME_MAGIC: u32 = 0x4D53_5452;
pub const HEADER_LEN: usize = 23;
pub const HELLO_PAYLOAD_LEN: usize = 13;

/// What a frame carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Hello = 0,
    Data = 1,
    Term = 2,
}

impl FrameKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(FrameKind::Hello),
            1 => Ok(FrameKind::Data),
            2 => Ok(FrameKind::Term),
            other => Err(Error::Framing(format!("unknown frame kind {other}"))),
        }
    }
}

/// One wire unit: header plus payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub stream_id: u16,
    pub sender_rank: u32,
    pub seq: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn data(stream_id: u16, sender_rank: u32, seq: u64, payload: Vec<u8>) -> Self {
        Frame {
            kind: FrameKind::Data,
            stream_id,
            sender_rank,
            seq,
            payload,
        }
    }

    pub fn term(stream_id: u16, sender_rank: u32, seq: u64) -> Self {
        Frame {
            kind: FrameKind::Term,
            stream_id,
            sender_rank,
            seq,
            payload: Vec::new(),
        }
    }

    pub fn hello(stream_id: u16, sender_rank: u32, payload: HelloPayload) -> Self {
        Frame {
            kind: FrameKind::Hello,
            stream_id,
            sender_rank,
            seq: 0,
            payload: payload.encode().to_vec(),
        }
    }

    /// Serializes header and payload into one buffer.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&FRAME_MAGIC.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.stream_id.to_le_bytes());
        out.extend_from_slice(&self.sender_rank.to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses one complete frame. The buffer must contain exactly the frame.
    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Framing(format!(
                "short header: {} of {HEADER_LEN} bytes",
                bytes.len()
            )));
        }
        let (kind, stream_id, sender_rank, seq, payload_len) =
            parse_header(bytes[..HEADER_LEN].try_into().unwrap())?;
        if bytes.len() != HEADER_LEN + payload_len {
            return Err(Error::Framing(format!(
                "payload length mismatch: header says {payload_len}, buffer carries {}",
                bytes.len() - HEADER_LEN
            )));
        }
        Ok(Frame {
            kind,
            stream_id,
            sender_rank,
            seq,
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }
}

/// Validates a header and returns its fields. Used by stream readers to
/// learn the payload length before the payload arrives.
pub fn parse_header(header: &[u8; HEADER_LEN]) -> Result<(FrameKind, u16, u32, u64, usize)> {
    let magic = u32::from_le_bytes(header[0..4].try_into().unwrap());
    if magic != FRAME_MAGIC {
        return Err(Error::Framing(format!("bad magic {magic:#010x}")));
    }
    let kind = FrameKind::from_byte(header[4])?;
    let stream_id = u16::from_le_bytes(header[5..7].try_into().unwrap());
    let sender_rank = u32::from_le_bytes(header[7..11].try_into().unwrap());
    let seq = u64::from_le_bytes(header[11..19].try_into().unwrap());
    let payload_len = u32::from_le_bytes(header[19..23].try_into().unwrap()) as usize;
    if payload_len > MAX_ELEMENT_SIZE {
        return Err(Error::Framing(format!(
            "payload length {payload_len} exceeds the {MAX_ELEMENT_SIZE}-byte cap"
        )));
    }
    if kind == FrameKind::Term && payload_len != 0 {
        return Err(Error::Framing(format!(
            "TERM frame with nonzero payload length {payload_len}"
        )));
    }
    Ok((kind, stream_id, sender_rank, seq, payload_len))
}

/// HELLO payload: who is on the other end and what it attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HelloPayload {
    /// bit0 = producer, bit1 = consumer.
    pub role_flags: u8,
    /// Sender's global rank as it believes it.
    pub declared_rank: u32,
    /// Digest of the attached schema; zero during rendezvous.
    pub schema_digest: u64,
}

impl HelloPayload {
    pub fn encode(&self) -> [u8; HELLO_PAYLOAD_LEN] {
        let mut out = [0u8; HELLO_PAYLOAD_LEN];
        out[0] = self.role_flags;
        out[1..5].copy_from_slice(&self.declared_rank.to_le_bytes());
        out[5..13].copy_from_slice(&self.schema_digest.to_le_bytes());
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        if payload.len() != HELLO_PAYLOAD_LEN {
            return Err(Error::Framing(format!(
                "HELLO payload is {} bytes, expected {HELLO_PAYLOAD_LEN}",
                payload.len()
            )));
        }
        Ok(HelloPayload {
            role_flags: payload[0],
            declared_rank: u32::from_le_bytes(payload[1..5].try_into().unwrap()),
            schema_digest: u64::from_le_bytes(payload[5..13].try_into().unwrap()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let f = Frame::data(0x0201, 0x0403_0201, 0x0807_0605_0403_0201, vec![0xAA; 3]);
        let bytes = f.encode();
        assert_eq!(&bytes[0..4], &[0x52, 0x54, 0x53, 0x4D]); // 0x4D535452 LE
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..7], &[0x01, 0x02]);
        assert_eq!(&bytes[7..11], &[0x01, 0x02, 0x03, 0x04]);
        assert_eq!(&bytes[11..19], &[0x01, 0x02, 0x03, 0x04, 0x05, 0x06, 0x07, 0x08]);
        assert_eq!(&bytes[19..23], &[3, 0, 0, 0]);
        assert_eq!(&bytes[23..], &[0xAA, 0xAA, 0xAA]);
    }

    #[test]
    fn roundtrip_all_kinds() {
        let hello = Frame::hello(
            2,
            7,
            HelloPayload {
                role_flags: 0b01,
                declared_rank: 7,
                schema_digest: 0xDEAD_BEEF,
            },
        );
        let data = Frame::data(2, 7, 41, vec![1, 2, 3, 4]);
        let term = Frame::term(2, 7, 42);
        for f in [hello, data, term] {
            assert_eq!(Frame::decode(&f.encode()).unwrap(), f);
        }
    }

    #[test]
    fn corrupt_magic_is_framing_error() {
        let mut bytes = Frame::term(0, 0, 0).encode();
        bytes[0] ^= 0xFF;
        assert!(matches!(Frame::decode(&bytes), Err(Error::Framing(_))));
    }

    #[test]
    fn short_header_is_framing_error() {
        let bytes = Frame::term(0, 0, 0).encode();
        assert!(matches!(Frame::decode(&bytes[..10]), Err(Error::Framing(_))));
    }

    #[test]
    fn unknown_kind_is_framing_error() {
        let mut bytes = Frame::term(0, 0, 0).encode();
        bytes[4] = 9;
        assert!(matches!(Frame::decode(&bytes), Err(Error::Framing(_))));
    }

    #[test]
    fn term_with_payload_is_framing_error() {
        let mut f = Frame::term(0, 0, 0);
        f.payload = vec![1];
        assert!(matches!(Frame::decode(&f.encode()), Err(Error::Framing(_))));
    }

    #[test]
    fn oversized_payload_length_is_rejected() {
        let mut bytes = Frame::data(0, 0, 0, vec![]).encode();
        bytes[19..23].copy_from_slice(&(MAX_ELEMENT_SIZE as u32 + 1).to_le_bytes());
        assert!(matches!(Frame::decode(&bytes), Err(Error::Framing(_))));
    }

    #[test]
    fn hello_payload_roundtrip_and_length_check() {
        let p = HelloPayload {
            role_flags: 0b11,
            declared_rank: 12,
            schema_digest: 42,
        };
        assert_eq!(HelloPayload::decode(&p.encode()).unwrap(), p);
        assert!(matches!(HelloPayload::decode(&[0u8; 12]), Err(Error::Framing(_))));
    }

    proptest! {
        /// Serialize-then-parse is the identity on every frame kind for
        /// payload lengths up to 64 KiB.
        #[test]
        fn roundtrip_identity(
            kind in 0u8..3,
            stream_id: u16,
            rank: u32,
            seq: u64,
            len in 0usize..=65_536,
            fill: u8,
        ) {
            let frame = match kind {
                0 => Frame {
                    kind: FrameKind::Hello,
                    stream_id,
                    sender_rank: rank,
                    seq,
                    payload: vec![fill; len],
                },
                1 => Frame::data(stream_id, rank, seq, vec![fill; len]),
                _ => Frame::term(stream_id, rank, seq),
            };
            prop_assert_eq!(Frame::decode(&frame.encode()).unwrap(), frame);
        }
    }
}
