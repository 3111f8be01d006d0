//! Authenticated frame layout.
//!
//! ```text
//! magic "QKD1" | type u8 | session u64 | sequence u64 | length u32 | payload | tag [16]
//! ```
//! Integers are little-endian. The tag covers everything after the magic
//! and before the tag.

use thiserror::Error;

use super::mac::{mac_tag, tags_equal};

pub const MAGIC: [u8; 4] = *b"QKD1";
pub const HEADER_LEN: usize = 4 + 1 + 8 + 8 + 4;
pub const TAG_LEN: usize = 16;
pub const MAX_PAYLOAD: usize = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("payload of {0} bytes exceeds the 2^24 byte limit")]
    PayloadTooLarge(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("frame truncated: {got} of {need} bytes")]
    Truncated { got: usize, need: usize },
    #[error("authentication tag mismatch on sequence {0}")]
    TagMismatch(u64),
    #[error("sequence {got} does not advance past {last}")]
    SequenceRegression { got: u64, last: u64 },
    #[error("sequence {got} skips ahead of expected {expected}")]
    SequenceGap { got: u64, expected: u64 },
    #[error("session {got:#x} where {expected:#x} was expected")]
    WrongSession { got: u64, expected: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub session: u64,
    pub sequence: u64,
    pub payload: Vec<u8>,
}

/// Per-frame key material: the session hash key and a fresh pad.
#[derive(Debug, Clone, Copy)]
pub struct FrameKey<'a> {
    pub hash_key: u128,
    pub pad: &'a [u8; 16],
}

pub fn encode_frame(frame: &Frame, key: FrameKey<'_>) -> Result<Vec<u8>, FrameError> {
    let n = frame.payload.len();
    if n > MAX_PAYLOAD {
        return Err(FrameError::PayloadTooLarge(n));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + n + TAG_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(frame.msg_type);
    out.extend_from_slice(&frame.session.to_le_bytes());
    out.extend_from_slice(&frame.sequence.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&frame.payload);
    let tag = mac_tag(&out[4..], key.hash_key, key.pad);
    out.extend_from_slice(&tag);
    Ok(out)
}

/// Parsed header fields, before authentication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub msg_type: u8,
    pub session: u64,
    pub sequence: u64,
    pub length: usize,
}

pub fn parse_header(bytes: &[u8]) -> Result<Header, FrameError> {
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::Truncated {
            got: bytes.len(),
            need: HEADER_LEN,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    let length = u32::from_le_bytes(bytes[21..25].try_into().unwrap()) as usize;
    if length > MAX_PAYLOAD {
        return Err(FrameError::PayloadTooLarge(length));
    }
    Ok(Header {
        msg_type: bytes[4],
        session: u64::from_le_bytes(bytes[5..13].try_into().unwrap()),
        sequence: u64::from_le_bytes(bytes[13..21].try_into().unwrap()),
        length,
    })
}

/// Parses and authenticates one frame. `last_seq` is the sequence of the
/// previous accepted frame in this direction, if any; the next one must
/// follow it directly.
pub fn decode_frame(bytes: &[u8], key: FrameKey<'_>, last_seq: Option<u64>) -> Result<Frame, FrameError> {
    let h = parse_header(bytes)?;
    let need = HEADER_LEN + h.length + TAG_LEN;
    if bytes.len() < need {
        return Err(FrameError::Truncated { got: bytes.len(), need });
    }
    let body = &bytes[4..HEADER_LEN + h.length];
    let tag: [u8; 16] = bytes[HEADER_LEN + h.length..need].try_into().unwrap();
    if !tags_equal(&mac_tag(body, key.hash_key, key.pad), &tag) {
        return Err(FrameError::TagMismatch(h.sequence));
    }
    if let Some(last) = last_seq {
        if h.sequence <= last {
            return Err(FrameError::SequenceRegression { got: h.sequence, last });
        }
        if h.sequence != last + 1 {
            return Err(FrameError::SequenceGap {
                got: h.sequence,
                expected: last + 1,
            });
        }
    }
    Ok(Frame {
        msg_type: h.msg_type,
        session: h.session,
        sequence: h.sequence,
        payload: bytes[HEADER_LEN..HEADER_LEN + h.length].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, RngCore};

    const PAD: [u8; 16] = [0x5a; 16];

    fn key() -> FrameKey<'static> {
        FrameKey {
            hash_key: 0x0123_4567_89ab_cdef_fedc_ba98_7654_3210,
            pad: &PAD,
        }
    }

    fn frame(payload: Vec<u8>) -> Frame {
        Frame {
            msg_type: 3,
            session: 0xabcdef,
            sequence: 7,
            payload,
        }
    }

    #[test]
    fn empty_payload_is_41_bytes() {
        assert_eq!(encode_frame(&frame(vec![]), key()).unwrap().len(), 41);
    }

    #[test]
    fn oversized_payload_rejected() {
        let f = frame(vec![0; MAX_PAYLOAD + 1]);
        assert_eq!(encode_frame(&f, key()), Err(FrameError::PayloadTooLarge(MAX_PAYLOAD + 1)));
    }

    proptest! {
        #[test]
        fn round_trip(msg_type: u8, session: u64, sequence in 1u64.., payload in proptest::collection::vec(any::<u8>(), 0..300)) {
            let f = Frame { msg_type, session, sequence, payload };
            let bytes = encode_frame(&f, key()).unwrap();
            prop_assert_eq!(decode_frame(&bytes, key(), Some(sequence - 1)).unwrap(), f);
        }
    }

    #[test]
    fn tampering_detected_everywhere() {
        let mut rng = crate::rng::stream(5);
        for _ in 0..10_000 {
            let mut payload = vec![0u8; rng.gen_range(0..64)];
            rng.fill_bytes(&mut payload);
            let bytes = encode_frame(&frame(payload), key()).unwrap();
            let mut bad = bytes.clone();
            // any bit after the magic: header, payload or tag
            let bit = rng.gen_range(32..bytes.len() * 8);
            bad[bit / 8] ^= 1 << (bit % 8);
            let r = decode_frame(&bad, key(), Some(6));
            assert!(
                matches!(r, Err(FrameError::TagMismatch(_)) | Err(FrameError::Truncated { .. }) | Err(FrameError::PayloadTooLarge(_))),
                "{r:?}"
            );
        }
    }

    #[test]
    fn magic_checked() {
        let mut bytes = encode_frame(&frame(vec![1, 2]), key()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_frame(&bytes, key(), None), Err(FrameError::BadMagic(_))));
    }

    #[test]
    fn replay_is_regression() {
        let bytes = encode_frame(&frame(vec![9]), key()).unwrap();
        assert_eq!(
            decode_frame(&bytes, key(), Some(7)),
            Err(FrameError::SequenceRegression { got: 7, last: 7 })
        );
        assert_eq!(
            decode_frame(&bytes, key(), Some(5)),
            Err(FrameError::SequenceGap { got: 7, expected: 6 })
        );
    }

    #[test]
    fn wrong_pad_fails() {
        let bytes = encode_frame(&frame(vec![1]), key()).unwrap();
        let other = [0u8; 16];
        let k = FrameKey { pad: &other, ..key() };
        assert_eq!(decode_frame(&bytes, k, None), Err(FrameError::TagMismatch(7)));
    }
}
