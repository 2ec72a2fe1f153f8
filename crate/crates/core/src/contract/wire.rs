//! Byte-exact transaction bodies understood by the contract.
//!
//! Every payload starts with an 8-byte header of two little-endian `u32`s:
//!
//! | kind     | header word 0     | header word 1     | body                                   |
//! |----------|-------------------|-------------------|----------------------------------------|
//! | register | total_params      | participation lvl | empty                                  |
//! | bid      | round             | entry count `n`   | `n` × (chunk_id: u32 LE, score: f64 LE) |
//! | push     | round             | chunk_id          | binary32 LE chunk payload              |
//! | signal   | round             | 0                 | empty                                  |
//!
//! A bid therefore costs `8 + 12n` bytes, a push `8 + payload` bytes and a
//! signal exactly 8 bytes.

use thiserror::Error;

use crate::ledger::TX_HEADER_BYTES;

pub const BID_ENTRY_BYTES: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("payload of {0} bytes is shorter than the 8-byte header")]
    Truncated(usize),
    #[error("bid declares {declared} entries but carries {actual_bytes} body bytes")]
    BidLength { declared: usize, actual_bytes: usize },
    #[error("unexpected body of {0} bytes")]
    TrailingBytes(usize),
}

fn header(a: u32, b: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(TX_HEADER_BYTES);
    out.extend_from_slice(&a.to_le_bytes());
    out.extend_from_slice(&b.to_le_bytes());
    out
}

fn split_header(payload: &[u8]) -> Result<(u32, u32, &[u8]), WireError> {
    if payload.len() < TX_HEADER_BYTES {
        return Err(WireError::Truncated(payload.len()));
    }
    let a = u32::from_le_bytes(payload[0..4].try_into().expect("4 bytes"));
    let b = u32::from_le_bytes(payload[4..8].try_into().expect("4 bytes"));
    Ok((a, b, &payload[TX_HEADER_BYTES..]))
}

pub fn encode_register(total_params: u32, participation_level: u32) -> Vec<u8> {
    header(total_params, participation_level)
}

pub fn decode_register(payload: &[u8]) -> Result<(u32, u32), WireError> {
    let (a, b, body) = split_header(payload)?;
    if !body.is_empty() {
        return Err(WireError::TrailingBytes(body.len()));
    }
    Ok((a, b))
}

pub fn encode_bid(round: u32, entries: &[(u32, f64)]) -> Vec<u8> {
    let mut out = header(round, entries.len() as u32);
    out.reserve(entries.len() * BID_ENTRY_BYTES);
    for &(chunk_id, score) in entries {
        out.extend_from_slice(&chunk_id.to_le_bytes());
        out.extend_from_slice(&score.to_le_bytes());
    }
    out
}

pub fn decode_bid(payload: &[u8]) -> Result<(u32, Vec<(u32, f64)>), WireError> {
    let (round, count, body) = split_header(payload)?;
    let declared = count as usize;
    if body.len() != declared * BID_ENTRY_BYTES {
        return Err(WireError::BidLength { declared, actual_bytes: body.len() });
    }
    let entries = body
        .chunks_exact(BID_ENTRY_BYTES)
        .map(|e| {
            let chunk = u32::from_le_bytes(e[0..4].try_into().expect("4 bytes"));
            let score = f64::from_le_bytes(e[4..12].try_into().expect("8 bytes"));
            (chunk, score)
        })
        .collect();
    Ok((round, entries))
}

pub fn encode_push(round: u32, chunk_id: u32, chunk_payload: &[u8]) -> Vec<u8> {
    let mut out = header(round, chunk_id);
    out.extend_from_slice(chunk_payload);
    out
}

pub fn decode_push(payload: &[u8]) -> Result<(u32, u32, &[u8]), WireError> {
    split_header(payload)
}

pub fn encode_signal(round: u32) -> Vec<u8> {
    header(round, 0)
}

pub fn decode_signal(payload: &[u8]) -> Result<u32, WireError> {
    let (round, _, body) = split_header(payload)?;
    if !body.is_empty() {
        return Err(WireError::TrailingBytes(body.len()));
    }
    Ok(round)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(encode_bid(3, &[(1, 2.0), (5, 0.5)]).len(), 8 + 24);
        assert_eq!(encode_push(3, 1, &[0; 2048]).len(), 2056);
        assert_eq!(encode_signal(3).len(), 8);
    }

    #[test]
    fn bid_layout_is_byte_exact() {
        let bytes = encode_bid(2, &[(7, 1.0)]);
        assert_eq!(&bytes[0..8], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[7, 0, 0, 0]);
        assert_eq!(&bytes[12..20], &1.0f64.to_le_bytes());
        assert_eq!(decode_bid(&bytes).unwrap(), (2, vec![(7, 1.0)]));
    }

    #[test]
    fn malformed() {
        assert_eq!(decode_bid(&[0; 4]), Err(WireError::Truncated(4)));
        let mut bytes = encode_bid(0, &[(1, 1.0)]);
        bytes.pop();
        assert!(matches!(decode_bid(&bytes), Err(WireError::BidLength { declared: 1, actual_bytes: 11 })));
        assert_eq!(decode_signal(&[0; 9]), Err(WireError::TrailingBytes(1)));
        let bytes = encode_push(4, 9, &[1, 2, 3, 4]);
        let (r, c, body) = decode_push(&bytes).unwrap();
        assert_eq!((r, c, body), (4, 9, &[1u8, 2, 3, 4][..]));
    }
}
