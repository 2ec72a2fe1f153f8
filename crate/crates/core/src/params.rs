//! Flat parameter vectors, the fixed chunk partition every agent shares, and
//! the binary32 little-endian chunk wire format.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bytes used to encode one parameter on the wire.
pub const BYTES_PER_PARAM: usize = 4;

/// Default per-transaction data limit (24 kB).
pub const MAX_TX_PAYLOAD_BYTES: usize = 24_576;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("parameter vector must not be empty")]
    Empty,
    #[error("non-finite parameter {value} at index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("chunk size {chunk_size_bytes} B invalid: must be a multiple of 4 in [4, {max}]")]
    ChunkSize { chunk_size_bytes: usize, max: usize },
    #[error("chunk id {chunk_id} out of range (chunk count {chunk_count})")]
    ChunkIndex { chunk_id: usize, chunk_count: usize },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("malformed chunk payload of {0} bytes")]
    Decode(usize),
}

/// Ordered model parameters. Every value is finite and the vector is never empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f32>);

impl ParamVector {
    pub fn new(values: Vec<f32>) -> Result<Self, ParamError> {
        if values.is_empty() {
            return Err(ParamError::Empty);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(ParamError::NonFinite { index, value });
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Result<Self, ParamError> {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    /// Mutable access for in-place training. Callers must restore finiteness
    /// (see [`ParamVector::check_finite`]) before the vector leaves their hands.
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn check_finite(&self) -> Result<(), ParamError> {
        match self.0.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            Some((index, &value)) => Err(ParamError::NonFinite { index, value }),
            None => Ok(()),
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.0.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Fixed contiguous partition of `[0, total_params)` into chunks that each
/// serialize to at most `chunk_size_bytes`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SchemeConfig", into = "SchemeConfig")]
pub struct PartitionScheme {
    total_params: usize,
    chunk_size_bytes: usize,
    boundaries: Vec<(usize, usize)>,
}

/// Serialized form of a scheme: the boundaries are derived, never stored.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub total_params: usize,
    pub chunk_size_bytes: usize,
}

impl TryFrom<SchemeConfig> for PartitionScheme {
    type Error = ParamError;
    fn try_from(c: SchemeConfig) -> Result<Self, ParamError> {
        build_partition(c.total_params, c.chunk_size_bytes)
    }
}

impl From<PartitionScheme> for SchemeConfig {
    fn from(s: PartitionScheme) -> Self {
        SchemeConfig { total_params: s.total_params, chunk_size_bytes: s.chunk_size_bytes }
    }
}

/// Partition `total_params` parameters into chunks of `chunk_size_bytes`.
/// All chunks but the last hold exactly `chunk_size_bytes / 4` parameters;
/// the last may be short.
pub fn build_partition(total_params: usize, chunk_size_bytes: usize) -> Result<PartitionScheme, ParamError> {
    build_partition_with_limit(total_params, chunk_size_bytes, MAX_TX_PAYLOAD_BYTES)
}

pub fn build_partition_with_limit(
    total_params: usize,
    chunk_size_bytes: usize,
    max_tx_payload_bytes: usize,
) -> Result<PartitionScheme, ParamError> {
    if total_params == 0 {
        return Err(ParamError::Empty);
    }
    if chunk_size_bytes < BYTES_PER_PARAM
        || chunk_size_bytes > max_tx_payload_bytes
        || chunk_size_bytes % BYTES_PER_PARAM != 0
    {
        return Err(ParamError::ChunkSize { chunk_size_bytes, max: max_tx_payload_bytes });
    }
    let per_chunk = chunk_size_bytes / BYTES_PER_PARAM;
    let boundaries = (0..total_params)
        .step_by(per_chunk)
        .map(|start| (start, per_chunk.min(total_params - start)))
        .collect();
    Ok(PartitionScheme { total_params, chunk_size_bytes, boundaries })
}

impl PartitionScheme {
    pub fn total_params(&self) -> usize {
        self.total_params
    }

    pub fn chunk_size_bytes(&self) -> usize {
        self.chunk_size_bytes
    }

    /// Number of chunks `C`.
    pub fn chunk_count(&self) -> usize {
        self.boundaries.len()
    }

    pub fn boundaries(&self) -> &[(usize, usize)] {
        &self.boundaries
    }

    pub fn range(&self, chunk_id: usize) -> Result<std::ops::Range<usize>, ParamError> {
        let &(start, len) = self.boundaries.get(chunk_id).ok_or(ParamError::ChunkIndex {
            chunk_id,
            chunk_count: self.chunk_count(),
        })?;
        Ok(start..start + len)
    }

    pub fn chunk_len(&self, chunk_id: usize) -> Result<usize, ParamError> {
        self.range(chunk_id).map(|r| r.len())
    }
}

/// One serialized slice of the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: usize,
    pub payload: Vec<u8>,
    pub param_count: usize,
}

pub fn encode_slice(values: &[f32]) -> Result<Vec<u8>, ParamError> {
    let mut out = Vec::with_capacity(values.len() * BYTES_PER_PARAM);
    for (index, &value) in values.iter().enumerate() {
        if !value.is_finite() {
            return Err(ParamError::NonFinite { index, value });
        }
        out.extend_from_slice(&value.to_le_bytes());
    }
    Ok(out)
}

pub fn serialize_chunk(vector: &ParamVector, scheme: &PartitionScheme, chunk_id: usize) -> Result<Chunk, ParamError> {
    if vector.len() != scheme.total_params() {
        return Err(ParamError::LengthMismatch { expected: scheme.total_params(), actual: vector.len() });
    }
    let range = scheme.range(chunk_id)?;
    let param_count = range.len();
    let payload = encode_slice(&vector.as_slice()[range])?;
    Ok(Chunk { chunk_id, payload, param_count })
}

/// Decode a binary32 little-endian payload. Empty or non-multiple-of-4
/// payloads are rejected.
pub fn deserialize_chunk(payload: &[u8]) -> Result<Vec<f32>, ParamError> {
    if payload.is_empty() || payload.len() % BYTES_PER_PARAM != 0 {
        return Err(ParamError::Decode(payload.len()));
    }
    Ok(payload
        .chunks_exact(BYTES_PER_PARAM)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Bid score: L2 norm of the elementwise difference, accumulated in f64.
pub fn score_chunk(local: &[f32], global: &[f32]) -> Result<f64, ParamError> {
    if local.len() != global.len() {
        return Err(ParamError::LengthMismatch { expected: global.len(), actual: local.len() });
    }
    let sq: f64 = local
        .iter()
        .zip(global)
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    Ok(sq.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_division() {
        let s = build_partition(1024, 2048).unwrap();
        assert_eq!(s.boundaries(), &[(0, 512), (512, 512)]);
    }

    #[test]
    fn short_last_chunk() {
        // ceil(1000 * 4 / 2048) = 2
        let s = build_partition(1000, 2048).unwrap();
        assert_eq!(s.chunk_count(), 2);
        assert_eq!(s.boundaries(), &[(0, 512), (512, 488)]);
    }

    #[test]
    fn single_param() {
        let s = build_partition(1, 2048).unwrap();
        assert_eq!(s.boundaries(), &[(0, 1)]);
    }

    #[test]
    fn partition_errors() {
        assert_eq!(build_partition(0, 2048), Err(ParamError::Empty));
        assert!(matches!(build_partition(10, 24_580), Err(ParamError::ChunkSize { .. })));
        assert!(matches!(build_partition(10, 6), Err(ParamError::ChunkSize { .. })));
        assert!(matches!(build_partition(10, 0), Err(ParamError::ChunkSize { .. })));
        assert!(build_partition(10, MAX_TX_PAYLOAD_BYTES).is_ok());
    }

    #[test]
    fn scheme_serde_uses_config_form() {
        let s = build_partition(1000, 2048).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"total_params":1000,"chunk_size_bytes":2048}"#);
        let back: PartitionScheme = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn encodings() {
        let scheme = build_partition(2, 4).unwrap();
        let v = ParamVector::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(serialize_chunk(&v, &scheme, 0).unwrap().payload, vec![0, 0, 0, 0]);
        assert_eq!(serialize_chunk(&v, &scheme, 1).unwrap().payload, vec![0x00, 0x00, 0x80, 0x3F]);
        assert!(matches!(serialize_chunk(&v, &scheme, 2), Err(ParamError::ChunkIndex { .. })));
        assert_eq!(deserialize_chunk(&[0, 0, 0, 0]).unwrap(), vec![0.0]);
        assert_eq!(deserialize_chunk(&[0x00, 0x00, 0x80, 0x3F]).unwrap(), vec![1.0]);
        assert_eq!(deserialize_chunk(&[]), Err(ParamError::Decode(0)));
        assert_eq!(deserialize_chunk(&[1, 2, 3]), Err(ParamError::Decode(3)));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(ParamVector::new(vec![1.0, f32::NAN]), Err(ParamError::NonFinite { index: 1, .. })));
        assert!(matches!(encode_slice(&[f32::INFINITY]), Err(ParamError::NonFinite { index: 0, .. })));
    }

    #[test]
    fn scores() {
        assert_eq!(score_chunk(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(score_chunk(&[3.0, 0.0], &[0.0, 0.0]).unwrap(), 3.0);
        assert_eq!(score_chunk(&[1.0, 2.0, 2.0], &[0.0, 0.0, 0.0]).unwrap(), 3.0);
        assert!(score_chunk(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn coverage_and_size_law(total in 1usize..20_000, words in 1usize..=MAX_TX_PAYLOAD_BYTES / 4) {
            let bytes = words * 4;
            let s = build_partition(total, bytes).unwrap();
            prop_assert_eq!(s.chunk_count(), (total * 4).div_ceil(bytes));
            let mut seen = vec![false; total];
            let mut next = 0;
            for (i, &(start, len)) in s.boundaries().iter().enumerate() {
                prop_assert_eq!(start, next);
                prop_assert!(len * BYTES_PER_PARAM <= bytes);
                if i + 1 < s.chunk_count() {
                    prop_assert_eq!(len, words);
                }
                for slot in &mut seen[start..start + len] {
                    prop_assert!(!*slot);
                    *slot = true;
                }
                next = start + len;
            }
            prop_assert_eq!(next, total);
            prop_assert!(seen.iter().all(|&b| b));
        }

        #[test]
        fn round_trip(values in proptest::collection::vec(-1e30f32..1e30, 1..200)) {
            let bytes = encode_slice(&values).unwrap();
            let back = deserialize_chunk(&bytes).unwrap();
            prop_assert_eq!(
                back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn score_is_a_metric(
            x in proptest::collection::vec(-100f32..100.0, 8),
            y in proptest::collection::vec(-100f32..100.0, 8),
            z in proptest::collection::vec(-100f32..100.0, 8),
        ) {
            let d = |a: &[f32], b: &[f32]| score_chunk(a, b).unwrap();
            prop_assert_eq!(d(&x, &x), 0.0);
            prop_assert_eq!(d(&x, &y), d(&y, &x));
            prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-9);
        }
    }
}
