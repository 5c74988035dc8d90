//! Bit-exact reading and writing of checkpoints in the safetensors container.
//!
//! Layout: an 8-byte little-endian length N, N bytes of UTF-8 JSON mapping
//! tensor names to `{"dtype", "shape", "data_offsets": [begin, end]}` plus an
//! optional `"__metadata__"` string map, then the raw little-endian tensor
//! bytes. Offsets are relative to the start of the data section.
//!
//! The writer is canonical: every JSON object key (including `__metadata__`)
//! is sorted byte-lexicographically, the JSON carries no insignificant
//! whitespace, data is packed gaplessly in tensor-key order, and the header
//! is padded to an 8-byte boundary with trailing spaces. Identical
//! checkpoints therefore serialize to byte-identical files. The reader is
//! lenient about gaps and ordering but rejects overlap, out-of-bounds ranges
//! and unsupported dtypes outright.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::tensor::{Dtype, Tensor};

/// Name of a tensor inside a checkpoint. Non-empty, no control characters,
/// and never the reserved `__metadata__`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct TensorKey(String);

impl TensorKey {
    pub fn new(name: impl Into<String>) -> Result<TensorKey, CheckpointError> {
        let name = name.into();
        if name.is_empty() {
            return Err(CheckpointError::InvalidKey("empty tensor name".into()));
        }
        if name == "__metadata__" {
            return Err(CheckpointError::InvalidKey(
                "\"__metadata__\" is reserved".into(),
            ));
        }
        if name.chars().any(|c| c.is_control()) {
            return Err(CheckpointError::InvalidKey(format!(
                "control character in tensor name {name:?}"
            )));
        }
        Ok(TensorKey(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for TensorKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype {dtype:?} for tensor {key:?}")]
    UnsupportedDtype { key: String, dtype: String },
    #[error("invalid tensor key: {0}")]
    InvalidKey(String),
}

/// A named collection of dense tensors plus string metadata. Iteration is
/// always lexicographic by key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<TensorKey, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn insert(&mut self, key: TensorKey, tensor: Tensor) -> Option<Tensor> {
        self.entries.insert(key, tensor)
    }

    pub fn get(&self, key: &TensorKey) -> Option<&Tensor> {
        self.entries.get(key)
    }

    pub fn contains(&self, key: &TensorKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn remove(&mut self, key: &TensorKey) -> Option<Tensor> {
        self.entries.remove(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &TensorKey> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TensorKey, &Tensor)> {
        self.entries.iter()
    }

    /// Total parameter count over all entries.
    pub fn total_params(&self) -> u64 {
        self.entries.values().map(|t| t.numel() as u64).sum()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Compares tensor contents only (keys, dtypes, shapes, raw bytes),
    /// ignoring metadata.
    pub fn tensors_equal(&self, other: &Checkpoint) -> bool {
        self.entries == other.entries
    }
}

impl FromIterator<(TensorKey, Tensor)> for Checkpoint {
    fn from_iter<I: IntoIterator<Item = (TensorKey, Tensor)>>(iter: I) -> Checkpoint {
        Checkpoint {
            entries: iter.into_iter().collect(),
            metadata: BTreeMap::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

/// Parses a checkpoint from an in-memory buffer. Never allocates more than
/// the buffer plus the decoded tensors themselves: the declared header
/// length is validated against the buffer before any header-sized work.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let (header, data) = split_container(bytes)?;
    let parsed = parse_header(header)?;

    // Reject overlapping data ranges before copying anything out.
    let mut ranges: Vec<(usize, usize, &str)> = parsed
        .tensors
        .iter()
        .map(|t| (t.begin, t.end, t.name.as_str()))
        .collect();
    ranges.sort();
    for w in ranges.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.1 > b.0 && a.0 < b.1 {
            return Err(CheckpointError::MalformedHeader(format!(
                "overlapping data ranges for {:?} and {:?}",
                a.2, b.2
            )));
        }
    }

    let mut ckpt = Checkpoint::new();
    ckpt.metadata = parsed.metadata;
    for raw in parsed.tensors {
        let dtype = Dtype::parse(&raw.dtype).ok_or(CheckpointError::UnsupportedDtype {
            key: raw.name.clone(),
            dtype: raw.dtype.clone(),
        })?;
        if raw.end > data.len() {
            return Err(CheckpointError::MalformedHeader(format!(
                "data range of {:?} ends at {} but the data section has {} bytes",
                raw.name,
                raw.end,
                data.len()
            )));
        }
        let numel: usize = raw.shape.iter().product();
        let expected = numel * dtype.byte_width();
        if raw.end - raw.begin != expected {
            return Err(CheckpointError::MalformedHeader(format!(
                "tensor {:?} declares {} bytes but shape {:?} of {} needs {}",
                raw.name,
                raw.end - raw.begin,
                raw.shape,
                dtype,
                expected
            )));
        }
        let key = TensorKey::new(raw.name)
            .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
        let tensor = Tensor::new(dtype, raw.shape, data[raw.begin..raw.end].to_vec())
            .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
        ckpt.insert(key, tensor);
    }
    Ok(ckpt)
}

fn split_container(bytes: &[u8]) -> Result<(&[u8], &[u8]), CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::MalformedHeader(format!(
            "file has {} bytes, too short for the length prefix",
            bytes.len()
        )));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let n: usize = n.try_into().map_err(|_| {
        CheckpointError::MalformedHeader(format!("header length {n} does not fit in memory"))
    })?;
    if n > bytes.len() - 8 {
        return Err(CheckpointError::MalformedHeader(format!(
            "declared header length {} exceeds remaining {} bytes",
            n,
            bytes.len() - 8
        )));
    }
    Ok((&bytes[8..8 + n], &bytes[8 + n..]))
}

struct RawTensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

struct ParsedHeader {
    tensors: Vec<RawTensorEntry>,
    metadata: BTreeMap<String, String>,
}

fn parse_header(header: &[u8]) -> Result<ParsedHeader, CheckpointError> {
    let text = std::str::from_utf8(header)
        .map_err(|e| CheckpointError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let value: Value = serde_json::from_str(text)
        .map_err(|e| CheckpointError::MalformedHeader(format!("header is not valid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| CheckpointError::MalformedHeader("header is not a JSON object".into()))?;

    let mut tensors = Vec::with_capacity(obj.len());
    let mut metadata = BTreeMap::new();
    for (name, entry) in obj {
        if name == "__metadata__" {
            let map = entry.as_object().ok_or_else(|| {
                CheckpointError::MalformedHeader("__metadata__ is not an object".into())
            })?;
            for (k, v) in map {
                let s = v.as_str().ok_or_else(|| {
                    CheckpointError::MalformedHeader(format!(
                        "__metadata__ value for {k:?} is not a string"
                    ))
                })?;
                metadata.insert(k.clone(), s.to_string());
            }
            continue;
        }
        tensors.push(parse_tensor_entry(name, entry)?);
    }
    Ok(ParsedHeader { tensors, metadata })
}

fn parse_tensor_entry(name: &str, entry: &Value) -> Result<RawTensorEntry, CheckpointError> {
    let bad = |what: &str| CheckpointError::MalformedHeader(format!("tensor {name:?}: {what}"));
    let obj = entry
        .as_object()
        .ok_or_else(|| bad("entry is not an object"))?;
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing or non-string dtype"))?
        .to_string();
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing or non-array shape"))?
        .iter()
        .map(|v| {
            v.as_u64()
                .and_then(|d| usize::try_from(d).ok())
                .ok_or_else(|| bad("shape entries must be non-negative integers"))
        })
        .collect::<Result<Vec<usize>, _>>()?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing or non-array data_offsets"))?;
    if offsets.len() != 2 {
        return Err(bad("data_offsets must have exactly two entries"));
    }
    let begin = offsets[0]
        .as_u64()
        .and_then(|d| usize::try_from(d).ok())
        .ok_or_else(|| bad("data_offsets must be non-negative integers"))?;
    let end = offsets[1]
        .as_u64()
        .and_then(|d| usize::try_from(d).ok())
        .ok_or_else(|| bad("data_offsets must be non-negative integers"))?;
    if begin > end {
        return Err(bad("data_offsets begin exceeds end"));
    }
    Ok(RawTensorEntry {
        name: name.to_string(),
        dtype,
        shape,
        begin,
        end,
    })
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let bytes = checkpoint_to_bytes(ckpt);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Serializes to the canonical byte layout. Deterministic: equal checkpoints
/// produce byte-identical output.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut header = Map::new();
    if !ckpt.metadata.is_empty() {
        let mut md = Map::new();
        for (k, v) in &ckpt.metadata {
            md.insert(k.clone(), Value::String(v.clone()));
        }
        header.insert("__metadata__".to_string(), Value::Object(md));
    }
    let mut offset = 0usize;
    let mut buffers: Vec<&[u8]> = Vec::with_capacity(ckpt.len());
    for (key, tensor) in ckpt.iter() {
        let begin = offset;
        let end = begin + tensor.raw_data().len();
        offset = end;
        buffers.push(tensor.raw_data());

        let mut entry = Map::new();
        entry.insert(
            "dtype".to_string(),
            Value::String(tensor.dtype().name().into()),
        );
        entry.insert(
            "shape".to_string(),
            Value::Array(
                tensor
                    .shape()
                    .iter()
                    .map(|&d| Value::from(d as u64))
                    .collect(),
            ),
        );
        entry.insert(
            "data_offsets".to_string(),
            Value::Array(vec![Value::from(begin as u64), Value::from(end as u64)]),
        );
        header.insert(key.as_str().to_string(), Value::Object(entry));
    }

    // serde_json's default map is a BTreeMap, so compact serialization gives
    // sorted keys with no insignificant whitespace.
    let mut json = serde_json::to_string(&Value::Object(header))
        .expect("header serialization cannot fail")
        .into_bytes();
    while !json.len().is_multiple_of(8) {
        json.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + json.len() + offset);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for buf in buffers {
        out.extend_from_slice(buf);
    }
    out
}

// ---------------------------------------------------------------------------
// Header validation
// ---------------------------------------------------------------------------

/// Per-tensor header facts, reported verbatim (unknown dtypes included).
#[derive(Debug, Clone, Serialize)]
pub struct HeaderEntry {
    pub key: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub data_offsets: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeaderViolation {
    /// Two tensors share bytes.
    Overlap { first: String, second: String },
    /// Unused bytes before `key`'s range (or at the end of the data section
    /// when `key` is absent).
    Gap {
        key: Option<String>,
        expected_offset: usize,
        actual_offset: usize,
    },
    /// Data ranges are not in lexicographic key order.
    Misorder { before: String, after: String },
    /// Range extends past the end of the data section.
    OutOfBounds {
        key: String,
        end: usize,
        data_len: usize,
    },
    /// Declared byte count disagrees with shape x dtype width.
    SizeMismatch {
        key: String,
        declared: usize,
        expected: usize,
    },
}

/// What `validate_header` learned without touching tensor data.
#[derive(Debug, Clone, Serialize)]
pub struct HeaderReport {
    pub tensor_count: usize,
    pub header_bytes: usize,
    pub data_bytes: usize,
    pub metadata: BTreeMap<String, String>,
    pub entries: Vec<HeaderEntry>,
    pub violations: Vec<HeaderViolation>,
}

impl HeaderReport {
    pub fn is_canonical(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Inspects the container structure of `bytes`: tensor count, per-tensor
/// dtype/shape/offsets, and layout violations (overlap, gap, misorder).
/// Errors only when the header itself is structurally unreadable.
pub fn validate_header(bytes: &[u8]) -> Result<HeaderReport, CheckpointError> {
    let (header, data) = split_container(bytes)?;
    let parsed = parse_header(header)?;

    let mut entries: Vec<HeaderEntry> = parsed
        .tensors
        .iter()
        .map(|t| HeaderEntry {
            key: t.name.clone(),
            dtype: t.dtype.clone(),
            shape: t.shape.clone(),
            data_offsets: [t.begin, t.end],
        })
        .collect();
    entries.sort_by(|a, b| a.key.cmp(&b.key));

    let mut violations = Vec::new();
    for e in &entries {
        if e.data_offsets[1] > data.len() {
            violations.push(HeaderViolation::OutOfBounds {
                key: e.key.clone(),
                end: e.data_offsets[1],
                data_len: data.len(),
            });
        }
        if let Some(dtype) = Dtype::parse(&e.dtype) {
            let expected = e.shape.iter().product::<usize>() * dtype.byte_width();
            let declared = e.data_offsets[1].saturating_sub(e.data_offsets[0]);
            if declared != expected {
                violations.push(HeaderViolation::SizeMismatch {
                    key: e.key.clone(),
                    declared,
                    expected,
                });
            }
        }
    }

    // Layout checks walk the ranges in offset order.
    let mut by_offset: Vec<&HeaderEntry> = entries.iter().collect();
    by_offset.sort_by_key(|e| (e.data_offsets[0], e.data_offsets[1]));
    let mut cursor = 0usize;
    for (i, e) in by_offset.iter().enumerate() {
        let [begin, end] = e.data_offsets;
        if begin < cursor {
            if let Some(prev) = by_offset[..i]
                .iter()
                .rev()
                .find(|p| p.data_offsets[1] > begin && p.data_offsets[0] < end)
            {
                violations.push(HeaderViolation::Overlap {
                    first: prev.key.clone(),
                    second: e.key.clone(),
                });
            }
        } else if begin > cursor {
            violations.push(HeaderViolation::Gap {
                key: Some(e.key.clone()),
                expected_offset: cursor,
                actual_offset: begin,
            });
        }
        cursor = cursor.max(end);
    }
    if cursor < data.len() {
        violations.push(HeaderViolation::Gap {
            key: None,
            expected_offset: cursor,
            actual_offset: data.len(),
        });
    }
    for w in by_offset.windows(2) {
        if w[0].key > w[1].key {
            violations.push(HeaderViolation::Misorder {
                before: w[0].key.clone(),
                after: w[1].key.clone(),
            });
        }
    }

    Ok(HeaderReport {
        tensor_count: entries.len(),
        header_bytes: header.len(),
        data_bytes: data.len(),
        metadata: parsed.metadata,
        entries,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn key(s: &str) -> TensorKey {
        TensorKey::new(s).unwrap()
    }

    fn random_checkpoint(seed: u64, n_tensors: usize) -> Checkpoint {
        let dtypes = [Dtype::F32, Dtype::F16, Dtype::BF16];
        let mut ckpt = Checkpoint::new();
        for t in 0..n_tensors {
            let rng = CounterRng::new(seed ^ (t as u64).wrapping_mul(0x9e37));
            let rows = 1 + (rng.value(0) % 4) as usize;
            let cols = (rng.value(1) % 6) as usize;
            let dtype = dtypes[(rng.value(2) % 3) as usize];
            let vals: Vec<f32> = (0..(rows * cols) as u64)
                .map(|i| rng.gaussian(i + 10) as f32)
                .collect();
            let tensor = Tensor::from_f32(dtype, vec![rows, cols], &vals).unwrap();
            ckpt.insert(key(&format!("block.{t}.weight")), tensor);
        }
        ckpt.set_metadata("origin", format!("seed {seed}"));
        ckpt
    }

    #[test]
    fn single_tensor_file_reads_back() {
        let mut ckpt = Checkpoint::new();
        ckpt.insert(
            key("w"),
            Tensor::from_f32(Dtype::F32, vec![2], &[1.0, 2.0]).unwrap(),
        );
        let bytes = checkpoint_to_bytes(&ckpt);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.get(&key("w")).unwrap().to_f32_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn offsets_past_buffer_end_are_rejected() {
        let header = br#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 4]); // only half the declared data
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(CheckpointError::MalformedHeader(_))
        ));
    }

    #[test]
    fn fifty_tensor_round_trip_is_bit_identical() {
        let ckpt = random_checkpoint(42, 50);
        let bytes = checkpoint_to_bytes(&ckpt);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        for (k, t) in ckpt.iter() {
            assert_eq!(back.get(k).unwrap().raw_data(), t.raw_data());
        }
    }

    #[test]
    fn writes_are_deterministic() {
        let ckpt = random_checkpoint(7, 12);
        assert_eq!(checkpoint_to_bytes(&ckpt), checkpoint_to_bytes(&ckpt));
    }

    #[test]
    fn canonical_files_survive_read_write_byte_identically() {
        let ckpt = random_checkpoint(3, 9);
        let bytes = checkpoint_to_bytes(&ckpt);
        let again = checkpoint_to_bytes(&checkpoint_from_bytes(&bytes).unwrap());
        assert_eq!(bytes, again);
    }

    #[test]
    fn empty_checkpoint_serializes_to_empty_mapping() {
        let ckpt = Checkpoint::new();
        let bytes = checkpoint_to_bytes(&ckpt);
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[8..8 + n]).unwrap();
        assert_eq!(json.trim_end(), "{}");
        assert!(checkpoint_from_bytes(&bytes).unwrap().is_empty());

        let mut with_md = Checkpoint::new();
        with_md.set_metadata("note", "x");
        let bytes = checkpoint_to_bytes(&with_md);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back.metadata().get("note").map(String::as_str), Some("x"));
    }

    #[test]
    fn header_length_is_padded_to_eight_bytes() {
        let ckpt = random_checkpoint(11, 3);
        let bytes = checkpoint_to_bytes(&ckpt);
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        assert_eq!(n % 8, 0);
    }

    #[test]
    fn mixed_dtype_file_round_trips() {
        let mut ckpt = Checkpoint::new();
        for (name, dtype) in [("a", Dtype::F16), ("b", Dtype::BF16), ("c", Dtype::F32)] {
            ckpt.insert(
                key(name),
                Tensor::from_f32(dtype, vec![3], &[0.1, -2.5, 1000.0]).unwrap(),
            );
        }
        let back = checkpoint_from_bytes(&checkpoint_to_bytes(&ckpt)).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn unsupported_dtype_is_a_hard_error() {
        let header = br#"{"w":{"dtype":"F64","shape":[1],"data_offsets":[0,8]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(CheckpointError::UnsupportedDtype { .. })
        ));
    }

    #[test]
    fn declared_length_larger_than_file_is_rejected_without_allocation() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(u64::MAX - 16).to_le_bytes());
        bytes.extend_from_slice(b"tiny");
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(CheckpointError::MalformedHeader(_))
        ));
        assert!(matches!(
            validate_header(&bytes),
            Err(CheckpointError::MalformedHeader(_))
        ));
    }

    #[test]
    fn validate_header_reports_zero_violations_for_canonical_files() {
        let ckpt = random_checkpoint(21, 8);
        let report = validate_header(&checkpoint_to_bytes(&ckpt)).unwrap();
        assert_eq!(report.tensor_count, 8);
        assert!(report.is_canonical(), "violations: {:?}", report.violations);
    }

    #[test]
    fn validate_header_flags_overlap_by_key_names() {
        let header = br#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 12]);
        let report = validate_header(&bytes).unwrap();
        let overlap: Vec<_> = report
            .violations
            .iter()
            .filter(|v| matches!(v, HeaderViolation::Overlap { .. }))
            .collect();
        assert_eq!(overlap.len(), 1);
        assert_eq!(
            overlap[0],
            &HeaderViolation::Overlap {
                first: "a".into(),
                second: "b".into()
            }
        );
    }

    #[test]
    fn validate_header_flags_gap_and_misorder() {
        // "b" packed before "a", with a 4-byte hole before "a".
        let header = br#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[8,12]},"b":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 12]);
        let report = validate_header(&bytes).unwrap();
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, HeaderViolation::Gap { .. })));
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, HeaderViolation::Misorder { .. })));
        // Gaps and misordering are tolerated by the reader.
        assert!(checkpoint_from_bytes(&bytes).is_ok());
    }

    #[test]
    fn reserved_and_invalid_keys_are_rejected() {
        assert!(TensorKey::new("").is_err());
        assert!(TensorKey::new("__metadata__").is_err());
        assert!(TensorKey::new("a\nb").is_err());
        assert!(TensorKey::new("w").is_ok());
        assert!(TensorKey::new("transformer_blocks.3.attn.to_q.weight").is_ok());
    }
}
