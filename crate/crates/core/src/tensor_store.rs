//! The `.aqt` container: raw `f32` weight tensors with a JSON manifest.
//!
//! Layout, all integers little-endian:
//!
//! | bytes     | contents                                   |
//! |-----------|--------------------------------------------|
//! | 0..8      | magic `ADPQTNSR`                           |
//! | 8..12     | format version, `u32` (currently 1)        |
//! | 12..20    | header length `H`, `u64`                   |
//! | 20..20+H  | UTF-8 JSON manifest                        |
//! | 20+H..    | payload: concatenated raw `f32` bits       |
//!
//! The manifest is `{"tensors":[{"name","rows","cols","offset","nbytes"}]}`
//! with `offset` relative to the first payload byte and `nbytes` equal to
//! `4 * rows * cols`. Tensors are stored row-major, back to back, in manifest
//! order. Reads and writes are exact inverses: every `f32` round-trips
//! bit-for-bit, and any disagreement between declared and actual sizes is an
//! error rather than a warning.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// File magic for the raw-tensor container.
pub const MAGIC: &[u8; 8] = b"ADPQTNSR";
/// Current container format version.
pub const VERSION: u32 = 1;

/// Errors from reading, writing, or validating `.aqt` data.
#[derive(Debug, Error)]
pub enum TensorStoreError {
    #[error("bad magic: not an .aqt tensor file")]
    BadMagic,
    #[error("unsupported .aqt version {0} (expected {VERSION})")]
    BadVersion(u32),
    #[error("header parse error: {0}")]
    HeaderParse(String),
    #[error("truncated data: {0}")]
    TruncatedData(String),
    #[error("non-finite value in tensor `{name}` at flat index {index}")]
    NonFiniteValue { name: String, index: usize },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("io error: {0}")]
    IoError(#[from] std::io::Error),
}

/// A dense row-major 2-D weight matrix of finite `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major data; `data.len() == rows * cols`.
    pub data: Vec<f32>,
}

impl WeightTensor {
    /// Builds a tensor and checks every invariant up front.
    pub fn new(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        data: Vec<f32>,
    ) -> Result<Self, TensorStoreError> {
        let t = WeightTensor { name: name.into(), rows, cols, data };
        t.validate()?;
        Ok(t)
    }

    /// Number of weights (`rows * cols`).
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks shape consistency and that every value is finite.
    pub fn validate(&self) -> Result<(), TensorStoreError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(TensorStoreError::InvariantViolation(format!(
                "tensor `{}` has empty shape {}x{}",
                self.name, self.rows, self.cols
            )));
        }
        let expect = self
            .rows
            .checked_mul(self.cols)
            .ok_or_else(|| TensorStoreError::InvariantViolation("tensor shape overflows".into()))?;
        if self.data.len() != expect {
            return Err(TensorStoreError::InvariantViolation(format!(
                "tensor `{}` declares {}x{} = {} values but holds {}",
                self.name,
                self.rows,
                self.cols,
                expect,
                self.data.len()
            )));
        }
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(TensorStoreError::NonFiniteValue { name: self.name.clone(), index });
        }
        Ok(())
    }
}

/// An ordered collection of uniquely named tensors, as stored in one file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: Vec<WeightTensor>,
}

impl TensorFile {
    /// Looks a tensor up by name.
    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    rows: u64,
    cols: u64,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<HeaderEntry>,
}

/// Serializes tensors into `.aqt` bytes.
///
/// Rejects empty shapes, non-finite values, and duplicate names. An empty
/// slice is legal and produces a file with an empty manifest and no payload.
pub fn to_bytes(tensors: &[WeightTensor]) -> Result<Vec<u8>, TensorStoreError> {
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for t in tensors {
        t.validate()?;
        if !seen.insert(t.name.as_str()) {
            return Err(TensorStoreError::InvariantViolation(format!(
                "duplicate tensor name `{}`",
                t.name
            )));
        }
        let nbytes = 4 * t.len() as u64;
        entries.push(HeaderEntry {
            name: t.name.clone(),
            rows: t.rows as u64,
            cols: t.cols as u64,
            offset,
            nbytes,
        });
        offset += nbytes;
    }

    let header = serde_json::to_vec(&Header { tensors: entries })
        .map_err(|e| TensorStoreError::HeaderParse(e.to_string()))?;

    let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses `.aqt` bytes, validating every declared size against the payload.
pub fn from_bytes(bytes: &[u8]) -> Result<TensorFile, TensorStoreError> {
    if bytes.len() < 20 {
        return Err(TensorStoreError::TruncatedData(format!(
            "file is {} bytes, shorter than the fixed 20-byte prefix",
            bytes.len()
        )));
    }
    if &bytes[0..8] != MAGIC {
        return Err(TensorStoreError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(TensorStoreError::BadVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload_start = 20usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            TensorStoreError::TruncatedData(format!(
                "declared header length {header_len} exceeds file size"
            ))
        })?;
    let header: Header = serde_json::from_slice(&bytes[20..payload_start])
        .map_err(|e| TensorStoreError::HeaderParse(e.to_string()))?;
    let payload = &bytes[payload_start..];

    let mut seen = HashSet::new();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected_offset = 0u64;
    for entry in &header.tensors {
        if !seen.insert(entry.name.as_str()) {
            return Err(TensorStoreError::InvariantViolation(format!(
                "duplicate tensor name `{}`",
                entry.name
            )));
        }
        let count = entry.rows.checked_mul(entry.cols).ok_or_else(|| {
            TensorStoreError::InvariantViolation(format!(
                "tensor `{}` shape overflows",
                entry.name
            ))
        })?;
        if entry.nbytes != 4 * count {
            return Err(TensorStoreError::InvariantViolation(format!(
                "tensor `{}` declares {} bytes for {}x{} values (expected {})",
                entry.name,
                entry.nbytes,
                entry.rows,
                entry.cols,
                4 * count
            )));
        }
        if entry.offset != expected_offset {
            return Err(TensorStoreError::InvariantViolation(format!(
                "tensor `{}` at offset {} is not contiguous with the previous tensor \
                 (expected offset {})",
                entry.name, entry.offset, expected_offset
            )));
        }
        expected_offset += entry.nbytes;

        let start = entry.offset as usize;
        let end = start + entry.nbytes as usize;
        if end > payload.len() {
            return Err(TensorStoreError::TruncatedData(format!(
                "tensor `{}` needs payload bytes {start}..{end} but only {} are present",
                entry.name,
                payload.len()
            )));
        }
        let mut data = Vec::with_capacity(count as usize);
        for (i, chunk) in payload[start..end].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(TensorStoreError::NonFiniteValue {
                    name: entry.name.clone(),
                    index: i,
                });
            }
            data.push(v);
        }
        tensors.push(WeightTensor {
            name: entry.name.clone(),
            rows: entry.rows as usize,
            cols: entry.cols as usize,
            data,
        });
    }
    if payload.len() as u64 != expected_offset {
        return Err(TensorStoreError::InvariantViolation(format!(
            "payload holds {} bytes but the manifest declares {}",
            payload.len(),
            expected_offset
        )));
    }
    Ok(TensorFile { tensors })
}

/// Writes tensors to an `.aqt` file at `path`.
pub fn write_tensors(path: impl AsRef<Path>, tensors: &[WeightTensor]) -> Result<(), TensorStoreError> {
    let bytes = to_bytes(tensors)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads an `.aqt` file from `path`.
pub fn read_tensors(path: impl AsRef<Path>) -> Result<TensorFile, TensorStoreError> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tensor(name: &str, rows: usize, cols: usize, data: Vec<f32>) -> WeightTensor {
        WeightTensor::new(name, rows, cols, data).unwrap()
    }

    #[test]
    fn round_trips_a_single_tensor_bit_for_bit() {
        let t = tensor("fc1", 2, 3, vec![1.0, -2.5, 3.25, 0.0, -0.0, 1e-20]);
        let bytes = to_bytes(std::slice::from_ref(&t)).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.tensors.len(), 1);
        assert_eq!(back.tensors[0].name, "fc1");
        let bits: Vec<u32> = back.tensors[0].data.iter().map(|v| v.to_bits()).collect();
        let want: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want, "payload must survive unchanged, including -0.0");
    }

    #[test]
    fn identity_matrix_header_declares_offset_zero_and_sixteen_bytes() {
        let t = tensor("eye", 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let bytes = to_bytes(&[t]).unwrap();
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[20..20 + header_len]).unwrap();
        assert!(header.contains("\"offset\":0"), "header was {header}");
        assert!(header.contains("\"nbytes\":16"), "header was {header}");
        assert_eq!(from_bytes(&bytes).unwrap().tensors[0].data, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn empty_tensor_list_is_a_valid_file() {
        let bytes = to_bytes(&[]).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert!(back.tensors.is_empty());
    }

    #[test]
    fn one_by_one_zero_tensor_ends_with_four_zero_bytes() {
        let bytes = to_bytes(&[tensor("z", 1, 1, vec![0.0])]).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 0, 0, 0]);
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 20 + header_len + 4);
    }

    #[test]
    fn rejects_bad_magic_and_bad_version() {
        let mut bytes = to_bytes(&[tensor("t", 1, 1, vec![1.0])]).unwrap();
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(from_bytes(&wrong_magic), Err(TensorStoreError::BadMagic)));

        bytes[8] = 9; // version 9
        assert!(matches!(from_bytes(&bytes), Err(TensorStoreError::BadVersion(9))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let bytes = to_bytes(&[tensor("t", 2, 2, vec![1.0, 2.0, 3.0, 4.0])]).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(from_bytes(cut), Err(TensorStoreError::TruncatedData(_))));
    }

    #[test]
    fn rejects_nan_in_payload_naming_tensor_and_index() {
        let mut bytes = to_bytes(&[tensor("w", 1, 2, vec![1.0, 2.0])]).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        match from_bytes(&bytes) {
            Err(TensorStoreError::NonFiniteValue { name, index }) => {
                assert_eq!(name, "w");
                assert_eq!(index, 1);
            }
            other => panic!("expected NonFiniteValue, got {other:?}"),
        }
    }

    #[test]
    fn write_rejects_non_finite_duplicate_and_misshapen_tensors() {
        assert!(WeightTensor::new("t", 1, 2, vec![1.0, f32::INFINITY]).is_err());
        assert!(WeightTensor::new("t", 2, 2, vec![1.0]).is_err());
        assert!(WeightTensor::new("t", 0, 2, vec![]).is_err());

        let a = tensor("same", 1, 1, vec![1.0]);
        let b = tensor("same", 1, 1, vec![2.0]);
        assert!(matches!(
            to_bytes(&[a, b]),
            Err(TensorStoreError::InvariantViolation(_))
        ));
    }

    /// Assembles a syntactically valid file around a hand-written manifest.
    fn file_with_header(header: &[u8], payload: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(payload);
        bytes
    }

    #[test]
    fn rejects_header_payload_size_disagreements() {
        // Declared nbytes inconsistent with rows*cols.
        let bytes = file_with_header(
            br#"{"tensors":[{"name":"t","rows":1,"cols":1,"offset":0,"nbytes":8}]}"#,
            &[0u8; 8],
        );
        assert!(matches!(from_bytes(&bytes), Err(TensorStoreError::InvariantViolation(_))));

        // Payload longer than the manifest declares.
        let mut long = to_bytes(&[tensor("t", 1, 1, vec![1.0])]).unwrap();
        long.extend_from_slice(&[0u8; 4]);
        assert!(matches!(from_bytes(&long), Err(TensorStoreError::InvariantViolation(_))));
    }

    #[test]
    fn rejects_non_contiguous_offsets() {
        let bytes = file_with_header(
            br#"{"tensors":[{"name":"t","rows":1,"cols":1,"offset":4,"nbytes":4}]}"#,
            &[0u8; 8],
        );
        assert!(matches!(from_bytes(&bytes), Err(TensorStoreError::InvariantViolation(_))));
    }

    #[test]
    fn file_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.aqt");
        let ts = vec![
            tensor("a", 1, 4, vec![0.5, -0.5, 2.0, -2.0]),
            tensor("b", 2, 2, vec![9.0, 8.0, 7.0, 6.0]),
        ];
        write_tensors(&path, &ts).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back.tensors, ts);
        assert_eq!(back.get("b").unwrap().data[0], 9.0);
    }

    proptest! {
        #[test]
        fn any_finite_tensor_round_trips_exactly(
            rows in 1usize..12,
            cols in 1usize..12,
            seed_vals in proptest::collection::vec(-1e30f32..1e30f32, 144),
        ) {
            let data: Vec<f32> = seed_vals.into_iter().take(rows * cols).collect();
            prop_assume!(data.len() == rows * cols);
            let t = tensor("p", rows, cols, data);
            let back = from_bytes(&to_bytes(std::slice::from_ref(&t)).unwrap()).unwrap();
            let bits: Vec<u32> = back.tensors[0].data.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, want);
        }
    }
}
