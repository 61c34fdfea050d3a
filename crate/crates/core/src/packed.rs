//! The `.adpq` container: bit-packed quantized tensors.
//!
//! Layout, all multi-byte integers little-endian:
//!
//! ```text
//! magic "ADPQPACK" | version u32 | alpha f64 | group_size u32 |
//! bits_c u8 | bits_o u8 | clip f64 | tensor_count u32 | tensors...
//!
//! tensor:  name_len u16 | name utf-8 | rows u32 | cols u32 | groups...
//! group:   k u16 | scale_c f16 | zero_c f16 | scale_o f16 | zero_o f16 |
//!          (len-k) codes of bits_c bits | k x (log2(group_size)-bit index,
//!          bits_o-bit code) | zero padding to the next byte boundary
//! ```
//!
//! Code bits are packed MSB-first within each byte. Outlier entries appear in
//! strictly increasing index order, and the index field is always
//! `log2(group_size)` bits wide, even in a short final group. Groups with no
//! outliers still store `scale_o`/`zero_o` as canonical zero bits — four bytes
//! of overhead the size accounting itemizes rather than hides.
//!
//! Decoding is strict: sizes, code ranges, index order, parameter
//! canonicality, and exact end-of-file are all validated, so
//! `decode(encode(x)) == x` and corrupt files fail with the offending tensor
//! and group named.

use half::f16;
use thiserror::Error;

use crate::quant::{
    group_len, groups_per_row, GroupParams, GroupRecord, OutlierEntry, QuantConfig, QuantError,
    QuantizedTensor,
};

/// File magic for the packed container.
pub const MAGIC: &[u8; 8] = b"ADPQPACK";
/// Current container format version.
pub const VERSION: u32 = 1;

/// Fixed file header: magic, version, config block, tensor count.
const HEADER_BYTES: u64 = 8 + 4 + (8 + 4 + 1 + 1 + 8) + 4;

/// Errors from encoding or decoding `.adpq` data.
#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bad magic: not an .adpq packed file")]
    BadMagic,
    #[error("unsupported .adpq version {0} (expected {VERSION})")]
    BadVersion(u32),
    #[error("truncated data while reading {0}")]
    Truncated(String),
    #[error("tensor `{tensor}`, group {group}: outlier index {index} outside group of {len}")]
    IndexOutOfGroup { tensor: String, group: usize, index: u16, len: usize },
    #[error("tensor `{tensor}`, group {group}: outlier indices not strictly increasing")]
    NonMonotonicOutlierIndices { tensor: String, group: usize },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

/// A decoded (or to-be-encoded) packed file: one config shared by every
/// tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedModel {
    pub version: u32,
    pub config: QuantConfig,
    pub tensors: Vec<QuantizedTensor>,
}

impl PackedModel {
    /// Wraps quantized tensors into a model under an explicit config; the
    /// tensor list may be empty (an empty container is valid).
    pub fn new(config: QuantConfig, tensors: Vec<QuantizedTensor>) -> Result<Self, CodecError> {
        let model = PackedModel { version: VERSION, config, tensors };
        model.validate()?;
        Ok(model)
    }

    /// Wraps quantized tensors into a model, requiring at least one tensor,
    /// unique names, and a single shared config.
    pub fn from_tensors(tensors: Vec<QuantizedTensor>) -> Result<Self, CodecError> {
        let first = tensors.first().ok_or_else(|| {
            CodecError::InvariantViolation("a packed model needs at least one tensor".into())
        })?;
        Self::new(first.config, tensors)
    }

    /// Total weight count across all tensors.
    pub fn total_weights(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    fn validate(&self) -> Result<(), CodecError> {
        if self.version != VERSION {
            return Err(CodecError::BadVersion(self.version));
        }
        self.config
            .validate()
            .map_err(|e| CodecError::InvariantViolation(format!("config: {e}")))?;
        let mut seen = std::collections::HashSet::new();
        for t in &self.tensors {
            if t.config != self.config {
                return Err(CodecError::InvariantViolation(format!(
                    "tensor `{}` was quantized under a different config",
                    t.name
                )));
            }
            if !seen.insert(t.name.as_str()) {
                return Err(CodecError::InvariantViolation(format!(
                    "duplicate tensor name `{}`",
                    t.name
                )));
            }
            if t.name.len() > u16::MAX as usize {
                return Err(CodecError::InvariantViolation(format!(
                    "tensor name of {} bytes exceeds the u16 length field",
                    t.name.len()
                )));
            }
            if t.rows > u32::MAX as usize || t.cols > u32::MAX as usize {
                return Err(CodecError::InvariantViolation(format!(
                    "tensor `{}` shape exceeds the u32 dimension fields",
                    t.name
                )));
            }
            t.validate().map_err(map_quant_err)?;
        }
        Ok(())
    }
}

fn map_quant_err(e: QuantError) -> CodecError {
    CodecError::InvariantViolation(e.to_string())
}

/// Size-accounting summary for a packed model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BitsReport {
    /// `(bits_c + 32/g)(1 - alpha) + (bits_o + log2(g) + 32/g) * alpha`.
    pub b_avg_theoretical: f64,
    /// Container bits divided by weight count.
    pub b_avg_actual: f64,
    /// Bits the formula does not account for: file and tensor headers, the
    /// per-group outlier-count field, the second (outlier) scale/zero pair,
    /// and byte-alignment padding.
    pub overhead_bits: u64,
}

/// The idealized average bits per weight for a config, before container
/// overhead: each population pays its code width plus an amortized 2x16-bit
/// scale/zero, and outliers additionally pay a `log2(group_size)`-bit index.
pub fn average_bits_theoretical(config: &QuantConfig) -> Result<f64, QuantError> {
    config.validate()?;
    let g = config.group_size as f64;
    let param_bits = 2.0 * 16.0 / g;
    let index_bits = config.group_size.trailing_zeros() as f64;
    let alpha = config.alpha;
    Ok((config.bits_c as f64 + param_bits) * (1.0 - alpha)
        + (config.bits_o as f64 + index_bits + param_bits) * alpha)
}

// ── bit-level I/O ───────────────────────────────────────────────────────

/// MSB-first bit packer: the first value written lands in the most
/// significant bits of the first byte.
struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    nbits: u32,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter { bytes: Vec::new(), acc: 0, nbits: 0 }
    }

    fn push(&mut self, value: u32, width: u32) {
        debug_assert!((1..=16).contains(&width));
        debug_assert!(u64::from(value) < (1u64 << width));
        self.acc = (self.acc << width) | u64::from(value);
        self.nbits += width;
        while self.nbits >= 8 {
            self.nbits -= 8;
            self.bytes.push((self.acc >> self.nbits) as u8);
        }
    }

    /// Pads with zero bits to the next byte boundary.
    fn align(&mut self) {
        if self.nbits > 0 {
            let pad = 8 - self.nbits;
            self.push(0, pad);
        }
    }

    fn into_bytes(mut self) -> Vec<u8> {
        self.align();
        self.bytes
    }
}

/// MSB-first bit reader over a byte slice.
struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    bit: u32,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0, bit: 0 }
    }

    fn read(&mut self, width: u32) -> Option<u32> {
        let mut out = 0u32;
        let mut need = width;
        while need > 0 {
            let byte = *self.bytes.get(self.pos)?;
            let avail = 8 - self.bit;
            let take = need.min(avail);
            let chunk = (byte >> (avail - take)) & (((1u16 << take) - 1) as u8);
            out = (out << take) | u32::from(chunk);
            self.bit += take;
            need -= take;
            if self.bit == 8 {
                self.bit = 0;
                self.pos += 1;
            }
        }
        Some(out)
    }

    /// Skips any remaining bits of the current byte.
    fn align(&mut self) {
        if self.bit > 0 {
            self.bit = 0;
            self.pos += 1;
        }
    }

    fn bytes_consumed(&self) -> usize {
        self.pos
    }
}

// ── encoding ────────────────────────────────────────────────────────────

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f16(out: &mut Vec<u8>, v: f16) {
    out.extend_from_slice(&v.to_bits().to_le_bytes());
}

fn write_header(out: &mut Vec<u8>, config: &QuantConfig, tensor_count: u32) {
    out.extend_from_slice(MAGIC);
    push_u32(out, VERSION);
    out.extend_from_slice(&config.alpha.to_le_bytes());
    push_u32(out, config.group_size as u32);
    out.push(config.bits_c);
    out.push(config.bits_o);
    out.extend_from_slice(&config.clip_fraction.to_le_bytes());
    push_u32(out, tensor_count);
}

fn write_tensor(out: &mut Vec<u8>, qt: &QuantizedTensor) {
    push_u16(out, qt.name.len() as u16);
    out.extend_from_slice(qt.name.as_bytes());
    push_u32(out, qt.rows as u32);
    push_u32(out, qt.cols as u32);
    let index_width = qt.config.group_size.trailing_zeros();
    for group in &qt.groups {
        push_u16(out, group.outliers.len() as u16);
        push_f16(out, group.params.scale_c);
        push_f16(out, group.params.zero_c);
        push_f16(out, group.params.scale_o);
        push_f16(out, group.params.zero_o);
        let mut bits = BitWriter::new();
        for &code in &group.codes {
            bits.push(u32::from(code), u32::from(qt.config.bits_c));
        }
        for e in &group.outliers {
            bits.push(u32::from(e.index), index_width);
            bits.push(u32::from(e.code), u32::from(qt.config.bits_o));
        }
        out.extend_from_slice(&bits.into_bytes());
    }
}

/// Encodes a whole model into `.adpq` bytes.
pub fn encode_model(model: &PackedModel) -> Result<Vec<u8>, CodecError> {
    model.validate()?;
    if model.tensors.len() > u32::MAX as usize {
        return Err(CodecError::InvariantViolation("too many tensors".into()));
    }
    let mut out = Vec::new();
    write_header(&mut out, &model.config, model.tensors.len() as u32);
    for qt in &model.tensors {
        write_tensor(&mut out, qt);
    }
    Ok(out)
}

/// Encodes a single quantized tensor as a one-tensor `.adpq` container.
pub fn encode(qt: &QuantizedTensor) -> Result<Vec<u8>, CodecError> {
    qt.validate().map_err(map_quant_err)?;
    if qt.name.len() > u16::MAX as usize {
        return Err(CodecError::InvariantViolation("tensor name too long".into()));
    }
    let mut out = Vec::new();
    write_header(&mut out, &qt.config, 1);
    write_tensor(&mut out, qt);
    Ok(out)
}

// ── decoding ────────────────────────────────────────────────────────────

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(CodecError::Truncated(what.to_string())),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f16(&mut self, what: &str) -> Result<f16, CodecError> {
        Ok(f16::from_bits(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap())))
    }
}

/// Decodes `.adpq` bytes, validating every structural invariant.
pub fn decode(bytes: &[u8]) -> Result<PackedModel, CodecError> {
    let mut rd = ByteReader { bytes, pos: 0 };
    if rd.take(8, "magic")? != MAGIC {
        return Err(CodecError::BadMagic);
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(CodecError::BadVersion(version));
    }
    let alpha = rd.f64("config alpha")?;
    let group_size = rd.u32("config group size")? as usize;
    let bits_c = rd.take(1, "config bits")?[0];
    let bits_o = rd.take(1, "config outlier bits")?[0];
    let clip_fraction = rd.f64("config clip fraction")?;
    let config = QuantConfig { alpha, group_size, bits_c, bits_o, clip_fraction };
    config
        .validate()
        .map_err(|e| CodecError::InvariantViolation(format!("config: {e}")))?;

    let tensor_count = rd.u32("tensor count")?;
    let index_width = group_size.trailing_zeros();
    let mut tensors = Vec::with_capacity(tensor_count.min(1024) as usize);
    for _ in 0..tensor_count {
        let name_len = rd.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(rd.take(name_len, "tensor name")?)
            .map_err(|_| CodecError::InvariantViolation("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = rd.u32("tensor rows")? as usize;
        let cols = rd.u32("tensor cols")? as usize;
        if rows == 0 || cols == 0 {
            return Err(CodecError::InvariantViolation(format!(
                "tensor `{name}` has empty shape {rows}x{cols}"
            )));
        }
        let per_row = groups_per_row(cols, group_size);
        let group_count = rows
            .checked_mul(per_row)
            .ok_or_else(|| CodecError::InvariantViolation(format!("tensor `{name}` too large")))?;
        let mut groups = Vec::with_capacity(group_count);
        for gi in 0..group_count {
            let ctx = |what: &str| format!("tensor `{name}`, group {gi}: {what}");
            let glen = group_len(cols, group_size, gi % per_row);
            let k = rd.u16(&ctx("outlier count"))? as usize;
            if k > glen {
                return Err(CodecError::InvariantViolation(ctx(&format!(
                    "outlier count {k} exceeds group length {glen}"
                ))));
            }
            let params = GroupParams {
                scale_c: rd.f16(&ctx("scale"))?,
                zero_c: rd.f16(&ctx("zero point"))?,
                scale_o: rd.f16(&ctx("outlier scale"))?,
                zero_o: rd.f16(&ctx("outlier zero point"))?,
            };
            if k == 0 && (params.scale_o.to_bits() != 0 || params.zero_o.to_bits() != 0) {
                return Err(CodecError::InvariantViolation(ctx(
                    "no outliers but outlier params are not canonical zeros",
                )));
            }
            if k == glen && (params.scale_c.to_bits() != 0 || params.zero_c.to_bits() != 0) {
                return Err(CodecError::InvariantViolation(ctx(
                    "no non-outliers but their params are not canonical zeros",
                )));
            }

            let code_bits = (glen - k) * bits_c as usize + k * (index_width as usize + bits_o as usize);
            let stream = rd.take(code_bits.div_ceil(8), &ctx("code bits"))?;
            let mut bits = BitReader::new(stream);
            let mut codes = Vec::with_capacity(glen - k);
            for _ in 0..glen - k {
                let c = bits.read(u32::from(bits_c)).expect("sized above");
                codes.push(c as u8);
            }
            let mut outliers = Vec::with_capacity(k);
            let mut prev: Option<u16> = None;
            for _ in 0..k {
                let index = bits.read(index_width).expect("sized above") as u16;
                let code = bits.read(u32::from(bits_o)).expect("sized above") as u8;
                if usize::from(index) >= glen {
                    return Err(CodecError::IndexOutOfGroup {
                        tensor: name.clone(),
                        group: gi,
                        index,
                        len: glen,
                    });
                }
                if prev.is_some_and(|p| index <= p) {
                    return Err(CodecError::NonMonotonicOutlierIndices {
                        tensor: name.clone(),
                        group: gi,
                    });
                }
                prev = Some(index);
                outliers.push(OutlierEntry { index, code });
            }
            bits.align();
            debug_assert_eq!(bits.bytes_consumed(), stream.len());
            groups.push(GroupRecord { params, codes, outliers });
        }
        let qt = QuantizedTensor { name, rows, cols, config, groups };
        qt.validate().map_err(map_quant_err)?;
        tensors.push(qt);
    }
    if rd.pos != bytes.len() {
        return Err(CodecError::InvariantViolation(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - rd.pos
        )));
    }
    let model = PackedModel { version, config, tensors };
    model.validate()?;
    Ok(model)
}

// ── size accounting ─────────────────────────────────────────────────────

/// Encoded size of one tensor's stream (its header plus all groups), in bits.
pub fn tensor_stream_bits(qt: &QuantizedTensor) -> u64 {
    let mut bytes = 2 + qt.name.len() as u64 + 4 + 4;
    for group in &qt.groups {
        bytes += 2 + 8 + (group_code_bits(qt, group).div_ceil(8));
    }
    bytes * 8
}

fn group_code_bits(qt: &QuantizedTensor, group: &GroupRecord) -> u64 {
    let index_width = qt.config.group_size.trailing_zeros() as u64;
    group.codes.len() as u64 * qt.config.bits_c as u64
        + group.outliers.len() as u64 * (index_width + qt.config.bits_o as u64)
}

/// Fixed file header size in bits.
pub(crate) fn header_bits() -> u64 {
    HEADER_BYTES * 8
}

/// Exact encoded size of a model in bits (without re-encoding it).
pub(crate) fn model_bits(model: &PackedModel) -> u64 {
    header_bits() + model.tensors.iter().map(tensor_stream_bits).sum::<u64>()
}

/// Compares the container's true cost per weight against the idealized
/// formula and itemizes the difference.
pub fn bits_report(model: &PackedModel) -> Result<BitsReport, CodecError> {
    model.validate()?;
    let n = model.total_weights() as u64;
    let total_bits = model_bits(model);
    // The formula accounts for code bits plus one 2x16-bit param pair per
    // group; everything else (headers, count fields, the second param pair,
    // padding) is overhead.
    let accounted: u64 = model
        .tensors
        .iter()
        .flat_map(|qt| qt.groups.iter().map(move |g| group_code_bits(qt, g) + 32))
        .sum();
    Ok(BitsReport {
        b_avg_theoretical: average_bits_theoretical(&model.config).map_err(map_quant_err)?,
        b_avg_actual: total_bits as f64 / n as f64,
        overhead_bits: total_bits - accounted,
    })
}
