//! Outlier selection and mixed-precision grouped minmax quantization.
//!
//! Selection works on the whole tensor: weights are ranked by magnitude and
//! the top `alpha` fraction become outliers. The threshold has a closed form —
//! shrinking weights by the adaptive soft threshold
//! `sign(w) * max(|w| - lambda'/|w|, 0)` leaves a weight nonzero exactly when
//! `|w| > sqrt(lambda')`, so picking `lambda'` as the squared `(k+1)`-th
//! largest magnitude selects exactly the top `k`. No calibration data or
//! iterative search is involved.
//!
//! Quantization then runs per row-major group of `group_size` weights (the
//! last group of a row may be short). Outliers and non-outliers are coded
//! separately against their own minmax ranges; scales and zero points are
//! rounded to binary16, which is what the packed container stores. Codes are
//! always computed from the original weights — shrinkage is only the
//! selection mechanism, never applied to stored values.

use half::f16;
use thiserror::Error;

use crate::tensor_store::WeightTensor;

/// Errors from configuration checks and the quantization pipeline.
#[derive(Debug, Error)]
pub enum QuantError {
    #[error("input contains a non-finite value")]
    NonFiniteInput,
    #[error("input is empty")]
    EmptyInput,
    #[error("alpha {0} is outside [0, 0.5]")]
    AlphaOutOfRange(f64),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("invalid input tensor: {0}")]
    InvalidTensor(String),
    #[error("group parameter {0} is outside the binary16 range")]
    GroupParamOverflow(f64),
    #[error("corrupt quantized tensor: {0}")]
    CorruptQuantizedTensor(String),
}

/// Knobs for one quantization run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantConfig {
    /// Fraction of weights kept as outliers, in `[0, 0.5]`.
    pub alpha: f64,
    /// Weights per quantization group; a power of two in `[2, 1024]`.
    pub group_size: usize,
    /// Bit width for non-outlier codes, in `[2, 8]`.
    pub bits_c: u8,
    /// Bit width for outlier codes, in `[2, 8]`.
    pub bits_o: u8,
    /// Symmetric shrink of each group's non-outlier range, in `(0, 1]`;
    /// `1.0` quantizes over the full `[min, max]`.
    pub clip_fraction: f64,
}

impl QuantConfig {
    /// Checks every field against its allowed range.
    pub fn validate(&self) -> Result<(), QuantError> {
        if !self.alpha.is_finite() || !(0.0..=0.5).contains(&self.alpha) {
            return Err(QuantError::AlphaOutOfRange(self.alpha));
        }
        let g = self.group_size;
        if !(2..=1024).contains(&g) || !g.is_power_of_two() {
            return Err(QuantError::BadConfig(format!(
                "group_size {g} must be a power of two in [2, 1024]"
            )));
        }
        for (label, bits) in [("bits", self.bits_c), ("outlier-bits", self.bits_o)] {
            if !(2..=8).contains(&bits) {
                return Err(QuantError::BadConfig(format!(
                    "{label} {bits} must be in [2, 8]"
                )));
            }
        }
        if !self.clip_fraction.is_finite()
            || !(self.clip_fraction > 0.0 && self.clip_fraction <= 1.0)
        {
            return Err(QuantError::BadConfig(format!(
                "clip fraction {} must be in (0, 1]",
                self.clip_fraction
            )));
        }
        Ok(())
    }
}

/// Which weights of a tensor were selected as outliers, and the threshold
/// that selects them.
#[derive(Clone, Debug, PartialEq)]
pub struct OutlierPartition {
    /// Squared magnitude threshold; a weight is an outlier iff
    /// `|w| > sqrt(lambda_prime)`, with ties resolved toward lower flat index.
    pub lambda_prime: f64,
    /// Number of outliers, `round(alpha * n)` clamped to `[0, n]`.
    pub k: usize,
    /// One flag per weight in row-major order; exactly `k` are set.
    pub outlier_flags: Vec<bool>,
}

/// Per-group scales and zero points, all exactly binary16.
///
/// When a group has no outliers, `scale_o` and `zero_o` are canonical zeros;
/// symmetrically, a group that is all outliers stores canonical zeros for
/// `scale_c` and `zero_c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupParams {
    pub scale_c: f16,
    pub zero_c: f16,
    pub scale_o: f16,
    pub zero_o: f16,
}

impl GroupParams {
    pub const ZERO: GroupParams = GroupParams {
        scale_c: f16::ZERO,
        zero_c: f16::ZERO,
        scale_o: f16::ZERO,
        zero_o: f16::ZERO,
    };
}

/// One outlier inside a group: its position within the group and its code.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutlierEntry {
    pub index: u16,
    pub code: u8,
}

/// One quantized group: non-outlier codes in original position order plus
/// outlier entries sorted by ascending index.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRecord {
    pub params: GroupParams,
    pub codes: Vec<u8>,
    pub outliers: Vec<OutlierEntry>,
}

/// A fully quantized tensor: groups laid out row-major, left to right within
/// each row, with the config that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub config: QuantConfig,
    pub groups: Vec<GroupRecord>,
}

impl QuantizedTensor {
    /// Number of weights (`rows * cols`).
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total outliers across all groups.
    pub fn outlier_count(&self) -> usize {
        self.groups.iter().map(|g| g.outliers.len()).sum()
    }

    /// Checks structural consistency: group count and lengths, code ranges,
    /// strictly increasing in-range outlier indices, finite non-negative
    /// scales, and canonical zero params for empty populations.
    pub fn validate(&self) -> Result<(), QuantError> {
        self.config.validate()?;
        if self.rows == 0 || self.cols == 0 {
            return Err(QuantError::EmptyInput);
        }
        let per_row = groups_per_row(self.cols, self.config.group_size);
        if self.groups.len() != self.rows * per_row {
            return Err(QuantError::CorruptQuantizedTensor(format!(
                "tensor `{}` holds {} groups, expected {}",
                self.name,
                self.groups.len(),
                self.rows * per_row
            )));
        }
        let corrupt = |g: usize, what: String| {
            QuantError::CorruptQuantizedTensor(format!(
                "tensor `{}`, group {g}: {what}",
                self.name
            ))
        };
        for (gi, group) in self.groups.iter().enumerate() {
            let glen = group_len(self.cols, self.config.group_size, gi % per_row);
            if group.codes.len() + group.outliers.len() != glen {
                return Err(corrupt(
                    gi,
                    format!(
                        "{} codes + {} outliers != group length {glen}",
                        group.codes.len(),
                        group.outliers.len()
                    ),
                ));
            }
            let max_c = max_code(self.config.bits_c);
            if let Some(&c) = group.codes.iter().find(|&&c| c > max_c) {
                return Err(corrupt(gi, format!("code {c} exceeds {}-bit range", self.config.bits_c)));
            }
            let mut prev: Option<u16> = None;
            for e in &group.outliers {
                if usize::from(e.index) >= glen {
                    return Err(corrupt(gi, format!("outlier index {} outside group", e.index)));
                }
                if prev.is_some_and(|p| e.index <= p) {
                    return Err(corrupt(gi, "outlier indices not strictly increasing".into()));
                }
                prev = Some(e.index);
                if e.code > max_code(self.config.bits_o) {
                    return Err(corrupt(
                        gi,
                        format!("outlier code {} exceeds {}-bit range", e.code, self.config.bits_o),
                    ));
                }
            }
            for (label, scale, zero, empty) in [
                ("non-outlier", group.params.scale_c, group.params.zero_c, group.codes.is_empty()),
                ("outlier", group.params.scale_o, group.params.zero_o, group.outliers.is_empty()),
            ] {
                if !scale.is_finite() || !zero.is_finite() || scale < f16::ZERO {
                    return Err(corrupt(gi, format!("invalid {label} params")));
                }
                if empty && (scale != f16::ZERO || zero != f16::ZERO) {
                    return Err(corrupt(
                        gi,
                        format!("{label} population is empty but params are not canonical zeros"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Largest code representable in `bits`.
pub(crate) fn max_code(bits: u8) -> u8 {
    ((1u16 << bits) - 1) as u8
}

/// Groups per row for a given width.
pub(crate) fn groups_per_row(cols: usize, group_size: usize) -> usize {
    cols.div_ceil(group_size)
}

/// Length of the `j`-th group in a row (the last one may be short).
pub(crate) fn group_len(cols: usize, group_size: usize, j: usize) -> usize {
    group_size.min(cols - j * group_size)
}

/// `round(fraction * n)` with halves away from zero, clamped to `[0, n]`.
pub(crate) fn round_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

fn check_finite(weights: &[f32]) -> Result<(), QuantError> {
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(QuantError::NonFiniteInput);
    }
    Ok(())
}

/// Adaptive soft threshold: `sign(w) * max(|w| - lambda'/|w|, 0)`, with
/// `soft_threshold(0, _) == 0`.
///
/// The result is nonzero exactly when `|w| > sqrt(lambda')`; the shrink
/// amount `lambda'/|w|` fades for large weights, which is what makes the
/// magnitude ranking adaptive rather than a fixed subtraction.
pub fn soft_threshold(w: f64, lambda_prime: f64) -> Result<f64, QuantError> {
    if !w.is_finite() || !lambda_prime.is_finite() {
        return Err(QuantError::NonFiniteInput);
    }
    if lambda_prime < 0.0 {
        return Err(QuantError::BadConfig(format!(
            "threshold {lambda_prime} must be non-negative"
        )));
    }
    if w == 0.0 {
        return Ok(0.0);
    }
    Ok(w.signum() * (w.abs() - lambda_prime / w.abs()).max(0.0))
}

/// Bit pattern of the magnitude with descending rank `k` (0-based) — the
/// `(k+1)`-th largest `|w|` — plus its rank among the weights equal to it.
///
/// Finite magnitudes order exactly like their bit patterns, so the value can
/// be pinned down one byte at a time with four read-only counting passes —
/// deterministic O(n), no scratch allocation, no data movement. The residual
/// rank after the walk counts the strictly-larger weights already consumed
/// out of `k`, i.e. how many ties at the returned magnitude precede rank `k`.
fn kth_magnitude_bits(weights: &[f32], k: usize) -> (u32, usize) {
    debug_assert!(k < weights.len());
    let mut prefix: u32 = 0;
    let mut rank = k;
    for byte in (0..4usize).rev() {
        let shift = (byte * 8) as u32;
        let decided = if byte == 3 { 0 } else { u32::MAX << (shift + 8) };
        let mut counts = [0usize; 256];
        for w in weights {
            let bits = w.abs().to_bits();
            if bits & decided == prefix {
                counts[((bits >> shift) & 0xFF) as usize] += 1;
            }
        }
        // Walk buckets from the largest down; the class holding the target
        // contains more than `rank` entries, so this never underflows.
        let mut bucket = 255usize;
        while counts[bucket] <= rank {
            rank -= counts[bucket];
            bucket -= 1;
        }
        prefix |= (bucket as u32) << shift;
    }
    (prefix, rank)
}

/// The threshold magnitude (as bits) plus how many weights tied with it are
/// selected; together they determine the outlier set exactly.
#[derive(Clone, Copy, Debug)]
struct ThresholdStats {
    k: usize,
    /// Bit pattern of the `(k+1)`-th largest magnitude; `0` when `k == n`.
    m_bits: u32,
    /// Number of weights with magnitude == `m_bits` that still make the cut.
    tie_quota: usize,
}

fn threshold_stats(weights: &[f32], alpha: f64) -> Result<ThresholdStats, QuantError> {
    if weights.is_empty() {
        return Err(QuantError::EmptyInput);
    }
    if !alpha.is_finite() || !(0.0..=0.5).contains(&alpha) {
        return Err(QuantError::AlphaOutOfRange(alpha));
    }
    check_finite(weights)?;
    let n = weights.len();
    let k = round_count(alpha, n);
    let (m_bits, tie_quota) = if k == n {
        // Everything is an outlier; zeros "tie" with the zero threshold.
        (0, weights.iter().filter(|w| w.abs().to_bits() == 0).count())
    } else {
        kth_magnitude_bits(weights, k)
    };
    Ok(ThresholdStats { k, m_bits, tie_quota })
}

/// Streams the outlier decision over weights visited in ascending flat
/// (row-major) order: strictly-above-threshold weights are outliers, and
/// ties at the threshold are taken first-come until the quota is spent —
/// exactly the lower-index tie rule.
struct OutlierStream {
    m_bits: u32,
    remaining_ties: usize,
}

impl OutlierStream {
    fn new(stats: ThresholdStats) -> Self {
        OutlierStream { m_bits: stats.m_bits, remaining_ties: stats.tie_quota }
    }

    fn is_outlier(&mut self, w: f32) -> bool {
        let bits = w.abs().to_bits();
        if bits > self.m_bits {
            true
        } else if bits == self.m_bits && self.remaining_ties > 0 {
            self.remaining_ties -= 1;
            true
        } else {
            false
        }
    }
}

/// Finds the threshold that marks the top `alpha` fraction of `weights` (by
/// magnitude) as outliers.
///
/// Returns `(lambda_prime, k)` where `k = round(alpha * n)` and
/// `lambda_prime` is the squared `(k+1)`-th largest magnitude (`0` when
/// `k == n`, the squared maximum when `k == 0`). Computed as an order
/// statistic in deterministic O(n) time rather than by sorting.
pub fn find_lambda(weights: &[f32], alpha: f64) -> Result<(f64, usize), QuantError> {
    let stats = threshold_stats(weights, alpha)?;
    let m = f64::from(f32::from_bits(stats.m_bits));
    Ok((m * m, stats.k))
}

/// Flags the top `round(alpha * n)` weights by magnitude as outliers.
///
/// Ties at the threshold magnitude are resolved toward the lower flat
/// (row-major) index, so exactly `k` flags are always set.
pub fn select_outliers(
    tensor: &WeightTensor,
    config: &QuantConfig,
) -> Result<OutlierPartition, QuantError> {
    config.validate()?;
    partition_by_magnitude(&tensor.data, config.alpha)
}

fn partition_by_magnitude(weights: &[f32], alpha: f64) -> Result<OutlierPartition, QuantError> {
    let stats = threshold_stats(weights, alpha)?;
    let mut stream = OutlierStream::new(stats);
    let outlier_flags = weights.iter().map(|&w| stream.is_outlier(w)).collect();
    let m = f64::from(f32::from_bits(stats.m_bits));
    Ok(OutlierPartition { lambda_prime: m * m, k: stats.k, outlier_flags })
}

/// Computes the quantization range of a group: the midpoint-preserving
/// symmetric shrink of `[min, max]` by `clip_fraction`.
///
/// `clip_fraction == 1` returns `(min, max)` exactly (special-cased so no
/// floating-point round-off ever widens or narrows the untouched range).
pub fn clip_range(values: &[f32], clip_fraction: f64) -> Result<(f32, f32), QuantError> {
    if values.is_empty() {
        return Err(QuantError::EmptyInput);
    }
    check_finite(values)?;
    if !clip_fraction.is_finite() || !(clip_fraction > 0.0 && clip_fraction <= 1.0) {
        return Err(QuantError::BadConfig(format!(
            "clip fraction {clip_fraction} must be in (0, 1]"
        )));
    }
    let mut min = values[0];
    let mut max = values[0];
    for &v in &values[1..] {
        min = min.min(v);
        max = max.max(v);
    }
    if clip_fraction == 1.0 {
        return Ok((min, max));
    }
    let mid = (min as f64 + max as f64) / 2.0;
    let half = clip_fraction * (max as f64 - min as f64) / 2.0;
    Ok(((mid - half) as f32, (mid + half) as f32))
}

/// Minmax-quantizes one population of a group to `bits`-wide codes.
///
/// Returns `(codes, scale, zero)` with codes in input order. The scale is
/// `(hi - lo) / (2^bits - 1)` and the zero point is `lo`, both rounded to
/// nearest binary16 (ties to even); codes are computed against the rounded
/// values so encoder and decoder share exactly the same parameters. Code
/// rounding is half away from zero. A degenerate range (`hi == lo`, or one
/// so small the scale rounds to binary16 zero) stores scale `0` and all-zero
/// codes, reconstructing every value as the zero point.
pub fn minmax_quantize_group(
    values: &[f32],
    bits: u8,
    clip_fraction: f64,
) -> Result<(Vec<u8>, f16, f16), QuantError> {
    if !(2..=8).contains(&bits) {
        return Err(QuantError::BadConfig(format!("bits {bits} must be in [2, 8]")));
    }
    let (lo, hi) = clip_range(values, clip_fraction)?;
    let levels = max_code(bits) as f64;
    let zero = f16::from_f32(lo);
    if !zero.is_finite() {
        return Err(QuantError::GroupParamOverflow(lo as f64));
    }
    if hi == lo {
        return Ok((vec![0; values.len()], f16::ZERO, zero));
    }
    let scale_exact = (hi as f64 - lo as f64) / levels;
    let scale = f16::from_f64(scale_exact);
    if !scale.is_finite() {
        return Err(QuantError::GroupParamOverflow(scale_exact));
    }
    if scale == f16::ZERO {
        // Range narrower than binary16 can resolve; collapse to the zero point.
        return Ok((vec![0; values.len()], f16::ZERO, zero));
    }
    let s = scale.to_f64();
    let z = zero.to_f64();
    let codes = values
        .iter()
        .map(|&v| {
            let clamped = v.clamp(lo, hi) as f64;
            let q = ((clamped - z) / s).round(); // ties away from zero
            q.clamp(0.0, levels) as u8
        })
        .collect();
    Ok((codes, scale, zero))
}

/// Reconstructs one population: `code * scale + zero` in binary32.
pub fn dequantize_group(codes: &[u8], scale: f16, zero: f16) -> Vec<f32> {
    let s = scale.to_f32();
    let z = zero.to_f32();
    codes.iter().map(|&c| c as f32 * s + z).collect()
}

/// Quantizes a tensor: selects outliers over the whole tensor, then codes
/// outliers and non-outliers separately per row-major group.
///
/// Non-outliers use `bits_c` and the configured clip fraction; outliers use
/// `bits_o` and are never clipped. Codes always come from the original
/// weights.
pub fn quantize_tensor(
    tensor: &WeightTensor,
    config: &QuantConfig,
) -> Result<QuantizedTensor, QuantError> {
    config.validate()?;
    tensor
        .validate()
        .map_err(|e| QuantError::InvalidTensor(e.to_string()))?;
    let stats = threshold_stats(&tensor.data, config.alpha)?;
    // Groups are visited in ascending flat order, so the outlier decision can
    // stream through one shared tie counter instead of a flags table.
    let mut stream = OutlierStream::new(stats);
    let g = config.group_size;
    let per_row = groups_per_row(tensor.cols, g);
    let mut groups = Vec::with_capacity(tensor.rows * per_row);

    let mut values_c: Vec<f32> = Vec::with_capacity(g);
    let mut values_o: Vec<f32> = Vec::with_capacity(g);
    let mut indices_o: Vec<u16> = Vec::with_capacity(g);
    for r in 0..tensor.rows {
        for j in 0..per_row {
            let start = r * tensor.cols + j * g;
            values_c.clear();
            values_o.clear();
            indices_o.clear();
            for local in 0..group_len(tensor.cols, g, j) {
                let w = tensor.data[start + local];
                if stream.is_outlier(w) {
                    indices_o.push(local as u16);
                    values_o.push(w);
                } else {
                    values_c.push(w);
                }
            }
            let (codes, scale_c, zero_c) = if values_c.is_empty() {
                (Vec::new(), f16::ZERO, f16::ZERO)
            } else {
                minmax_quantize_group(&values_c, config.bits_c, config.clip_fraction)?
            };
            let (codes_o, scale_o, zero_o) = if values_o.is_empty() {
                (Vec::new(), f16::ZERO, f16::ZERO)
            } else {
                minmax_quantize_group(&values_o, config.bits_o, 1.0)?
            };
            let outliers = indices_o
                .iter()
                .zip(&codes_o)
                .map(|(&index, &code)| OutlierEntry { index, code })
                .collect();
            groups.push(GroupRecord {
                params: GroupParams { scale_c, zero_c, scale_o, zero_o },
                codes,
                outliers,
            });
        }
    }
    let qt = QuantizedTensor {
        name: tensor.name.clone(),
        rows: tensor.rows,
        cols: tensor.cols,
        config: *config,
        groups,
    };
    debug_assert_eq!(qt.outlier_count(), stats.k);
    Ok(qt)
}

/// Reconstructs the weight tensor a [`QuantizedTensor`] encodes.
///
/// Validates the structure first and reports the offending group on failure.
pub fn dequantize_tensor(qt: &QuantizedTensor) -> Result<WeightTensor, QuantError> {
    qt.validate()?;
    let g = qt.config.group_size;
    let per_row = groups_per_row(qt.cols, g);
    let mut data = vec![0f32; qt.rows * qt.cols];
    for (gi, group) in qt.groups.iter().enumerate() {
        let r = gi / per_row;
        let j = gi % per_row;
        let start = r * qt.cols + j * g;
        let sc = group.params.scale_c.to_f32();
        let zc = group.params.zero_c.to_f32();
        let so = group.params.scale_o.to_f32();
        let zo = group.params.zero_o.to_f32();
        let mut codes = group.codes.iter();
        let mut outliers = group.outliers.iter().peekable();
        for local in 0..group_len(qt.cols, g, j) {
            data[start + local] = match outliers.peek() {
                Some(e) if usize::from(e.index) == local => {
                    let e = outliers.next().unwrap();
                    e.code as f32 * so + zo
                }
                _ => {
                    let c = *codes.next().expect("validated code count");
                    c as f32 * sc + zc
                }
            };
        }
    }
    WeightTensor::new(qt.name.clone(), qt.rows, qt.cols, data)
        .map_err(|e| QuantError::CorruptQuantizedTensor(e.to_string()))
}

/// Plain round-to-nearest baseline: grouped minmax at a single bit width,
/// no outliers, no clipping. Definitionally identical to [`quantize_tensor`]
/// with `alpha = 0` and `clip_fraction = 1`.
pub fn rtn_quantize(
    tensor: &WeightTensor,
    group_size: usize,
    bits: u8,
) -> Result<QuantizedTensor, QuantError> {
    quantize_tensor(
        tensor,
        &QuantConfig {
            alpha: 0.0,
            group_size,
            bits_c: bits,
            bits_o: bits,
            clip_fraction: 1.0,
        },
    )
}
