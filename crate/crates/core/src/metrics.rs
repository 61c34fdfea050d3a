//! Quantization-quality metrics and the per-tensor report.
//!
//! Distribution divergences are estimated from equal-width histograms built
//! over the joint support of both sample sets, with a tiny epsilon added to
//! every bin before normalizing so empty bins never produce infinities. All
//! logarithms are natural: divergences are reported in nats.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packed::{self, CodecError, PackedModel};
use crate::quant::{
    dequantize_tensor, find_lambda, groups_per_row, QuantError, QuantizedTensor,
};
use crate::tensor_store::WeightTensor;

/// Default histogram resolution for divergence estimates.
pub const DEFAULT_BINS: usize = 2048;

/// Additive smoothing mass per bin, applied before normalization.
const SMOOTHING_EPS: f64 = 1e-10;

/// Errors from metric computations.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {left} values vs {right}")]
    ShapeMismatch { left: usize, right: usize },
    #[error("input is empty")]
    EmptyInput,
    #[error("mixture weight {0} is outside (0, 1)")]
    PiOutOfRange(f64),
    #[error("bin count {0} must be at least 1")]
    BadBins(usize),
    #[error("tensor `{0}` is not part of the packed model")]
    MissingTensor(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// A smoothed, normalized equal-width histogram over `[lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    /// One probability mass per bin; sums to 1.
    pub mass: Vec<f64>,
}

impl Histogram {
    /// Bins `samples` over `[lo, hi]` (values at `hi` land in the last bin),
    /// adds the smoothing epsilon to every bin, and normalizes.
    pub fn build(samples: &[f32], lo: f64, hi: f64, bins: usize) -> Result<Self, MetricsError> {
        if bins == 0 {
            return Err(MetricsError::BadBins(bins));
        }
        if samples.is_empty() {
            return Err(MetricsError::EmptyInput);
        }
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(MetricsError::EmptyInput);
        }
        let mut counts = vec![0u64; bins];
        let width_inv = bins as f64 / (hi - lo);
        for &x in samples {
            let i = (((x as f64 - lo) * width_inv) as usize).min(bins - 1);
            counts[i] += 1;
        }
        let total = samples.len() as f64 + bins as f64 * SMOOTHING_EPS;
        let mass = counts
            .iter()
            .map(|&c| (c as f64 + SMOOTHING_EPS) / total)
            .collect();
        Ok(Histogram { lo, hi, mass })
    }
}

fn shape_check(a: &[f32], b: &[f32]) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::ShapeMismatch { left: a.len(), right: b.len() });
    }
    if a.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(())
}

/// Mean squared elementwise difference, accumulated in `f64`.
pub fn mse(a: &[f32], b: &[f32]) -> Result<f64, MetricsError> {
    shape_check(a, b)?;
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Largest absolute elementwise difference.
pub fn max_abs_err(a: &[f32], b: &[f32]) -> Result<f64, MetricsError> {
    shape_check(a, b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0, f64::max))
}

/// The adaptive-LASSO penalty of a reconstruction: `sum(|recon_i / orig_i|)`
/// over entries where the original weight is nonzero (zeros contribute
/// nothing — their ratio is undefined).
pub fn penalty_sum(original: &[f32], recon: &[f32]) -> Result<f64, MetricsError> {
    shape_check(original, recon)?;
    Ok(original
        .iter()
        .zip(recon)
        .filter(|(&w, _)| w != 0.0)
        .map(|(&w, &r)| (r as f64 / w as f64).abs())
        .sum())
}

fn joint_support(a: &[f32], b: &[f32]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in a.iter().chain(b) {
        lo = lo.min(x as f64);
        hi = hi.max(x as f64);
    }
    (lo, hi)
}

/// Histogram estimate of `KL(P || Q)` in nats over the joint support of both
/// sample sets.
///
/// If every sample in both sets is one identical constant the distributions
/// coincide and the divergence is 0.
pub fn kl_hist(p_samples: &[f32], q_samples: &[f32], bins: usize) -> Result<f64, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::BadBins(bins));
    }
    if p_samples.is_empty() || q_samples.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let (lo, hi) = joint_support(p_samples, q_samples);
    if lo == hi {
        return Ok(0.0);
    }
    let p = Histogram::build(p_samples, lo, hi, bins)?;
    let q = Histogram::build(q_samples, lo, hi, bins)?;
    Ok(p.mass
        .iter()
        .zip(&q.mass)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum())
}

/// Jensen–Shannon divergence with mixture weight `pi` on `x_samples`:
/// `pi * KL(X || M) + (1 - pi) * KL(Y || M)` where `M = pi X + (1 - pi) Y`,
/// in nats. Bounded by the binary entropy of `pi`, hence by `ln 2`.
pub fn jsd_mixture(
    x_samples: &[f32],
    y_samples: &[f32],
    pi: f64,
    bins: usize,
) -> Result<f64, MetricsError> {
    if !pi.is_finite() || !(pi > 0.0 && pi < 1.0) {
        return Err(MetricsError::PiOutOfRange(pi));
    }
    if bins == 0 {
        return Err(MetricsError::BadBins(bins));
    }
    if x_samples.is_empty() || y_samples.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let (lo, hi) = joint_support(x_samples, y_samples);
    if lo == hi {
        return Ok(0.0);
    }
    let x = Histogram::build(x_samples, lo, hi, bins)?;
    let y = Histogram::build(y_samples, lo, hi, bins)?;
    let mut div = 0.0;
    for (&a, &b) in x.mass.iter().zip(&y.mass) {
        let m = pi * a + (1.0 - pi) * b;
        div += pi * a * (a / m).ln() + (1.0 - pi) * b * (b / m).ln();
    }
    Ok(div)
}

/// Everything worth knowing about one quantized tensor, JSON-ready.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub mse: f64,
    pub max_abs_err: f64,
    pub penalty_sum: f64,
    /// `KL(original || reconstructed)` over value histograms, nats.
    pub kl: f64,
    /// Divergence between the original non-outlier and outlier populations,
    /// mixture-weighted by `1 - alpha`; 0 by convention when `alpha == 0`.
    pub jsd: f64,
    pub b_avg_theoretical: f64,
    pub b_avg_actual: f64,
    pub outlier_count: u64,
    pub lambda_prime: f64,
}

/// Splits the original values into (non-outlier, outlier) populations using
/// the positions recorded in the quantized tensor.
fn split_populations(original: &WeightTensor, qt: &QuantizedTensor) -> (Vec<f32>, Vec<f32>) {
    let g = qt.config.group_size;
    let per_row = groups_per_row(qt.cols, g);
    let mut keep = Vec::with_capacity(original.len() - qt.outlier_count());
    let mut out = Vec::with_capacity(qt.outlier_count());
    for (gi, group) in qt.groups.iter().enumerate() {
        let start = (gi / per_row) * qt.cols + (gi % per_row) * g;
        let glen = crate::quant::group_len(qt.cols, g, gi % per_row);
        let mut outliers = group.outliers.iter().peekable();
        for local in 0..glen {
            let v = original.data[start + local];
            match outliers.peek() {
                Some(e) if usize::from(e.index) == local => {
                    outliers.next();
                    out.push(v);
                }
                _ => keep.push(v),
            }
        }
    }
    (keep, out)
}

/// Builds the full quality report for one tensor.
///
/// `model` must contain `qt` (it supplies the container's true bit cost; for
/// a single-tensor model the file header is attributed to that tensor,
/// otherwise each tensor is charged only its own stream).
pub fn build_report(
    original: &WeightTensor,
    qt: &QuantizedTensor,
    model: &PackedModel,
    bins: usize,
) -> Result<QuantReport, MetricsError> {
    if original.rows != qt.rows || original.cols != qt.cols {
        return Err(MetricsError::ShapeMismatch { left: original.len(), right: qt.len() });
    }
    if !model.tensors.iter().any(|t| t.name == qt.name) {
        return Err(MetricsError::MissingTensor(qt.name.clone()));
    }
    let recon = dequantize_tensor(qt)?;

    let alpha = qt.config.alpha;
    let (keep, out) = split_populations(original, qt);
    let jsd = if alpha == 0.0 || keep.is_empty() || out.is_empty() {
        0.0
    } else {
        jsd_mixture(&keep, &out, 1.0 - alpha, bins)?
    };

    let mut bits = packed::tensor_stream_bits(qt);
    if model.tensors.len() == 1 {
        bits += packed::header_bits();
    }

    Ok(QuantReport {
        mse: mse(&original.data, &recon.data)?,
        max_abs_err: max_abs_err(&original.data, &recon.data)?,
        penalty_sum: penalty_sum(&original.data, &recon.data)?,
        kl: kl_hist(&original.data, &recon.data, bins)?,
        jsd,
        b_avg_theoretical: packed::average_bits_theoretical(&qt.config)?,
        b_avg_actual: bits as f64 / qt.len() as f64,
        outlier_count: qt.outlier_count() as u64,
        lambda_prime: find_lambda(&original.data, alpha)?.0,
    })
}
