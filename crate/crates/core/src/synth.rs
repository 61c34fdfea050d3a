//! Deterministic synthetic weight tensors for experiments.
//!
//! Everything here is reproducible from a single `u64` seed, on any platform,
//! for any build of this crate: the generator and every distribution
//! transform are fixed, named algorithms implemented in this file rather
//! than delegated to a library whose stream might change between versions.
//!
//! - Raw stream: **xoshiro256++** (Blackman & Vigna), state seeded by
//!   expanding the user seed through four steps of **SplitMix64**.
//! - Uniforms: the top 53 bits of each output, mapped to `[0, 1)`.
//! - Normals: the **Marsaglia polar method** (pairs generated together, the
//!   spare consumed before the stream advances again).
//! - Chi-square: gamma via **Marsaglia–Tsang**, shape `df/2`, scale 2.
//! - Student-t: `z / sqrt(v / df)` with `z` standard normal drawn first and
//!   `v` chi-square drawn second, per element.
//! - Planted positions: unbiased rejection sampling of distinct flat indices;
//!   for each planted weight the position is drawn (and re-drawn on
//!   collision) before its sign.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quant::round_count;
use crate::tensor_store::WeightTensor;

/// Errors from synthetic-spec validation.
#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad spec: {0}")]
    BadSpec(String),
}

/// Which family of synthetic weights to draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// i.i.d. normal with standard deviation `sigma`.
    Gaussian,
    /// i.i.d. Student-t with `df` degrees of freedom, scaled by `sigma`.
    StudentT,
    /// Gaussian base with a seeded fraction of positions overwritten by
    /// `±planted_magnitude` — ground truth for outlier-recovery tests.
    Planted,
}

impl SynthKind {
    fn name(self) -> &'static str {
        match self {
            SynthKind::Gaussian => "gaussian",
            SynthKind::StudentT => "student_t",
            SynthKind::Planted => "planted",
        }
    }
}

fn default_sigma() -> f64 {
    1.0
}

fn default_df() -> f64 {
    3.0
}

/// A complete, JSON-serializable recipe for one synthetic tensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub rows: usize,
    pub cols: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Degrees of freedom; only read for `student_t`. Must exceed 2 so the
    /// distribution has finite variance.
    #[serde(default = "default_df")]
    pub df: f64,
    #[serde(default)]
    pub planted_fraction: f64,
    #[serde(default)]
    pub planted_magnitude: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    /// Checks ranges; the magnitude caps keep every draw representable as a
    /// finite `f32`.
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::BadSpec(msg));
        if self.rows == 0 || self.cols == 0 {
            return bad(format!("shape {}x{} is empty", self.rows, self.cols));
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 || self.sigma > 1e30 {
            return bad(format!("sigma {} must be in (0, 1e30]", self.sigma));
        }
        if self.kind == SynthKind::StudentT && !(self.df.is_finite() && self.df > 2.0) {
            return bad(format!("df {} must be finite and greater than 2", self.df));
        }
        if self.kind == SynthKind::Planted {
            if !self.planted_fraction.is_finite()
                || !(0.0..=1.0).contains(&self.planted_fraction)
            {
                return bad(format!(
                    "planted fraction {} must be in [0, 1]",
                    self.planted_fraction
                ));
            }
            if !self.planted_magnitude.is_finite()
                || self.planted_magnitude < 0.0
                || self.planted_magnitude > 1e30
            {
                return bad(format!(
                    "planted magnitude {} must be in [0, 1e30]",
                    self.planted_magnitude
                ));
            }
        }
        Ok(())
    }
}

// ── fixed pseudo-random stream ──────────────────────────────────────────

/// One step of SplitMix64, used only to expand the seed.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xoshiro256++ as published by Blackman & Vigna; 256 bits of state, output
/// `rotl(s0 + s3, 23) + s0`.
pub(crate) struct Xoshiro256PlusPlus {
    s: [u64; 4],
}

impl Xoshiro256PlusPlus {
    pub(crate) fn seed_from_u64(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Xoshiro256PlusPlus { s }
    }

    pub(crate) fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased uniform index in `[0, n)` by rejection.
    fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }
}

/// Standard normals via the Marsaglia polar method. Accepted pairs yield two
/// values; the spare is handed out before the stream advances again.
struct GaussSource {
    spare: Option<f64>,
}

impl GaussSource {
    fn new() -> Self {
        GaussSource { spare: None }
    }

    fn next(&mut self, rng: &mut Xoshiro256PlusPlus) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let u = 2.0 * rng.next_f64() - 1.0;
            let v = 2.0 * rng.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let m = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * m);
                return u * m;
            }
        }
    }
}

/// Gamma draw via Marsaglia–Tsang; valid for `shape >= 1`, which `df > 2`
/// guarantees for the chi-square use below.
fn next_gamma(
    rng: &mut Xoshiro256PlusPlus,
    gauss: &mut GaussSource,
    shape: f64,
    scale: f64,
) -> f64 {
    debug_assert!(shape >= 1.0);
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = gauss.next(rng);
        let v = (1.0 + c * x).powi(3);
        if v <= 0.0 {
            continue;
        }
        let u = rng.next_f64();
        if u < 1.0 - 0.0331 * x.powi(4) {
            return d * v * scale;
        }
        if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v * scale;
        }
    }
}

/// Materializes the tensor a spec describes. Same spec, same bytes — always.
pub fn generate(spec: &SynthSpec) -> Result<WeightTensor, SynthError> {
    spec.validate()?;
    let n = spec.rows * spec.cols;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let mut gauss = GaussSource::new();
    let mut data: Vec<f32> = Vec::with_capacity(n);

    match spec.kind {
        SynthKind::Gaussian | SynthKind::Planted => {
            for _ in 0..n {
                data.push((spec.sigma * gauss.next(&mut rng)) as f32);
            }
        }
        SynthKind::StudentT => {
            let shape = spec.df / 2.0;
            for _ in 0..n {
                // z first, then the chi-square draw; redraw the rare
                // non-finite ratio rather than emit it.
                let t = loop {
                    let z = gauss.next(&mut rng);
                    let v = next_gamma(&mut rng, &mut gauss, shape, 2.0);
                    let t = spec.sigma * z / (v / spec.df).sqrt();
                    if (t as f32).is_finite() {
                        break t;
                    }
                };
                data.push(t as f32);
            }
        }
    }

    if spec.kind == SynthKind::Planted {
        let m = round_count(spec.planted_fraction, n);
        let mut chosen = std::collections::HashSet::with_capacity(m);
        for _ in 0..m {
            let pos = loop {
                let p = rng.next_index(n);
                if !chosen.contains(&p) {
                    break p;
                }
            };
            chosen.insert(pos);
            let sign = if rng.next_u64() >> 63 == 1 { -1.0 } else { 1.0 };
            data[pos] = (sign * spec.planted_magnitude) as f32;
        }
    }

    WeightTensor::new(spec.kind.name(), spec.rows, spec.cols, data)
        .map_err(|e| SynthError::BadSpec(e.to_string()))
}
