//! Calibration-free, outlier-aware post-training weight quantization.
//!
//! The pipeline treats quantization as a shrinkage problem: an adaptive-LASSO
//! soft threshold ranks weights by magnitude, the largest `alpha` fraction are
//! set aside as outliers, and the two populations are quantized separately
//! with per-group minmax scales. Keeping a few percent of weights at a higher
//! bit width preserves the tails of the weight distribution without any
//! calibration data, gradients, or search.
//!
//! Modules:
//!
//! - [`tensor_store`] — the `.aqt` container for raw `f32` weight tensors
//! - [`quant`] — threshold selection, grouped minmax quantization, and the
//!   in-memory [`QuantizedTensor`] representation
//! - [`packed`] — the bit-packed `.adpq` container and average-bits accounting
//! - [`metrics`] — error and distribution-divergence metrics, plus the
//!   [`QuantReport`] summary
//! - [`synth`] — deterministic synthetic weight generators for experiments
//!
//! # Example
//!
//! ```
//! use adpq::{generate, quantize_tensor, dequantize_tensor, QuantConfig, SynthSpec};
//!
//! let spec: SynthSpec = serde_json::from_str(
//!     r#"{"kind":"gaussian","rows":8,"cols":16,"sigma":1.0,"seed":7}"#,
//! ).unwrap();
//! let weights = generate(&spec).unwrap();
//!
//! let config = QuantConfig {
//!     alpha: 0.08,
//!     group_size: 8,
//!     bits_c: 4,
//!     bits_o: 4,
//!     clip_fraction: 1.0,
//! };
//! let qt = quantize_tensor(&weights, &config).unwrap();
//! let restored = dequantize_tensor(&qt).unwrap();
//! assert_eq!(restored.rows, weights.rows);
//! assert_eq!(restored.cols, weights.cols);
//! ```

pub mod metrics;
pub mod packed;
pub mod quant;
pub mod synth;
pub mod tensor_store;

pub use half::f16;
pub use metrics::{
    build_report, jsd_mixture, kl_hist, max_abs_err, mse, penalty_sum, QuantReport, DEFAULT_BINS,
};
pub use packed::{
    average_bits_theoretical, bits_report, decode, encode, encode_model, BitsReport, PackedModel,
};
pub use quant::{
    dequantize_tensor, find_lambda, quantize_tensor, rtn_quantize, select_outliers, QuantConfig,
    QuantizedTensor,
};
pub use synth::{generate, SynthKind, SynthSpec};
pub use tensor_store::{read_tensors, write_tensors, TensorFile, WeightTensor};
