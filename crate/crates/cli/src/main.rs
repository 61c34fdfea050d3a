//! Command-line front door for the adpq toolkit.
//!
//! Five subcommands: `quantize` a weight file into the packed container,
//! `dequantize` it back, `report` reconstruction quality, `compare` a config
//! against the round-to-nearest baseline, and `gen` synthetic weight files.
//! Data goes to files, reports to stdout, and every failure is a single
//! `error: ...` line on stderr. Exit codes: 0 success, 1 usage or flag
//! validation, 2 file I/O or format, 3 internal invariant breach. Runs are
//! fully deterministic: identical inputs produce bit-identical outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use adpq::{
    build_report, decode, dequantize_tensor, encode_model, generate, quantize_tensor,
    read_tensors, rtn_quantize, write_tensors, PackedModel, QuantConfig, QuantReport,
    QuantizedTensor, SynthSpec, WeightTensor, DEFAULT_BINS,
};

// ── Arguments ──────────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(name = "adpq", version, about = "Calibration-free weight quantization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a `.aqt` weight file into a packed `.adpq` container.
    Quantize {
        /// Input `.aqt` weight file.
        input: PathBuf,
        /// Output `.adpq` container.
        output: PathBuf,
        #[command(flatten)]
        flags: QuantFlags,
        #[command(flatten)]
        report: ReportFlags,
    },
    /// Reconstruct a `.aqt` weight file from a packed `.adpq` container.
    Dequantize {
        /// Input `.adpq` container.
        input: PathBuf,
        /// Output `.aqt` weight file.
        output: PathBuf,
    },
    /// Score a packed container against the original weights.
    Report {
        /// Original `.aqt` weight file.
        original: PathBuf,
        /// Packed `.adpq` container quantized from it.
        packed: PathBuf,
        #[command(flatten)]
        report: ReportFlags,
    },
    /// Quantize with the given flags and with the round-to-nearest baseline
    /// (alpha 0, clip 1, equal bit-widths) and report both side by side.
    Compare {
        /// Input `.aqt` weight file.
        input: PathBuf,
        #[command(flatten)]
        flags: QuantFlags,
        #[command(flatten)]
        report: ReportFlags,
    },
    /// Generate a synthetic `.aqt` weight file from a JSON spec.
    Gen {
        /// JSON spec file (kind, rows, cols, distribution knobs, seed).
        spec: PathBuf,
        /// Output `.aqt` weight file.
        output: PathBuf,
        /// Overrides the seed in the spec file.
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Quantizer knobs, validated as a whole before any file is touched.
#[derive(Args)]
struct QuantFlags {
    /// Fraction of weights kept as outliers, in [0, 0.5].
    #[arg(long)]
    alpha: f64,
    /// Weights per quantization group; a power of two in [2, 1024].
    #[arg(long)]
    group_size: usize,
    /// Bit width for non-outlier codes, in [2, 8].
    #[arg(long)]
    bits: u8,
    /// Bit width for outlier codes, in [2, 8].
    #[arg(long)]
    outlier_bits: u8,
    /// Symmetric shrink of each group's non-outlier range, in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
}

#[derive(Args)]
struct ReportFlags {
    /// Histogram bins for the KL and JSD estimates.
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Report format.
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Text,
    Json,
}

impl QuantFlags {
    fn to_config(&self) -> Result<QuantConfig, Failure> {
        let config = QuantConfig {
            alpha: self.alpha,
            group_size: self.group_size,
            bits_c: self.bits,
            bits_o: self.outlier_bits,
            clip_fraction: self.clip,
        };
        config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(config)
    }
}

impl ReportFlags {
    fn validate(&self) -> Result<(), Failure> {
        if self.bins == 0 {
            return Err(Failure::Usage("bins must be at least 1".into()));
        }
        Ok(())
    }
}

// ── Failure handling ───────────────────────────────────────────────────────

/// A failed run: which exit code to use and the single-line message.
enum Failure {
    /// Bad flags or an invalid configuration (exit 1).
    Usage(String),
    /// Unreadable, unwritable, malformed, or mismatched files (exit 2).
    Data(String),
    /// A "cannot happen" breach of an internal invariant (exit 3).
    Internal(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Internal(m) => m,
        }
    }
}

/// Tags an error with the file it came from, as a data failure.
fn file_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

/// Writes a report to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_stdout(s: &str) -> Result<(), Failure> {
    use std::io::Write;
    match std::io::stdout().write_all(s.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(Failure::Data(format!("stdout: {e}")))
        }
        _ => Ok(()),
    }
}

// ── Report documents ───────────────────────────────────────────────────────

/// One tensor's quality report, labeled by name.
#[derive(Serialize)]
struct NamedReport {
    name: String,
    #[serde(flatten)]
    report: QuantReport,
}

/// Whole-file rollup of the per-tensor reports.
#[derive(Serialize)]
struct Aggregate {
    tensor_count: usize,
    total_weights: u64,
    /// Weight-count-weighted mean, i.e. the pooled MSE over all weights.
    mse: f64,
    max_abs_err: f64,
    /// Summed over tensors (the penalty is itself a sum over weights).
    penalty_sum: f64,
    /// Weight-count-weighted mean.
    kl: f64,
    /// Weight-count-weighted mean.
    jsd: f64,
    b_avg_theoretical: f64,
    /// Container bits (including all headers) over total weights.
    b_avg_actual: f64,
    outlier_count: u64,
    /// Weight-count-weighted mean.
    lambda_prime: f64,
}

/// Per-tensor reports plus the aggregate; `aggregate` is absent for an
/// empty tensor list.
#[derive(Serialize)]
struct ReportDoc {
    tensors: Vec<NamedReport>,
    aggregate: Option<Aggregate>,
}

impl ReportDoc {
    /// Builds per-tensor reports for `(original, quantized)` pairs plus the
    /// rollup; `container_bytes` is the full on-disk size of the model.
    fn build(
        pairs: &[(&WeightTensor, &QuantizedTensor)],
        model: &PackedModel,
        container_bytes: usize,
        bins: usize,
    ) -> Result<ReportDoc, Failure> {
        let mut tensors = Vec::with_capacity(pairs.len());
        for (original, qt) in pairs {
            let report = build_report(original, qt, model, bins)
                .map_err(|e| Failure::Internal(format!("report for `{}`: {e}", qt.name)))?;
            tensors.push(NamedReport { name: qt.name.clone(), report });
        }
        let aggregate = aggregate(&tensors, pairs, container_bytes);
        Ok(ReportDoc { tensors, aggregate })
    }

    fn render(&self, format: Format) -> Result<String, Failure> {
        match format {
            Format::Json => to_json(self).map(|mut s| {
                s.push('\n');
                s
            }),
            Format::Text => Ok(render_table(self)),
        }
    }
}

fn aggregate(
    tensors: &[NamedReport],
    pairs: &[(&WeightTensor, &QuantizedTensor)],
    container_bytes: usize,
) -> Option<Aggregate> {
    if tensors.is_empty() {
        return None;
    }
    let total: u64 = pairs.iter().map(|(o, _)| o.len() as u64).sum();
    let weighted = |f: fn(&QuantReport) -> f64| -> f64 {
        tensors
            .iter()
            .zip(pairs)
            .map(|(t, (o, _))| f(&t.report) * o.len() as f64)
            .sum::<f64>()
            / total as f64
    };
    Some(Aggregate {
        tensor_count: tensors.len(),
        total_weights: total,
        mse: weighted(|r| r.mse),
        max_abs_err: tensors.iter().map(|t| t.report.max_abs_err).fold(0.0, f64::max),
        penalty_sum: tensors.iter().map(|t| t.report.penalty_sum).sum(),
        kl: weighted(|r| r.kl),
        jsd: weighted(|r| r.jsd),
        b_avg_theoretical: tensors[0].report.b_avg_theoretical,
        b_avg_actual: (container_bytes as u64 * 8) as f64 / total as f64,
        outlier_count: tensors.iter().map(|t| t.report.outlier_count).sum(),
        lambda_prime: weighted(|r| r.lambda_prime),
    })
}

fn to_json(value: &impl Serialize) -> Result<String, Failure> {
    serde_json::to_string(value).map_err(|e| Failure::Internal(format!("serializing report: {e}")))
}

const TABLE_COLUMNS: &str =
    "mse          max_abs_err  penalty_sum  kl           jsd          b_avg_theo  b_avg_act  outliers  lambda_prime";

fn table_row(out: &mut String, label: &str, r: &QuantReport) {
    let _ = writeln!(
        out,
        "{label:<18} {:<12.4e} {:<12.4e} {:<12.4e} {:<12.4e} {:<12.4e} {:<10.3} {:<9.3} {:<9} {:<12.4e}",
        r.mse,
        r.max_abs_err,
        r.penalty_sum,
        r.kl,
        r.jsd,
        r.b_avg_theoretical,
        r.b_avg_actual,
        r.outlier_count,
        r.lambda_prime,
    );
}

fn render_table(doc: &ReportDoc) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<18} {TABLE_COLUMNS}", "tensor");
    for t in &doc.tensors {
        table_row(&mut out, &t.name, &t.report);
    }
    match &doc.aggregate {
        Some(a) => {
            let all = QuantReport {
                mse: a.mse,
                max_abs_err: a.max_abs_err,
                penalty_sum: a.penalty_sum,
                kl: a.kl,
                jsd: a.jsd,
                b_avg_theoretical: a.b_avg_theoretical,
                b_avg_actual: a.b_avg_actual,
                outlier_count: a.outlier_count,
                lambda_prime: a.lambda_prime,
            };
            table_row(&mut out, "(aggregate)", &all);
        }
        None => {
            let _ = writeln!(out, "(no tensors)");
        }
    }
    out
}

// ── Pipeline helpers ───────────────────────────────────────────────────────

/// Quantizes every tensor of a file under one config and packs the result.
fn quantize_file(
    tensors: &[WeightTensor],
    config: &QuantConfig,
) -> Result<(PackedModel, Vec<u8>), Failure> {
    let mut quantized = Vec::with_capacity(tensors.len());
    for t in tensors {
        let qt = quantize_tensor(t, config).map_err(|e| match e {
            adpq::quant::QuantError::GroupParamOverflow(_) => {
                Failure::Data(format!("tensor `{}`: {e}", t.name))
            }
            other => Failure::Internal(format!("quantizing `{}`: {other}", t.name)),
        })?;
        quantized.push(qt);
    }
    let model = PackedModel::new(*config, quantized)
        .map_err(|e| Failure::Internal(format!("packing: {e}")))?;
    let bytes =
        encode_model(&model).map_err(|e| Failure::Internal(format!("encoding: {e}")))?;
    Ok((model, bytes))
}

/// Pairs every packed tensor with its original by name, in container order.
fn pair_tensors<'a>(
    originals: &'a [WeightTensor],
    model: &'a PackedModel,
) -> Result<Vec<(&'a WeightTensor, &'a QuantizedTensor)>, Failure> {
    let mut pairs = Vec::with_capacity(model.tensors.len());
    for qt in &model.tensors {
        let original = originals
            .iter()
            .find(|t| t.name == qt.name)
            .ok_or_else(|| {
                Failure::Data(format!(
                    "name mismatch: packed tensor `{}` is not in the original file",
                    qt.name
                ))
            })?;
        if original.rows != qt.rows || original.cols != qt.cols {
            return Err(Failure::Data(format!(
                "shape mismatch for `{}`: original {}x{}, packed {}x{}",
                qt.name, original.rows, original.cols, qt.rows, qt.cols
            )));
        }
        pairs.push((original, qt));
    }
    if let Some(extra) = originals.iter().find(|t| model.tensors.iter().all(|q| q.name != t.name))
    {
        return Err(Failure::Data(format!(
            "name mismatch: original tensor `{}` is not in the packed file",
            extra.name
        )));
    }
    Ok(pairs)
}

// ── Subcommands ────────────────────────────────────────────────────────────

fn cmd_quantize(
    input: &Path,
    output: &Path,
    flags: &QuantFlags,
    report: &ReportFlags,
) -> Result<(), Failure> {
    let config = flags.to_config()?;
    report.validate()?;
    let file = read_tensors(input).map_err(|e| file_err(input, e))?;
    let (model, bytes) = quantize_file(&file.tensors, &config)?;
    std::fs::write(output, &bytes).map_err(|e| file_err(output, e))?;
    let pairs = pair_tensors(&file.tensors, &model)?;
    let doc = ReportDoc::build(&pairs, &model, bytes.len(), report.bins)?;
    print_stdout(&doc.render(report.format)?)
}

fn cmd_dequantize(input: &Path, output: &Path) -> Result<(), Failure> {
    let bytes = std::fs::read(input).map_err(|e| file_err(input, e))?;
    let model = decode(&bytes).map_err(|e| file_err(input, e))?;
    let mut tensors = Vec::with_capacity(model.tensors.len());
    for qt in &model.tensors {
        let t = dequantize_tensor(qt)
            .map_err(|e| Failure::Internal(format!("reconstructing `{}`: {e}", qt.name)))?;
        tensors.push(t);
    }
    write_tensors(output, &tensors).map_err(|e| file_err(output, e))?;
    Ok(())
}

fn cmd_report(original: &Path, packed: &Path, report: &ReportFlags) -> Result<(), Failure> {
    report.validate()?;
    let file = read_tensors(original).map_err(|e| file_err(original, e))?;
    let bytes = std::fs::read(packed).map_err(|e| file_err(packed, e))?;
    let model = decode(&bytes).map_err(|e| file_err(packed, e))?;
    let pairs = pair_tensors(&file.tensors, &model)?;
    let doc = ReportDoc::build(&pairs, &model, bytes.len(), report.bins)?;
    print_stdout(&doc.render(report.format)?)
}

/// The two sides of a comparison, shaped exactly like two report documents.
#[derive(Serialize)]
struct CompareDoc {
    adpq: ReportDoc,
    rtn: ReportDoc,
}

fn cmd_compare(input: &Path, flags: &QuantFlags, report: &ReportFlags) -> Result<(), Failure> {
    let config = flags.to_config()?;
    report.validate()?;
    let file = read_tensors(input).map_err(|e| file_err(input, e))?;
    let (model_a, bytes_a) = quantize_file(&file.tensors, &config)?;

    let mut rtn_tensors = Vec::with_capacity(file.tensors.len());
    for t in &file.tensors {
        let qt = rtn_quantize(t, config.group_size, config.bits_c)
            .map_err(|e| Failure::Internal(format!("RTN on `{}`: {e}", t.name)))?;
        rtn_tensors.push(qt);
    }
    let rtn_config =
        rtn_tensors.first().map_or_else(|| baseline_config(&config), |qt| qt.config);
    let model_r = PackedModel::new(rtn_config, rtn_tensors)
        .map_err(|e| Failure::Internal(format!("packing RTN: {e}")))?;
    let bytes_r =
        encode_model(&model_r).map_err(|e| Failure::Internal(format!("encoding RTN: {e}")))?;

    let pairs_a = pair_tensors(&file.tensors, &model_a)?;
    let pairs_r = pair_tensors(&file.tensors, &model_r)?;
    let doc = CompareDoc {
        adpq: ReportDoc::build(&pairs_a, &model_a, bytes_a.len(), report.bins)?,
        rtn: ReportDoc::build(&pairs_r, &model_r, bytes_r.len(), report.bins)?,
    };
    match report.format {
        Format::Json => print_stdout(&format!("{}\n", to_json(&doc)?)),
        Format::Text => print_stdout(&format!(
            "== adpq ==\n{}== rtn ==\n{}",
            render_table(&doc.adpq),
            render_table(&doc.rtn)
        )),
    }
}

/// The round-to-nearest config an empty comparison reports against.
fn baseline_config(config: &QuantConfig) -> QuantConfig {
    QuantConfig {
        alpha: 0.0,
        group_size: config.group_size,
        bits_c: config.bits_c,
        bits_o: config.bits_c,
        clip_fraction: 1.0,
    }
}

fn cmd_gen(spec_path: &Path, output: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| file_err(spec_path, e))?;
    let mut spec: SynthSpec =
        serde_json::from_str(&text).map_err(|e| file_err(spec_path, e))?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let tensor = generate(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
    write_tensors(output, &[tensor]).map_err(|e| file_err(output, e))?;
    Ok(())
}

// ── Entry point ────────────────────────────────────────────────────────────

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Quantize { input, output, flags, report } => {
            cmd_quantize(&input, &output, &flags, &report)
        }
        Command::Dequantize { input, output } => cmd_dequantize(&input, &output),
        Command::Report { original, packed, report } => cmd_report(&original, &packed, &report),
        Command::Compare { input, flags, report } => cmd_compare(&input, &flags, &report),
        Command::Gen { spec, output, seed } => cmd_gen(&spec, &output, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            // Compress clap's multi-line rendering to the stable one-liner.
            let rendered = e.to_string();
            let first = rendered.lines().find(|l| !l.trim().is_empty()).unwrap_or("bad usage");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("error: {first}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help and --version land here and exit successfully.
            let _ = print_stdout(&e.to_string());
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.exit_code())
        }
    }
}
