//! `nmq`: train, compress, inspect, and self-check checkpoints produced by
//! the joint sparsity + quantization toolkit.
//!
//! Exit codes: 0 success, 1 runtime failure (io, divergence, failed
//! verification), 2 bad usage or configuration.

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use nmq_core::checkpoint::{self, Checkpoint, Dtype, TensorPayload};
use nmq_core::quant::QuantScheme;
use nmq_core::sizer::{estimate_ratio, measure_actual};
use nmq_core::sparse::{SparsityMask, SparsityPattern};
use nmq_core::train::adam::AdamConfig;
use nmq_core::train::data::generate;
use nmq_core::train::graph::ModelSpec;
use nmq_core::train::{train, CompressionConfig, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "nmq",
    version,
    about = "Joint N:M structured sparsity and low-bit quantization toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the synthetic CTC task with compression-aware updates
    Train(TrainArgs),
    /// Compress the float32 weights of an existing checkpoint
    Compress(CompressArgs),
    /// Summarize how large a checkpoint really is
    Report(ReportArgs),
    /// Run randomized self-checks of the compression pipeline
    Verify(VerifyArgs),
}

#[derive(Args)]
struct SchemeFlags {
    /// Weight precision: 32 (keep float), 8, 4, or 2
    #[arg(long)]
    bits: Option<u8>,
    /// Symmetric quantization (no zero points); pass `--symmetric false` to
    /// force asymmetric over a config file
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    symmetric: Option<bool>,
    /// Scale groups per channel; requires --bits below 32
    #[arg(long)]
    sub_channels: Option<usize>,
    /// Structured sparsity pattern such as 2:4 or 1:4, or "none"
    #[arg(long)]
    sparsity: Option<String>,
    /// Glob selecting which weights get compressed
    #[arg(long)]
    include: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    scheme: SchemeFlags,
    /// Mask-update steps before the sparsity pattern freezes
    #[arg(long)]
    prune_steps: Option<usize>,
    /// Optimizer steps
    #[arg(long)]
    steps: Option<usize>,
    /// RNG seed; falls back to the NMQ_SEED environment variable, then 0
    #[arg(long)]
    seed: Option<u64>,
    /// Peak learning rate
    #[arg(long)]
    base_lr: Option<f64>,
    /// Warmup steps
    #[arg(long)]
    warmup: Option<usize>,
    /// Training utterances to synthesize
    #[arg(long)]
    train_utts: Option<usize>,
    /// Held-out utterances to synthesize
    #[arg(long)]
    eval_utts: Option<usize>,
    /// Width of the hidden layers
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Number of hidden layers
    #[arg(long)]
    hidden_layers: Option<usize>,
    /// JSON config file; explicit flags take precedence over it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the trained checkpoint
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to write per-step metrics, one JSON object per line
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct CompressArgs {
    /// Checkpoint to read
    #[arg(long = "in")]
    input: PathBuf,
    /// Where to write the compressed checkpoint
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    scheme: SchemeFlags,
    /// JSON config file; explicit flags take precedence over it
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Checkpoint to read
    #[arg(long = "in")]
    input: PathBuf,
    /// Emit the report as JSON instead of a table
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Number of random cases to run
    #[arg(long, default_value_t = 1000)]
    cases: usize,
    /// RNG seed; falls back to the NMQ_SEED environment variable, then 0
    #[arg(long)]
    seed: Option<u64>,
    /// Corrupt one payload bit so the checks must report a failure
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// Optional JSON config; any field a flag also sets. Unknown keys are
/// rejected so typos do not silently fall back to defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    steps: Option<usize>,
    seed: Option<u64>,
    bits: Option<u8>,
    symmetric: Option<bool>,
    sub_channels: Option<usize>,
    sparsity: Option<String>,
    prune_steps: Option<usize>,
    include: Option<String>,
    base_lr: Option<f64>,
    warmup: Option<usize>,
    train_utts: Option<usize>,
    eval_utts: Option<usize>,
    hidden_dim: Option<usize>,
    hidden_layers: Option<usize>,
}

enum Failure {
    /// Bad flags or config, detected before any real work. Exit 2.
    Usage(String),
    /// The work itself failed. Exit 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Compress(args) => cmd_compress(args),
        Cmd::Report(args) => cmd_report(args),
        Cmd::Verify(args) => cmd_verify(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn read_config(path: Option<&PathBuf>) -> Result<ConfigFile, Failure> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var("NMQ_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| usage(format!("NMQ_SEED must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn parse_sparsity(text: &str) -> Result<Option<SparsityPattern>, Failure> {
    if text == "none" {
        return Ok(None);
    }
    let (n, m) = text
        .split_once(':')
        .ok_or_else(|| usage(format!("sparsity must look like N:M or \"none\", got {text:?}")))?;
    let n: usize = n
        .parse()
        .map_err(|_| usage(format!("bad sparsity {text:?}")))?;
    let m: usize = m
        .parse()
        .map_err(|_| usage(format!("bad sparsity {text:?}")))?;
    SparsityPattern::new(n, m)
        .map(Some)
        .map_err(|e| usage(format!("bad sparsity {text:?}: {e}")))
}

/// Resolve flags plus config file into the core compression settings.
fn resolve_compression(
    flags: &SchemeFlags,
    file: &ConfigFile,
    prune_steps: Option<usize>,
) -> Result<CompressionConfig, Failure> {
    let bits = flags.bits.or(file.bits).unwrap_or(32);
    let symmetric = flags.symmetric.or(file.symmetric).unwrap_or(false);
    let sub_channels = flags.sub_channels.or(file.sub_channels);
    let sparsity = flags
        .sparsity
        .clone()
        .or_else(|| file.sparsity.clone())
        .unwrap_or_else(|| "none".to_string());
    let include = flags
        .include
        .clone()
        .or_else(|| file.include.clone())
        .unwrap_or_else(|| "*linear*".to_string());

    if !matches!(bits, 32 | 8 | 4 | 2) {
        return Err(usage(format!("bits must be one of 32, 8, 4, 2; got {bits}")));
    }
    let scheme = if bits == 32 {
        if sub_channels.is_some_and(|s| s > 1) {
            return Err(usage("sub-channels require quantization (bits below 32)"));
        }
        None
    } else {
        let sc = sub_channels.unwrap_or(1);
        let scheme = if symmetric {
            QuantScheme::symmetric(bits, sc)
        } else {
            QuantScheme::asymmetric(bits, sc)
        }
        .map_err(|e| usage(format!("bad quantization settings: {e}")))?;
        Some(scheme)
    };
    let pattern = parse_sparsity(&sparsity)?;
    Ok(CompressionConfig {
        scheme,
        pattern,
        prune_steps: prune_steps.or(file.prune_steps).unwrap_or(1),
        include,
    })
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let file = read_config(args.config.as_ref())?;
    let compression = resolve_compression(&args.scheme, &file, args.prune_steps)?;
    let steps = args.steps.or(file.steps).unwrap_or(400);
    let seed = match args.seed.or(file.seed) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let adam = AdamConfig {
        base_lr: args.base_lr.or(file.base_lr).unwrap_or(1e-3),
        warmup: args.warmup.or(file.warmup).unwrap_or(100),
        ..AdamConfig::default()
    };
    if steps == 0 {
        return Err(usage("steps must be at least 1"));
    }
    if compression.pattern.is_some() {
        if compression.prune_steps == 0 {
            return Err(usage("prune-steps must be at least 1"));
        }
        if compression.prune_steps > steps {
            return Err(usage(format!(
                "prune-steps {} exceeds steps {steps}",
                compression.prune_steps
            )));
        }
    }
    let train_utts = args.train_utts.or(file.train_utts).unwrap_or(24);
    let eval_utts = args.eval_utts.or(file.eval_utts).unwrap_or(8);
    if train_utts == 0 || eval_utts == 0 {
        return Err(usage("train-utts and eval-utts must be at least 1"));
    }

    let spec = ModelSpec {
        hidden_dim: args.hidden_dim.or(file.hidden_dim).unwrap_or(16),
        hidden_layers: args.hidden_layers.or(file.hidden_layers).unwrap_or(2),
        ..ModelSpec::default()
    };
    if spec.hidden_dim == 0 || spec.hidden_layers == 0 {
        return Err(usage("hidden-dim and hidden-layers must be at least 1"));
    }
    let task = generate(seed, train_utts, eval_utts)
        .map_err(|e| Failure::Runtime(anyhow!("task generation failed: {e}")))?;
    let config = TrainConfig {
        steps,
        seed,
        adam,
        compression,
    };
    let run = match train(&task, &spec, &config) {
        Ok(run) => run,
        Err(TrainError::Diverged(d)) => {
            return Err(Failure::Runtime(anyhow!(
                "training diverged at step {} (last finite step: {}); \
                 try a lower --base-lr or longer --warmup",
                d.step,
                d.last_state.step
            )));
        }
        Err(TrainError::Other(nmq_core::Error::InvalidConfig(msg))) => {
            return Err(usage(msg));
        }
        Err(TrainError::Other(e)) => {
            return Err(Failure::Runtime(anyhow!("training failed: {e}")));
        }
    };

    let every = (steps / 10).max(1);
    for m in &run.metrics {
        if m.step % every == 0 || m.step == steps {
            println!(
                "step {:>5}/{steps}  loss {:>9.4}  lr {:.3e}  masks_frozen {}",
                m.step, m.loss, m.lr, m.masks_frozen
            );
        }
    }
    println!("final loss: {:.4}", run.final_loss);
    println!("eval token error rate: {:.4}", run.token_error);

    if let Some(path) = &args.metrics {
        let mut out = std::fs::File::create(path)
            .with_context(|| format!("cannot create {}", path.display()))
            .map_err(Failure::Runtime)?;
        for m in &run.metrics {
            let line = serde_json::to_string(m)
                .map_err(|e| Failure::Runtime(anyhow!("metrics encoding failed: {e}")))?;
            writeln!(out, "{line}")
                .map_err(|e| Failure::Runtime(anyhow!("metrics write failed: {e}")))?;
        }
        println!("wrote metrics: {}", path.display());
    }
    if let Some(path) = &args.out {
        let ckpt = nmq_core::train::state_to_checkpoint(&run.state, &config.compression)
            .map_err(|e| Failure::Runtime(anyhow!("serialization failed: {e}")))?;
        checkpoint::save(&ckpt, path)
            .map_err(|e| Failure::Runtime(anyhow!("cannot write {}: {e}", path.display())))?;
        println!("wrote checkpoint: {}", path.display());
    }
    Ok(())
}

fn cmd_compress(args: CompressArgs) -> Result<(), Failure> {
    let file = read_config(args.config.as_ref())?;
    let compression = resolve_compression(&args.scheme, &file, None)?;
    let ckpt = checkpoint::load(&args.input)
        .map_err(|e| Failure::Runtime(anyhow!("cannot read {}: {e}", args.input.display())))?;
    let out = nmq_core::compress::compress_checkpoint(
        &ckpt,
        compression.scheme.as_ref(),
        compression.pattern.as_ref().copied().as_ref(),
        &compression.include,
    )
    .map_err(|e| Failure::Runtime(anyhow!("compression failed: {e}")))?;
    checkpoint::save(&out, &args.out)
        .map_err(|e| Failure::Runtime(anyhow!("cannot write {}: {e}", args.out.display())))?;
    let report = measure_actual(&out);
    println!(
        "wrote {} ({} bytes, {:.1}% of float32)",
        args.out.display(),
        report.serialized_bytes + checkpoint::HEADER_LEN as u64,
        report.ratio_vs_f32 * 100.0
    );
    Ok(())
}

#[derive(Serialize)]
struct JsonLayer {
    name: String,
    params: u64,
    weight_bits: u64,
    mask_bits: u64,
    scale_bits: u64,
    zero_point_bits: u64,
    actual_ratio: f64,
    /// Closed-form estimate from the layer's scheme and pattern, when the
    /// entry metadata pins them down.
    estimate_ratio: Option<f64>,
    delta: Option<f64>,
}

#[derive(Serialize)]
struct JsonReport {
    layers: Vec<JsonLayer>,
    total_params: u64,
    weight_bits: u64,
    mask_bits: u64,
    sub_channel_scale_bits: u64,
    zero_point_bits: u64,
    serialized_bytes: u64,
    ratio_vs_f32: f64,
}

/// Closed-form size estimate for one entry, when its metadata identifies
/// the scheme and pattern. None for entries the estimator does not model.
fn layer_estimate(ckpt: &Checkpoint, payload: &TensorPayload) -> Option<f64> {
    if payload.dtype == Dtype::Bitmask {
        return None;
    }
    let params: u64 = payload.shape.iter().product::<usize>() as u64;
    if params == 0 {
        return None;
    }
    let pattern = match &payload.mask_ref {
        None => None,
        Some(mask_name) => {
            let mask_entry = ckpt.get(mask_name)?;
            let mask =
                SparsityMask::from_bitmap_infer(&mask_entry.bytes, &payload.shape, 4).ok()?;
            Some(mask.pattern())
        }
    };
    let scheme = payload.quant.as_ref().map(|m| m.scheme);
    let channel_len = payload.shape.first().map(|&r| r as u64);
    estimate_ratio(params, scheme.as_ref(), pattern.as_ref(), channel_len).ok()
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let ckpt = checkpoint::load(&args.input)
        .map_err(|e| Failure::Runtime(anyhow!("cannot read {}: {e}", args.input.display())))?;
    let report = measure_actual(&ckpt);

    let layer_ratio = |l: &nmq_core::sizer::LayerSize| {
        (l.weight_bits + l.mask_bits + l.scale_bits) as f64 / (l.params as f64 * 32.0)
    };
    if args.json {
        let layers = report
            .layers
            .iter()
            .map(|l| {
                let actual = layer_ratio(l);
                let estimate = ckpt.get(&l.name).and_then(|p| layer_estimate(&ckpt, p));
                JsonLayer {
                    name: l.name.clone(),
                    params: l.params,
                    weight_bits: l.weight_bits,
                    mask_bits: l.mask_bits,
                    scale_bits: l.scale_bits,
                    zero_point_bits: l.zero_point_bits,
                    actual_ratio: actual,
                    estimate_ratio: estimate,
                    delta: estimate.map(|e| actual - e),
                }
            })
            .collect();
        let json = JsonReport {
            layers,
            total_params: report.total_params,
            weight_bits: report.weight_bits,
            mask_bits: report.mask_bits,
            sub_channel_scale_bits: report.sub_channel_scale_bits,
            zero_point_bits: report.zero_point_bits,
            serialized_bytes: report.serialized_bytes,
            ratio_vs_f32: report.ratio_vs_f32,
        };
        println!(
            "{}",
            serde_json::to_string_pretty(&json)
                .map_err(|e| Failure::Runtime(anyhow!("json encoding failed: {e}")))?
        );
        return Ok(());
    }

    println!(
        "{:<28} {:>10} {:>12} {:>10} {:>10} {:>8}",
        "layer", "params", "weight bits", "mask bits", "scale bits", "ratio"
    );
    for l in &report.layers {
        println!(
            "{:<28} {:>10} {:>12} {:>10} {:>10} {:>7.1}%",
            l.name,
            l.params,
            l.weight_bits,
            l.mask_bits,
            l.scale_bits,
            layer_ratio(l) * 100.0
        );
    }
    println!(
        "{:<28} {:>10} {:>12} {:>10} {:>10} {:>7.1}%",
        "total",
        report.total_params,
        report.weight_bits,
        report.mask_bits,
        report.sub_channel_scale_bits,
        report.ratio_vs_f32 * 100.0
    );
    println!(
        "zero point bits: {}; serialized: {} bytes + {} header",
        report.zero_point_bits,
        report.serialized_bytes,
        checkpoint::HEADER_LEN
    );
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<(), Failure> {
    if args.cases == 0 {
        return Err(usage("cases must be at least 1"));
    }
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let report = nmq_core::verify::run(args.cases, seed, args.inject_fault);
    if report.passed() {
        println!("all {} cases passed", report.cases);
        Ok(())
    } else {
        for f in &report.failures {
            eprintln!("{f}");
        }
        Err(Failure::Runtime(anyhow!(
            "{} of {} cases failed",
            report.failures.len(),
            report.cases
        )))
    }
}
