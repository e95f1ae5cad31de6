//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 a property failed, 2 bad input (config,
//! checkpoint, arguments), 3 training diverged.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CodeqError, Result};
use crate::metrics::{build_report, CompressionReport};
use crate::models::{load_checkpoint, Model};
use crate::quantizers::{absmax_recovery_fixed_point, quantile_abs, BitMode, LayerQuantState};
use crate::trainer::{self, History};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PROPERTY: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "codeq", version, about = "Joint pruning and quantization with a learnable dead-zone quantizer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Run the randomized property suites.
    Verify(VerifyArgs),
    /// Report MACs and BOPs of a checkpoint.
    Bops(BopsArgs),
    /// Quantize a checkpoint without training.
    Quantize(QuantizeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    pub config: Option<PathBuf>,
    /// Re-run the config recorded in a previous manifest and compare hashes.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `section.key=value`, applied after the file is parsed.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = verify::DEFAULT_TRIALS)]
    pub trials: usize,
    #[arg(long, default_value = "codeq-out/verify")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BopsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "codeq-out/bops")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dead-zone parameter for every layer.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "deadzone")]
    pub theta_dz: Option<f64>,
    /// Dead-zone width for every layer: a number, or `fixed-point` for the
    /// width that equals its own pruning-aware scale.
    #[arg(long)]
    pub deadzone: Option<String>,
    /// Fixed bit-width for every layer.
    #[arg(long)]
    pub bits: Option<u32>,
    #[arg(long)]
    pub quantile: Option<f64>,
    #[arg(long, default_value = "codeq-out/quantize")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: Option<ExperimentConfig>,
    pub inputs: BTreeMap<String, String>,
    /// Artifact file name → SHA-256 hex digest.
    pub artifacts: BTreeMap<String, String>,
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Bops(a) => cmd_bops(&a),
        Command::Quantize(a) => cmd_quantize(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &CodeqError) -> i32 {
    match e {
        CodeqError::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_INPUT,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes files into one directory and records their digests.
struct ArtifactWriter {
    dir: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl ArtifactWriter {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CodeqError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            hashes: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CodeqError::io(&path, e))?;
        self.hashes.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn finish(self, mut manifest: Manifest) -> Result<Manifest> {
        manifest.artifacts = self.hashes;
        let path = self.dir.join("manifest.json");
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|e| CodeqError::io(&path, e))?;
        Ok(manifest)
    }
}

fn manifest(command: &str) -> Manifest {
    Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: None,
        config: None,
        inputs: BTreeMap::new(),
        artifacts: BTreeMap::new(),
    }
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| CodeqError::Domain(format!("CSV buffer: {e}")))
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    lr_weights: f64,
    loss: f64,
    train_acc: f64,
    val_acc: Option<f64>,
    overall_sparsity: f64,
    mean_bits: f64,
}

pub fn history_csv(history: &History) -> Result<Vec<u8>> {
    let rows: Vec<HistoryRow> = history
        .epochs
        .iter()
        .map(|e| HistoryRow {
            epoch: e.epoch,
            lr_weights: e.lr_weights,
            loss: e.loss,
            train_acc: e.train_acc,
            val_acc: e.val_acc,
            overall_sparsity: e.overall_sparsity,
            mean_bits: e.mean_bits,
        })
        .collect();
    csv_bytes(&rows)
}

/// One row per epoch per layer.
pub fn layers_csv(history: &History) -> Result<Vec<u8>> {
    let rows: Vec<_> = history.epochs.iter().flat_map(|e| e.layers.iter().cloned()).collect();
    csv_bytes(&rows)
}

pub fn report_csv(report: &CompressionReport) -> Result<Vec<u8>> {
    csv_bytes(&report.layers)
}

fn write_report(out: &mut ArtifactWriter, report: &CompressionReport) -> Result<()> {
    out.write_json("report.json", report)?;
    out.write("report.csv", &report_csv(report)?)?;
    Ok(())
}

/// Artifacts of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: History,
    pub report: CompressionReport,
    pub manifest: Manifest,
}

pub fn train_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainOutcome> {
    let (train_set, val_set) = cfg.load_data()?;
    let mut model = cfg.build_model(&train_set.sample_shape, train_set.num_classes)?;
    let history = trainer::train(&mut model, &train_set, Some(&val_set), &cfg.train)?;
    let accuracy = history.last().and_then(|e| e.val_acc);
    let report = build_report(&model, accuracy)?;

    let mut out = ArtifactWriter::new(out_dir)?;
    let ckpt = crate::models::to_bytes(&model);
    out.write("checkpoint.cdq", &ckpt)?;
    out.write("history.csv", &history_csv(&history)?)?;
    out.write("layers.csv", &layers_csv(&history)?)?;
    write_report(&mut out, &report)?;
    let mut m = manifest("train");
    m.seed = Some(cfg.seed);
    m.config = Some(cfg.clone());
    let manifest = out.finish(m)?;
    Ok(TrainOutcome {
        model,
        history,
        report,
        manifest,
    })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| CodeqError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CodeqError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let previous = args.manifest.as_deref().map(read_manifest).transpose()?;
    let mut cfg = match (&args.config, &previous) {
        (Some(path), _) => ExperimentConfig::load(path, &args.overrides)?,
        (None, Some(m)) => m
            .config
            .clone()
            .ok_or_else(|| CodeqError::Config("manifest records no training config".into()))?,
        (None, None) => return Err(CodeqError::Config("either --config or --manifest is required".into())),
    };
    if previous.is_some() && !args.overrides.is_empty() {
        return Err(CodeqError::Config("--override cannot be combined with --manifest".into()));
    }
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    let out_dir = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("codeq-out").join(&cfg.name));
    let outcome = match train_experiment(&cfg, &out_dir) {
        Err(e @ CodeqError::Divergence { .. }) => {
            eprintln!("training aborted: {e}");
            eprintln!("config: {}", serde_json::to_string(&cfg.train)?);
            return Ok(EXIT_DIVERGENCE);
        }
        other => other?,
    };
    for e in &outcome.history.epochs {
        println!(
            "epoch {:>3}  loss {:.5}  train {:.4}  val {}  sparsity {:.4}  bits {:.2}",
            e.epoch,
            e.loss,
            e.train_acc,
            e.val_acc.map_or("-".into(), |v| format!("{v:.4}")),
            e.overall_sparsity,
            e.mean_bits
        );
    }
    print!("{}", outcome.report.to_table());
    println!("artifacts written to {}", out_dir.display());
    if let Some(prev) = previous {
        let same = prev.artifacts == outcome.manifest.artifacts;
        println!("reproduced previous artifact hashes: {}", if same { "yes" } else { "no" });
        if !same {
            return Ok(EXIT_PROPERTY);
        }
    }
    Ok(EXIT_OK)
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    let report = verify::run_all(args.seed, args.trials)?;
    print!("{}", report.to_table());
    let mut out = ArtifactWriter::new(&args.out)?;
    out.write_json("verify.json", &report)?;
    let mut m = manifest("verify");
    m.seed = Some(args.seed);
    m.inputs.insert("trials".into(), args.trials.to_string());
    out.finish(m)?;
    Ok(if report.passed() { EXIT_OK } else { EXIT_PROPERTY })
}

fn input_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CodeqError::io(path, e))?))
}

pub fn cmd_bops(args: &BopsArgs) -> Result<i32> {
    let model = load_checkpoint(&args.checkpoint)?;
    let report = build_report(&model, None)?;
    print!("{}", report.to_table());
    let mut out = ArtifactWriter::new(&args.out)?;
    write_report(&mut out, &report)?;
    let mut m = manifest("bops");
    m.inputs.insert(args.checkpoint.display().to_string(), input_hash(&args.checkpoint)?);
    out.finish(m)?;
    Ok(EXIT_OK)
}

/// `θ_dz` that yields dead-zone width `d` for range `R`.
pub fn theta_for_deadzone(d: f64, range: f64) -> Result<f64> {
    if !(range > 0.0) || !(0.0..=2.0 * range).contains(&d) {
        return Err(CodeqError::Domain(format!("dead-zone width {d} outside [0, 2R] with R = {range}")));
    }
    Ok((1.0 - d / (2.0 * range)).atanh())
}

/// Apply quantizer overrides to every layer of `model`.
pub fn apply_quantize_overrides(
    model: &mut Model,
    theta_dz: Option<f64>,
    deadzone: Option<&str>,
    bits: Option<u32>,
    quantile: Option<f64>,
) -> Result<()> {
    for (i, layer) in model.layers.iter_mut().enumerate() {
        let mut state = match (&layer.quant, bits) {
            (_, Some(b)) => {
                let mut s = layer.quant.clone().unwrap_or_else(|| LayerQuantState::fixed(b, 3.0));
                s.bits = BitMode::Fixed(b);
                s
            }
            (Some(s), None) => s.clone(),
            (None, None) => {
                return Err(CodeqError::Config(format!("layer {i} has no quantizer state; pass --bits")));
            }
        };
        if let Some(q) = quantile {
            state.quantile = q;
        }
        if let Some(t) = theta_dz {
            state.theta_dz = t;
        }
        if let Some(spec) = deadzone {
            let range = quantile_abs(&layer.weight, state.quantile)?;
            let d = if spec == "fixed-point" {
                absmax_recovery_fixed_point(range, state.effective_bits())?
            } else {
                spec.parse::<f64>()
                    .map_err(|_| CodeqError::Config(format!("--deadzone {spec:?} is neither a number nor fixed-point")))?
            };
            state.theta_dz = theta_for_deadzone(d, range)?;
        }
        state.validate()?;
        layer.quant = Some(state);
    }
    Ok(())
}

pub fn cmd_quantize(args: &QuantizeArgs) -> Result<i32> {
    let mut model = load_checkpoint(&args.checkpoint)?;
    apply_quantize_overrides(&mut model, args.theta_dz, args.deadzone.as_deref(), args.bits, args.quantile)?;
    let report = build_report(&model, None)?;
    let quantized = trainer::materialize(&model)?;
    print!("{}", report.to_table());
    let mut out = ArtifactWriter::new(&args.out)?;
    out.write("quantized.cdq", &crate::models::to_bytes(&quantized))?;
    write_report(&mut out, &report)?;
    let mut m = manifest("quantize");
    m.inputs.insert(args.checkpoint.display().to_string(), input_hash(&args.checkpoint)?);
    for (k, v) in [
        ("theta_dz", args.theta_dz.map(|v| v.to_string())),
        ("deadzone", args.deadzone.clone()),
        ("bits", args.bits.map(|v| v.to_string())),
        ("quantile", args.quantile.map(|v| v.to_string())),
    ] {
        if let Some(v) = v {
            m.inputs.insert(k.into(), v);
        }
    }
    out.finish(m)?;
    Ok(EXIT_OK)
}
