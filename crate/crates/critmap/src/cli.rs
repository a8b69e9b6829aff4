//! Command-line front end: dataset synthesis, training, profiling,
//! reports, sweeps, and correlation.
//!
//! Every command writes a run manifest next to its primary output
//! (`<out>.manifest.json`, or `manifest.json` inside an output directory)
//! recording the command line, a hash of the effective configuration, the
//! tool version, wall time, and the produced files. Identical
//! configurations hash identically; outputs are byte-identical across
//! reruns, the manifest's wall time aside.
//!
//! Exit codes: 0 on success, 2 for usage errors, 1 for runtime errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::criticality::{mean_model_criticality, profile_model, Metric, RunConfig};
use crate::data::{synth_dataset, Dataset, SynthConfig};
use crate::error::Error;
use crate::io;
use crate::model::{build_model, ArchConfig, BlockKind, ModelGraph};
use crate::report::{build_matrix, matrix_to_csv, matrix_to_json, matrix_to_svg, ReportValue};
use crate::rng::hash64;
use crate::stats::spearman;
use crate::train::{train, AttackConfig, Norm, TrainConfig, TrainMode};

#[derive(Debug, Parser)]
#[command(
    name = "critmap",
    version,
    about = "Layer criticality profiling for convolutional classifiers"
)]
pub struct Cli {
    /// Worker cap for layer/trial jobs (default: CRITMAP_JOBS or all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a deterministic synthetic classification dataset.
    SynthData {
        #[arg(long)]
        classes: usize,
        /// Total sample count; must be a multiple of --classes.
        #[arg(long)]
        n: usize,
        /// Square image side.
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        /// Class template amplitude; larger separates classes more.
        #[arg(long, default_value_t = 0.3)]
        margin: f64,
        /// Per-pixel Gaussian noise sigma.
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },

    /// Train a residual classifier on a dataset file.
    Train(TrainArgs),

    /// Measure per-layer criticality of a trained model.
    Profile {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluation subset size (default: min(10000, dataset size)).
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = MetricArg::Cosine)]
        metric: MetricArg,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },

    /// Render profiles as per-layer CSV, matrix CSV/JSON, or an SVG heatmap.
    Report {
        /// Profile JSON files; all must share one layer set.
        #[arg(long, num_args = 1.., required = true)]
        profiles: Vec<PathBuf>,
        /// Baseline model id (required for --value delta).
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
        #[arg(long, value_enum, default_value_t = ValueArg::Mean)]
        value: ValueArg,
        #[arg(long)]
        out: PathBuf,
    },

    /// Spearman correlation of mean model criticality vs clean accuracy.
    Correlate {
        #[arg(long, num_args = 1.., required = true)]
        profiles: Vec<PathBuf>,
        /// Scatter CSV output path.
        #[arg(long, default_value = "correlation.csv")]
        out: PathBuf,
    },

    /// Adversarial-training sweep over attack budgets, with profiles.
    Sweep(SweepArgs),
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Model id stored in the bundle (default: output file stem).
    #[arg(long)]
    id: Option<String>,

    // Architecture.
    #[arg(long, default_value_t = 8)]
    stem_channels: usize,
    /// Residual blocks per stage, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![2, 2])]
    stages: Vec<usize>,
    /// Base width per stage, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![6, 12])]
    widths: Vec<usize>,
    #[arg(long, value_enum, default_value_t = BlockArg::Bottleneck)]
    block: BlockArg,
    #[arg(long, default_value_t = 2)]
    expansion: usize,
    /// 2x2 max pool after the stem.
    #[arg(long, default_value_t = false)]
    stem_pool: bool,

    // Optimization.
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    #[arg(long)]
    seed: u64,

    // Mode.
    #[arg(long, value_enum, default_value_t = ModeArg::Standard)]
    mode: ModeArg,
    /// Attack budget; accepts "8/255" fraction syntax.
    #[arg(long, value_parser = parse_eps, default_value = "0")]
    eps: f64,
    /// Attack step size (default 2.5 * eps / steps).
    #[arg(long, value_parser = parse_eps)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = NormArg::Linf)]
    norm: NormArg,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    random_start: bool,
    // Augmented mode.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = false)]
    flip: bool,
    #[arg(long, default_value_t = 0)]
    crop_pad: usize,
}

#[derive(Debug, clap::Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Attack budgets, comma separated; accepts "8/255" syntax.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    eps_list: Vec<String>,
    #[arg(long, value_enum, default_value_t = NormArg::Linf)]
    norm: NormArg,
    /// Training seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u64])]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    /// Profile every trained model afterwards.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    profile_after: bool,
    #[arg(long)]
    profile_samples: Option<usize>,
    #[arg(long, default_value_t = 3)]
    profile_trials: usize,
    #[arg(long, default_value_t = 0)]
    profile_seed: u64,
    #[arg(long, default_value_t = 64)]
    profile_batch_size: usize,
    // Architecture (shared by all runs).
    #[arg(long, default_value_t = 8)]
    stem_channels: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![2, 2])]
    stages: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![6, 12])]
    widths: Vec<usize>,
    #[arg(long, value_enum, default_value_t = BlockArg::Bottleneck)]
    block: BlockArg,
    #[arg(long, default_value_t = 2)]
    expansion: usize,
    #[arg(long, default_value_t = false)]
    stem_pool: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Cosine,
    AccuracyDelta,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Metric {
        match m {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::AccuracyDelta => Metric::AccuracyDelta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NormArg {
    Linf,
    L2,
}

impl From<NormArg> for Norm {
    fn from(n: NormArg) -> Norm {
        match n {
            NormArg::Linf => Norm::Linf,
            NormArg::L2 => Norm::L2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BlockArg {
    Basic,
    Bottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Standard,
    Adv,
    Augmented,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ValueArg {
    Mean,
    Delta,
    Stderr,
}

impl From<ValueArg> for ReportValue {
    fn from(v: ValueArg) -> ReportValue {
        match v {
            ValueArg::Mean => ReportValue::Mean,
            ValueArg::Delta => ReportValue::Delta,
            ValueArg::Stderr => ReportValue::Stderr,
        }
    }
}

/// Parse an attack budget: a float, or a "p/q" fraction like "8/255".
pub fn parse_eps(s: &str) -> Result<f64, String> {
    let value = if let Some((num, den)) = s.split_once('/') {
        let n: f64 = num.trim().parse().map_err(|_| format!("bad fraction {s:?}"))?;
        let d: f64 = den.trim().parse().map_err(|_| format!("bad fraction {s:?}"))?;
        if d == 0.0 {
            return Err(format!("zero denominator in {s:?}"));
        }
        n / d
    } else {
        s.trim().parse().map_err(|_| format!("bad number {s:?}"))?
    };
    if !value.is_finite() || value < 0.0 {
        return Err(format!("eps must be finite and >= 0, got {s:?}"));
    }
    Ok(value)
}

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Manifest written next to every command's primary output.
#[derive(Debug, Serialize)]
struct RunManifest {
    command_line: String,
    config_hash: String,
    tool_version: String,
    wall_time_secs: f64,
    outputs: Vec<String>,
}

/// Hash of the effective configuration: sorted key=value pairs, so the
/// hash is independent of flag order on the command line.
fn config_hash(command: &str, fields: &[(&str, String)]) -> String {
    let mut pairs: Vec<String> = fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
    pairs.sort();
    format!("{:016x}", hash64(&format!("{command}?{}", pairs.join("&"))))
}

fn write_manifest(
    primary_out: &Path,
    is_dir: bool,
    hash: String,
    started: Instant,
    outputs: &[PathBuf],
) -> Result<PathBuf, Error> {
    let manifest = RunManifest {
        command_line: std::env::args().collect::<Vec<_>>().join(" "),
        config_hash: hash,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let path = if is_dir {
        primary_out.join("manifest.json")
    } else {
        let mut name = primary_out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        primary_out.with_file_name(name)
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Metadata(e.to_string()))?;
    std::fs::write(&path, text)?;
    Ok(path)
}

/// Binary entry point.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    let jobs = cli.jobs.or_else(|| {
        std::env::var("CRITMAP_JOBS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(jobs) = jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be >= 1");
            return ExitCode::from(2);
        }
        // Ignore failure: the global pool can only be set once.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::SynthData {
            classes,
            n,
            size,
            channels,
            margin,
            noise,
            seed,
            out,
        } => cmd_synth_data(classes, n, size, channels, margin, noise, seed, &out),
        Command::Train(args) => cmd_train(&args),
        Command::Profile {
            model,
            data,
            samples,
            trials,
            seed,
            metric,
            batch_size,
            out,
        } => cmd_profile(&model, &data, samples, trials, seed, metric, batch_size, &out),
        Command::Report {
            profiles,
            baseline,
            format,
            value,
            out,
        } => cmd_report(&profiles, baseline.as_deref(), format, value, &out),
        Command::Correlate { profiles, out } => cmd_correlate(&profiles, &out),
        Command::Sweep(args) => cmd_sweep(&args),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth_data(
    classes: usize,
    n: usize,
    size: usize,
    channels: usize,
    margin: f64,
    noise: f64,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    if classes < 2 {
        return Err(usage("--classes must be >= 2"));
    }
    if n == 0 || n % classes != 0 {
        return Err(usage(format!(
            "--n {n} must be a positive multiple of --classes {classes}"
        )));
    }
    if size == 0 || channels == 0 {
        return Err(usage("--size and --channels must be >= 1"));
    }
    if margin < 0.0 || noise < 0.0 {
        return Err(usage("--margin and --noise must be >= 0"));
    }
    let started = Instant::now();
    let config = SynthConfig {
        classes,
        n,
        channels,
        size,
        margin,
        noise,
    };
    let dataset = synth_dataset(&config, seed)?;
    io::save_dataset(&dataset, out)?;
    let hash = config_hash(
        "synth-data",
        &[
            ("classes", classes.to_string()),
            ("n", n.to_string()),
            ("size", size.to_string()),
            ("channels", channels.to_string()),
            ("margin", margin.to_string()),
            ("noise", noise.to_string()),
            ("seed", seed.to_string()),
            ("out", out.display().to_string()),
        ],
    );
    write_manifest(out, false, hash, started, &[out.to_path_buf()])?;
    println!(
        "wrote {} ({} samples, {} classes, {}x{}x{})",
        out.display(),
        n,
        classes,
        channels,
        size,
        size
    );
    Ok(())
}

fn arch_from_flags(
    id: String,
    dataset: &Dataset,
    stem_channels: usize,
    stages: &[usize],
    widths: &[usize],
    block: BlockArg,
    expansion: usize,
    stem_pool: bool,
) -> ArchConfig {
    ArchConfig {
        id,
        input_shape: dataset.sample_shape(),
        num_classes: dataset.num_classes,
        stem_channels,
        stem_kernel: 3,
        stem_pool,
        stage_blocks: stages.to_vec(),
        stage_channels: widths.to_vec(),
        block: match block {
            BlockArg::Basic => BlockKind::Basic,
            BlockArg::Bottleneck => BlockKind::Bottleneck { expansion },
        },
        conv_bias: false,
        bn_eps: 1e-5,
        dtype: crate::tensor::Dtype::F32,
    }
}

fn train_mode_from_flags(args: &TrainArgs) -> Result<TrainMode, CliError> {
    Ok(match args.mode {
        ModeArg::Standard => TrainMode::Standard,
        ModeArg::Adv => {
            if args.steps == 0 {
                return Err(usage("--steps must be >= 1"));
            }
            let alpha = args.alpha.unwrap_or(2.5 * args.eps / args.steps as f64);
            TrainMode::Adversarial(AttackConfig {
                eps: args.eps,
                alpha,
                steps: args.steps,
                norm: args.norm.into(),
                random_start: args.random_start,
            })
        }
        ModeArg::Augmented => {
            if args.noise_sigma < 0.0 {
                return Err(usage("--noise-sigma must be >= 0"));
            }
            TrainMode::Augmented {
                noise_sigma: args.noise_sigma,
                flip: args.flip,
                crop_pad: args.crop_pad,
            }
        }
    })
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    if args.batch_size == 0 {
        return Err(usage("--batch-size must be >= 1"));
    }
    if args.lr < 0.0 || args.momentum < 0.0 || args.weight_decay < 0.0 {
        return Err(usage("--lr, --momentum, --weight-decay must be >= 0"));
    }
    let mode = train_mode_from_flags(args)?;
    let started = Instant::now();
    let dataset = io::load_dataset(&args.data)?;
    let model_id = args.id.clone().unwrap_or_else(|| {
        args.out
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".to_string())
    });
    let arch = arch_from_flags(
        model_id,
        &dataset,
        args.stem_channels,
        &args.stages,
        &args.widths,
        args.block,
        args.expansion,
        args.stem_pool,
    );
    let model = build_model(&arch, args.seed).map_err(|e| match e {
        Error::Config(msg) => usage(format!("architecture: {msg}")),
        other => CliError::Runtime(other),
    })?;
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        seed: args.seed,
        mode,
    };
    let (trained, log) = train(model, &dataset, &config)?;
    io::save_model(&trained, &args.out)?;

    let mut log_text = String::from("epoch,split,loss,accuracy\n");
    for e in &log {
        writeln!(log_text, "{},{},{},{}", e.epoch, e.split, e.loss, e.accuracy)
            .expect("string write");
    }
    let log_path = {
        let mut name = args.out.file_name().unwrap_or_default().to_os_string();
        name.push(".log");
        args.out.with_file_name(name)
    };
    std::fs::write(&log_path, log_text).map_err(Error::from)?;

    let hash = config_hash(
        "train",
        &[
            ("data", args.data.display().to_string()),
            ("out", args.out.display().to_string()),
            ("stem_channels", args.stem_channels.to_string()),
            ("stages", format!("{:?}", args.stages)),
            ("widths", format!("{:?}", args.widths)),
            ("block", format!("{:?}", args.block)),
            ("expansion", args.expansion.to_string()),
            ("stem_pool", args.stem_pool.to_string()),
            ("epochs", args.epochs.to_string()),
            ("batch_size", args.batch_size.to_string()),
            ("lr", args.lr.to_string()),
            ("momentum", args.momentum.to_string()),
            ("weight_decay", args.weight_decay.to_string()),
            ("seed", args.seed.to_string()),
            ("mode", format!("{:?}", args.mode)),
            ("eps", args.eps.to_string()),
            ("alpha", format!("{:?}", args.alpha)),
            ("steps", args.steps.to_string()),
            ("norm", format!("{:?}", args.norm)),
            ("random_start", args.random_start.to_string()),
            ("noise_sigma", args.noise_sigma.to_string()),
            ("flip", args.flip.to_string()),
            ("crop_pad", args.crop_pad.to_string()),
        ],
    );
    write_manifest(
        &args.out,
        false,
        hash,
        started,
        &[args.out.clone(), log_path],
    )?;
    if let Some(last) = log.last() {
        println!(
            "trained {} epochs: loss {:.4}, accuracy {:.4} -> {}",
            last.epoch,
            last.loss,
            last.accuracy,
            args.out.display()
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_profile(
    model_path: &Path,
    data_path: &Path,
    samples: Option<usize>,
    trials: usize,
    seed: u64,
    metric: MetricArg,
    batch_size: usize,
    out: &Path,
) -> Result<(), CliError> {
    if trials == 0 {
        return Err(usage("--trials must be >= 1"));
    }
    if batch_size == 0 {
        return Err(usage("--batch-size must be >= 1"));
    }
    let started = Instant::now();
    let model = io::load_model(model_path)?;
    let dataset = io::load_dataset(data_path)?;
    let n_samples = samples.unwrap_or_else(|| dataset.len().min(10_000));
    if n_samples == 0 || n_samples > dataset.len() {
        return Err(usage(format!(
            "--samples {n_samples} must be in 1..={}",
            dataset.len()
        )));
    }
    let config = RunConfig {
        base_seed: seed,
        n_trials: trials,
        n_samples,
        batch_size,
        metric: metric.into(),
    };
    let profile = profile_model(&model, &dataset, &config)?;
    io::save_profile(&profile, out)?;
    let hash = config_hash(
        "profile",
        &[
            ("model", model_path.display().to_string()),
            ("data", data_path.display().to_string()),
            ("samples", n_samples.to_string()),
            ("trials", trials.to_string()),
            ("seed", seed.to_string()),
            ("metric", format!("{:?}", metric)),
            ("batch_size", batch_size.to_string()),
            ("out", out.display().to_string()),
        ],
    );
    write_manifest(out, false, hash, started, &[out.to_path_buf()])?;
    println!(
        "profiled {} layers of {} (clean accuracy {:.4}, mean criticality {:.4}) -> {}",
        profile.entries.len(),
        profile.model_id,
        profile.clean_accuracy,
        mean_model_criticality(&profile)?,
        out.display()
    );
    Ok(())
}

fn cmd_report(
    profile_paths: &[PathBuf],
    baseline: Option<&str>,
    format: FormatArg,
    value: ValueArg,
    out: &Path,
) -> Result<(), CliError> {
    if value == ValueArg::Delta && baseline.is_none() {
        return Err(usage("--value delta requires --baseline <model_id>"));
    }
    let started = Instant::now();
    let profiles = profile_paths
        .iter()
        .map(|p| io::load_profile(p))
        .collect::<Result<Vec<_>, _>>()?;
    let text = match (format, profiles.len(), value) {
        // A single profile in plain CSV keeps the per-layer statistics.
        (FormatArg::Csv, 1, ValueArg::Mean) => io::profile_to_csv(&profiles[0]),
        _ => {
            let matrix = build_matrix(&profiles, value.into(), baseline)?;
            match format {
                FormatArg::Csv => matrix_to_csv(&matrix),
                FormatArg::Json => matrix_to_json(&matrix)?,
                FormatArg::Svg => matrix_to_svg(&matrix),
            }
        }
    };
    std::fs::write(out, text).map_err(Error::from)?;
    let hash = config_hash(
        "report",
        &[
            (
                "profiles",
                profile_paths
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
            ),
            ("baseline", format!("{:?}", baseline)),
            ("format", format!("{:?}", format)),
            ("value", format!("{:?}", value)),
            ("out", out.display().to_string()),
        ],
    );
    write_manifest(out, false, hash, started, &[out.to_path_buf()])?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_correlate(profile_paths: &[PathBuf], out: &Path) -> Result<(), CliError> {
    if profile_paths.len() < 2 {
        return Err(usage("--profiles needs at least 2 profiles to correlate"));
    }
    let started = Instant::now();
    let profiles = profile_paths
        .iter()
        .map(|p| io::load_profile(p))
        .collect::<Result<Vec<_>, _>>()?;
    let xs = profiles
        .iter()
        .map(mean_model_criticality)
        .collect::<Result<Vec<_>, _>>()?;
    let ys: Vec<f64> = profiles.iter().map(|p| p.clean_accuracy).collect();
    let r = match spearman(&xs, &ys) {
        Ok(r) => Some(r),
        Err(Error::Degenerate(msg)) => {
            eprintln!("warning: {msg}; reporting null correlation");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let mut csv = String::from("model_id,mean_criticality,clean_accuracy\n");
    for (p, &x) in profiles.iter().zip(&xs) {
        writeln!(csv, "{},{},{}", p.model_id, x, p.clean_accuracy).expect("string write");
    }
    std::fs::write(out, csv).map_err(Error::from)?;
    let hash = config_hash(
        "correlate",
        &[
            (
                "profiles",
                profile_paths
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
            ),
            ("out", out.display().to_string()),
        ],
    );
    write_manifest(out, false, hash, started, &[out.to_path_buf()])?;
    match r {
        Some(r) => println!("spearman_r={r}"),
        None => println!("spearman_r=null"),
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    if args.seeds.is_empty() {
        return Err(usage("--seeds must list at least one seed"));
    }
    let eps_values = args
        .eps_list
        .iter()
        .map(|s| parse_eps(s).map_err(usage))
        .collect::<Result<Vec<f64>, CliError>>()?;
    let started = Instant::now();
    let dataset = io::load_dataset(&args.data)?;
    std::fs::create_dir_all(&args.out_dir).map_err(Error::from)?;

    struct SweepRun {
        eps_label: String,
        eps: f64,
        seed: u64,
        model: ModelGraph,
        model_path: PathBuf,
        profile_path: Option<PathBuf>,
        clean_accuracy: Option<f64>,
        mean_criticality: Option<f64>,
    }

    let combos: Vec<(usize, f64, u64)> = eps_values
        .iter()
        .enumerate()
        .flat_map(|(i, &eps)| args.seeds.iter().map(move |&s| (i, eps, s)))
        .collect();

    let runs: Vec<SweepRun> = combos
        .par_iter()
        .map(|&(ei, eps, seed)| -> Result<SweepRun, Error> {
            let eps_label = args.eps_list[ei].clone();
            let model_id = format!("adv-eps{eps_label}-seed{seed}");
            let arch = arch_from_flags(
                model_id,
                &dataset,
                args.stem_channels,
                &args.stages,
                &args.widths,
                args.block,
                args.expansion,
                args.stem_pool,
            );
            let model = build_model(&arch, seed)?;
            let config = TrainConfig {
                epochs: args.epochs,
                batch_size: args.batch_size,
                lr: args.lr,
                momentum: args.momentum,
                weight_decay: args.weight_decay,
                seed,
                mode: TrainMode::Adversarial(AttackConfig {
                    eps,
                    alpha: 2.5 * eps / args.steps as f64,
                    steps: args.steps,
                    norm: args.norm.into(),
                    random_start: true,
                }),
            };
            let (trained, _) = train(model, &dataset, &config)?;
            let model_path = args.out_dir.join(format!("model_eps{ei}_seed{seed}.lcm"));
            let mut run = SweepRun {
                eps_label,
                eps,
                seed,
                model: trained,
                model_path,
                profile_path: None,
                clean_accuracy: None,
                mean_criticality: None,
            };
            if args.profile_after {
                let n_samples = args
                    .profile_samples
                    .unwrap_or_else(|| dataset.len().min(10_000));
                let config = RunConfig {
                    base_seed: args.profile_seed,
                    n_trials: args.profile_trials,
                    n_samples,
                    batch_size: args.profile_batch_size,
                    metric: Metric::Cosine,
                };
                let profile = profile_model(&run.model, &dataset, &config)?;
                run.clean_accuracy = Some(profile.clean_accuracy);
                run.mean_criticality = Some(mean_model_criticality(&profile)?);
                let path = args.out_dir.join(format!("profile_eps{ei}_seed{seed}.json"));
                io::save_profile(&profile, &path)?;
                run.profile_path = Some(path);
            }
            io::save_model(&run.model, &run.model_path)?;
            Ok(run)
        })
        .collect::<Result<Vec<_>, Error>>()?;

    let mut summary = String::from("eps_label,eps,seed,model_id,clean_accuracy,mean_criticality\n");
    let mut outputs: Vec<PathBuf> = Vec::new();
    for run in &runs {
        writeln!(
            summary,
            "{},{},{},{},{},{}",
            run.eps_label,
            run.eps,
            run.seed,
            run.model.id,
            run.clean_accuracy.map(|v| v.to_string()).unwrap_or_default(),
            run.mean_criticality
                .map(|v| v.to_string())
                .unwrap_or_default(),
        )
        .expect("string write");
        outputs.push(run.model_path.clone());
        if let Some(p) = &run.profile_path {
            outputs.push(p.clone());
        }
    }
    let summary_path = args.out_dir.join("sweep_summary.csv");
    std::fs::write(&summary_path, &summary).map_err(Error::from)?;
    outputs.push(summary_path);

    let hash = config_hash(
        "sweep",
        &[
            ("data", args.data.display().to_string()),
            ("out_dir", args.out_dir.display().to_string()),
            ("eps_list", args.eps_list.join(";")),
            ("norm", format!("{:?}", args.norm)),
            ("seeds", format!("{:?}", args.seeds)),
            ("steps", args.steps.to_string()),
            ("epochs", args.epochs.to_string()),
            ("batch_size", args.batch_size.to_string()),
            ("lr", args.lr.to_string()),
            ("momentum", args.momentum.to_string()),
            ("weight_decay", args.weight_decay.to_string()),
            ("profile_after", args.profile_after.to_string()),
            ("profile_samples", format!("{:?}", args.profile_samples)),
            ("profile_trials", args.profile_trials.to_string()),
            ("profile_seed", args.profile_seed.to_string()),
            ("profile_batch_size", args.profile_batch_size.to_string()),
            ("stem_channels", args.stem_channels.to_string()),
            ("stages", format!("{:?}", args.stages)),
            ("widths", format!("{:?}", args.widths)),
            ("block", format!("{:?}", args.block)),
            ("expansion", args.expansion.to_string()),
            ("stem_pool", args.stem_pool.to_string()),
        ],
    );
    write_manifest(&args.out_dir, true, hash, started, &outputs)?;
    print!("{summary}");
    Ok(())
}
