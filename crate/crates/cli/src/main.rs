use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use scsplit::config::{DatasetSource, RunConfig};
use scsplit::data::{self, ChannelFrameSet};
use scsplit::eval::{self, ModelVariant, ReportFormat};
use scsplit::fingerprint;
use scsplit::infer::{self, AcquisitionInput, Aggregation};
use scsplit::mixing::NoiseConfig;
use scsplit::nets::ModelBundle;
use scsplit::scin::{self, ScinTable, TargetChannelStats};
use scsplit::train::{self, LogRecord};
use scsplit::{Error, Result};

/// Environment variable naming a directory for cached normalization tables.
const CACHE_ENV: &str = "SCSPLIT_CACHE_DIR";

#[derive(Parser, Debug)]
#[command(name = "scsplit", version, about = "Unmix superimposed two-channel fluorescence images")]
struct Cli {
    /// Run configuration (.toml or .json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the built-in desk profile instead of library defaults.
    #[arg(long, global = true)]
    desk: bool,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (parallel builds only).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Report format; repeat for several.
    #[arg(long, global = true)]
    format: Vec<ReportFormat>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and write it to `<out>/dataset`.
    Synth,
    /// Build the per-ratio normalization table.
    BuildScin(DataArgs),
    /// Train both generators and the regressor and write a model bundle.
    Train(TrainArgs),
    /// Unmix one acquisition.
    Infer(InferArgs),
    /// Score model variants per regime on the test split.
    Eval(EvalArgs),
    /// Assumed-vs-actual ratio sweep with fixed-ratio inference.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset manifest, dataset directory or interleaved TIFF stack.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Existing normalization table; built from the dataset when absent.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Skip training when `<out>/bundle` already matches this config.
    #[arg(long)]
    reuse: bool,
}

#[derive(Args, Debug)]
struct InferOverrides {
    /// mean, median, mode, wgt_sum, wgt_prod or fixed:<t>.
    #[arg(long)]
    aggregation: Option<Aggregation>,
    #[arg(long)]
    mmse_count: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Disable the input perturbation.
    #[arg(long)]
    no_noise: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Acquisition manifest (.json) or a TIFF / .npy stack.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    overrides: InferOverrides,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Variant token (full, fixed:<t>, -agg, <aggregation>, iter:<k>);
    /// repeat for several. Replaces the configured list.
    #[arg(long = "variant", allow_hyphen_values = true)]
    variants: Vec<String>,
    #[command(flatten)]
    overrides: InferOverrides,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: InferOverrides,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, details) = match &e {
                Error::Config(v) => ("config", v.clone()),
                other => (error_kind(other), vec![other.to_string()]),
            };
            let body = json!({"error": kind, "message": e.to_string(), "details": details});
            let _ = writeln!(std::io::stderr(), "{body}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Ingest { .. } => "ingest",
        Error::Shape { .. } => "shape",
        Error::Range(_) => "range",
        Error::Degenerate(_) => "degenerate",
        Error::Diverged { .. } => "diverged",
        Error::Fingerprint { .. } => "fingerprint",
        Error::Empty(_) => "empty",
        Error::Format(_) => "format",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
        Error::Tiff(_) => "tiff",
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Error::config("--jobs must be positive"));
        }
        scsplit::par::configure_threads(n).map_err(Error::config)?;
    }
    let mut cfg = match (&cli.config, cli.desk) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, true) => RunConfig::desk(),
        (None, false) => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if !cli.format.is_empty() {
        cfg.eval.formats = cli.format.clone();
    }
    match cli.command {
        Command::Synth => cmd_synth(cfg),
        Command::BuildScin(a) => {
            apply_data(&mut cfg, &a);
            cmd_build_scin(cfg)
        }
        Command::Train(a) => {
            apply_data(&mut cfg, &a.data);
            if let Some(n) = a.max_steps {
                cfg.train.max_steps = n;
            }
            cmd_train(cfg, a.table.as_deref(), a.reuse)
        }
        Command::Infer(a) => {
            apply_infer(&mut cfg, &a.overrides);
            cmd_infer(cfg, &a.bundle, &a.input)
        }
        Command::Eval(a) => {
            apply_data(&mut cfg, &a.data);
            apply_infer(&mut cfg, &a.overrides);
            if !a.variants.is_empty() {
                cfg.eval.variants = a.variants.clone();
            }
            cmd_eval(cfg, &a.bundle)
        }
        Command::Sweep(a) => {
            apply_data(&mut cfg, &a.data);
            apply_infer(&mut cfg, &a.overrides);
            cmd_sweep(cfg, &a.bundle)
        }
    }
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(p) = &a.dataset {
        cfg.dataset = Some(DatasetSource {
            path: p.clone(),
            clip_quantile: cfg.dataset.as_ref().and_then(|d| d.clip_quantile),
        });
    }
}

fn apply_infer(cfg: &mut RunConfig, o: &InferOverrides) {
    if let Some(a) = o.aggregation {
        cfg.infer.aggregation = a;
    }
    if let Some(n) = o.mmse_count {
        cfg.infer.mmse_count = n;
    }
    if let Some(k) = o.steps {
        cfg.infer.steps = k;
    }
    if o.no_noise {
        cfg.infer.noise = NoiseConfig::disabled();
    }
}

/// Validates the merged config and writes it to `<out>/<command>.config.toml`.
fn prepare(cfg: &RunConfig, command: &str) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let path = cfg.out.join(format!("{command}.config.toml"));
    let text = format!("# config_hash = \"{}\"\n{}", cfg.hash(), cfg.to_toml()?);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn load_data(cfg: &RunConfig) -> Result<ChannelFrameSet> {
    match &cfg.dataset {
        Some(d) => data::load_dataset(&d.path, d.clip_quantile),
        None => data::synthesize_dataset(&cfg.synth),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_synth(cfg: RunConfig) -> Result<()> {
    prepare(&cfg, "synth")?;
    let fs = data::synthesize_dataset(&cfg.synth)?;
    let dir = cfg.out.join("dataset");
    let manifest = data::save_dataset(&fs, &dir)?;
    write_json(
        &dir.join("provenance.json"),
        &json!({
            "config_hash": cfg.hash(),
            "seed": cfg.synth.seed,
            "dataset_fingerprint": fs.fingerprint(),
            "splits": fs.splits(),
        }),
    )?;
    println!("wrote {} frame pairs to {}", fs.len(), manifest.display());
    Ok(())
}

fn table_cache_key(cfg: &RunConfig, fs: &ChannelFrameSet) -> String {
    let key = json!({
        "dataset": fs.fingerprint(),
        "patch": cfg.scin_patch_size(),
        "bins": cfg.scin.n_bins,
        "samples": cfg.scin.samples_per_bin,
        "seed": cfg.seed,
    });
    fingerprint::short(&fingerprint::of_json("scsplit.scin-cache", &key)).to_string()
}

/// Builds the table, reusing a cached copy when the cache directory is set.
fn build_or_cached_table(cfg: &RunConfig, fs: &ChannelFrameSet) -> Result<ScinTable> {
    let cached = std::env::var_os(CACHE_ENV)
        .map(|d| PathBuf::from(d).join(format!("scin-{}.json", table_cache_key(cfg, fs))));
    if let Some(p) = cached.as_ref().filter(|p| p.exists()) {
        log::info!("reusing cached table {}", p.display());
        return ScinTable::load(p, Some(&fs.fingerprint()));
    }
    let table = scin::build_table(
        fs,
        cfg.scin_patch_size(),
        cfg.scin.n_bins,
        cfg.scin.samples_per_bin,
        cfg.seed,
    )?;
    if let Some(p) = cached {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        table.save(&p)?;
    }
    Ok(table)
}

fn cmd_build_scin(cfg: RunConfig) -> Result<()> {
    prepare(&cfg, "build-scin")?;
    let fs = load_data(&cfg)?;
    let table = build_or_cached_table(&cfg, &fs)?;
    let path = cfg.out.join("scin_table.json");
    table.save(&path)?;
    println!(
        "wrote {} ({} bins, fingerprint {})",
        path.display(),
        table.n_bins,
        fingerprint::short(&table.fingerprint())
    );
    Ok(())
}

fn cmd_train(cfg: RunConfig, table_path: Option<&Path>, reuse: bool) -> Result<()> {
    prepare(&cfg, "train")?;
    let bundle_dir = cfg.out.join("bundle");
    if reuse && bundle_dir.join("manifest.json").exists() {
        let existing = ModelBundle::load(&bundle_dir, None)?;
        if existing.manifest().train_config_hash == cfg.train.hash() {
            println!("reusing {} (config hash matches)", bundle_dir.display());
            return Ok(());
        }
    }
    let fs = load_data(&cfg)?;
    let table = match table_path {
        Some(p) => ScinTable::load(p, Some(&fs.fingerprint()))?,
        None => build_or_cached_table(&cfg, &fs)?,
    };
    let stats = TargetChannelStats::from_training(&fs)?;
    let log_path = cfg.out.join("train_log.jsonl");
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut io_err = None;
    let mut log = |r: &LogRecord| {
        if io_err.is_none() {
            let line = serde_json::to_string(r).expect("serializable record");
            if let Err(e) = writeln!(log_file, "{line}") {
                io_err = Some(e);
            }
        }
    };
    let gens = train::train_generators_logged(&fs, &table, &stats, &cfg.train, &mut log)?;
    let reg = train::train_regressor_logged(&fs, &table, &cfg.train, &mut log)?;
    if let Some(e) = io_err {
        return Err(Error::io(&log_path, e));
    }
    let bundle = train::make_bundle(&gens, &reg, &table, &stats, &cfg.train)?;
    bundle.save(&bundle_dir)?;
    println!(
        "wrote {} (fingerprint {})",
        bundle_dir.display(),
        fingerprint::short(&bundle.fingerprint())
    );
    Ok(())
}

fn summary(values: &[f32]) -> serde_json::Value {
    if values.is_empty() {
        return json!(null);
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    json!({"n": values.len(), "mean": mean, "std": var.sqrt(), "min": lo, "max": hi})
}

fn cmd_infer(cfg: RunConfig, bundle_dir: &Path, input: &Path) -> Result<()> {
    prepare(&cfg, "infer")?;
    let bundle = ModelBundle::load(bundle_dir, None)?;
    let (name, frames) = data::load_acquisition(input)?;
    let acq = AcquisitionInput::new(name, frames)?;
    let res = infer::unmix(&acq, &bundle, &cfg.infer)?;
    let dir = cfg.out.join("infer");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let c0 = dir.join(format!("{}_c0.tif", acq.name));
    let c1 = dir.join(format!("{}_c1.tif", acq.name));
    data::write_tiff_stack(&c0, &res.c0_hat)?;
    data::write_tiff_stack(&c1, &res.c1_hat)?;
    write_json(
        &dir.join(format!("{}.json", acq.name)),
        &json!({
            "acquisition": acq.name,
            "frames": acq.frames.len(),
            "t_estimate": res.t_estimate,
            "per_frame_t": res.per_frame_t,
            "per_patch_t": summary(&res.per_patch_t),
            "aggregation_fell_back": res.aggregation_fell_back,
            "acquisition_mean": res.acquisition_mean,
            "acquisition_std": res.acquisition_std,
            "bundle_fingerprint": bundle.fingerprint(),
            "config_hash": cfg.hash(),
            "seed": cfg.infer.seed,
            "config": res.config,
        }),
    )?;
    println!("t_estimate {:.4}; wrote {} and {}", res.t_estimate, c0.display(), c1.display());
    Ok(())
}

fn cmd_eval(cfg: RunConfig, bundle_dir: &Path) -> Result<()> {
    prepare(&cfg, "eval")?;
    let fs = load_data(&cfg)?;
    let bundle = ModelBundle::load(bundle_dir, None)?;
    let variants: Vec<ModelVariant> = cfg.variants()?;
    let mut report =
        eval::evaluate_regimes(&bundle, &fs, &cfg.eval.regimes, &variants, cfg.deterministic)?;
    report.metadata.run_config_hash = Some(cfg.hash());
    report.metadata.seed = Some(cfg.seed);
    let written = eval::emit_report(&report, &cfg.out, &cfg.eval.formats, cfg.eval.plot_data)?;
    for s in &report.summaries {
        println!("{:<16} {:<9} {:<8} {:.4}", s.model_variant, s.regime, s.metric, s.value);
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_sweep(cfg: RunConfig, bundle_dir: &Path) -> Result<()> {
    prepare(&cfg, "sweep")?;
    let fs = load_data(&cfg)?;
    let bundle = ModelBundle::load(bundle_dir, None)?;
    let table = eval::degradation_sweep(
        &bundle,
        &fs,
        &cfg.eval.sweep_actual_w,
        &cfg.eval.sweep_assumed_w,
        &cfg.infer,
    )?;
    let csv = cfg.out.join("sweep.csv");
    fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let js = cfg.out.join("sweep.json");
    write_json(
        &js,
        &json!({
            "bundle_fingerprint": bundle.fingerprint(),
            "dataset_fingerprint": fs.fingerprint(),
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "cells": table.cells,
        }),
    )?;
    for &a in &cfg.eval.sweep_actual_w {
        if let Some(best) = table.argmax(a) {
            println!("actual w {a}: best assumed w {best}");
        }
    }
    println!("wrote {} and {}", csv.display(), js.display());
    Ok(())
}
