//! Command-line pipeline: dataset generation, ratio-regressor training,
//! source training, source-free adaptation, benchmark/oracle training,
//! evaluation, and report emission.
//!
//! Every subcommand accepts `--seed` and `--config FILE` (flat JSON
//! mirroring the flags); precedence is flags > file > defaults. Exit codes:
//! 0 success, 1 usage error, 2 runtime error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use srda_core::data_synth::{generate_phantoms, save_phantom_dataset, Modality, SliceLayout};
use srda_core::error::SrdaError;
use srda_core::ratio_prior::{save_regressor, train_regressor, RegressorTrainConfig};
use srda_core::report::write_report;
use srda_core::trainer::{evaluate_checkpoint_to_csv, run as run_training, AdaptConfig, Method};
use srda_core::types::LabelMask;

const DATA_DIR_ENV: &str = "SRDA_DATA_DIR";

#[derive(Parser)]
#[command(
    name = "srda",
    version,
    about = "Source-relaxed domain adaptation for image segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cross-modality phantom dataset.
    GenData(GenDataArgs),
    /// Train the auxiliary class-ratio regressor on source slices.
    TrainRatio(TrainRatioArgs),
    /// Train the segmentation model on the source domain.
    TrainSource(TrainSourceArgs),
    /// Source-free adaptation: entropy + class-ratio KL on target images.
    Adapt(AdaptArgs),
    /// Benchmark adaptation that keeps source supervision.
    TrainAdasource(TrainAdaSourceArgs),
    /// Supervised upper bound on the target domain.
    TrainOracle(TrainOracleArgs),
    /// Evaluate a checkpoint on a dataset's validation volumes.
    Evaluate(EvaluateArgs),
    /// Emit DSC curves, the results table and per-subject entropy panels.
    Report(ReportArgs),
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<SrdaError> for CliError {
    fn from(e: SrdaError) -> Self {
        match e {
            SrdaError::InvalidArgument(_)
            | SrdaError::Config(_)
            | SrdaError::MissingInput(_)
            | SrdaError::ContractViolation(_)
            | SrdaError::ClassMismatch { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

fn env_data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

/// Resolve a dataset-root parameter: flag > config file > SRDA_DATA_DIR.
fn resolve_data(opt: Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    opt.or_else(env_data_dir).ok_or_else(|| {
        CliError::Usage(format!(
            "{what} not given (flag, config file, or ${DATA_DIR_ENV})"
        ))
    })
}

fn load_params<T:serde::de::DeserializeOwned + Default>(
    config: &Option<PathBuf>,
) -> Result<T, CliError> {
    match config {
        None => Ok(T::default()),
        Some(path) => {
            let bytes = srda_core::fsprobe::read_bytes(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_slice(&bytes)
                .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
        }
    }
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    s.parse::<Modality>().map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- gen-data

#[derive(Args)]
struct GenDataArgs {
    /// Flat JSON config file mirroring the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of volumes to generate.
    #[arg(long)]
    volumes: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenDataParams {
    seed: u64,
    volumes: usize,
    depth: usize,
    height: usize,
    width: usize,
    out: Option<PathBuf>,
}

impl Default for GenDataParams {
    fn default() -> Self {
        GenDataParams {
            seed: 0,
            volumes: 16,
            depth: 12,
            height: 64,
            width: 64,
            out: None,
        }
    }
}

fn cmd_gen_data(args: GenDataArgs) -> CliResult {
    let mut p: GenDataParams = load_params(&args.config)?;
    if let Some(v) = args.seed {
        p.seed = v;
    }
    if let Some(v) = args.volumes {
        p.volumes = v;
    }
    if let Some(v) = args.depth {
        p.depth = v;
    }
    if let Some(v) = args.height {
        p.height = v;
    }
    if let Some(v) = args.width {
        p.width = v;
    }
    let out = resolve_data(args.out.or(p.out.clone()), "--out")?;

    let volumes = generate_phantoms(p.seed, p.volumes, p.depth, p.height, p.width)?;
    save_phantom_dataset(&out, &volumes, p.seed)?;
    let slices: usize = volumes.iter().map(|v| v.depth()).sum();
    println!(
        "wrote {} volumes ({} slices, {}x{}) to {}",
        volumes.len(),
        slices,
        p.height,
        p.width,
        out.display()
    );
    Ok(())
}

// -------------------------------------------------------------- train-ratio

#[derive(Args)]
struct TrainRatioArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root (defaults to $SRDA_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Which modality to train on.
    #[arg(long, value_parser = parse_modality)]
    modality: Option<Modality>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Volumes used for training (the regressor sees only these).
    #[arg(long)]
    train_volumes: Option<usize>,
    /// Output checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainRatioParams {
    seed: u64,
    data: Option<PathBuf>,
    modality: Modality,
    epochs: usize,
    lr: f64,
    momentum: f64,
    batch_size: usize,
    classes: usize,
    train_volumes: usize,
    out: PathBuf,
}

impl Default for TrainRatioParams {
    fn default() -> Self {
        let d = RegressorTrainConfig::default();
        TrainRatioParams {
            seed: d.seed,
            data: None,
            modality: Modality::A,
            epochs: d.epochs,
            lr: d.lr,
            momentum: d.momentum,
            batch_size: d.batch_size,
            classes: d.classes,
            train_volumes: 13,
            out: PathBuf::from("ratio.ckpt"),
        }
    }
}

fn cmd_train_ratio(args: TrainRatioArgs) -> CliResult {
    let mut p: TrainRatioParams = load_params(&args.config)?;
    if let Some(v) = args.seed {
        p.seed = v;
    }
    if let Some(v) = args.modality {
        p.modality = v;
    }
    if let Some(v) = args.epochs {
        p.epochs = v;
    }
    if let Some(v) = args.lr {
        p.lr = v;
    }
    if let Some(v) = args.momentum {
        p.momentum = v;
    }
    if let Some(v) = args.batch_size {
        p.batch_size = v;
    }
    if let Some(v) = args.classes {
        p.classes = v;
    }
    if let Some(v) = args.train_volumes {
        p.train_volumes = v;
    }
    if let Some(v) = args.out {
        p.out = v;
    }
    let data = resolve_data(args.data.or(p.data.clone()), "--data")?;

    let volumes = srda_core::data_synth::load_volumes(&data, &SliceLayout::for_modality(p.modality))?;
    if volumes.len() < p.train_volumes {
        return Err(CliError::Usage(format!(
            "dataset has {} volumes, --train-volumes asks for {}",
            volumes.len(),
            p.train_volumes
        )));
    }
    let slices: Vec<_> = volumes[..p.train_volumes]
        .iter()
        .flat_map(|v| v.slices())
        .collect();
    let images: Vec<_> = slices.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<_> = slices
        .iter()
        .map(|s| LabelMask::new(s.mask.clone()))
        .collect();
    let cfg = RegressorTrainConfig {
        classes: p.classes,
        epochs: p.epochs,
        lr: p.lr,
        momentum: p.momentum,
        batch_size: p.batch_size,
        seed: p.seed,
    };
    let (reg, record) = train_regressor(&images, &masks, &cfg)?;
    save_regressor(&reg, &cfg, &p.out)?;
    println!(
        "trained ratio regressor on {} slices: holdout MSE {:.6} -> {:.6}; saved to {}",
        images.len(),
        record.initial_holdout_mse,
        record.final_holdout_mse,
        p.out.display()
    );
    Ok(())
}

// ------------------------------------------------------- training commands

/// Shared trainer parameters, one JSON schema for all four regimes.
#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainParams {
    seed: u64,
    lambda: f64,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    width: usize,
    classes: usize,
    train_volumes: usize,
    val_volumes: usize,
    source_modality: Modality,
    target_modality: Modality,
    source: Option<PathBuf>,
    target: Option<PathBuf>,
    data: Option<PathBuf>,
    init: Option<PathBuf>,
    regressor: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl Default for TrainParams {
    fn default() -> Self {
        let d = AdaptConfig::default();
        TrainParams {
            seed: d.seed,
            lambda: d.lambda,
            lr: d.lr,
            epochs: d.epochs,
            batch_size: d.batch_size,
            width: d.width,
            classes: d.classes,
            train_volumes: d.train_volumes,
            val_volumes: d.val_volumes,
            source_modality: d.source_modality,
            target_modality: d.target_modality,
            source: None,
            target: None,
            data: None,
            init: None,
            regressor: None,
            out: None,
        }
    }
}

#[derive(Args)]
struct CommonTrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Base channel width of the segmentation network.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    train_volumes: Option<usize>,
    #[arg(long)]
    val_volumes: Option<usize>,
    /// Run directory for records, summary and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonTrainArgs {
    fn apply(&self, p: &mut TrainParams) {
        if let Some(v) = self.seed {
            p.seed = v;
        }
        if let Some(v) = self.lr {
            p.lr = v;
        }
        if let Some(v) = self.epochs {
            p.epochs = v;
        }
        if let Some(v) = self.batch_size {
            p.batch_size = v;
        }
        if let Some(v) = self.width {
            p.width = v;
        }
        if let Some(v) = self.classes {
            p.classes = v;
        }
        if let Some(v) = self.train_volumes {
            p.train_volumes = v;
        }
        if let Some(v) = self.val_volumes {
            p.val_volumes = v;
        }
        if let Some(v) = &self.out {
            p.out = Some(v.clone());
        }
    }
}

fn base_config(method: Method, p: &TrainParams, default_out: &str) -> AdaptConfig {
    AdaptConfig {
        method,
        lambda: p.lambda,
        lr: p.lr,
        epochs: p.epochs,
        batch_size: p.batch_size,
        seed: p.seed,
        width: p.width,
        classes: p.classes,
        train_volumes: p.train_volumes,
        val_volumes: p.val_volumes,
        source_data: None,
        target_data: None,
        source_modality: p.source_modality,
        target_modality: p.target_modality,
        init_checkpoint: p.init.clone(),
        regressor_checkpoint: p.regressor.clone(),
        out_dir: p.out.clone().unwrap_or_else(|| PathBuf::from(default_out)),
    }
}

fn finish_run(config: AdaptConfig) -> CliResult {
    let outcome = run_training(&config)?;
    println!(
        "{}: best val DSC {:.4} (epoch {}), HD {:.3}; artifacts in {}",
        config.method,
        outcome.summary.best_val_dsc,
        outcome.summary.best_epoch,
        outcome.summary.best_val_hd,
        config.out_dir.display()
    );
    Ok(())
}

#[derive(Args)]
struct TrainSourceArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Labeled source dataset root (defaults to $SRDA_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Source modality to train on.
    #[arg(long, value_parser = parse_modality)]
    modality: Option<Modality>,
}

fn cmd_train_source(args: TrainSourceArgs) -> CliResult {
    let mut p: TrainParams = load_params(&args.common.config)?;
    args.common.apply(&mut p);
    if let Some(v) = args.modality {
        p.source_modality = v;
    }
    let data = resolve_data(args.data.or(p.data.clone()).or(p.source.clone()), "--data")?;
    let mut config = base_config(Method::NoAdapt, &p, "runs/no_adapt");
    config.source_data = Some(data);
    finish_run(config)
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Unlabeled target dataset root (defaults to $SRDA_DATA_DIR).
    /// This subcommand deliberately has no --source flag.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long, value_parser = parse_modality)]
    target_modality: Option<Modality>,
    /// Source-pretrained checkpoint used as initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Trained ratio-regressor checkpoint providing the priors.
    #[arg(long)]
    regressor: Option<PathBuf>,
    /// Weight of the class-ratio KL term.
    #[arg(long)]
    lambda: Option<f64>,
}

fn cmd_adapt(args: AdaptArgs) -> CliResult {
    let mut p: TrainParams = load_params(&args.common.config)?;
    args.common.apply(&mut p);
    if let Some(v) = args.target_modality {
        p.target_modality = v;
    }
    if let Some(v) = args.init {
        p.init = Some(v);
    }
    if let Some(v) = args.regressor {
        p.regressor = Some(v);
    }
    if let Some(v) = args.lambda {
        p.lambda = v;
    }
    if p.source.is_some() {
        return Err(CliError::Usage(
            "adapt is source-free: remove 'source' from the config file".into(),
        ));
    }
    let target = resolve_data(args.target.or(p.target.clone()).or(p.data.clone()), "--target")?;
    let mut config = base_config(Method::AdaEnt, &p, "runs/adaent");
    config.target_data = Some(target);
    finish_run(config)
}

#[derive(Args)]
struct TrainAdaSourceArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Labeled source dataset root.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Unlabeled target dataset root.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long, value_parser = parse_modality)]
    source_modality: Option<Modality>,
    #[arg(long, value_parser = parse_modality)]
    target_modality: Option<Modality>,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    regressor: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
}

fn cmd_train_adasource(args: TrainAdaSourceArgs) -> CliResult {
    let mut p: TrainParams = load_params(&args.common.config)?;
    args.common.apply(&mut p);
    if let Some(v) = args.source_modality {
        p.source_modality = v;
    }
    if let Some(v) = args.target_modality {
        p.target_modality = v;
    }
    if let Some(v) = args.init {
        p.init = Some(v);
    }
    if let Some(v) = args.regressor {
        p.regressor = Some(v);
    }
    if let Some(v) = args.lambda {
        p.lambda = v;
    }
    let source = resolve_data(args.source.or(p.source.clone()), "--source")?;
    let target = resolve_data(args.target.or(p.target.clone()), "--target")?;
    let mut config = base_config(Method::AdaSource, &p, "runs/adasource");
    config.source_data = Some(source);
    config.target_data = Some(target);
    finish_run(config)
}

#[derive(Args)]
struct TrainOracleArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Labeled target dataset root.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long, value_parser = parse_modality)]
    target_modality: Option<Modality>,
}

fn cmd_train_oracle(args: TrainOracleArgs) -> CliResult {
    let mut p: TrainParams = load_params(&args.common.config)?;
    args.common.apply(&mut p);
    if let Some(v) = args.target_modality {
        p.target_modality = v;
    }
    let target = resolve_data(args.target.or(p.target.clone()).or(p.data.clone()), "--target")?;
    let mut config = base_config(Method::Oracle, &p, "runs/oracle");
    config.target_data = Some(target);
    finish_run(config)
}

// ---------------------------------------------------------------- evaluate

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset root (defaults to $SRDA_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_modality)]
    modality: Option<Modality>,
    #[arg(long)]
    train_volumes: Option<usize>,
    #[arg(long)]
    val_volumes: Option<usize>,
    /// Identifier written into the CSV rows.
    #[arg(long)]
    run_id: Option<String>,
    /// Method label written into the CSV rows.
    #[arg(long)]
    method: Option<String>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateParams {
    seed: u64,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    modality: Modality,
    train_volumes: usize,
    val_volumes: usize,
    run_id: String,
    method: String,
    out: PathBuf,
}

impl Default for EvaluateParams {
    fn default() -> Self {
        EvaluateParams {
            seed: 0,
            checkpoint: None,
            data: None,
            modality: Modality::B,
            train_volumes: 13,
            val_volumes: 3,
            run_id: "eval".into(),
            method: "model".into(),
            out: PathBuf::from("metrics.csv"),
        }
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> CliResult {
    let mut p: EvaluateParams = load_params(&args.config)?;
    if let Some(v) = args.seed {
        p.seed = v; // accepted everywhere; evaluation itself is deterministic
    }
    if let Some(v) = args.checkpoint {
        p.checkpoint = Some(v);
    }
    if let Some(v) = args.modality {
        p.modality = v;
    }
    if let Some(v) = args.train_volumes {
        p.train_volumes = v;
    }
    if let Some(v) = args.val_volumes {
        p.val_volumes = v;
    }
    if let Some(v) = args.run_id {
        p.run_id = v;
    }
    if let Some(v) = args.method {
        p.method = v;
    }
    if let Some(v) = args.out {
        p.out = v;
    }
    let checkpoint = p
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
    let data = resolve_data(args.data.or(p.data.clone()), "--data")?;

    let summary = evaluate_checkpoint_to_csv(
        &checkpoint,
        &data,
        p.modality,
        p.train_volumes,
        p.val_volumes,
        &p.run_id,
        &p.method,
        &p.out,
    )?;
    println!(
        "{}: DSC {:.4} +/- {:.4}, HD {:.3} +/- {:.3}, entropy {:.4} over {} volumes -> {}",
        p.method,
        summary.dsc_mean,
        summary.dsc_std,
        summary.hd_mean,
        summary.hd_std,
        summary.entropy_mean,
        summary.volumes.len(),
        p.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------ report

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory containing run directories.
    #[arg(long)]
    runs: Option<PathBuf>,
    /// Dataset root for the subject panels (defaults to $SRDA_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for figures and tables.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ReportParams {
    seed: u64,
    runs: PathBuf,
    data: Option<PathBuf>,
    out: PathBuf,
}

impl Default for ReportParams {
    fn default() -> Self {
        ReportParams {
            seed: 0,
            runs: PathBuf::from("runs"),
            data: None,
            out: PathBuf::from("figs"),
        }
    }
}

fn cmd_report(args: ReportArgs) -> CliResult {
    let mut p: ReportParams = load_params(&args.config)?;
    if let Some(v) = args.seed {
        p.seed = v;
    }
    let _ = p.seed; // report generation is deterministic
    if let Some(v) = args.runs {
        p.runs = v;
    }
    if let Some(v) = args.data {
        p.data = Some(v);
    }
    if let Some(v) = args.out {
        p.out = v;
    }
    let data = p.data.clone().or_else(env_data_dir);
    let paths = write_report(&p.runs, data.as_deref(), &p.out)?;
    println!("wrote {}", paths.curves.display());
    println!("wrote {}", paths.table_txt.display());
    for panel in &paths.panels {
        println!("wrote {}", panel.display());
    }
    if paths.panels.is_empty() {
        println!("(no dataset given; subject panels skipped)");
    }
    Ok(())
}

// -------------------------------------------------------------------- main

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::TrainRatio(a) => cmd_train_ratio(a),
        Command::TrainSource(a) => cmd_train_source(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::TrainAdasource(a) => cmd_train_adasource(a),
        Command::TrainOracle(a) => cmd_train_oracle(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                0
            } else {
                1
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init()
        .ok();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn main() {
    std::process::exit(real_main());
}
