//! The `reid` command line: synthesize data, train either head, evaluate
//! with optional re-ranking or query expansion, and run the diagnostics.
//!
//! Every command writes a `run.json` manifest next to its outputs. Passing
//! that manifest to `reid replay` re-executes the command with the recorded
//! configuration and inputs.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime and data errors.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use reid_core::data::{gen_synthetic, load_manifest, write_manifest, Dataset, Split};
use reid_core::diagnostics::{diagnose_batches, write_diagnostics_csv, FeatureSpace};
use reid_core::eval::{
    compute_dist_matrix, evaluate_with, k_reciprocal_rerank, query_expansion, EvalReport, Protocol,
};
use reid_core::pipeline::{inference_feature, Architecture, PipelineParams, Variant};
use reid_core::training::{train_run, write_history_csv, EvalSplit, OptimizerKind};
use reid_core::Rng;

pub use config::Config;

pub const OUTPUT_ROOT_ENV: &str = "REID_OUTPUT_ROOT";
pub const MANIFEST_FILE: &str = "run.json";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<reid_core::Error> for CliError {
    fn from(e: reid_core::Error) -> Self {
        match e {
            reid_core::Error::Parameter(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "reid", version, about = "Strong and stronger re-identification heads on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and write it as a manifest.
    Synth(SynthArgs),
    /// Train one head and write a checkpoint and per-epoch history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the query/gallery splits.
    Eval(EvalArgs),
    /// Mining-agreement and gradient-direction statistics over sampled batches.
    Diagnose(DiagnoseArgs),
    /// Re-run a command from its run.json.
    Replay(ReplayArgs),
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// JSON config file (a run.json is accepted as well).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.p=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory [default: $REID_OUTPUT_ROOT/<command> or runs/<command>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset manifest; defaults to `data.manifest` or in-memory synthetic data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Apply k-reciprocal re-ranking.
    #[arg(long)]
    pub rerank: bool,
    /// Apply alpha-weighted query expansion.
    #[arg(long)]
    pub qe: bool,
    #[arg(long)]
    pub metric: Option<reid_core::eval::DistMetric>,
    /// Retrieve the train split against itself, each item matching only itself.
    #[arg(long)]
    pub self_match: bool,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: Common,
    /// Parameters to diagnose; a seeded random initialization when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub normalize_first: bool,
    #[arg(long)]
    pub batches: Option<usize>,
    #[arg(long)]
    pub features: Option<FeatureSpace>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything needed to re-run a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Seconds since the Unix epoch; taken from `SOURCE_DATE_EPOCH` when set.
    pub created_unix: u64,
    pub config: Config,
    /// Absolute paths of files the command read, by role.
    pub inputs: BTreeMap<String, PathBuf>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
}

fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub variant: Variant,
    pub train: reid_core::training::TrainConfig,
    pub params: PipelineParams,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(io_err(path, format!("unsupported checkpoint format {}", ck.format_version)));
        }
        ck.params.validate()?;
        Ok(ck)
    }
}

/// Output directory for a command, created if missing.
fn out_dir(explicit: Option<&Path>, command: &str) -> Result<PathBuf, CliError> {
    let dir = match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command),
    };
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    fs::canonicalize(p).map_err(|e| io_err(p, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_csv_file(
    path: &Path,
    f: impl FnOnce(&mut fs::File) -> Result<(), Box<dyn std::error::Error>>,
) -> Result<(), CliError> {
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f(&mut file).map_err(|e| io_err(path, e))
}

fn dataset(cfg: &Config) -> Result<Dataset, CliError> {
    match &cfg.data.manifest {
        Some(p) => Ok(load_manifest(p)?),
        None => Ok(gen_synthetic(&cfg.data.synth)?),
    }
}

fn finish(
    dir: &Path,
    command: &str,
    seed: u64,
    config: Config,
    inputs: BTreeMap<String, PathBuf>,
    mut outputs: Vec<String>,
) -> Result<RunManifest, CliError> {
    outputs.push(MANIFEST_FILE.into());
    let m = RunManifest {
        command: command.into(),
        version: format!("reid-cli {}", env!("CARGO_PKG_VERSION")),
        seed,
        created_unix: timestamp(),
        config,
        inputs,
        outputs,
    };
    write_json(&dir.join(MANIFEST_FILE), &m)?;
    Ok(m)
}

fn set(overrides: &mut Vec<String>, key: &str, v: Option<impl Serialize>) {
    if let Some(v) = v {
        overrides.push(format!("{key}={}", serde_json::to_string(&v).expect("flag value serializes")));
    }
}

fn resolve(common: &Common, mut extra: Vec<String>) -> Result<Config, CliError> {
    let mut overrides = common.overrides.clone();
    overrides.append(&mut extra);
    config::resolve(common.config.as_deref(), &overrides)
}

fn data_override(extra: &mut Vec<String>, data: Option<&Path>) -> Result<(), CliError> {
    if let Some(p) = data {
        set(extra, "data.manifest", Some(absolute(p)?));
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<RunManifest, CliError> {
    let mut extra = Vec::new();
    set(&mut extra, "data.synth.seed", args.seed);
    let cfg = resolve(&args.common, extra)?;
    synth_with(cfg, args.common.out.as_deref())
}

fn synth_with(cfg: Config, out: Option<&Path>) -> Result<RunManifest, CliError> {
    cfg.data.synth.validate()?;
    let dir = out_dir(out, "synth")?;
    let ds = gen_synthetic(&cfg.data.synth)?;
    write_manifest(&ds, &dir)?;
    ds.write_pid_map(&dir.join("pid_map.csv"))?;
    let outputs = vec!["manifest.csv".into(), "payloads/".into(), "pid_map.csv".into()];
    println!("wrote {} items to {}", ds.len(), dir.display());
    finish(&dir, "synth", cfg.data.synth.seed, cfg, BTreeMap::new(), outputs)
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest, CliError> {
    let mut extra = Vec::new();
    data_override(&mut extra, args.data.as_deref())?;
    set(&mut extra, "train.variant", args.variant);
    set(&mut extra, "train.schedule.total_epochs", args.epochs);
    set(&mut extra, "train.seed", args.seed);
    set(&mut extra, "train.optimizer.kind", args.optimizer);
    let cfg = resolve(&args.common, extra)?;
    train_with(cfg, args.common.out.as_deref())
}

fn train_with(cfg: Config, out: Option<&Path>) -> Result<RunManifest, CliError> {
    cfg.train.validate()?;
    if cfg.data.manifest.is_none() {
        cfg.data.synth.validate()?;
    }
    let dir = out_dir(out, "train")?;
    let ds = dataset(&cfg)?;
    let outcome = train_run(&cfg.train, &ds)?;
    let final_map = outcome.final_map();
    write_csv_file(&dir.join("history.csv"), |f| Ok(write_history_csv(&outcome.history, f)?))?;
    let ck = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        variant: cfg.train.variant,
        train: cfg.train.clone(),
        params: outcome.params,
    };
    write_json(&dir.join("checkpoint.json"), &ck)?;
    match outcome.history.last() {
        Some(last) => println!(
            "{}: {} epochs, final loss {:.4}{}",
            cfg.train.variant,
            outcome.history.len(),
            last.total_loss,
            final_map.map(|m| format!(", mAP {m:.4}")).unwrap_or_default()
        ),
        None => println!("{}: 0 epochs", cfg.train.variant),
    }
    let outputs = vec!["history.csv".into(), "checkpoint.json".into()];
    finish(&dir, "train", cfg.train.seed, cfg, BTreeMap::new(), outputs)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalOutput {
    pub metric: reid_core::eval::DistMetric,
    pub rerank: bool,
    pub qe: bool,
    pub self_match: bool,
    pub baseline: EvalReport,
    /// Present when re-ranking or query expansion is enabled.
    pub processed: Option<EvalReport>,
    /// `processed.mAP - baseline.mAP`.
    pub delta_map: Option<f64>,
}

impl EvalOutput {
    pub fn headline(&self) -> &EvalReport {
        self.processed.as_ref().unwrap_or(&self.baseline)
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<RunManifest, CliError> {
    let mut extra = Vec::new();
    data_override(&mut extra, args.data.as_deref())?;
    set(&mut extra, "eval.metric", args.metric);
    if args.rerank {
        set(&mut extra, "eval.use_rerank", Some(true));
    }
    if args.qe {
        set(&mut extra, "eval.use_qe", Some(true));
    }
    if args.self_match {
        set(&mut extra, "eval.self_match", Some(true));
    }
    let cfg = resolve(&args.common, extra)?;
    eval_with(cfg, &absolute(&args.checkpoint)?, args.common.out.as_deref())
}

fn eval_with(cfg: Config, checkpoint: &Path, out: Option<&Path>) -> Result<RunManifest, CliError> {
    let e = &cfg.eval;
    if e.max_rank == 0 {
        return Err(CliError::Config("eval.max_rank must be >= 1".into()));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let dir = out_dir(out, "eval")?;
    let ds = dataset(&cfg)?;

    let (q, g, q_pids, q_cams, g_pids, g_cams, protocol) = if e.self_match {
        let idx = ds.indices(Split::Train);
        if idx.is_empty() {
            return Err(CliError::Runtime("dataset: self-match needs a train split".into()));
        }
        let x = ds.features(&idx)?;
        let ids: Vec<i64> = (0..idx.len() as i64).collect();
        let cams = vec![0; idx.len()];
        (x.clone(), x, ids.clone(), cams.clone(), ids, cams, Protocol { filter_same_camera: false })
    } else {
        let s = EvalSplit::from_dataset(&ds)?;
        (s.query, s.gallery, s.q_pids, s.q_camids, s.g_pids, s.g_camids, Protocol::default())
    };
    let qf = inference_feature(&q, &ck.params)?;
    let gf = inference_feature(&g, &ck.params)?;
    let evaluate = |dist: &reid_core::Mat| {
        evaluate_with(dist, &q_pids, &q_cams, &g_pids, &g_cams, e.max_rank, protocol)
    };
    let baseline = evaluate(&compute_dist_matrix(&qf, &gf, e.metric)?)?;
    let processed = if e.use_qe || e.use_rerank {
        let q2 = if e.use_qe { query_expansion(&qf, &gf, &e.qe)? } else { qf.clone() };
        let dist = if e.use_rerank {
            k_reciprocal_rerank(&q2, &gf, &e.rerank)?
        } else {
            compute_dist_matrix(&q2, &gf, e.metric)?
        };
        Some(evaluate(&dist)?)
    } else {
        None
    };
    let report = EvalOutput {
        metric: e.metric,
        rerank: e.use_rerank,
        qe: e.use_qe,
        self_match: e.self_match,
        delta_map: processed.as_ref().map(|p| p.map - baseline.map),
        baseline,
        processed,
    };
    let h = report.headline();
    println!(
        "mAP {:.4}  rank-1 {:.4}  rank-5 {:.4}  rank-10 {:.4}{}",
        h.map,
        h.rank(1),
        h.rank(5),
        h.rank(10),
        report.delta_map.map(|d| format!("  (delta mAP {d:+.4})")).unwrap_or_default()
    );
    write_json(&dir.join("eval.json"), &report)?;
    let inputs = BTreeMap::from([("checkpoint".to_string(), checkpoint.to_path_buf())]);
    finish(&dir, "eval", ck.train.seed, cfg, inputs, vec!["eval.json".into()])
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<RunManifest, CliError> {
    let mut extra = Vec::new();
    data_override(&mut extra, args.data.as_deref())?;
    set(&mut extra, "diagnose.batches", args.batches);
    set(&mut extra, "diagnose.features", args.features);
    if args.normalize_first {
        set(&mut extra, "diagnose.normalize_first", Some(true));
    }
    let cfg = resolve(&args.common, extra)?;
    let ck = args.checkpoint.as_deref().map(absolute).transpose()?;
    diagnose_with(cfg, ck.as_deref(), args.common.out.as_deref())
}

fn diagnose_with(cfg: Config, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<RunManifest, CliError> {
    let d = &cfg.diagnose;
    if d.p < 2 || d.k < 2 {
        return Err(CliError::Config(format!("diagnose needs p >= 2 and k >= 2, got {} and {}", d.p, d.k)));
    }
    cfg.train.loss.validate()?;
    let ds = dataset(&cfg)?;
    let mut inputs = BTreeMap::new();
    let params = match checkpoint {
        Some(p) => {
            inputs.insert("checkpoint".to_string(), p.to_path_buf());
            Checkpoint::load(p)?.params
        }
        None => {
            let arch = Architecture {
                input_dim: ds.input_dim()?,
                hidden: cfg.train.hidden.clone(),
                feature_dim: cfg.train.feature_dim,
                num_classes: ds.num_train_ids(),
            };
            PipelineParams::init(&arch, &mut Rng::new(d.seed))?
        }
    };
    let dir = out_dir(out, "diagnose")?;
    let rows = diagnose_batches(&ds, &params, &cfg.train.loss, d)?;
    write_csv_file(&dir.join("diagnostics.csv"), |f| Ok(write_diagnostics_csv(&rows, f)?))?;
    println!("wrote {} diagnostic rows to {}", rows.len(), dir.display());
    let seed = d.seed;
    finish(&dir, "diagnose", seed, cfg, inputs, vec!["diagnostics.csv".into()])
}

pub fn cmd_replay(args: &ReplayArgs) -> Result<RunManifest, CliError> {
    let text = fs::read_to_string(&args.manifest).map_err(|e| CliError::Config(format!("{}: {e}", args.manifest.display())))?;
    let m: RunManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.manifest.display())))?;
    let out = args.out.as_deref();
    let ck = m.inputs.get("checkpoint").map(PathBuf::as_path);
    match m.command.as_str() {
        "synth" => synth_with(m.config, out),
        "train" => train_with(m.config, out),
        "eval" => eval_with(
            m.config,
            ck.ok_or_else(|| CliError::Config("eval manifest lacks a checkpoint input".into()))?,
            out,
        ),
        "diagnose" => diagnose_with(m.config, ck, out),
        other => Err(CliError::Config(format!("unknown command {other:?} in manifest"))),
    }
}

pub fn run(cli: &Cli) -> Result<RunManifest, CliError> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Replay(a) => cmd_replay(a),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
