//! Command-line front end. Every command reads one JSON [`ExperimentConfig`],
//! writes its outputs under `--out`, and stamps each file with a hash of the
//! configuration that produced it.
//!
//! Files whose name starts with `timing` hold wall-clock measurements and are
//! the only outputs that differ between reruns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::black_scholes::surface_from_prices;
use crate::calibrate::{self, CalibrationTarget, Solver, SolverSettings};
use crate::classifier::{self, ClassifierConfig, ClassifierNet, MixtureSample, MODEL_ORDER};
use crate::dataset::{self, Dataset, GenSpec, SplitSpec, VolNormalization};
use crate::error::{Error, Result};
use crate::grid::{self, StrikeMaturityGrid, VolSurface};
use crate::mc_engine::{mc_vanilla_surface, SimConfig};
use crate::models::{ModelKind, ModelParams, ParamBounds, DEFAULT_KNOTS};
use crate::neuralnet::{self, pricing_layer_sizes, Mlp, PricingNet, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "roughcal", version, about = "Neural pricing maps and fast calibration for rough volatility models")]
pub struct Cli {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for Monte Carlo and calibration suites.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Exit with code 4 when a result misses its acceptance threshold.
    #[arg(long, global = true)]
    pub check: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an implied-vol training set by Monte Carlo.
    GenData {
        /// Keep an existing dataset produced by the same configuration.
        #[arg(long)]
        reuse: bool,
    },
    /// Train a pricing network on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Keep existing weights trained under the same configuration.
        #[arg(long)]
        reuse: bool,
    },
    /// Per-cell error maps of a network on a dataset.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Calibrate through a network: a JSON target surface, or the synthetic
    /// self-calibration suite when no target is given.
    Calibrate {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Monte Carlo versus network timing.
    Bench {
        #[arg(long)]
        weights: PathBuf,
    },
    /// Model-recognition classifier.
    Classify {
        #[command(subcommand)]
        action: ClassifyAction,
    },
    /// Generate down-and-in and down-and-out barrier training sets.
    BarrierGen {
        #[arg(long)]
        reuse: bool,
    },
    /// Absolute error maps (basis points) of a barrier network.
    BarrierEval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ClassifyAction {
    Train,
    Eval {
        #[arg(long)]
        weights: PathBuf,
    },
}

/// A grid by name (`training`, `historical`, `barrier`) or given explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Named(String),
    Custom(StrikeMaturityGrid),
}

impl GridSpec {
    pub fn resolve(&self) -> Result<StrikeMaturityGrid> {
        match self {
            GridSpec::Named(n) => match n.as_str() {
                "training" => Ok(grid::default_training_grid()),
                "historical" => Ok(grid::historical_grid()),
                "barrier" => Ok(grid::default_barrier_grid()),
                other => Err(Error::Config(format!("unknown grid `{other}`"))),
            },
            GridSpec::Custom(g) => StrikeMaturityGrid::new(g.maturities().to_vec(), g.strikes().to_vec())
                .map_err(|e| Error::Config(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalThresholds {
    pub max_mean_rel_error: f64,
    pub max_std_rel_error: f64,
    pub max_mean_abs_bps: f64,
    pub max_std_abs_bps: f64,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        Self { max_mean_rel_error: 0.01, max_std_rel_error: 0.02, max_mean_abs_bps: 25.0, max_std_abs_bps: 25.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub n_targets: usize,
    pub solvers: Vec<Solver>,
    pub settings: SolverSettings,
    /// Targets (from the start of the suite) used to compare final RMSE of
    /// differential evolution against Levenberg–Marquardt.
    pub comparison_targets: usize,
    /// RMSE differences below this count as ties.
    pub tie_tolerance: f64,
    pub rmse_quantile: f64,
    pub max_rmse: f64,
    pub min_de_share: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            n_targets: 100,
            solvers: vec![Solver::LevenbergMarquardt, Solver::DifferentialEvolution],
            settings: SolverSettings::default(),
            comparison_targets: 50,
            tie_tolerance: 1e-6,
            rmse_quantile: 0.95,
            max_rmse: 0.01,
            min_de_share: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub nn_evals: usize,
    pub mc_evals: usize,
    pub min_speedup: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { nn_evals: 100, mc_evals: 100, min_speedup: 500.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub train: ClassifierConfig,
    /// Surface pools: dataset file per model.
    pub pools: BTreeMap<ModelKind, PathBuf>,
    /// The two mixed models; the first carries coefficient `a`.
    pub pair: [ModelKind; 2],
    pub n_train: usize,
    pub n_val: usize,
    pub train_step: f64,
    pub val_step: f64,
    /// Share of each pool reserved for training mixtures.
    pub pool_train_fraction: f64,
    pub min_pure_accuracy: f64,
    pub min_spearman: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            train: ClassifierConfig::default(),
            pools: BTreeMap::new(),
            pair: [ModelKind::Heston, ModelKind::RoughBergomi],
            n_train: 30_000,
            n_val: 10_000,
            train_step: 0.1,
            val_step: 0.05,
            pool_train_fraction: 0.8,
            min_pure_accuracy: 0.9,
            min_spearman: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    /// Parameter box; the model's default when absent.
    pub bounds: Option<ParamBounds>,
    /// Forward variance knots; the default knots when absent.
    pub knots: Option<Vec<f64>>,
    pub grid: GridSpec,
    pub barrier_grid: GridSpec,
    /// `sim.seed` is ignored: Monte Carlo seeds derive from `seed`.
    pub sim: SimConfig,
    pub n_samples: usize,
    /// Master seed for data, splits, training and calibration.
    pub seed: u64,
    pub vol_normalization: VolNormalization,
    pub train: TrainConfig,
    pub eval: EvalThresholds,
    pub calibration: CalibrationSection,
    pub bench: BenchSection,
    pub classifier: ClassifierSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::RoughBergomi,
            bounds: None,
            knots: None,
            grid: GridSpec::Named("training".into()),
            barrier_grid: GridSpec::Named("barrier".into()),
            sim: SimConfig::default(),
            n_samples: 1_000,
            seed: 0,
            vol_normalization: VolNormalization::Scalar,
            train: TrainConfig::default(),
            eval: EvalThresholds::default(),
            calibration: CalibrationSection::default(),
            bench: BenchSection::default(),
            classifier: ClassifierSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn resolved_bounds(&self) -> ParamBounds {
        self.bounds.clone().unwrap_or_else(|| self.model.default_bounds())
    }

    pub fn resolved_knots(&self) -> Vec<f64> {
        match self.model {
            ModelKind::Heston => Vec::new(),
            _ => self.knots.clone().unwrap_or_else(|| DEFAULT_KNOTS.to_vec()),
        }
    }

    /// Checks everything that can be checked before any compute.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        let bounds = self.resolved_bounds();
        bounds.validate().map_err(cfg)?;
        self.grid.resolve()?;
        self.barrier_grid.resolve()?;
        self.sim.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.classifier.train.validate().map_err(cfg)?;
        let knots = self.resolved_knots();
        let expected = if self.model == ModelKind::Heston { 4 } else { knots.len() + 3 };
        if bounds.dim() != expected {
            return Err(Error::Config(format!(
                "{} needs a {expected}-dimensional box, got {}",
                self.model.name(),
                bounds.dim()
            )));
        }
        // The box must hold at least one admissible parameter vector.
        let admissible = dataset::sample_parameters(&bounds, 256, self.seed)
            .map_err(cfg)?
            .iter()
            .any(|t| ModelParams::from_flat(self.model, t, &knots).is_ok());
        if !admissible {
            return Err(Error::Config(format!("no admissible {} parameters in the box", self.model.name())));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        let c = &self.calibration;
        if c.solvers.is_empty() || !(0.0..=1.0).contains(&c.rmse_quantile) {
            return Err(Error::Config("calibration needs solvers and a quantile in [0, 1]".into()));
        }
        if self.bench.nn_evals == 0 || self.bench.mc_evals == 0 {
            return Err(Error::Config("bench evaluation counts must be positive".into()));
        }
        let k = &self.classifier;
        if k.pair[0] == k.pair[1] {
            return Err(Error::Config("classifier pair must name two different models".into()));
        }
        if !(k.train_step > 0.0 && k.train_step <= 1.0 && k.val_step > 0.0 && k.val_step <= 1.0) {
            return Err(Error::Config("classifier coefficient steps must lie in (0, 1]".into()));
        }
        if !(k.pool_train_fraction > 0.0 && k.pool_train_fraction < 1.0) {
            return Err(Error::Config("pool_train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn gen_spec(&self, grid: StrikeMaturityGrid) -> GenSpec {
        GenSpec {
            model: self.model,
            bounds: self.resolved_bounds(),
            knots: self.resolved_knots(),
            grid,
            sim: self.sim.with_seed(self.seed),
            n_samples: self.n_samples,
            seed: self.seed,
        }
    }
}

/// First 16 hex digits of SHA-256 over the command name and the canonical
/// (key-sorted) JSON of everything the command reads.
pub fn config_hash(command: &str, parts: &serde_json::Value) -> String {
    let canon = json!({ "command": command, "inputs": parts }).to_string();
    Sha256::digest(canon.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().take(8).map(|b| format!("{b:02x}")).collect())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// CSV with a leading `# config=<hash>` line.
fn write_csv(path: &Path, hash: &str, header: &str, rows: &[String]) -> Result<()> {
    let mut s = format!("# config={hash}\n{header}\n");
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    write_text(path, &s)
}

fn write_json(path: &Path, hash: &str, value: serde_json::Value) -> Result<()> {
    let mut v = value;
    v["config"] = json!(hash);
    write_text(path, &(serde_json::to_string_pretty(&v)? + "\n"))
}

/// One row per maturity, one column per strike.
fn write_grid_csv(path: &Path, hash: &str, g: &StrikeMaturityGrid, values: &[f64]) -> Result<()> {
    let header = std::iter::once("maturity".to_string())
        .chain(g.strikes().iter().map(|k| format!("{k}")))
        .collect::<Vec<_>>()
        .join(",");
    let rows: Vec<String> = g
        .maturities()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut r = format!("{t}");
            for j in 0..g.n_strikes() {
                let _ = write!(r, ",{}", values[g.index(i, j)]);
            }
            r
        })
        .collect();
    write_csv(path, hash, &header, &rows)
}

/// Outcome of a command: `failures` lists acceptance thresholds that were
/// missed (they only change the exit code under `--check`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub config_hash: String,
    pub files: Vec<PathBuf>,
    pub failures: Vec<String>,
    pub summary: serde_json::Value,
}

pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Context {
    fn path(&self, name: &str, files: &mut Vec<PathBuf>) -> PathBuf {
        let p = self.out.join(name);
        files.push(p.clone());
        p
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Format(_) | Error::OutOfBox { .. } => EXIT_CONFIG,
        Error::InvalidParams(_) | Error::Domain(_) => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let check = cli.check;
    match run(cli) {
        Ok(outcome) => {
            for f in &outcome.failures {
                eprintln!("threshold missed: {f}");
            }
            if check && !outcome.failures.is_empty() {
                EXIT_CHECK
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    cfg.classifier.train.seed = cfg.seed;
    cfg.sim.seed = cfg.seed;
    cfg.validate()?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out)?;
    let ctx = Context { cfg, out };
    match &cli.command {
        Command::GenData { reuse } => cmd_gen_data(&ctx, *reuse),
        Command::Train { data, reuse } => cmd_train(&ctx, data, *reuse),
        Command::Eval { weights, data } => cmd_eval(&ctx, weights, data, false),
        Command::Calibrate { weights, target } => cmd_calibrate(&ctx, weights, target.as_deref()),
        Command::Bench { weights } => cmd_bench(&ctx, weights),
        Command::Classify { action: ClassifyAction::Train } => cmd_classify_train(&ctx),
        Command::Classify { action: ClassifyAction::Eval { weights } } => cmd_classify_eval(&ctx, weights),
        Command::BarrierGen { reuse } => cmd_barrier_gen(&ctx, *reuse),
        Command::BarrierEval { weights, data } => cmd_eval(&ctx, weights, data, true),
    }
}

fn gen_inputs(cfg: &ExperimentConfig, grid: &StrikeMaturityGrid) -> serde_json::Value {
    json!({
        "model": cfg.model,
        "bounds": cfg.resolved_bounds(),
        "knots": cfg.resolved_knots(),
        "grid": grid,
        "n_paths": cfg.sim.n_paths,
        "n_steps": cfg.sim.n_steps,
        "antithetic": cfg.sim.antithetic,
        "n_samples": cfg.n_samples,
        "seed": cfg.seed,
    })
}

fn reusable(path: &Path, hash: &str) -> bool {
    path.exists() && dataset::read_dataset(path).map(|d| d.config_hash == hash).unwrap_or(false)
}

pub fn cmd_gen_data(ctx: &Context, reuse: bool) -> Result<Outcome> {
    let grid = ctx.cfg.grid.resolve()?;
    let hash = config_hash("gen-data", &gen_inputs(&ctx.cfg, &grid));
    let mut files = Vec::new();
    let data_path = ctx.path("dataset.csv", &mut files);
    let raw_path = ctx.path("raw_prices.csv", &mut files);
    let report_path = ctx.path("generation.json", &mut files);
    let timing_path = ctx.path("timing_generation.csv", &mut files);
    if reuse && reusable(&data_path, &hash) && raw_path.exists() && report_path.exists() {
        log::info!("reusing {}", data_path.display());
        return Ok(Outcome { config_hash: hash, files, failures: Vec::new(), summary: json!({"reused": true}) });
    }
    let (mut ds, raw, report) = dataset::generate_dataset(&ctx.cfg.gen_spec(grid))?;
    ds.config_hash = hash.clone();
    // Prices first so a present dataset always has its companion.
    dataset::write_raw_prices(&raw, &hash, &raw_path)?;
    let summary = json!({
        "model": ds.model,
        "samples": report.accepted,
        "rejected": report.rejected,
        "rejection_rate": report.rejection_rate,
    });
    write_json(&report_path, &hash, summary.clone())?;
    write_csv(&timing_path, &hash, "wall_seconds", &[format!("{}", report.wall_seconds)])?;
    dataset::write_dataset(&ds, &data_path)?;
    Ok(Outcome { config_hash: hash, files, failures: Vec::new(), summary })
}

pub fn cmd_barrier_gen(ctx: &Context, reuse: bool) -> Result<Outcome> {
    let grid = ctx.cfg.barrier_grid.resolve()?;
    let hash = config_hash("barrier-gen", &gen_inputs(&ctx.cfg, &grid));
    let mut files = Vec::new();
    let din_path = ctx.path("barrier_down_in.csv", &mut files);
    let dout_path = ctx.path("barrier_down_out.csv", &mut files);
    let report_path = ctx.path("generation.json", &mut files);
    let timing_path = ctx.path("timing_generation.csv", &mut files);
    if reuse && reusable(&din_path, &hash) && reusable(&dout_path, &hash) && report_path.exists() {
        log::info!("reusing {}", din_path.display());
        return Ok(Outcome { config_hash: hash, files, failures: Vec::new(), summary: json!({"reused": true}) });
    }
    let (mut din, mut dout, report) = dataset::generate_barrier_datasets(&ctx.cfg.gen_spec(grid))?;
    din.config_hash = hash.clone();
    dout.config_hash = hash.clone();
    let summary = json!({
        "model": din.model,
        "samples": report.accepted,
        "rejected": report.rejected,
        "rejection_rate": report.rejection_rate,
    });
    write_json(&report_path, &hash, summary.clone())?;
    write_csv(&timing_path, &hash, "wall_seconds", &[format!("{}", report.wall_seconds)])?;
    dataset::write_dataset(&din, &din_path)?;
    dataset::write_dataset(&dout, &dout_path)?;
    Ok(Outcome { config_hash: hash, files, failures: Vec::new(), summary })
}

pub fn cmd_train(ctx: &Context, data: &Path, reuse: bool) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let ds = dataset::read_dataset(data)?;
    let hash = config_hash(
        "train",
        &json!({
            "train": cfg.train,
            "vol_normalization": cfg.vol_normalization,
            "data": ds.config_hash,
            "data_file": file_hash(data)?,
        }),
    );
    if reuse {
        let mut files = Vec::new();
        let w = ctx.path("weights.json", &mut files);
        let summary_path = ctx.path("training.json", &mut files);
        let same = neuralnet::WeightFile::read(&w).map(|f| f.config == hash).unwrap_or(false);
        if same && summary_path.exists() {
            log::info!("reusing {}", w.display());
            let summary = serde_json::from_str(&fs::read_to_string(&summary_path)?)?;
            return Ok(Outcome { config_hash: hash, files, failures: Vec::new(), summary });
        }
    }
    let split = SplitSpec { train_fraction: cfg.train.train_fraction, seed: cfg.seed };
    let ds = ds.with_split(split, cfg.vol_normalization)?;
    let stats = ds.stats.clone().expect("with_split sets stats");
    let (train_idx, val_idx) = ds.split_indices()?;
    let all = dataset::normalize_samples(&ds.samples, &stats)?;
    let (train_set, val_set) = (all.subset(&train_idx), all.subset(&val_idx));
    let init = Mlp::init(&pricing_layer_sizes(ds.theta_dim(), ds.grid.len()), cfg.seed)?;
    let (mlp, history) = neuralnet::train_with(&init, &train_set, &val_set, &cfg.train, |rec, _| {
        log::info!("epoch {}: train {:.3e} val {:.3e} lr {:.1e}", rec.epoch, rec.train_loss, rec.val_loss, rec.learning_rate);
    })?;
    let net = PricingNet { mlp, stats, grid: ds.grid.clone(), model: ds.model, target: ds.target, config_hash: hash.clone() };
    let mut files = Vec::new();
    neuralnet::save_weights(&net, &ctx.path("weights.json", &mut files))?;
    let rows: Vec<String> = history
        .epochs
        .iter()
        .map(|e| format!("{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.learning_rate))
        .collect();
    write_csv(&ctx.path("history.csv", &mut files), &hash, "epoch,train_loss,val_loss,learning_rate", &rows)?;
    let timing: Vec<String> = history.epochs.iter().map(|e| format!("{},{}", e.epoch, e.seconds)).collect();
    write_csv(&ctx.path("timing_training.csv", &mut files), &hash, "epoch,seconds", &timing)?;
    let summary = json!({
        "model": ds.model,
        "target": ds.target,
        "train_samples": train_idx.len(),
        "val_samples": val_idx.len(),
        "best_epoch": history.best_epoch,
        "stopped_epoch": history.stopped_epoch,
        "best_val_loss": history.epochs.get(history.best_epoch.saturating_sub(1)).map(|e| e.val_loss),
    });
    write_json(&ctx.path("training.json", &mut files), &hash, summary.clone())?;
    Ok(Outcome { config_hash: hash, files, failures: Vec::new(), summary })
}

/// Per-cell mean, population standard deviation and maximum of
/// `errors[sample][cell]`.
pub fn cell_statistics(errors: &[Vec<f64>], cells: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = errors.len().max(1) as f64;
    let mut mean = vec![0.0; cells];
    let mut max = vec![0.0f64; cells];
    for e in errors {
        for c in 0..cells {
            mean[c] += e[c] / n;
            max[c] = max[c].max(e[c]);
        }
    }
    let std = (0..cells)
        .map(|c| (errors.iter().map(|e| (e[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, std, max)
}

fn load_pricing_net(path: &Path) -> Result<PricingNet> {
    neuralnet::load_weights(path)
}

/// Vanilla nets: relative implied-vol error `|F̃ − σ| / σ`. Barrier nets:
/// absolute probability error in basis points.
pub fn cmd_eval(ctx: &Context, weights: &Path, data: &Path, barrier: bool) -> Result<Outcome> {
    let net = load_pricing_net(weights)?;
    let ds = dataset::read_dataset(data)?;
    if net.target.is_barrier() != barrier || ds.target != net.target {
        return Err(Error::Config(format!(
            "network target `{}` and dataset target `{}` do not fit this command",
            net.target.name(),
            ds.target.name()
        )));
    }
    if ds.grid != net.grid || ds.model != net.model {
        return Err(Error::Config("dataset and network differ in grid or model".into()));
    }
    let command = if barrier { "barrier-eval" } else { "eval" };
    let hash = config_hash(
        command,
        &json!({ "weights": file_hash(weights)?, "data": file_hash(data)?, "thresholds": ctx.cfg.eval }),
    );
    let errors: Vec<Vec<f64>> = ds
        .samples
        .par_iter()
        .map(|s| {
            let y = net.surface(&s.theta)?;
            Ok(y.iter()
                .zip(&s.surface)
                .map(|(a, b)| if barrier { 1e4 * (a - b).abs() } else { (a - b).abs() / b })
                .collect())
        })
        .collect::<Result<_>>()?;
    let cells = ds.grid.len();
    let (mean, std, max) = cell_statistics(&errors, cells);
    let mut files = Vec::new();
    let prefix = if barrier { "abs_error_bps" } else { "rel_error" };
    write_grid_csv(&ctx.path(&format!("{prefix}_mean.csv"), &mut files), &hash, &ds.grid, &mean)?;
    write_grid_csv(&ctx.path(&format!("{prefix}_std.csv"), &mut files), &hash, &ds.grid, &std)?;
    write_grid_csv(&ctx.path(&format!("{prefix}_max.csv"), &mut files), &hash, &ds.grid, &max)?;
    let worst_mean = mean.iter().copied().fold(0.0, f64::max);
    let worst_std = std.iter().copied().fold(0.0, f64::max);
    let overall = mean.iter().sum::<f64>() / cells as f64;
    let t = &ctx.cfg.eval;
    let (lim_mean, lim_std) =
        if barrier { (t.max_mean_abs_bps, t.max_std_abs_bps) } else { (t.max_mean_rel_error, t.max_std_rel_error) };
    let mut failures = Vec::new();
    if !(worst_mean < lim_mean) {
        failures.push(format!("largest per-cell mean error {worst_mean:.4e} >= {lim_mean}"));
    }
    if !(worst_std < lim_std) {
        failures.push(format!("largest per-cell error std {worst_std:.4e} >= {lim_std}"));
    }
    let summary = json!({
        "model": net.model,
        "target": net.target,
        "units": if barrier { "bps" } else { "relative" },
        "samples": ds.len(),
        "max_cell_mean": worst_mean,
        "max_cell_std": worst_std,
        "mean_over_cells": overall,
        "max_error": max.iter().copied().fold(0.0, f64::max),
        "pass": failures.is_empty(),
    });
    write_json(&ctx.path(&format!("{command}.json"), &mut files), &hash, summary.clone())?;
    Ok(Outcome { config_hash: hash, files, failures, summary })
}

/// Empirical CDF points `(value, k/n)` of the sorted values.
pub fn empirical_cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter().enumerate().map(|(k, x)| (x, (k + 1) as f64 / n)).collect()
}

/// Order-statistic quantile: the smallest value with at least a share `q`
/// of the sample at or below it.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[k - 1]
}

struct SuiteRow {
    target: usize,
    theta_bar: Option<Vec<f64>>,
    result: calibrate::CalibrationResult,
}

pub fn cmd_calibrate(ctx: &Context, weights: &Path, target: Option<&Path>) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let sec = &cfg.calibration;
    let net = load_pricing_net(weights)?;
    if net.target != dataset::Target::ImpliedVol {
        return Err(Error::Config("calibration needs an implied-vol network".into()));
    }
    let target_hash = target.map(file_hash).transpose()?;
    let hash = config_hash(
        "calibrate",
        &json!({ "calibration": sec, "seed": cfg.seed, "weights": file_hash(weights)?, "target": target_hash }),
    );
    let bounds = net.bounds().clone();
    let init = bounds.midpoint();
    let names = net.model.param_names(bounds.dim().saturating_sub(3));
    let rows: Vec<SuiteRow> = match target {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let quotes: VolSurface =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad target surface: {e}")))?;
            let t = if quotes.grid() == &net.grid {
                CalibrationTarget::new(quotes.as_slice().to_vec())
            } else {
                CalibrationTarget::on_subgrid(&net.grid, &quotes)
            };
            sec.solvers
                .iter()
                .map(|&s| {
                    let result = calibrate::calibrate(&net, &t, s, &init, cfg.seed, &sec.settings)?;
                    Ok(SuiteRow { target: 0, theta_bar: None, result })
                })
                .collect::<Result<_>>()?
        }
        None => {
            let thetas = dataset::sample_parameters(&bounds, sec.n_targets, cfg.seed)?;
            let per_target: Vec<Vec<SuiteRow>> = thetas
                .par_iter()
                .enumerate()
                .map(|(i, theta)| {
                    let t = CalibrationTarget::new(net.surface(theta)?);
                    sec.solvers
                        .iter()
                        .map(|&s| {
                            let seed = cfg.seed.wrapping_add(i as u64);
                            let result = calibrate::calibrate(&net, &t, s, &init, seed, &sec.settings)?;
                            Ok(SuiteRow { target: i, theta_bar: Some(theta.clone()), result })
                        })
                        .collect()
                })
                .collect::<Result<_>>()?;
            per_target.into_iter().flatten().collect()
        }
    };
    let mut files = Vec::new();
    let mut header = String::from("target,solver,seed");
    for n in &names {
        let _ = write!(header, ",{n}_hat");
    }
    for n in &names {
        let _ = write!(header, ",{n}_true");
    }
    header.push_str(",rmse,mae,objective_evals,jacobian_evals,iterations,converged");
    let report: Vec<String> = rows
        .iter()
        .map(|r| {
            let c = &r.result;
            let mut s = format!("{},{},{}", r.target, c.solver.name(), c.seed);
            for v in &c.theta_hat {
                let _ = write!(s, ",{v}");
            }
            for i in 0..names.len() {
                match &r.theta_bar {
                    Some(t) => {
                        let _ = write!(s, ",{}", t[i]);
                    }
                    None => s.push(','),
                }
            }
            let _ = write!(
                s,
                ",{},{},{},{},{},{}",
                c.rmse, c.mae, c.n_objective_evals, c.n_jacobian_evals, c.iterations, c.converged
            );
            s
        })
        .collect();
    write_csv(&ctx.path("calibration_report.csv", &mut files), &hash, &header, &report)?;
    let timing: Vec<String> =
        rows.iter().map(|r| format!("{},{},{}", r.target, r.result.solver.name(), r.result.wall_time_ms)).collect();
    write_csv(&ctx.path("timing_calibration.csv", &mut files), &hash, "target,solver,ms", &timing)?;

    let by_solver = |s: Solver| rows.iter().filter(move |r| r.result.solver == s);
    let mut mean_ms = Vec::new();
    let mut rmse_cdf = Vec::new();
    let mut er_cdf = Vec::new();
    let mut per_solver = serde_json::Map::new();
    for &s in &sec.solvers {
        let rs: Vec<&SuiteRow> = by_solver(s).collect();
        let rmses: Vec<f64> = rs.iter().map(|r| r.result.rmse).collect();
        let ms = rs.iter().map(|r| r.result.wall_time_ms).sum::<f64>() / rs.len() as f64;
        mean_ms.push(format!("{},{ms}", s.name()));
        for (v, p) in empirical_cdf(&rmses) {
            rmse_cdf.push(format!("{},{v},{p}", s.name()));
        }
        for (k, n) in names.iter().enumerate() {
            let errs: Vec<f64> = rs
                .iter()
                .filter_map(|r| r.theta_bar.as_ref().map(|t| calibrate::param_relative_error(&r.result.theta_hat, t)[k]))
                .collect();
            for (v, p) in empirical_cdf(&errs) {
                er_cdf.push(format!("{},{n},{v},{p}", s.name()));
            }
        }
        per_solver.insert(
            s.name().into(),
            json!({
                "rmse_quantile": quantile(&rmses, sec.rmse_quantile),
                "rmse_median": quantile(&rmses, 0.5),
                "rmse_max": rmses.iter().copied().fold(0.0, f64::max),
                "mean_objective_evals": rs.iter().map(|r| r.result.n_objective_evals as f64).sum::<f64>() / rs.len() as f64,
                "converged": rs.iter().filter(|r| r.result.converged).count(),
            }),
        );
    }
    write_csv(&ctx.path("timing_solvers.csv", &mut files), &hash, "solver,mean_ms", &mean_ms)?;
    write_csv(&ctx.path("rmse_cdf.csv", &mut files), &hash, "solver,rmse,cdf", &rmse_cdf)?;
    if target.is_none() {
        write_csv(&ctx.path("param_error_cdf.csv", &mut files), &hash, "solver,parameter,relative_error,cdf", &er_cdf)?;
    }

    let mut failures = Vec::new();
    let mut summary = json!({ "model": net.model, "targets": rows.iter().map(|r| r.target).max().map_or(0, |m| m + 1), "solvers": per_solver });
    let lm = Solver::LevenbergMarquardt;
    let de = Solver::DifferentialEvolution;
    if target.is_none() && sec.solvers.contains(&lm) {
        let rmses: Vec<f64> = by_solver(lm).map(|r| r.result.rmse).collect();
        let q = quantile(&rmses, sec.rmse_quantile);
        if !(q < sec.max_rmse) {
            failures.push(format!("LM {}-quantile RMSE {q:.3e} >= {}", sec.rmse_quantile, sec.max_rmse));
        }
        if sec.solvers.contains(&de) {
            let lm_rows: Vec<&SuiteRow> = by_solver(lm).collect();
            let de_rows: Vec<&SuiteRow> = by_solver(de).collect();
            let fewer = lm_rows
                .iter()
                .zip(&de_rows)
                .filter(|(a, b)| a.result.n_objective_evals < b.result.n_objective_evals)
                .count();
            let n_cmp = sec.comparison_targets.min(lm_rows.len());
            let de_wins = lm_rows[..n_cmp]
                .iter()
                .zip(&de_rows[..n_cmp])
                .filter(|(a, b)| b.result.rmse <= a.result.rmse + sec.tie_tolerance)
                .count();
            let share = de_wins as f64 / n_cmp.max(1) as f64;
            if fewer != lm_rows.len() {
                failures.push(format!("LM used fewer evaluations than DE on {fewer} of {} targets", lm_rows.len()));
            }
            if !(share >= sec.min_de_share) {
                failures.push(format!("DE matched LM's RMSE on {de_wins} of {n_cmp} targets"));
            }
            summary["lm_fewer_evals"] = json!(fewer);
            summary["de_rmse_le_lm"] = json!(de_wins);
            summary["comparison_targets"] = json!(n_cmp);
        }
    }
    summary["pass"] = json!(failures.is_empty());
    write_json(&ctx.path("calibration.json", &mut files), &hash, summary.clone())?;
    Ok(Outcome { config_hash: hash, files, failures, summary })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `n` calls of `f`, returning per-call microseconds.
fn time_calls(n: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let start = Instant::now();
        f()?;
        out.push(start.elapsed().as_secs_f64() * 1e6);
    }
    Ok(out)
}

pub fn cmd_bench(ctx: &Context, weights: &Path) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let net = load_pricing_net(weights)?;
    let hash = config_hash(
        "bench",
        &json!({ "bench": cfg.bench, "n_paths": cfg.sim.n_paths, "n_steps": cfg.sim.n_steps, "seed": cfg.seed, "weights": file_hash(weights)? }),
    );
    let theta = net.bounds().midpoint();
    let knots = if net.model == ModelKind::Heston { Vec::new() } else { DEFAULT_KNOTS[..theta.len() - 3].to_vec() };
    let params = ModelParams::from_flat(net.model, &theta, &knots)?;
    let z = crate::models::normalize_theta(&theta, net.bounds())?;
    let mut sink = 0.0;
    let nn = time_calls(cfg.bench.nn_evals, || {
        sink += net.surface(&theta)?[0];
        Ok(())
    })?;
    let jac = time_calls(cfg.bench.nn_evals, || {
        sink += net.surface_and_jacobian_normalized(&z).1[0];
        Ok(())
    })?;
    let mut seed = cfg.seed;
    let mc = time_calls(cfg.bench.mc_evals, || {
        seed = seed.wrapping_add(1);
        let res = mc_vanilla_surface(&params, &net.grid, &cfg.sim.with_seed(seed))?;
        sink += surface_from_prices(&res, &net.grid)?.as_slice()[0];
        Ok(())
    })?;
    log::debug!("bench checksum {sink}");
    let (mc_us, nn_us, jac_us) = (median(mc), median(nn), median(jac));
    let speedup = mc_us / nn_us;
    let mut files = Vec::new();
    let rows = vec![
        format!("mc_surface,{mc_us},{}", cfg.bench.mc_evals),
        format!("nn_surface,{nn_us},{}", cfg.bench.nn_evals),
        format!("nn_jacobian,{jac_us},{}", cfg.bench.nn_evals),
        format!("speedup,{speedup},"),
    ];
    write_csv(&ctx.path("timing_bench.csv", &mut files), &hash, "quantity,median_us,evals", &rows)?;
    let mut failures = Vec::new();
    if !(speedup >= cfg.bench.min_speedup) {
        failures.push(format!("speedup {speedup:.0} < {}", cfg.bench.min_speedup));
    }
    let summary = json!({ "mc_us": mc_us, "nn_us": nn_us, "jacobian_us": jac_us, "speedup": speedup });
    Ok(Outcome { config_hash: hash, files, failures, summary })
}

fn slot(kind: ModelKind) -> usize {
    MODEL_ORDER.iter().position(|&m| m == kind).expect("every model has a slot")
}

/// Surfaces of the two classifier models.
type PoolPair = [Vec<Vec<f64>>; 2];

/// Training and held-out surface pools for the classifier pair.
fn classifier_pools(ctx: &Context) -> Result<(PoolPair, PoolPair, StrikeMaturityGrid, Vec<String>)> {
    let sec = &ctx.cfg.classifier;
    let mut train: PoolPair = Default::default();
    let mut held: PoolPair = Default::default();
    let mut grid: Option<StrikeMaturityGrid> = None;
    let mut hashes = Vec::new();
    for (k, model) in sec.pair.iter().enumerate() {
        let path = sec
            .pools
            .get(model)
            .ok_or_else(|| Error::Config(format!("classifier.pools has no dataset for {}", model.name())))?;
        let ds: Dataset = dataset::read_dataset(path)?;
        if ds.model != *model || ds.target != dataset::Target::ImpliedVol {
            return Err(Error::Config(format!("{} is not a {} implied-vol dataset", path.display(), model.name())));
        }
        match &grid {
            Some(g) if g != &ds.grid => return Err(Error::Config("classifier pools use different grids".into())),
            _ => grid = Some(ds.grid.clone()),
        }
        hashes.push(file_hash(path)?);
        let (a, b) = dataset::split(ds.len(), sec.pool_train_fraction, ctx.cfg.seed)?;
        train[k] = a.iter().map(|&i| ds.samples[i].surface.clone()).collect();
        held[k] = b.iter().map(|&i| ds.samples[i].surface.clone()).collect();
    }
    Ok((train, held, grid.expect("pair has two models"), hashes))
}

fn classify_hash(ctx: &Context, action: &str, pools: &[String], weights: Option<String>) -> String {
    let sec = &ctx.cfg.classifier;
    config_hash(
        &format!("classify-{action}"),
        &json!({
            "train": sec.train, "pair": sec.pair, "n_train": sec.n_train, "n_val": sec.n_val,
            "train_step": sec.train_step, "val_step": sec.val_step, "pool_train_fraction": sec.pool_train_fraction,
            "seed": ctx.cfg.seed, "pools": pools, "weights": weights,
        }),
    )
}

fn mixtures(ctx: &Context, pools: &[Vec<Vec<f64>>; 2], step: f64, n: usize, seed: u64) -> Result<Vec<MixtureSample>> {
    let pair = ctx.cfg.classifier.pair;
    classifier::two_model_mixtures(
        (&pools[0], &pools[1]),
        (slot(pair[0]), slot(pair[1])),
        &classifier::coefficient_grid(step),
        n,
        seed,
    )
}

pub fn cmd_classify_train(ctx: &Context) -> Result<Outcome> {
    let sec = &ctx.cfg.classifier;
    let (train_pools, _, grid, pool_hashes) = classifier_pools(ctx)?;
    let hash = classify_hash(ctx, "train", &pool_hashes, None);
    let samples = mixtures(ctx, &train_pools, sec.train_step, sec.n_train, ctx.cfg.seed)?;
    let (mut net, history) = classifier::train_classifier(&samples, &grid, &sec.train)?;
    net.config_hash = hash.clone();
    let mut files = Vec::new();
    net.save(&ctx.path("classifier.json", &mut files))?;
    let rows: Vec<String> = history.iter().map(|e| format!("{},{},{}", e.epoch, e.loss, e.accuracy)).collect();
    write_csv(&ctx.path("classifier_history.csv", &mut files), &hash, "epoch,cross_entropy,argmax_accuracy", &rows)?;
    let summary = json!({
        "samples": samples.len(),
        "final_loss": history.last().map(|e| e.loss),
        "final_accuracy": history.last().map(|e| e.accuracy),
    });
    Ok(Outcome { config_hash: hash, files, failures: Vec::new(), summary })
}

pub fn cmd_classify_eval(ctx: &Context, weights: &Path) -> Result<Outcome> {
    let sec = &ctx.cfg.classifier;
    let net = ClassifierNet::load(weights)?;
    let (_, held, grid, pool_hashes) = classifier_pools(ctx)?;
    if grid != net.grid {
        return Err(Error::Config("classifier and pools use different grids".into()));
    }
    let hash = classify_hash(ctx, "eval", &pool_hashes, Some(file_hash(weights)?));
    let samples = mixtures(ctx, &held, sec.val_step, sec.n_val, ctx.cfg.seed ^ 0x5eed)?;
    let a_slot = slot(sec.pair[0]);
    let curve = classifier::mixture_curve(&net, &samples, a_slot);
    let (accuracy, n_pure) = classifier::pure_accuracy(&net, &samples);
    let xs: Vec<f64> = curve.iter().map(|p| p.true_coeff).collect();
    let ys: Vec<f64> = curve.iter().map(|p| p.mean_predicted).collect();
    let rho = classifier::spearman(&xs, &ys);
    let mut files = Vec::new();
    let rows: Vec<String> = curve.iter().map(|p| format!("{},{},{}", p.true_coeff, p.mean_predicted, p.count)).collect();
    write_csv(&ctx.path("mixture_curve.csv", &mut files), &hash, "true_a,mean_predicted_a,count", &rows)?;
    let mut failures = Vec::new();
    if !(accuracy >= sec.min_pure_accuracy) {
        failures.push(format!("pure-surface accuracy {accuracy:.4} < {}", sec.min_pure_accuracy));
    }
    if !(rho > sec.min_spearman) {
        failures.push(format!("Spearman correlation {rho:.4} <= {}", sec.min_spearman));
    }
    let summary = json!({
        "samples": samples.len(),
        "pure_samples": n_pure,
        "pure_accuracy": accuracy,
        "spearman": rho,
        "mean_a_at_0": ys.first(),
        "mean_a_at_1": ys.last(),
        "pass": failures.is_empty(),
    });
    write_json(&ctx.path("classify.json", &mut files), &hash, summary.clone())?;
    Ok(Outcome { config_hash: hash, files, failures, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_json(r#"{"model":"heston","n_samples":5}"#).unwrap();
        assert_eq!(partial.model, ModelKind::Heston);
        partial.validate().unwrap();
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            r#"{"modle":"heston"}"#,
            r#"{"grid":"weekly"}"#,
            r#"{"sim":{"n_paths":1}}"#,
            r#"{"model":"heston","bounds":{"lower":[0.5,0.2,0.9,-0.5],"upper":[0.6,0.3,1.0,-0.4]}}"#,
            r#"{"bounds":{"lower":[0.1],"upper":[0.2]}}"#,
        ] {
            let r = ExperimentConfig::from_json(text).and_then(|c| c.validate());
            let e = r.expect_err(text);
            assert_eq!(exit_code(&e), EXIT_CONFIG, "{text}: {e}");
        }
    }

    #[test]
    fn hash_is_stable_and_order_free() {
        let a = config_hash("x", &json!({"a": 1, "b": [1.5, 2.0]}));
        let b = config_hash("x", &json!({"b": [1.5, 2.0], "a": 1}));
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert_ne!(a, config_hash("y", &json!({"a": 1, "b": [1.5, 2.0]})));
    }

    #[test]
    fn statistics_helpers() {
        let e = vec![vec![1.0, 0.0], vec![3.0, 0.0]];
        let (m, s, x) = cell_statistics(&e, 2);
        assert_eq!((m, s, x), (vec![2.0, 0.0], vec![1.0, 0.0], vec![3.0, 0.0]));
        let v = [0.3, 0.1, 0.2, 0.4];
        assert_eq!(quantile(&v, 0.95), 0.4);
        assert_eq!(quantile(&v, 0.5), 0.2);
        let cdf = empirical_cdf(&v);
        assert_eq!(cdf[0], (0.1, 0.25));
        assert_eq!(cdf[3], (0.4, 1.0));
    }

    #[test]
    fn usage_errors_exit_with_config_code() {
        assert_eq!(main_with_args(["roughcal", "frobnicate"]), EXIT_CONFIG);
        assert_eq!(main_with_args(["roughcal", "train"]), EXIT_CONFIG);
    }
}
