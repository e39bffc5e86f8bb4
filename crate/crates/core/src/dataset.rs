//! Synthetic training sets: uniform parameter draws, Monte Carlo surfaces,
//! normalization, splitting and CSV persistence.
//!
//! File layout: one header line
//!
//! ```text
//! # model=<kind> grid=<json> stats=<json> seed=<u64> target=<target> knots=<json> split=<json> config=<hash>
//! ```
//!
//! followed by one row per sample: the `θ` coordinates, then the surface
//! values in row-major grid order, all printed with 17 significant digits.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::black_scholes::surface_from_prices;
use crate::error::{Error, Result};
use crate::grid::StrikeMaturityGrid;
use crate::mc_engine::{mc_barrier_pair, mc_vanilla_surface, BarrierKind, SimConfig};
use crate::models::{normalize_theta, ModelKind, ModelParams, ParamBounds};

/// Largest tolerated share of draws whose surface fails to invert.
pub const MAX_REJECTION_RATE: f64 = 0.05;
/// Redraws allowed for a single sample index before giving up on it.
const MAX_ATTEMPTS: u64 = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub theta: Vec<f64>,
    pub surface: Vec<f64>,
}

/// What the surface values are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    ImpliedVol,
    DownIn,
    DownOut,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::ImpliedVol => "implied_vol",
            Target::DownIn => "down_in",
            Target::DownOut => "down_out",
        }
    }

    pub fn is_barrier(self) -> bool {
        self != Target::ImpliedVol
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "implied_vol" => Ok(Target::ImpliedVol),
            "down_in" => Ok(Target::DownIn),
            "down_out" => Ok(Target::DownOut),
            other => Err(Error::Format(format!("unknown target `{other}`"))),
        }
    }
}

impl From<BarrierKind> for Target {
    fn from(k: BarrierKind) -> Self {
        match k {
            BarrierKind::DownIn => Target::DownIn,
            BarrierKind::DownOut => Target::DownOut,
        }
    }
}

/// Surface z-score statistics and the parameter box used to scale `θ`.
///
/// `cell_mean`/`cell_std` are only present when per-cell normalization was
/// requested; otherwise one scalar pair covers every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub theta_bounds: ParamBounds,
    pub vol_mean: f64,
    pub vol_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_std: Option<Vec<f64>>,
}

impl NormalizationStats {
    fn cell(&self, c: usize) -> (f64, f64) {
        match (&self.cell_mean, &self.cell_std) {
            (Some(m), Some(s)) => (m[c], s[c]),
            _ => (self.vol_mean, self.vol_std),
        }
    }

    pub fn normalize_surface(&self, surface: &[f64]) -> Vec<f64> {
        surface
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let (m, s) = self.cell(c);
                (v - m) / s
            })
            .collect()
    }

    pub fn denormalize_surface(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(c, v)| {
                let (m, s) = self.cell(c);
                v * s + m
            })
            .collect()
    }

    /// Factor turning a derivative of normalized output into vol units.
    pub fn scale(&self, c: usize) -> f64 {
        self.cell(c).1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolNormalization {
    #[default]
    Scalar,
    PerCell,
}

/// Deterministic train/test partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub model: ModelKind,
    pub target: Target,
    pub grid: StrikeMaturityGrid,
    /// Forward variance knots for Bergomi-type models (unused for Heston).
    pub knots: Vec<f64>,
    pub bounds: ParamBounds,
    pub samples: Vec<TrainingSample>,
    pub seed: u64,
    pub split: Option<SplitSpec>,
    pub stats: Option<NormalizationStats>,
    /// Hash of the configuration that produced the file.
    pub config_hash: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn theta_dim(&self) -> usize {
        self.bounds.dim()
    }

    /// Train and test indices from the stored split, or everything as
    /// training data when there is none.
    pub fn split_indices(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        match self.split {
            Some(s) => split(self.len(), s.train_fraction, s.seed),
            None => Ok(((0..self.len()).collect(), Vec::new())),
        }
    }

    /// Sets the split and recomputes statistics on the training part.
    pub fn with_split(mut self, spec: SplitSpec, mode: VolNormalization) -> Result<Self> {
        self.split = Some(spec);
        let (train, _) = self.split_indices()?;
        self.stats = Some(compute_stats(&self, &train, mode)?);
        Ok(self)
    }

    /// Statistics, computing scalar ones over all samples if none are stored.
    pub fn stats_or_compute(&self) -> Result<NormalizationStats> {
        match &self.stats {
            Some(s) => Ok(s.clone()),
            None => {
                let (train, _) = self.split_indices()?;
                compute_stats(self, &train, VolNormalization::Scalar)
            }
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<TrainingSample> {
        idx.iter().map(|&i| self.samples[i].clone()).collect()
    }
}

/// Per-sample generator state: index `i`, attempt `a` reads stream `i` of a
/// ChaCha generator keyed by `(seed, a)`.
fn sample_rng(seed: u64, index: usize, attempt: u64) -> ChaCha8Rng {
    let key = seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index as u64);
    rng
}

fn draw_uniform<R: Rng>(rng: &mut R, bounds: &ParamBounds) -> Vec<f64> {
    bounds.lower.iter().zip(&bounds.upper).map(|(&lo, &hi)| rng.gen_range(lo..hi)).collect()
}

/// Uniform draw from the box, redrawn until the parameters are admissible
/// (this only bites for Heston, whose box contains Feller violations).
fn draw_admissible<R: Rng>(rng: &mut R, kind: ModelKind, bounds: &ParamBounds, knots: &[f64]) -> Result<Vec<f64>> {
    let mut last = None;
    for _ in 0..10_000 {
        let theta = draw_uniform(rng, bounds);
        match ModelParams::from_flat(kind, &theta, knots) {
            Ok(_) => return Ok(theta),
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Config(format!(
        "no admissible {} parameters in the box after 10000 draws: {}",
        kind.name(),
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}

/// `n` i.i.d. uniform draws from the box; sample `i` depends only on
/// `(seed, i)`.
pub fn sample_parameters(bounds: &ParamBounds, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    bounds.validate()?;
    Ok((0..n).map(|i| draw_uniform(&mut sample_rng(seed, i, 0), bounds)).collect())
}

/// Everything that determines a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub model: ModelKind,
    pub bounds: ParamBounds,
    pub knots: Vec<f64>,
    pub grid: StrikeMaturityGrid,
    pub sim: SimConfig,
    pub n_samples: usize,
    pub seed: u64,
}

/// Raw Monte Carlo output kept next to each vanilla sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrices {
    /// Out-of-the-money values, see [`crate::mc_engine::PriceGridResult`].
    pub time_values: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub accepted: usize,
    pub rejected: usize,
    pub rejection_rate: f64,
    pub wall_seconds: f64,
}

enum Draw<T> {
    Accepted(T),
    Rejected(String),
}

/// A parameter vector with its prices.
type Priced<T> = (Vec<f64>, T);
/// θ, its prices, rejected attempts and the last rejection reason.
type Attempted<T> = (Vec<f64>, T, usize, Option<String>);

/// Runs `price` for every sample index with rejection and redraw, in parallel
/// over samples, keeping results in index order.
fn generate_with<T: Send>(
    spec: &GenSpec,
    price: impl Fn(&ModelParams, &SimConfig) -> Result<T> + Sync,
) -> Result<(Vec<Priced<T>>, GenerationReport)> {
    spec.bounds.validate()?;
    spec.sim.validate()?;
    if spec.bounds.dim() != expected_dim(spec.model, spec.knots.len()) {
        return Err(Error::Config(format!(
            "{} needs a {}-dimensional box, got {}",
            spec.model.name(),
            expected_dim(spec.model, spec.knots.len()),
            spec.bounds.dim()
        )));
    }
    let start = std::time::Instant::now();
    let done = AtomicUsize::new(0);
    let per_sample: Vec<Result<Attempted<T>>> = (0..spec.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rejected = 0;
            let mut last = None;
            for attempt in 0..MAX_ATTEMPTS {
                let mut rng = sample_rng(spec.seed, i, attempt);
                let theta = draw_admissible(&mut rng, spec.model, &spec.bounds, &spec.knots)?;
                let params = ModelParams::from_flat(spec.model, &theta, &spec.knots)?;
                let sim = spec.sim.with_seed(rng.next_u64());
                let outcome = match price(&params, &sim) {
                    Ok(v) => Draw::Accepted(v),
                    Err(e @ (Error::Cell { .. } | Error::Inversion { .. } | Error::Simulation(_))) => {
                        Draw::Rejected(e.to_string())
                    }
                    Err(e) => return Err(e),
                };
                match outcome {
                    Draw::Accepted(v) => {
                        let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                        if n.is_multiple_of(500) {
                            log::info!("{}: {n}/{} samples", spec.model.name(), spec.n_samples);
                        }
                        return Ok((theta, v, rejected, last));
                    }
                    Draw::Rejected(msg) => {
                        log::warn!("sample {i} attempt {attempt} rejected: {msg}");
                        rejected += 1;
                        last = Some(msg);
                    }
                }
            }
            Err(Error::Rejection {
                rate: 1.0,
                rejected,
                attempted: rejected,
                last: last.unwrap_or_default(),
            })
        })
        .collect();
    let mut out = Vec::with_capacity(spec.n_samples);
    let mut rejected = 0;
    let mut last = None;
    for r in per_sample {
        let (theta, v, rej, l) = r?;
        rejected += rej;
        if l.is_some() {
            last = l;
        }
        out.push((theta, v));
    }
    let attempted = rejected + out.len();
    let rate = if attempted == 0 { 0.0 } else { rejected as f64 / attempted as f64 };
    if rate > MAX_REJECTION_RATE {
        return Err(Error::Rejection { rate, rejected, attempted, last: last.unwrap_or_default() });
    }
    let report = GenerationReport {
        accepted: out.len(),
        rejected,
        rejection_rate: rate,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((out, report))
}

fn expected_dim(kind: ModelKind, n_knots: usize) -> usize {
    match kind {
        ModelKind::Heston => 4,
        _ => n_knots + 3,
    }
}

fn empty_dataset(spec: &GenSpec, target: Target) -> Dataset {
    Dataset {
        model: spec.model,
        target,
        grid: spec.grid.clone(),
        knots: spec.knots.clone(),
        bounds: spec.bounds.clone(),
        samples: Vec::with_capacity(spec.n_samples),
        seed: spec.seed,
        split: None,
        stats: None,
        config_hash: String::new(),
    }
}

/// Implied-vol dataset. Draws whose price grid fails to invert anywhere are
/// rejected and redrawn; more than 5% rejections abort the run.
pub fn generate_dataset(spec: &GenSpec) -> Result<(Dataset, Vec<RawPrices>, GenerationReport)> {
    let (rows, report) = generate_with(spec, |params, sim| {
        let res = mc_vanilla_surface(params, &spec.grid, sim)?;
        let surface = surface_from_prices(&res, &spec.grid)?;
        Ok((surface.as_slice().to_vec(), RawPrices { time_values: res.time_values, stderr: res.stderr }))
    })?;
    let mut ds = empty_dataset(spec, Target::ImpliedVol);
    let mut raw = Vec::with_capacity(rows.len());
    for (theta, (surface, r)) in rows {
        ds.samples.push(TrainingSample { theta, surface });
        raw.push(r);
    }
    Ok((ds, raw, report))
}

/// Down-and-in and down-and-out probability datasets from shared paths.
/// `spec.grid` holds barrier levels in place of strikes.
pub fn generate_barrier_datasets(spec: &GenSpec) -> Result<(Dataset, Dataset, GenerationReport)> {
    let (rows, report) = generate_with(spec, |params, sim| {
        let (din, dout) = mc_barrier_pair(params, &spec.grid, sim)?;
        Ok((din.probs, dout.probs))
    })?;
    let mut din = empty_dataset(spec, Target::DownIn);
    let mut dout = empty_dataset(spec, Target::DownOut);
    for (theta, (a, b)) in rows {
        din.samples.push(TrainingSample { theta: theta.clone(), surface: a });
        dout.samples.push(TrainingSample { theta, surface: b });
    }
    Ok((din, dout, report))
}

/// Shuffled split of `0..n`: the first `round(n·train_fraction)` indices of a
/// seeded permutation train, the rest test.
pub fn split(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1]")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let test = idx.split_off(n_train.min(n));
    Ok((idx, test))
}

/// Surface statistics over the given (training) rows.
pub fn compute_stats(ds: &Dataset, train: &[usize], mode: VolNormalization) -> Result<NormalizationStats> {
    if train.is_empty() {
        return Err(Error::Config("cannot normalize with an empty training set".into()));
    }
    let cells = ds.grid.len();
    let n = train.len() as f64;
    let mut cell_sum = vec![0.0; cells];
    for &i in train {
        for (s, v) in cell_sum.iter_mut().zip(&ds.samples[i].surface) {
            *s += v;
        }
    }
    let total_mean = cell_sum.iter().sum::<f64>() / (n * cells as f64);
    let cell_mean: Vec<f64> = cell_sum.iter().map(|s| s / n).collect();
    let mut cell_ss = vec![0.0; cells];
    let mut total_ss = 0.0;
    for &i in train {
        for (c, v) in ds.samples[i].surface.iter().enumerate() {
            cell_ss[c] += (v - cell_mean[c]).powi(2);
            total_ss += (v - total_mean).powi(2);
        }
    }
    let vol_std = (total_ss / (n * cells as f64)).sqrt();
    if !(vol_std > 0.0) {
        return Err(Error::Config("surface values have zero spread".into()));
    }
    let (cm, cs) = match mode {
        VolNormalization::Scalar => (None, None),
        VolNormalization::PerCell => {
            // Cells without spread (e.g. an unreachable barrier) keep unit scale.
            let cs: Vec<f64> = cell_ss.iter().map(|s| (s / n).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
            (Some(cell_mean), Some(cs))
        }
    };
    Ok(NormalizationStats {
        theta_bounds: ds.bounds.clone(),
        vol_mean: total_mean,
        vol_std,
        cell_mean: cm,
        cell_std: cs,
    })
}

/// Inputs mapped to `[-1, 1]` and outputs z-scored.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedData {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

impl NormalizedData {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> NormalizedData {
        NormalizedData {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i].clone()).collect(),
        }
    }
}

/// Normalizes every sample with the dataset's statistics (computed on the
/// training split when none are stored).
pub fn normalize_dataset(ds: &Dataset) -> Result<(NormalizedData, NormalizationStats)> {
    let stats = ds.stats_or_compute()?;
    let data = normalize_samples(&ds.samples, &stats)?;
    Ok((data, stats))
}

pub fn normalize_samples(samples: &[TrainingSample], stats: &NormalizationStats) -> Result<NormalizedData> {
    let mut x = Vec::with_capacity(samples.len());
    let mut y = Vec::with_capacity(samples.len());
    for s in samples {
        x.push(normalize_theta(&s.theta, &stats.theta_bounds)?);
        y.push(stats.normalize_surface(&s.surface));
    }
    Ok(NormalizedData { x, y })
}

/// 17 significant digits: shortest exact round trip for every `f64`.
pub(crate) fn fmt17(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("writing to a String");
}

fn header(ds: &Dataset) -> Result<String> {
    let stats = match &ds.stats {
        Some(s) => serde_json::to_string(s)?,
        None => "null".into(),
    };
    let split = match &ds.split {
        Some(s) => serde_json::to_string(s)?,
        None => "null".into(),
    };
    let bounds = serde_json::to_string(&ds.bounds)?;
    Ok(format!(
        "# model={} grid={} stats={} seed={} target={} knots={} bounds={} split={} config={}",
        ds.model.name(),
        serde_json::to_string(&ds.grid)?,
        stats,
        ds.seed,
        ds.target.name(),
        serde_json::to_string(&ds.knots)?,
        bounds,
        split,
        if ds.config_hash.is_empty() { "none" } else { &ds.config_hash },
    ))
}

pub fn write_dataset_to<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    writeln!(w, "{}", header(ds)?)?;
    let mut line = String::new();
    for s in &ds.samples {
        line.clear();
        for (k, v) in s.theta.iter().chain(&s.surface).enumerate() {
            if k > 0 {
                line.push(',');
            }
            fmt17(&mut line, *v);
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_dataset_to(ds, std::io::BufWriter::new(f))
}

/// Raw out-of-the-money values and their standard errors, one row per
/// sample in the same order as the dataset.
/// Raw out-of-the-money values then their standard errors, one row per
/// sample, under a `# config=<hash>` line.
pub fn write_raw_prices(raw: &[RawPrices], config_hash: &str, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# config={config_hash}")?;
    let mut line = String::new();
    for r in raw {
        line.clear();
        for (k, v) in r.time_values.iter().chain(&r.stderr).enumerate() {
            if k > 0 {
                line.push(',');
            }
            fmt17(&mut line, *v);
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raw_prices(path: &Path, cells: usize) -> Result<Vec<RawPrices>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let v = parse_row(&line, n + 1)?;
        if v.len() != 2 * cells {
            return Err(Error::Format(format!("line {}: expected {} values, got {}", n + 1, 2 * cells, v.len())));
        }
        out.push(RawPrices { time_values: v[..cells].to_vec(), stderr: v[cells..].to_vec() });
    }
    Ok(out)
}

fn parse_row(line: &str, n: usize) -> Result<Vec<f64>> {
    line.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("line {n}: bad number `{t}`: {e}")))
        })
        .collect()
}

fn header_fields(line: &str) -> Result<Vec<(&str, &str)>> {
    let body = line
        .strip_prefix("# ")
        .ok_or_else(|| Error::Format("dataset header must start with `# `".into()))?;
    body.split(' ')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.split_once('=')
                .ok_or_else(|| Error::Format(format!("header token `{t}` is not key=value")))
        })
        .collect()
}

pub fn read_dataset_from<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let fields = header_fields(&first)?;
    let get = |k: &str| {
        fields
            .iter()
            .find(|(key, _)| *key == k)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Format(format!("dataset header lacks `{k}`")))
    };
    let model: ModelKind = get("model")?.parse()?;
    let g: StrikeMaturityGrid = serde_json::from_str(get("grid")?)?;
    let grid = StrikeMaturityGrid::new(g.maturities().to_vec(), g.strikes().to_vec())?;
    let stats: Option<NormalizationStats> = serde_json::from_str(get("stats")?)?;
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|e| Error::Format(format!("bad seed: {e}")))?;
    let target: Target = match get("target") {
        Ok(t) => t.parse()?,
        Err(_) => Target::ImpliedVol,
    };
    let knots: Vec<f64> = match get("knots") {
        Ok(k) => serde_json::from_str(k)?,
        Err(_) => crate::models::DEFAULT_KNOTS.to_vec(),
    };
    let bounds: ParamBounds = match (get("bounds"), &stats) {
        (Ok(b), _) => serde_json::from_str(b)?,
        (Err(_), Some(s)) => s.theta_bounds.clone(),
        (Err(e), None) => return Err(e),
    };
    bounds.validate()?;
    let split: Option<SplitSpec> = match get("split") {
        Ok(s) => serde_json::from_str(s)?,
        Err(_) => None,
    };
    let config_hash = match get("config") {
        Ok("none") | Err(_) => String::new(),
        Ok(h) => h.to_string(),
    };
    let dim = bounds.dim();
    let cells = grid.len();
    let mut samples = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_row(&line, n + 2)?;
        if v.len() != dim + cells {
            return Err(Error::Format(format!(
                "line {}: expected {} values, got {}",
                n + 2,
                dim + cells,
                v.len()
            )));
        }
        samples.push(TrainingSample { theta: v[..dim].to_vec(), surface: v[dim..].to_vec() });
    }
    Ok(Dataset { model, target, grid, knots, bounds, samples, seed, split, stats, config_hash })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_dataset_from(BufReader::new(f))
}
