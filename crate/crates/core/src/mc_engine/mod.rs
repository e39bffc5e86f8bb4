//! Monte Carlo ground truth.
//!
//! Paths are simulated in fixed-size blocks. Block `b` draws from its own
//! ChaCha stream keyed by `(seed, b)`, and block results are reduced in block
//! order, so outputs do not depend on the number of worker threads.
//!
//! Vanilla calls use the conditional (mixing) estimator: given the variance
//! driver, `ln S_T` is Gaussian, so each path contributes a Black-Scholes
//! price with spot `exp(ρ∫√V dZ − ½ρ²∫V dt)` and total variance
//! `(1−ρ²)∫V dt`. The conditional spot has mean one and serves as the
//! martingale control variate. Barrier probabilities need the spot path and
//! are estimated by discrete monitoring on the simulation grid.

mod covariance;
mod paths;

pub use covariance::{
    cholesky_with_jitter, cov_volterra, cov_volterra_brownian, integrate, volterra_covariance,
    VolterraCovariance,
};
pub use paths::{PathSimulator, TimeGrid, Workspace};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::black_scholes::conditional_otm_value;
use crate::error::{Error, Result};
use crate::grid::StrikeMaturityGrid;
use crate::models::ModelParams;

/// Paths per RNG block.
pub const BLOCK_SIZE: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub antithetic: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { n_paths: 10_000, n_steps: 100, seed: 0, antithetic: false }
    }
}

impl SimConfig {
    pub fn new(n_paths: usize, n_steps: usize, seed: u64) -> Self {
        Self { n_paths, n_steps, seed, antithetic: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 2 {
            return Err(Error::Config(format!("n_paths = {} must be >= 2", self.n_paths)));
        }
        if self.n_steps < 8 {
            return Err(Error::Config(format!("n_steps = {} must be >= 8", self.n_steps)));
        }
        if self.antithetic && !self.n_paths.is_multiple_of(2) {
            return Err(Error::Config("antithetic sampling needs an even n_paths".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn blocks(&self) -> Vec<(usize, usize)> {
        let n_blocks = self.n_paths.div_ceil(BLOCK_SIZE);
        (0..n_blocks)
            .map(|b| {
                let start = b * BLOCK_SIZE;
                (b, (self.n_paths - start).min(BLOCK_SIZE))
            })
            .collect()
    }
}

pub(crate) fn block_rng(seed: u64, block: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block as u64);
    rng
}

/// Call prices on a grid with Monte Carlo standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceGridResult {
    pub grid: StrikeMaturityGrid,
    pub prices: Vec<f64>,
    /// Out-of-the-money part of each cell: the call value for `K ≥ 1`, the
    /// put value for `K < 1`. `prices = time_values + max(1 − K, 0)`.
    pub time_values: Vec<f64>,
    /// Standard error of the control-variate estimator.
    pub stderr: Vec<f64>,
    /// Standard error of the same conditional estimator without the control.
    pub stderr_plain: Vec<f64>,
    pub n_paths: usize,
}

impl PriceGridResult {
    pub fn ci95_half_width(&self) -> Vec<f64> {
        self.stderr.iter().map(|s| 1.96 * s).collect()
    }
}

#[derive(Debug, Clone)]
struct VanillaAccum {
    count: usize,
    sum_c: Vec<f64>,
    sum_c2: Vec<f64>,
    sum_cd: Vec<f64>,
    sum_d: Vec<f64>,
    sum_d2: Vec<f64>,
}

impl VanillaAccum {
    fn new(n_mat: usize, n_cells: usize) -> Self {
        Self {
            count: 0,
            sum_c: vec![0.0; n_cells],
            sum_c2: vec![0.0; n_cells],
            sum_cd: vec![0.0; n_cells],
            sum_d: vec![0.0; n_mat],
            sum_d2: vec![0.0; n_mat],
        }
    }

    fn merge(&mut self, o: &VanillaAccum) {
        self.count += o.count;
        for (a, b) in [
            (&mut self.sum_c, &o.sum_c),
            (&mut self.sum_c2, &o.sum_c2),
            (&mut self.sum_cd, &o.sum_cd),
            (&mut self.sum_d, &o.sum_d),
            (&mut self.sum_d2, &o.sum_d2),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// Log conditional spot and total standard deviation at each maturity for
/// the current variance path.
fn conditional_terms(sim: &PathSimulator, ws: &Workspace, log_spot: &mut [f64], sd_out: &mut [f64]) {
    let rho = sim.rho;
    let mut a = 0.0;
    let mut q = 0.0;
    let mut m = 0;
    let idx = &sim.grid.maturity_idx;
    for k in 0..sim.n_steps() {
        let v = ws.var[k];
        a += v.sqrt() * ws.dz[k];
        q += v * sim.grid.dt[k];
        if m < idx.len() && idx[m] == k {
            log_spot[m] = rho * a - 0.5 * rho * rho * q;
            sd_out[m] = ((1.0 - rho * rho) * q).max(0.0).sqrt();
            m += 1;
        }
    }
}

/// Control-variate adjusted call prices on `grid` (spot 1).
pub fn mc_vanilla_surface(
    model: &ModelParams,
    grid: &StrikeMaturityGrid,
    config: &SimConfig,
) -> Result<PriceGridResult> {
    config.validate()?;
    if (model.spot() - 1.0).abs() > 0.0 {
        return Err(Error::Domain(format!(
            "vanilla surfaces use moneyness strikes with spot 1, got {}",
            model.spot()
        )));
    }
    if grid.maturities().windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("maturities must be increasing".into()));
    }
    let tg = TimeGrid::new(grid.maturities(), config.n_steps)?;
    let sim = PathSimulator::new(model, tg)?;
    let n_mat = grid.n_maturities();
    let n_k = grid.n_strikes();
    let n_cells = grid.len();
    let strikes = grid.strikes().to_vec();
    let ln_k: Vec<f64> = strikes.iter().map(|k| k.ln()).collect();

    let blocks: Vec<Result<VanillaAccum>> = config
        .blocks()
        .into_par_iter()
        .map(|(b, n_in_block)| {
            let mut rng = block_rng(config.seed, b);
            let mut ws = Workspace::new(sim.n_steps());
            let mut acc = VanillaAccum::new(n_mat, n_cells);
            let mut log_spot = vec![0.0; n_mat];
            let mut sd = vec![0.0; n_mat];
            let mut c = vec![0.0; n_cells];
            let mut d = vec![0.0; n_mat];
            let reps = if config.antithetic { 2 } else { 1 };
            for _ in 0..n_in_block / reps {
                c.iter_mut().for_each(|x| *x = 0.0);
                d.iter_mut().for_each(|x| *x = 0.0);
                for r in 0..reps {
                    sim.draw(&mut rng, &mut ws, r == 1, false);
                    sim.variance_path(&mut ws);
                    conditional_terms(&sim, &ws, &mut log_spot, &mut sd);
                    for i in 0..n_mat {
                        let s = log_spot[i].exp();
                        d[i] += s - 1.0;
                        let row = &mut c[i * n_k..(i + 1) * n_k];
                        for j in 0..n_k {
                            row[j] += conditional_otm_value(log_spot[i], s, ln_k[j], strikes[j], sd[i]);
                        }
                    }
                }
                let scale = 1.0 / reps as f64;
                for i in 0..n_mat {
                    let di = d[i] * scale;
                    if !di.is_finite() {
                        return Err(Error::Simulation(format!("conditional spot at maturity {i}")));
                    }
                    acc.sum_d[i] += di;
                    acc.sum_d2[i] += di * di;
                    for j in 0..n_k {
                        let cell = i * n_k + j;
                        let ci = c[cell] * scale;
                        if !ci.is_finite() {
                            return Err(Error::Simulation(format!("option value at cell ({i}, {j})")));
                        }
                        acc.sum_c[cell] += ci;
                        acc.sum_c2[cell] += ci * ci;
                        acc.sum_cd[cell] += ci * di;
                    }
                }
                acc.count += 1;
            }
            Ok(acc)
        })
        .collect();

    let mut total = VanillaAccum::new(n_mat, n_cells);
    for b in blocks {
        total.merge(&b?);
    }
    let n = total.count as f64;
    let mut prices = vec![0.0; n_cells];
    let mut time_values = vec![0.0; n_cells];
    let mut stderr = vec![0.0; n_cells];
    let mut stderr_plain = vec![0.0; n_cells];
    for i in 0..n_mat {
        let mean_d = total.sum_d[i] / n;
        let var_d = ((total.sum_d2[i] - n * mean_d * mean_d) / (n - 1.0)).max(0.0);
        for j in 0..n_k {
            let cell = i * n_k + j;
            let mean_v = total.sum_c[cell] / n;
            let var_v = ((total.sum_c2[cell] - n * mean_v * mean_v) / (n - 1.0)).max(0.0);
            let cov = (total.sum_cd[cell] - n * mean_v * mean_d) / (n - 1.0);
            let (beta, var_res) = if var_d > 0.0 {
                let beta = cov / var_d;
                (beta, (var_v - cov * cov / var_d).max(0.0))
            } else {
                (0.0, var_v)
            };
            // Conditional put-call parity: call = put + (S' − 1) + (1 − K).
            let var_call = if strikes[j] >= 1.0 {
                var_v
            } else {
                (var_v + 2.0 * cov + var_d).max(0.0)
            };
            let tv = mean_v - beta * mean_d;
            time_values[cell] = tv;
            prices[cell] = tv + (1.0 - strikes[j]).max(0.0);
            stderr[cell] = (var_res / n).sqrt();
            stderr_plain[cell] = (var_call / n).sqrt();
        }
    }
    Ok(PriceGridResult {
        grid: grid.clone(),
        prices,
        time_values,
        stderr,
        stderr_plain,
        n_paths: config.n_paths,
    })
}

/// Spot and variance paths on the simulation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPaths {
    /// `t_1..t_n`; every requested observation time is one of them.
    pub times: Vec<f64>,
    pub n_paths: usize,
    /// Row-major `n_paths × n`, spot at `times[k]`.
    pub spot: Vec<f64>,
    /// Row-major `n_paths × n`, variance used on the step ending at `times[k]`.
    pub variance: Vec<f64>,
}

impl SimulatedPaths {
    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn spot_at(&self, path: usize, k: usize) -> f64 {
        self.spot[path * self.times.len() + k]
    }

    pub fn time_index(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&x| x == t)
    }
}

/// Full spot/variance paths. `t_grid` lists the times that must appear on the
/// simulation grid; `config.n_steps` uniform steps up to its last element are
/// merged in.
pub fn simulate_paths(model: &ModelParams, config: &SimConfig, t_grid: &[f64]) -> Result<SimulatedPaths> {
    config.validate()?;
    covariance::check_grid(t_grid)?;
    let tg = TimeGrid::new(t_grid, config.n_steps)?;
    let sim = PathSimulator::new(model, tg)?;
    let n = sim.n_steps();
    let chunks: Vec<Result<(Vec<f64>, Vec<f64>)>> = config
        .blocks()
        .into_par_iter()
        .map(|(b, n_in_block)| {
            let mut rng = block_rng(config.seed, b);
            let mut ws = Workspace::new(n);
            let mut spot = vec![0.0; n_in_block * n];
            let mut var = vec![0.0; n_in_block * n];
            let mut log_s = vec![0.0; n];
            for p in 0..n_in_block {
                sim.draw(&mut rng, &mut ws, config.antithetic && p % 2 == 1, true);
                sim.variance_path(&mut ws);
                sim.log_spot_path(&ws, &mut log_s);
                for k in 0..n {
                    let s = log_s[k].exp();
                    if !s.is_finite() || !ws.var[k].is_finite() {
                        return Err(Error::Simulation(format!("path {p} step {k} in block {b}")));
                    }
                    spot[p * n + k] = s;
                    var[p * n + k] = ws.var[k];
                }
            }
            Ok((spot, var))
        })
        .collect();
    let mut spot = Vec::with_capacity(config.n_paths * n);
    let mut variance = Vec::with_capacity(config.n_paths * n);
    for c in chunks {
        let (s, v) = c?;
        spot.extend(s);
        variance.extend(v);
    }
    Ok(SimulatedPaths { times: sim.grid.times.clone(), n_paths: config.n_paths, spot, variance })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierKind {
    /// `1{τ_B ≤ T}`
    DownIn,
    /// `1{τ_B > T}`
    DownOut,
}

impl BarrierKind {
    pub fn name(self) -> &'static str {
        match self {
            BarrierKind::DownIn => "down_in",
            BarrierKind::DownOut => "down_out",
        }
    }
}

/// Digital barrier probabilities; rows are maturities, columns barrier levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierGridResult {
    pub grid: StrikeMaturityGrid,
    pub kind: BarrierKind,
    pub probs: Vec<f64>,
    /// Binomial standard error `√(p(1−p)/n)`.
    pub stderr: Vec<f64>,
    pub n_paths: usize,
}

/// Down-and-in and down-and-out grids from one shared path set, so that the
/// two sum to one cell by cell.
pub fn mc_barrier_pair(
    model: &ModelParams,
    barrier_grid: &StrikeMaturityGrid,
    config: &SimConfig,
) -> Result<(BarrierGridResult, BarrierGridResult)> {
    config.validate()?;
    let s0 = model.spot();
    if let Some(b) = barrier_grid.strikes().iter().find(|&&b| b >= s0) {
        return Err(Error::Domain(format!("barrier {b} must lie below spot {s0}")));
    }
    let tg = TimeGrid::new(barrier_grid.maturities(), config.n_steps)?;
    let sim = PathSimulator::new(model, tg)?;
    let n = sim.n_steps();
    let n_mat = barrier_grid.n_maturities();
    let n_b = barrier_grid.n_strikes();
    let log_b: Vec<f64> = barrier_grid.strikes().iter().map(|b| b.ln()).collect();
    let idx = sim.grid.maturity_idx.clone();

    let counts: Vec<Result<Vec<u64>>> = config
        .blocks()
        .into_par_iter()
        .map(|(b, n_in_block)| {
            let mut rng = block_rng(config.seed, b);
            let mut ws = Workspace::new(n);
            let mut log_s = vec![0.0; n];
            let mut hits = vec![0u64; n_mat * n_b];
            let mut mins = vec![0.0; n];
            for p in 0..n_in_block {
                sim.draw(&mut rng, &mut ws, config.antithetic && p % 2 == 1, true);
                sim.variance_path(&mut ws);
                sim.log_spot_path(&ws, &mut log_s);
                let mut running_min = f64::INFINITY;
                for k in 0..n {
                    if !log_s[k].is_finite() {
                        return Err(Error::Simulation(format!("path {p} step {k} in block {b}")));
                    }
                    running_min = running_min.min(log_s[k]);
                    mins[k] = running_min;
                }
                for (i, &k) in idx.iter().enumerate() {
                    for j in 0..n_b {
                        if mins[k] <= log_b[j] {
                            hits[i * n_b + j] += 1;
                        }
                    }
                }
            }
            Ok(hits)
        })
        .collect();
    let mut total = vec![0u64; n_mat * n_b];
    for c in counts {
        for (t, h) in total.iter_mut().zip(c?) {
            *t += h;
        }
    }
    let n_paths = config.n_paths as f64;
    let p_in: Vec<f64> = total.iter().map(|&h| h as f64 / n_paths).collect();
    let p_out: Vec<f64> = p_in.iter().map(|p| 1.0 - p).collect();
    let se: Vec<f64> = p_in.iter().map(|p| (p * (1.0 - p) / n_paths).sqrt()).collect();
    let make = |kind, probs| BarrierGridResult {
        grid: barrier_grid.clone(),
        kind,
        probs,
        stderr: se.clone(),
        n_paths: config.n_paths,
    };
    Ok((make(BarrierKind::DownIn, p_in), make(BarrierKind::DownOut, p_out)))
}

pub fn mc_barrier_grid(
    model: &ModelParams,
    barrier_grid: &StrikeMaturityGrid,
    config: &SimConfig,
    kind: BarrierKind,
) -> Result<BarrierGridResult> {
    let (din, dout) = mc_barrier_pair(model, barrier_grid, config)?;
    Ok(match kind {
        BarrierKind::DownIn => din,
        BarrierKind::DownOut => dout,
    })
}

#[cfg(test)]
mod tests;
