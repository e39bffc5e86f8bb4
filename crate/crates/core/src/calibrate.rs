//! Calibration through a frozen pricing network.
//!
//! Solvers work on a generic box-constrained least-squares [`Problem`]. For
//! network calibration the unknowns are the normalized parameters
//! `z ∈ [-1, 1]ⁿ` and the residuals are `F̃(z) − σ^MKT` in vol units;
//! results are reported in raw parameter units.

use std::cell::Cell;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{StrikeMaturityGrid, VolSurface};
use crate::neuralnet::PricingNet;

/// Box-constrained least squares: minimize `½‖r(x)‖²` over `lower ≤ x ≤ upper`.
pub trait Problem {
    fn dim(&self) -> usize;
    fn lower(&self) -> Vec<f64>;
    fn upper(&self) -> Vec<f64>;
    fn residuals(&self, x: &[f64]) -> Vec<f64>;
    /// Residuals and their Jacobian (row-major, residuals × unknowns).
    fn residuals_and_jacobian(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>);
}

pub fn half_sq_norm(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

/// Evaluation counting wrapper.
struct Counted<'a, P: ?Sized> {
    p: &'a P,
    f: Cell<usize>,
    j: Cell<usize>,
}

impl<'a, P: Problem + ?Sized> Counted<'a, P> {
    fn new(p: &'a P) -> Self {
        Self { p, f: Cell::new(0), j: Cell::new(0) }
    }

    fn res(&self, x: &[f64]) -> Vec<f64> {
        self.f.set(self.f.get() + 1);
        self.p.residuals(x)
    }

    fn obj(&self, x: &[f64]) -> f64 {
        half_sq_norm(&self.res(x))
    }

    /// Residuals with Jacobian; counts as one objective and one Jacobian
    /// evaluation.
    fn res_jac(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.f.set(self.f.get() + 1);
        self.j.set(self.j.get() + 1);
        self.p.residuals_and_jacobian(x)
    }
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Outcome of a solver run on a generic problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub x: Vec<f64>,
    pub objective: f64,
    pub n_objective_evals: usize,
    pub n_jacobian_evals: usize,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub lambda0: f64,
    pub max_iters: usize,
    pub step_tol: f64,
    pub grad_tol: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { lambda0: 1e-3, max_iters: 500, step_tol: 1e-10, grad_tol: 1e-10 }
    }
}

const LAMBDA_MAX: f64 = 1e16;

/// Damped normal equations `(JᵀJ + λD) δ = −Jᵀr` with `D = diag(JᵀJ)`
/// (floored so flat directions stay regular).
pub fn lm_step(jac: &[f64], r: &[f64], n: usize, lambda: f64) -> Option<Vec<f64>> {
    let m = r.len();
    let j = DMatrix::from_row_slice(m, n, jac);
    let rv = DVector::from_column_slice(r);
    let jtj = j.transpose() * &j;
    let g = j.transpose() * rv;
    let floor = 1e-12 * (0..n).map(|i| jtj[(i, i)]).fold(0.0, f64::max).max(1e-300);
    let mut a = jtj.clone();
    for i in 0..n {
        a[(i, i)] += lambda * jtj[(i, i)].max(floor);
    }
    let chol = a.cholesky()?;
    let d = chol.solve(&(-g));
    d.iter().all(|v| v.is_finite()).then(|| d.as_slice().to_vec())
}

/// Levenberg–Marquardt with multiplicative damping updates (×10 on a
/// rejected step, ÷10 on an accepted one) and projection onto the box.
pub fn levenberg_marquardt<P: Problem + ?Sized>(p: &P, x0: &[f64], cfg: &LmConfig) -> SolveResult {
    let c = Counted::new(p);
    let (lo, hi) = (p.lower(), p.upper());
    let n = p.dim();
    let mut x = x0.to_vec();
    project(&mut x, &lo, &hi);
    let (mut r, mut jac) = c.res_jac(&x);
    let mut f = half_sq_norm(&r);
    let mut lambda = cfg.lambda0;
    let mut converged = false;
    let mut iterations = 0;
    'outer: while iterations < cfg.max_iters {
        iterations += 1;
        let g: Vec<f64> = (0..n).map(|k| (0..r.len()).map(|i| jac[i * n + k] * r[i]).sum()).collect();
        if norm(&g) < cfg.grad_tol {
            converged = true;
            break;
        }
        loop {
            let Some(delta) = lm_step(&jac, &r, n, lambda) else {
                lambda *= 10.0;
                if lambda > LAMBDA_MAX {
                    break 'outer;
                }
                continue;
            };
            let mut trial: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
            project(&mut trial, &lo, &hi);
            let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            if norm(&step) < cfg.step_tol {
                converged = true;
                break 'outer;
            }
            let r_new = c.res(&trial);
            let f_new = half_sq_norm(&r_new);
            if f_new < f {
                x = trial;
                lambda = (lambda / 10.0).max(1e-300);
                let (r2, j2) = c.res_jac(&x);
                r = r2;
                jac = j2;
                f = f_new;
                break;
            }
            lambda *= 10.0;
            if lambda > LAMBDA_MAX {
                break 'outer;
            }
        }
    }
    SolveResult {
        x,
        objective: f,
        n_objective_evals: c.f.get(),
        n_jacobian_evals: c.j.get(),
        iterations,
        converged,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdConfig {
    pub step: f64,
    pub max_iters: usize,
    pub step_tol: f64,
}

impl Default for GdConfig {
    fn default() -> Self {
        Self { step: 0.1, max_iters: 5_000, step_tol: 1e-10 }
    }
}

/// Projected gradient descent `x ← Π(x − λ∇½‖r‖²)` with a fixed step.
pub fn gradient_descent<P: Problem + ?Sized>(p: &P, x0: &[f64], cfg: &GdConfig) -> SolveResult {
    let c = Counted::new(p);
    let (lo, hi) = (p.lower(), p.upper());
    let n = p.dim();
    let mut x = x0.to_vec();
    project(&mut x, &lo, &hi);
    let mut converged = false;
    let mut iterations = 0;
    let (mut r, mut jac) = c.res_jac(&x);
    while iterations < cfg.max_iters {
        iterations += 1;
        let g: Vec<f64> = (0..n).map(|k| (0..r.len()).map(|i| jac[i * n + k] * r[i]).sum()).collect();
        let mut next: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - cfg.step * b).collect();
        project(&mut next, &lo, &hi);
        let step = norm(&next.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>());
        x = next;
        let (r2, j2) = c.res_jac(&x);
        r = r2;
        jac = j2;
        if step < cfg.step_tol {
            converged = true;
            break;
        }
    }
    SolveResult {
        objective: half_sq_norm(&r),
        x,
        n_objective_evals: c.f.get(),
        n_jacobian_evals: c.j.get(),
        iterations,
        converged,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmConfig {
    pub max_evals: usize,
    pub diameter_tol: f64,
    /// Initial simplex edge as a share of each coordinate's range.
    pub initial_step: f64,
}

impl Default for NmConfig {
    fn default() -> Self {
        Self { max_evals: 2_000, diameter_tol: 1e-8, initial_step: 0.1 }
    }
}

/// Nelder–Mead with reflection 1, expansion 2, contraction ½ and shrink ½.
/// Trial points are projected onto the box.
pub fn nelder_mead<P: Problem + ?Sized>(p: &P, x0: &[f64], cfg: &NmConfig) -> SolveResult {
    let c = Counted::new(p);
    let (lo, hi) = (p.lower(), p.upper());
    let n = p.dim();
    let mut start = x0.to_vec();
    project(&mut start, &lo, &hi);
    let mut simplex = vec![start.clone()];
    for i in 0..n {
        let mut v = start.clone();
        let h = cfg.initial_step * (hi[i] - lo[i]);
        v[i] = if v[i] + h <= hi[i] { v[i] + h } else { v[i] - h };
        simplex.push(v);
    }
    let mut fs: Vec<f64> = simplex.iter().map(|v| c.obj(v)).collect();
    let mut iterations = 0;
    let mut converged = false;
    let at = |base: &[f64], dir: &[f64], t: f64| -> Vec<f64> {
        let mut v: Vec<f64> = base.iter().zip(dir).map(|(b, d)| b + t * (d - b)).collect();
        project(&mut v, &lo, &hi);
        v
    };
    loop {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| fs[a].total_cmp(&fs[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        fs = order.iter().map(|&i| fs[i]).collect();
        let diameter = simplex[1..]
            .iter()
            .map(|v| norm(&v.iter().zip(&simplex[0]).map(|(a, b)| a - b).collect::<Vec<_>>()))
            .fold(0.0, f64::max);
        if diameter < cfg.diameter_tol {
            converged = true;
            break;
        }
        if c.f.get() >= cfg.max_evals {
            break;
        }
        iterations += 1;
        let centroid: Vec<f64> = (0..n).map(|k| simplex[..n].iter().map(|v| v[k]).sum::<f64>() / n as f64).collect();
        let worst = simplex[n].clone();
        // Points along centroid + t·(centroid − worst).
        let reflect = at(&centroid, &worst, -1.0);
        let fr = c.obj(&reflect);
        if fr < fs[0] {
            let expand = at(&centroid, &worst, -2.0);
            let fe = c.obj(&expand);
            if fe < fr {
                simplex[n] = expand;
                fs[n] = fe;
            } else {
                simplex[n] = reflect;
                fs[n] = fr;
            }
        } else if fr < fs[n - 1] {
            simplex[n] = reflect;
            fs[n] = fr;
        } else {
            let (contract, fc) = if fr < fs[n] {
                let v = at(&centroid, &worst, -0.5);
                let f = c.obj(&v);
                (v, f)
            } else {
                let v = at(&centroid, &worst, 0.5);
                let f = c.obj(&v);
                (v, f)
            };
            if fc < fs[n].min(fr) {
                simplex[n] = contract;
                fs[n] = fc;
            } else {
                let best = simplex[0].clone();
                for i in 1..=n {
                    simplex[i] = at(&best, &simplex[i], 0.5);
                    fs[i] = c.obj(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| fs[a].total_cmp(&fs[b])).unwrap();
    SolveResult {
        x: simplex[best].clone(),
        objective: fs[best],
        n_objective_evals: c.f.get(),
        n_jacobian_evals: 0,
        iterations,
        converged,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeConfig {
    pub pop_factor: usize,
    pub f: f64,
    pub cr: f64,
    pub max_generations: usize,
    /// Generations without improvement of the best member before stopping.
    pub stall_generations: usize,
    /// Finish with a Levenberg–Marquardt run from the best member.
    pub polish: bool,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self { pop_factor: 15, f: 0.8, cr: 0.9, max_generations: 200, stall_generations: 50, polish: true }
    }
}

/// Differential evolution, rand/1/bin. Mutant coordinates leaving the box
/// are redrawn uniformly inside it.
pub fn differential_evolution<P: Problem + ?Sized>(p: &P, seed: u64, cfg: &DeConfig) -> SolveResult {
    let c = Counted::new(p);
    let (lo, hi) = (p.lower(), p.upper());
    let n = p.dim();
    let np = (cfg.pop_factor * n).max(4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pop: Vec<Vec<f64>> =
        (0..np).map(|_| (0..n).map(|k| rng.gen_range(lo[k]..=hi[k])).collect()).collect();
    let mut fit: Vec<f64> = pop.iter().map(|x| c.obj(x)).collect();
    let mut best = (0..np).min_by(|&a, &b| fit[a].total_cmp(&fit[b])).unwrap();
    let mut stall = 0;
    let mut generations = 0;
    while generations < cfg.max_generations && stall < cfg.stall_generations {
        generations += 1;
        let best_before = fit[best];
        for i in 0..np {
            let mut pick = || loop {
                let k = rng.gen_range(0..np);
                if k != i {
                    break k;
                }
            };
            let a = pick();
            let b = loop {
                let k = pick();
                if k != a {
                    break k;
                }
            };
            let cc = loop {
                let k = pick();
                if k != a && k != b {
                    break k;
                }
            };
            let j_rand = rng.gen_range(0..n);
            let mut trial = pop[i].clone();
            for k in 0..n {
                if k == j_rand || rng.gen::<f64>() < cfg.cr {
                    let v = pop[a][k] + cfg.f * (pop[b][k] - pop[cc][k]);
                    trial[k] = if v < lo[k] || v > hi[k] { rng.gen_range(lo[k]..=hi[k]) } else { v };
                }
            }
            let ft = c.obj(&trial);
            if ft <= fit[i] {
                pop[i] = trial;
                fit[i] = ft;
                if ft < fit[best] {
                    best = i;
                }
            }
        }
        if fit[best] < best_before {
            stall = 0;
        } else {
            stall += 1;
        }
    }
    let mut x = pop[best].clone();
    let mut objective = fit[best];
    let mut n_jac = 0;
    let mut n_obj = c.f.get();
    if cfg.polish {
        let polished = levenberg_marquardt(p, &x, &LmConfig::default());
        n_obj += polished.n_objective_evals;
        n_jac += polished.n_jacobian_evals;
        if polished.objective < objective {
            x = polished.x;
            objective = polished.objective;
        }
    }
    SolveResult {
        x,
        objective,
        n_objective_evals: n_obj,
        n_jacobian_evals: n_jac,
        iterations: generations,
        converged: stall >= cfg.stall_generations,
    }
}

/// `|θ̂ − θ̄| / |θ̄|` per coordinate.
pub fn param_relative_error(theta_hat: &[f64], theta_bar: &[f64]) -> Vec<f64> {
    theta_hat.iter().zip(theta_bar).map(|(h, b)| (h - b).abs() / b.abs()).collect()
}

/// `√Σ (a − b)²` over all cells, without division by the cell count.
pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean absolute error per cell.
pub fn mae(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTarget {
    pub surface: Vec<f64>,
    /// Optional per-cell weights multiplying the residuals.
    pub weights: Option<Vec<f64>>,
    /// Network output index for each target cell; `None` means the target
    /// lives on the network's own grid.
    pub cells: Option<Vec<usize>>,
}

impl CalibrationTarget {
    pub fn new(surface: Vec<f64>) -> Self {
        Self { surface, weights: None, cells: None }
    }

    /// Target quoted on a different grid, matched to the nearest network
    /// cell in maturity and log-strike.
    pub fn on_subgrid(net_grid: &StrikeMaturityGrid, quotes: &VolSurface) -> Self {
        let nearest = |xs: &[f64], x: f64, f: fn(f64) -> f64| {
            (0..xs.len()).min_by(|&a, &b| (f(xs[a]) - f(x)).abs().total_cmp(&(f(xs[b]) - f(x)).abs())).unwrap()
        };
        let g = quotes.grid();
        let mut cells = Vec::with_capacity(g.len());
        for &t in g.maturities() {
            let row = nearest(net_grid.maturities(), t, |v| v);
            for &k in g.strikes() {
                cells.push(net_grid.index(row, nearest(net_grid.strikes(), k, f64::ln)));
            }
        }
        Self { surface: quotes.as_slice().to_vec(), weights: None, cells: Some(cells) }
    }

    fn model_values(&self, full: &[f64]) -> Vec<f64> {
        match &self.cells {
            Some(c) => c.iter().map(|&i| full[i]).collect(),
            None => full.to_vec(),
        }
    }
}

/// Network calibration problem in normalized coordinates.
pub struct NetProblem<'a> {
    pub net: &'a PricingNet,
    pub target: &'a CalibrationTarget,
}

impl<'a> NetProblem<'a> {
    pub fn new(net: &'a PricingNet, target: &'a CalibrationTarget) -> Result<Self> {
        match &target.cells {
            None if target.surface.len() != net.grid.len() => {
                return Err(Error::Domain(format!(
                    "target has {} cells, network outputs {}",
                    target.surface.len(),
                    net.grid.len()
                )));
            }
            Some(c) if c.len() != target.surface.len() || c.iter().any(|&i| i >= net.grid.len()) => {
                return Err(Error::Domain("target cell map does not fit the network grid".into()));
            }
            _ => {}
        }
        if let Some(w) = &target.weights {
            if w.len() != target.surface.len() {
                return Err(Error::Domain("weights and target differ in length".into()));
            }
        }
        Ok(Self { net, target })
    }

    fn weight(&self, c: usize) -> f64 {
        self.target.weights.as_ref().map_or(1.0, |w| w[c])
    }
}

impl Problem for NetProblem<'_> {
    fn dim(&self) -> usize {
        self.net.mlp.n_in()
    }

    fn lower(&self) -> Vec<f64> {
        vec![-1.0; self.dim()]
    }

    fn upper(&self) -> Vec<f64> {
        vec![1.0; self.dim()]
    }

    fn residuals(&self, z: &[f64]) -> Vec<f64> {
        let y = self.target.model_values(&self.net.surface_normalized(z));
        y.iter().zip(&self.target.surface).enumerate().map(|(c, (a, b))| self.weight(c) * (a - b)).collect()
    }

    fn residuals_and_jacobian(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (full, jfull) = self.net.surface_and_jacobian_normalized(z);
        let n = z.len();
        let (y, mut j) = match &self.target.cells {
            Some(cells) => (
                self.target.model_values(&full),
                cells.iter().flat_map(|&c| jfull[c * n..(c + 1) * n].iter().copied()).collect(),
            ),
            None => (full, jfull),
        };
        let r = y
            .iter()
            .zip(&self.target.surface)
            .enumerate()
            .map(|(c, (a, b))| {
                let w = self.weight(c);
                j[c * n..(c + 1) * n].iter_mut().for_each(|v| *v *= w);
                w * (a - b)
            })
            .collect();
        (r, j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    LevenbergMarquardt,
    GradientDescent,
    NelderMead,
    DifferentialEvolution,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::LevenbergMarquardt => "lm",
            Solver::GradientDescent => "gd",
            Solver::NelderMead => "nm",
            Solver::DifferentialEvolution => "de",
        }
    }

    pub const ALL: [Solver; 4] =
        [Solver::LevenbergMarquardt, Solver::GradientDescent, Solver::NelderMead, Solver::DifferentialEvolution];
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lm" | "levenberg_marquardt" => Ok(Solver::LevenbergMarquardt),
            "gd" | "gradient_descent" => Ok(Solver::GradientDescent),
            "nm" | "nelder_mead" => Ok(Solver::NelderMead),
            "de" | "differential_evolution" => Ok(Solver::DifferentialEvolution),
            other => Err(Error::Config(format!("unknown solver `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub lm: LmConfig,
    pub gd: GdConfig,
    pub nm: NmConfig,
    pub de: DeConfig,
    /// Extra seeded Levenberg–Marquardt starts (0 = single start from the
    /// initial guess).
    pub lm_restarts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub solver: Solver,
    pub seed: u64,
    pub theta_hat: Vec<f64>,
    pub rmse: f64,
    /// Mean absolute error per cell (not a paper metric).
    pub mae: f64,
    pub n_objective_evals: usize,
    pub n_jacobian_evals: usize,
    pub iterations: usize,
    pub wall_time_ms: f64,
    pub converged: bool,
}

/// Calibrates `net` to `target` starting from raw parameters `theta_init`
/// (ignored by differential evolution, which samples the whole box).
pub fn calibrate(
    net: &PricingNet,
    target: &CalibrationTarget,
    solver: Solver,
    theta_init: &[f64],
    seed: u64,
    settings: &SolverSettings,
) -> Result<CalibrationResult> {
    let problem = NetProblem::new(net, target)?;
    let mut clamped = theta_init.to_vec();
    net.bounds().clamp(&mut clamped);
    let z0 = crate::models::normalize_theta(&clamped, net.bounds())?;
    let start = Instant::now();
    let res = match solver {
        Solver::LevenbergMarquardt => {
            let mut best = levenberg_marquardt(&problem, &z0, &settings.lm);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..settings.lm_restarts {
                let z: Vec<f64> = (0..z0.len()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let r = levenberg_marquardt(&problem, &z, &settings.lm);
                let evals = best.n_objective_evals + r.n_objective_evals;
                let jacs = best.n_jacobian_evals + r.n_jacobian_evals;
                let iters = best.iterations + r.iterations;
                if r.objective < best.objective {
                    best = r;
                }
                best.n_objective_evals = evals;
                best.n_jacobian_evals = jacs;
                best.iterations = iters;
            }
            best
        }
        Solver::GradientDescent => gradient_descent(&problem, &z0, &settings.gd),
        Solver::NelderMead => nelder_mead(&problem, &z0, &settings.nm),
        Solver::DifferentialEvolution => differential_evolution(&problem, seed, &settings.de),
    };
    let wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    let theta_hat = net.denormalize(&res.x)?;
    let surface = target.model_values(&net.surface_normalized(&res.x));
    Ok(CalibrationResult {
        solver,
        seed,
        theta_hat,
        rmse: rmse(&surface, &target.surface),
        mae: mae(&surface, &target.surface),
        n_objective_evals: res.n_objective_evals,
        n_jacobian_evals: res.n_jacobian_evals,
        iterations: res.iterations,
        wall_time_ms,
        converged: res.converged,
    })
}
