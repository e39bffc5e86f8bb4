//! Per-path variance and spot dynamics for the three models.

use rand::Rng;
use rand_distr::StandardNormal;

use super::covariance::VolterraSampler;
use crate::error::{Error, Result};
use crate::models::ModelParams;

/// Simulation times `t_1 < … < t_n` (with `t_0 = 0` implicit): a uniform grid
/// merged with every maturity so each maturity is an exact grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub times: Vec<f64>,
    pub dt: Vec<f64>,
    /// `times[maturity_idx[m]] == maturities[m]`.
    pub maturity_idx: Vec<usize>,
}

impl TimeGrid {
    pub fn new(maturities: &[f64], n_steps: usize) -> Result<Self> {
        if maturities.is_empty() || n_steps == 0 {
            return Err(Error::Domain("time grid needs maturities and at least one step".into()));
        }
        let t_max = maturities.iter().cloned().fold(0.0, f64::max);
        if !(t_max > 0.0) {
            return Err(Error::Domain("maturities must be positive".into()));
        }
        let mut pts: Vec<f64> = (1..=n_steps).map(|i| t_max * i as f64 / n_steps as f64).collect();
        pts.extend_from_slice(maturities);
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Merge points that coincide up to rounding, keeping maturities exact.
        let snap = 1e-9 * t_max;
        let mut times: Vec<f64> = Vec::with_capacity(pts.len());
        for p in pts {
            match times.last_mut() {
                Some(last) if (p - *last).abs() <= snap => {
                    if maturities.contains(&p) {
                        *last = p;
                    }
                }
                _ => times.push(p),
            }
        }
        let maturity_idx = maturities
            .iter()
            .map(|m| times.iter().position(|t| t == m).expect("maturity on grid"))
            .collect();
        let mut dt = Vec::with_capacity(times.len());
        let mut prev = 0.0;
        for &t in &times {
            dt.push(t - prev);
            prev = t;
        }
        Ok(Self { times, dt, maturity_idx })
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    /// Left end of step `k`.
    #[inline]
    pub fn left(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.times[k - 1]
        }
    }
}

#[derive(Debug, Clone)]
enum Dynamics {
    Rough {
        sampler: VolterraSampler,
        nu: f64,
        xi_step: Vec<f64>,
        /// `½ν² t_k^{2H}` at each left point.
        compensator: Vec<f64>,
    },
    OneFactor {
        eta: f64,
        xi_step: Vec<f64>,
        compensator: Vec<f64>,
        decay: Vec<f64>,
        corr_load: Vec<f64>,
        resid_sd: Vec<f64>,
    },
    Heston {
        a: f64,
        b: f64,
        v: f64,
        v0: f64,
    },
}

/// Prepared simulator: all parameter-dependent setup (covariance factors,
/// OU step constants) happens once here and is shared read-only by every
/// path block.
#[derive(Debug, Clone)]
pub struct PathSimulator {
    pub grid: TimeGrid,
    pub rho: f64,
    pub spot: f64,
    dynamics: Dynamics,
}

/// Scratch buffers reused across paths in a block.
#[derive(Debug, Clone)]
pub struct Workspace {
    normals: Vec<f64>,
    x: Vec<f64>,
    /// Brownian increments of the variance driver on each step.
    pub dz: Vec<f64>,
    /// Variance used on step `k` (left-point, truncated at zero for Heston).
    pub var: Vec<f64>,
    /// Independent normals for the orthogonal spot driver.
    pub perp: Vec<f64>,
}

impl Workspace {
    pub fn new(n: usize) -> Self {
        Self {
            normals: vec![0.0; 2 * n],
            x: vec![0.0; n],
            dz: vec![0.0; n],
            var: vec![0.0; n],
            perp: vec![0.0; n],
        }
    }
}

/// `(1 − e^{−2βt}) / (2β)`, the variance of `∫₀ᵗ e^{−β(t−s)} dZ_s`.
pub(crate) fn ou_variance(beta: f64, t: f64) -> f64 {
    if beta * t < 1e-12 {
        t
    } else {
        -(-2.0 * beta * t).exp_m1() / (2.0 * beta)
    }
}

/// `Cov(∫ₜ^{t+Δ} e^{−β(t+Δ−s)} dZ_s, Z_{t+Δ} − Z_t) = (1 − e^{−βΔ}) / β`.
fn ou_cross(beta: f64, dt: f64) -> f64 {
    if beta * dt < 1e-12 {
        dt
    } else {
        -(-beta * dt).exp_m1() / beta
    }
}

impl PathSimulator {
    pub fn new(params: &ModelParams, grid: TimeGrid) -> Result<Self> {
        params.validate()?;
        let n = grid.n();
        let dynamics = match params {
            ModelParams::RoughBergomi(p) => {
                let sampler = VolterraSampler::new(&grid.times, p.hurst)?;
                let xi_step = grid.times.iter().map(|&t| p.xi.value_at(t)).collect();
                let compensator = (0..n)
                    .map(|k| 0.5 * p.nu * p.nu * grid.left(k).powf(2.0 * p.hurst))
                    .collect();
                Dynamics::Rough { sampler, nu: p.nu, xi_step, compensator }
            }
            ModelParams::OneFactorBergomi(p) => {
                let xi_step = grid.times.iter().map(|&t| p.xi.value_at(t)).collect();
                let compensator = (0..n)
                    .map(|k| 0.5 * p.eta * p.eta * ou_variance(p.beta, grid.left(k)))
                    .collect();
                let mut decay = Vec::with_capacity(n);
                let mut corr_load = Vec::with_capacity(n);
                let mut resid_sd = Vec::with_capacity(n);
                for &dt in &grid.dt {
                    decay.push((-p.beta * dt).exp());
                    let var_ou = ou_variance(p.beta, dt);
                    let cross = ou_cross(p.beta, dt);
                    corr_load.push(cross / dt.sqrt());
                    resid_sd.push((var_ou - cross * cross / dt).max(0.0).sqrt());
                }
                Dynamics::OneFactor { eta: p.eta, xi_step, compensator, decay, corr_load, resid_sd }
            }
            ModelParams::Heston(p) => Dynamics::Heston { a: p.a, b: p.b, v: p.v, v0: p.v0 },
        };
        Ok(Self { grid, rho: params.rho(), spot: params.spot(), dynamics })
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n()
    }

    /// Number of normals consumed by [`Self::variance_path`].
    fn n_variance_normals(&self) -> usize {
        match self.dynamics {
            Dynamics::Heston { .. } => self.grid.n(),
            _ => 2 * self.grid.n(),
        }
    }

    /// Draws the normals for one variance path; with `negate` the previous
    /// draw is reused with flipped sign (antithetic partner).
    pub fn draw<R: Rng>(&self, rng: &mut R, ws: &mut Workspace, negate: bool, with_perp: bool) {
        let m = self.n_variance_normals();
        let n = self.grid.n();
        if negate {
            ws.normals[..m].iter_mut().for_each(|z| *z = -*z);
            if with_perp {
                ws.perp[..n].iter_mut().for_each(|z| *z = -*z);
            }
        } else {
            for z in &mut ws.normals[..m] {
                *z = rng.sample(StandardNormal);
            }
            if with_perp {
                for z in &mut ws.perp[..n] {
                    *z = rng.sample(StandardNormal);
                }
            }
        }
    }

    /// Turns the drawn normals into `ws.dz` and `ws.var`.
    pub fn variance_path(&self, ws: &mut Workspace) {
        let n = self.grid.n();
        match &self.dynamics {
            Dynamics::Rough { sampler, nu, xi_step, compensator } => {
                let (e, f) = ws.normals.split_at(n);
                sampler.sample(e, f, &mut ws.dz, &mut ws.x);
                for k in 0..n {
                    let x_left = if k == 0 { 0.0 } else { ws.x[k - 1] };
                    ws.var[k] = xi_step[k] * (nu * x_left - compensator[k]).exp();
                }
            }
            Dynamics::OneFactor { eta, xi_step, compensator, decay, corr_load, resid_sd } => {
                let (e, f) = ws.normals.split_at(n);
                let mut y = 0.0;
                for k in 0..n {
                    ws.var[k] = xi_step[k] * (eta * y - compensator[k]).exp();
                    ws.dz[k] = self.grid.dt[k].sqrt() * e[k];
                    y = decay[k] * y + corr_load[k] * e[k] + resid_sd[k] * f[k];
                }
            }
            Dynamics::Heston { a, b, v, v0 } => {
                let mut var = *v0;
                for k in 0..n {
                    let vp = var.max(0.0);
                    let dt = self.grid.dt[k];
                    let dz = dt.sqrt() * ws.normals[k];
                    ws.var[k] = vp;
                    ws.dz[k] = dz;
                    var += a * (b - vp) * dt + v * vp.sqrt() * dz;
                }
            }
        }
    }

    /// Log-Euler spot path from the current variance path; `log_s[k]` is
    /// `ln S` at `times[k]`.
    pub fn log_spot_path(&self, ws: &Workspace, log_s: &mut [f64]) {
        let rho_perp = (1.0 - self.rho * self.rho).max(0.0).sqrt();
        let mut x = self.spot.ln();
        for k in 0..self.grid.n() {
            let vol = ws.var[k].sqrt();
            let dw = self.rho * ws.dz[k] + rho_perp * self.grid.dt[k].sqrt() * ws.perp[k];
            x += -0.5 * ws.var[k] * self.grid.dt[k] + vol * dw;
            log_s[k] = x;
        }
    }
}
