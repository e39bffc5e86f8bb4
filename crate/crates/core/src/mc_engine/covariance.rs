//! Joint covariance of the Brownian driver `Z` and the Volterra process
//! `X_t = √(2H) ∫₀ᵗ (t−u)^{H−½} dZ_u` on a time grid, and its factorization.

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gauss_kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for i in 0..7 {
        let dx = h * XGK[i];
        let s = f(c - dx) + f(c + dx);
        kronrod += WGK[i] * s;
        if i % 2 == 1 {
            gauss += WG[i / 2] * s;
        }
    }
    (kronrod * h, (kronrod - gauss).abs() * h)
}

fn adaptive<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (val, err) = gauss_kronrod(f, a, b);
    if err <= tol || depth == 0 {
        return val;
    }
    let m = 0.5 * (a + b);
    adaptive(f, a, m, 0.5 * tol, depth - 1) + adaptive(f, m, b, 0.5 * tol, depth - 1)
}

/// Adaptive Gauss–Kronrod (7/15) quadrature to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    adaptive(&f, a, b, tol, 40)
}

/// `Cov[X_t, Z_s]`.
pub fn cov_volterra_brownian(t: f64, s: f64, hurst: f64) -> f64 {
    let hp = hurst + 0.5;
    let m = s.min(t);
    (2.0 * hurst).sqrt() / hp * (t.powf(hp) - (t - m).powf(hp))
}

/// `Cov[X_t, X_s] = 2H ∫₀^{s∧t} (t−u)^{H−½}(s−u)^{H−½} du`.
///
/// With `s ≤ t` the substitution `u = s − w^{1/(H+½)}` removes the endpoint
/// singularity and leaves `(2H/(H+½)) ∫₀^{s^{H+½}} (t − s + w^{1/(H+½)})^{H−½} dw`.
pub fn cov_volterra(t: f64, s: f64, hurst: f64) -> f64 {
    let (lo, hi) = if s <= t { (s, t) } else { (t, s) };
    if lo <= 0.0 {
        return 0.0;
    }
    if lo == hi {
        return lo.powf(2.0 * hurst);
    }
    let hp = hurst + 0.5;
    let hm = hurst - 0.5;
    let gap = hi - lo;
    let inv = 1.0 / hp;
    let upper = lo.powf(hp);
    let integral = integrate(|w| (gap + w.powf(inv)).powf(hm), 0.0, upper, 1e-10);
    2.0 * hurst / hp * integral
}

/// Covariance of `(Z_{t₁..tₙ}, X_{t₁..tₙ})`, ordered with the `n` Brownian
/// values first.
#[derive(Debug, Clone)]
pub struct VolterraCovariance {
    pub times: Vec<f64>,
    pub hurst: f64,
    pub matrix: DMatrix<f64>,
}

impl VolterraCovariance {
    pub fn n(&self) -> usize {
        self.times.len()
    }

    /// Lower Cholesky factor with diagonal jitter escalation up to `1e-10`.
    pub fn factor(&self) -> Result<DMatrix<f64>> {
        cholesky_with_jitter(&self.matrix)
    }
}

pub fn volterra_covariance(t_grid: &[f64], hurst: f64) -> Result<VolterraCovariance> {
    check_grid(t_grid)?;
    if !(hurst > 0.0 && hurst < 1.0) {
        return Err(Error::Domain(format!("Hurst index {hurst} outside (0, 1)")));
    }
    let n = t_grid.len();
    let mut m = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..=i {
            let (ti, tj) = (t_grid[i], t_grid[j]);
            let zz = ti.min(tj);
            m[(i, j)] = zz;
            m[(j, i)] = zz;
            let xx = cov_volterra(ti, tj, hurst);
            m[(n + i, n + j)] = xx;
            m[(n + j, n + i)] = xx;
        }
        for j in 0..n {
            let xz = cov_volterra_brownian(t_grid[i], t_grid[j], hurst);
            m[(n + i, j)] = xz;
            m[(j, n + i)] = xz;
        }
    }
    Ok(VolterraCovariance { times: t_grid.to_vec(), hurst, matrix: m })
}

pub(crate) fn check_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.is_empty() || !(t_grid[0] > 0.0) || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Domain("time grid must be positive and strictly increasing".into()));
    }
    Ok(())
}

/// Tries a plain Cholesky, then adds `jitter · mean(diag)` for jitter in
/// `1e-14 .. 1e-10`.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let diag_mean = (0..n).map(|i| m[(i, i)]).sum::<f64>() / n.max(1) as f64;
    let scale = if diag_mean > 0.0 { diag_mean } else { 1.0 };
    let mut jitter = 0.0;
    loop {
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += jitter * scale;
        }
        if let Some(c) = Cholesky::new(a) {
            return Ok(c.l());
        }
        jitter = if jitter == 0.0 { 1e-14 } else { jitter * 10.0 };
        if jitter > 1e-10 * (1.0 + 1e-9) {
            let (mut dmin, mut dmax) = (f64::INFINITY, 0.0f64);
            for i in 0..n {
                dmin = dmin.min(m[(i, i)]);
                dmax = dmax.max(m[(i, i)]);
            }
            return Err(Error::Factorization { jitter: 1e-10, condition: dmax / dmin.max(f64::MIN_POSITIVE) });
        }
    }
}

/// Sampling factor for `(ΔZ, X)` that exploits `X_{t_k}` being independent
/// of Brownian increments after `t_k`.
///
/// Row `k` of `x_from_dz` holds the loadings of `X_{t_k}` on the standardized
/// increments `e_1..e_k`; `x_resid` is the lower Cholesky factor of the
/// covariance of `X` conditional on all increments.
#[derive(Debug, Clone)]
pub(crate) struct VolterraSampler {
    pub sqrt_dt: Vec<f64>,
    /// Packed lower triangle, row `k` has `k + 1` entries.
    pub x_from_dz: Vec<f64>,
    pub x_resid: Vec<f64>,
    pub n: usize,
}

impl VolterraSampler {
    pub fn new(t_grid: &[f64], hurst: f64) -> Result<Self> {
        check_grid(t_grid)?;
        let n = t_grid.len();
        let mut sqrt_dt = Vec::with_capacity(n);
        let mut prev = 0.0;
        for &t in t_grid {
            sqrt_dt.push((t - prev).sqrt());
            prev = t;
        }
        // B[k][j] = Cov(X_{t_k}, ΔZ_j) / √Δt_j for j ≤ k.
        let mut b = DMatrix::<f64>::zeros(n, n);
        for k in 0..n {
            let mut prev_cov = 0.0;
            for j in 0..=k {
                let c = cov_volterra_brownian(t_grid[k], t_grid[j], hurst);
                b[(k, j)] = (c - prev_cov) / sqrt_dt[j];
                prev_cov = c;
            }
        }
        let mut cond = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let xx = cov_volterra(t_grid[i], t_grid[j], hurst);
                let proj: f64 = (0..=j).map(|l| b[(i, l)] * b[(j, l)]).sum();
                let v = xx - proj;
                cond[(i, j)] = v;
                cond[(j, i)] = v;
            }
        }
        let l = cholesky_with_jitter(&cond)?;
        let mut x_from_dz = Vec::with_capacity(n * (n + 1) / 2);
        let mut x_resid = Vec::with_capacity(n * (n + 1) / 2);
        for k in 0..n {
            for j in 0..=k {
                x_from_dz.push(b[(k, j)]);
                x_resid.push(l[(k, j)]);
            }
        }
        Ok(Self { sqrt_dt, x_from_dz, x_resid, n })
    }

    /// Fills `dz` with Brownian increments and `x` with the Volterra values
    /// from `2n` standard normals (`e` for the increments, `f` for the
    /// residual).
    #[inline]
    pub fn sample(&self, e: &[f64], f: &[f64], dz: &mut [f64], x: &mut [f64]) {
        let n = self.n;
        for k in 0..n {
            dz[k] = self.sqrt_dt[k] * e[k];
        }
        let mut off = 0;
        for k in 0..n {
            let row_b = &self.x_from_dz[off..off + k + 1];
            let row_l = &self.x_resid[off..off + k + 1];
            x[k] = dot2(row_b, &e[..=k], row_l, &f[..=k]);
            off += k + 1;
        }
    }
}

/// `a·e + b·f` with four independent accumulators.
#[inline]
fn dot2(a: &[f64], e: &[f64], b: &[f64], f: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ac, ar) = (a.chunks_exact(4), a.chunks_exact(4).remainder());
    let (ec, er) = (e.chunks_exact(4), e.chunks_exact(4).remainder());
    let (bc, br) = (b.chunks_exact(4), b.chunks_exact(4).remainder());
    let (fc, fr) = (f.chunks_exact(4), f.chunks_exact(4).remainder());
    for (((a4, e4), b4), f4) in ac.zip(ec).zip(bc).zip(fc) {
        for l in 0..4 {
            acc[l] += a4[l] * e4[l] + b4[l] * f4[l];
        }
    }
    let mut tail = 0.0;
    for l in 0..ar.len() {
        tail += ar[l] * er[l] + br[l] * fr[l];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadrature_polynomial_and_singular() {
        assert_relative_eq!(integrate(|x| x * x, 0.0, 3.0, 1e-12), 9.0, max_relative = 1e-13);
        // ∫₀¹ x^{-0.4} dx = 1/0.6
        assert_relative_eq!(integrate(|x: f64| x.powf(-0.4), 0.0, 1.0, 1e-10), 1.0 / 0.6, max_relative = 1e-7);
    }

    #[test]
    fn brownian_limit_at_half() {
        let grid = [0.1, 0.25, 0.5, 1.0, 2.0];
        let c = volterra_covariance(&grid, 0.5).unwrap();
        let n = grid.len();
        for i in 0..n {
            for j in 0..n {
                let m = grid[i].min(grid[j]);
                assert_relative_eq!(c.matrix[(n + i, n + j)], m, max_relative = 1e-9);
                assert_relative_eq!(c.matrix[(n + i, j)], m, max_relative = 1e-12);
            }
        }
        assert!(c.factor().is_ok());
    }

    #[test]
    fn unit_time_variance() {
        assert_relative_eq!(cov_volterra(1.0, 1.0, 0.3), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn hypergeometric_closed_form_agrees() {
        // For s < t: 2H/(H+½) s^{H+½} t^{H−½} ₂F₁(½−H, 1; 3/2+H; s/t), series summed directly.
        for &h in &[0.1, 0.3, 0.45] {
            let (s, t): (f64, f64) = (0.5, 1.0);
            let (a, b, c) = (0.5 - h, 1.0, 1.5 + h);
            let z = s / t;
            let (mut term, mut sum) = (1.0, 1.0);
            for k in 0..2000 {
                let kf = k as f64;
                term *= (a + kf) * (b + kf) / ((c + kf) * (kf + 1.0)) * z;
                sum += term;
            }
            let closed = 2.0 * h / (h + 0.5) * s.powf(h + 0.5) * t.powf(h - 0.5) * sum;
            assert_relative_eq!(cov_volterra(t, s, h), closed, max_relative = 1e-9);
        }
    }

    #[test]
    fn rough_covariance_factorizes() {
        let grid: Vec<f64> = (1..=50).map(|i| i as f64 * 0.04).collect();
        for &h in &[0.025, 0.1, 0.3, 0.45] {
            let c = volterra_covariance(&grid, h).unwrap();
            assert!(c.factor().is_ok(), "H = {h}");
            assert!(VolterraSampler::new(&grid, h).is_ok());
        }
    }

    #[test]
    fn bad_grid_is_domain_error() {
        assert!(matches!(volterra_covariance(&[0.0, 1.0], 0.2), Err(Error::Domain(_))));
        assert!(matches!(volterra_covariance(&[0.5, 0.4], 0.2), Err(Error::Domain(_))));
        assert!(matches!(volterra_covariance(&[0.5], 1.2), Err(Error::Domain(_))));
    }

    #[test]
    fn sampler_reproduces_covariance() {
        // Reassemble Cov(X) and Cov(X, Z) from the sampler loadings.
        let grid = [0.1, 0.3, 0.6, 1.0];
        let h = 0.2;
        let s = VolterraSampler::new(&grid, h).unwrap();
        let n = grid.len();
        let row = |v: &Vec<f64>, k: usize| -> Vec<f64> {
            let off = k * (k + 1) / 2;
            let mut r = v[off..off + k + 1].to_vec();
            r.resize(n, 0.0);
            r
        };
        for i in 0..n {
            for j in 0..n {
                let (bi, bj) = (row(&s.x_from_dz, i), row(&s.x_from_dz, j));
                let (li, lj) = (row(&s.x_resid, i), row(&s.x_resid, j));
                let cov: f64 = (0..n).map(|l| bi[l] * bj[l] + li[l] * lj[l]).sum();
                assert_relative_eq!(cov, cov_volterra(grid[i], grid[j], h), max_relative = 1e-9);
                let xz: f64 = (0..=j).map(|l| bi[l] * s.sqrt_dt[l]).sum();
                assert_relative_eq!(xz, cov_volterra_brownian(grid[i], grid[j], h), max_relative = 1e-12);
            }
        }
    }

    /// `X_t ≈ √(2H) Σ_j (t − m_j)^{H−½} ΔZ_j` on `m` sub-steps of `[0, s]`,
    /// with the singular factor of the `X_s` kernel integrated exactly over
    /// each cell.
    fn convolution_oracle(t: f64, s: f64, h: f64, m: usize) -> (f64, f64) {
        let du = s / m as f64;
        let hp = h + 0.5;
        let mut xx = 0.0;
        let mut xz = 0.0;
        for j in 0..m {
            let (a, b) = (j as f64 * du, (j + 1) as f64 * du);
            let mid = 0.5 * (a + b);
            let ks = ((s - a).powf(hp) - (s - b).powf(hp)) / hp;
            xx += (t - mid).powf(h - 0.5) * ks;
            xz += ((t - a).powf(hp) - (t - b).powf(hp)) / hp;
        }
        (2.0 * h * xx, (2.0 * h).sqrt() * xz)
    }

    #[test]
    fn discrete_convolution_oracle() {
        for &h in &[0.1, 0.3, 0.45] {
            for &(t, s) in &[(1.0, 0.5), (2.0, 0.1), (0.6, 0.3), (1.8, 1.5)] {
                let (xx, xz) = convolution_oracle(t, s, h, 100_000);
                assert_relative_eq!(cov_volterra(t, s, h), xx, max_relative = 1e-3);
                assert_relative_eq!(cov_volterra_brownian(t, s, h), xz, max_relative = 1e-3);
            }
        }
    }
}
