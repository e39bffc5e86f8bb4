//! Model definitions, parameter boxes and the forward variance curve.
//!
//! Every model exposes a flat parameter vector `θ` whose layout is fixed:
//!
//! | model            | layout                          |
//! |------------------|---------------------------------|
//! | rough Bergomi    | `ξ₁..ξₙ, ν, ρ, H`               |
//! | 1-factor Bergomi | `ξ₁..ξₙ, η, ρ, β`               |
//! | Heston           | `a, b, v, ρ`                    |
//!
//! Heston's initial variance and spot are configuration rather than part of
//! `θ`; the initial variance defaults to the long-run level `b`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The eight training maturities, also the default forward variance knots.
pub const DEFAULT_KNOTS: [f64; 8] = [0.1, 0.3, 0.6, 0.9, 1.2, 1.5, 1.8, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    RoughBergomi,
    OneFactorBergomi,
    Heston,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::RoughBergomi => "rough_bergomi",
            ModelKind::OneFactorBergomi => "one_factor_bergomi",
            ModelKind::Heston => "heston",
        }
    }

    /// Training box used when a run does not supply its own.
    pub fn default_bounds(self) -> ParamBounds {
        let n_xi = DEFAULT_KNOTS.len();
        match self {
            ModelKind::RoughBergomi => {
                let mut lo = vec![0.01; n_xi];
                let mut hi = vec![0.16; n_xi];
                lo.extend([0.5, -0.95, 0.025]);
                hi.extend([4.0, -0.1, 0.5]);
                ParamBounds { lower: lo, upper: hi }
            }
            ModelKind::OneFactorBergomi => {
                let mut lo = vec![0.01; n_xi];
                let mut hi = vec![0.16; n_xi];
                lo.extend([0.5, -0.95, 0.0]);
                hi.extend([4.0, -0.1, 10.0]);
                ParamBounds { lower: lo, upper: hi }
            }
            // a, b, v, rho. Draws violating Feller are rejected by the sampler.
            ModelKind::Heston => ParamBounds {
                lower: vec![0.5, 0.01, 0.1, -0.95],
                upper: vec![5.0, 0.16, 1.0, -0.1],
            },
        }
    }

    pub fn param_names(self, n_xi: usize) -> Vec<String> {
        let xi = (1..=n_xi).map(|i| format!("xi{i}"));
        match self {
            ModelKind::RoughBergomi => xi.chain(["nu", "rho", "hurst"].map(String::from)).collect(),
            ModelKind::OneFactorBergomi => {
                xi.chain(["eta", "rho", "beta"].map(String::from)).collect()
            }
            ModelKind::Heston => ["a", "b", "v", "rho"].map(String::from).to_vec(),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rough_bergomi" | "rbergomi" => Ok(ModelKind::RoughBergomi),
            "one_factor_bergomi" | "bergomi" | "1f_bergomi" => Ok(ModelKind::OneFactorBergomi),
            "heston" => Ok(ModelKind::Heston),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Piecewise-constant forward variance curve on `(t_{i-1}, t_i]`, `t_0 = 0`,
/// extended flat beyond the last knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardVarianceCurve {
    knot_times: Vec<f64>,
    values: Vec<f64>,
}

impl ForwardVarianceCurve {
    pub fn new(knot_times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knot_times.is_empty() || knot_times.len() != values.len() {
            return Err(Error::InvalidParams(format!(
                "curve needs matching nonempty knots/values, got {} and {}",
                knot_times.len(),
                values.len()
            )));
        }
        if !(knot_times[0] > 0.0) || knot_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParams(
                "knot times must be positive and strictly increasing".into(),
            ));
        }
        if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParams("forward variances must be positive".into()));
        }
        Ok(Self { knot_times, values })
    }

    pub fn flat(knot_times: Vec<f64>, value: f64) -> Result<Self> {
        let values = vec![value; knot_times.len()];
        Self::new(knot_times, values)
    }

    pub fn knot_times(&self) -> &[f64] {
        &self.knot_times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at `t > 0`.
    pub fn at(&self, t: f64) -> Result<f64> {
        forward_variance_at(self, t)
    }

    /// Unchecked lookup used in the simulation loops; `t` must be positive.
    pub(crate) fn value_at(&self, t: f64) -> f64 {
        let idx = self.knot_times.partition_point(|&k| k < t);
        self.values[idx.min(self.values.len() - 1)]
    }
}

/// `ξ₀(t)` for the unique interval `(t_{i-1}, t_i]` containing `t`.
pub fn forward_variance_at(curve: &ForwardVarianceCurve, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("forward variance needs t > 0, got {t}")));
    }
    Ok(curve.value_at(t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RBergomiParams {
    pub xi: ForwardVarianceCurve,
    pub nu: f64,
    pub rho: f64,
    pub hurst: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneFactorBergomiParams {
    pub xi: ForwardVarianceCurve,
    pub eta: f64,
    pub rho: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HestonParams {
    pub a: f64,
    pub b: f64,
    pub v: f64,
    pub rho: f64,
    pub v0: f64,
    pub s0: f64,
}

impl HestonParams {
    /// `2ab > v²`.
    pub fn satisfies_feller(&self) -> bool {
        feller_holds(self.a, self.b, self.v)
    }
}

pub fn feller_holds(a: f64, b: f64, v: f64) -> bool {
    2.0 * a * b > v * v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelParams {
    RoughBergomi(RBergomiParams),
    OneFactorBergomi(OneFactorBergomiParams),
    Heston(HestonParams),
}

fn check_rho(rho: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::InvalidParams(format!("rho = {rho} outside [-1, 1]")));
    }
    Ok(())
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::RoughBergomi(_) => ModelKind::RoughBergomi,
            ModelParams::OneFactorBergomi(_) => ModelKind::OneFactorBergomi,
            ModelParams::Heston(_) => ModelKind::Heston,
        }
    }

    /// Builds parameters from the flat layout. Bergomi-type models take their
    /// forward variance knots from `knot_times`; Heston ignores them and uses
    /// `v0 = b`, `s0 = 1`.
    pub fn from_flat(kind: ModelKind, theta: &[f64], knot_times: &[f64]) -> Result<Self> {
        let n_xi = knot_times.len();
        let expect = match kind {
            ModelKind::Heston => 4,
            _ => n_xi + 3,
        };
        if theta.len() != expect {
            return Err(Error::InvalidParams(format!(
                "{} expects {expect} parameters, got {}",
                kind.name(),
                theta.len()
            )));
        }
        let params = match kind {
            ModelKind::RoughBergomi => ModelParams::RoughBergomi(RBergomiParams {
                xi: ForwardVarianceCurve::new(knot_times.to_vec(), theta[..n_xi].to_vec())?,
                nu: theta[n_xi],
                rho: theta[n_xi + 1],
                hurst: theta[n_xi + 2],
            }),
            ModelKind::OneFactorBergomi => ModelParams::OneFactorBergomi(OneFactorBergomiParams {
                xi: ForwardVarianceCurve::new(knot_times.to_vec(), theta[..n_xi].to_vec())?,
                eta: theta[n_xi],
                rho: theta[n_xi + 1],
                beta: theta[n_xi + 2],
            }),
            ModelKind::Heston => ModelParams::Heston(HestonParams {
                a: theta[0],
                b: theta[1],
                v: theta[2],
                rho: theta[3],
                v0: theta[1],
                s0: 1.0,
            }),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            ModelParams::RoughBergomi(p) => {
                let mut v = p.xi.values().to_vec();
                v.extend([p.nu, p.rho, p.hurst]);
                v
            }
            ModelParams::OneFactorBergomi(p) => {
                let mut v = p.xi.values().to_vec();
                v.extend([p.eta, p.rho, p.beta]);
                v
            }
            ModelParams::Heston(p) => vec![p.a, p.b, p.v, p.rho],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelParams::RoughBergomi(p) => {
                check_rho(p.rho)?;
                if !(p.nu >= 0.0) {
                    return Err(Error::InvalidParams(format!("nu = {} must be >= 0", p.nu)));
                }
                if !(p.hurst > 0.0 && p.hurst < 1.0) {
                    return Err(Error::InvalidParams(format!("H = {} outside (0, 1)", p.hurst)));
                }
            }
            ModelParams::OneFactorBergomi(p) => {
                check_rho(p.rho)?;
                if !(p.eta >= 0.0) || !(p.beta >= 0.0) {
                    return Err(Error::InvalidParams(format!(
                        "eta = {}, beta = {} must be >= 0",
                        p.eta, p.beta
                    )));
                }
            }
            ModelParams::Heston(p) => {
                check_rho(p.rho)?;
                if !(p.a > 0.0 && p.b > 0.0 && p.v > 0.0 && p.v0 > 0.0 && p.s0 > 0.0) {
                    return Err(Error::InvalidParams(
                        "Heston a, b, v, v0, s0 must be positive".into(),
                    ));
                }
                if !p.satisfies_feller() {
                    return Err(Error::InvalidParams(format!(
                        "Feller condition 2ab > v^2 violated: {} <= {}",
                        2.0 * p.a * p.b,
                        p.v * p.v
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn rho(&self) -> f64 {
        match self {
            ModelParams::RoughBergomi(p) => p.rho,
            ModelParams::OneFactorBergomi(p) => p.rho,
            ModelParams::Heston(p) => p.rho,
        }
    }

    pub fn spot(&self) -> f64 {
        match self {
            ModelParams::Heston(p) => p.s0,
            _ => 1.0,
        }
    }
}

/// Box `[θ_min, θ_max]` carried by every training or calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParamBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return Err(Error::Config("bounds need matching nonempty vectors".into()));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("bound {i}: need lower < upper, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| *lo <= *x && *x <= *hi)
    }

    pub fn clamp(&self, theta: &mut [f64]) {
        for (x, (lo, hi)) in theta.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *x = x.clamp(*lo, *hi);
        }
    }
}

/// Maps `θ` into `[-1, 1]ⁿ` via `(2θ − (θmax + θmin)) / (θmax − θmin)`.
pub fn normalize_theta(theta: &[f64], bounds: &ParamBounds) -> Result<Vec<f64>> {
    if theta.len() != bounds.dim() {
        return Err(Error::Domain(format!(
            "theta has {} entries, bounds have {}",
            theta.len(),
            bounds.dim()
        )));
    }
    theta
        .iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .enumerate()
        .map(|(index, (&x, (&lo, &hi)))| {
            if !(lo <= x && x <= hi) {
                return Err(Error::OutOfBox { index, value: x, lo, hi });
            }
            Ok(norm_coord(x, lo, hi))
        })
        .collect()
}

/// Inverse of [`normalize_theta`].
pub fn denormalize_theta(z: &[f64], bounds: &ParamBounds) -> Result<Vec<f64>> {
    if z.len() != bounds.dim() {
        return Err(Error::Domain(format!(
            "z has {} entries, bounds have {}",
            z.len(),
            bounds.dim()
        )));
    }
    z.iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|(&zi, (&lo, &hi))| {
            if !(-1.0..=1.0).contains(&zi) {
                return Err(Error::Domain(format!("normalized coordinate {zi} outside [-1, 1]")));
            }
            Ok(denorm_coord(zi, lo, hi))
        })
        .collect()
}

#[inline]
pub(crate) fn norm_coord(x: f64, lo: f64, hi: f64) -> f64 {
    if x == lo {
        -1.0
    } else if x == hi {
        1.0
    } else {
        (2.0 * x - (hi + lo)) / (hi - lo)
    }
}

pub(crate) fn denorm_coord(z: f64, lo: f64, hi: f64) -> f64 {
    // Endpoints are returned exactly.
    if z == -1.0 {
        lo
    } else if z == 1.0 {
        hi
    } else {
        0.5 * (z * (hi - lo) + (hi + lo))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn default_curve(values: Vec<f64>) -> ForwardVarianceCurve {
        ForwardVarianceCurve::new(DEFAULT_KNOTS.to_vec(), values).unwrap()
    }

    #[test]
    fn constant_curve_before_first_knot() {
        let c = default_curve(vec![0.04; 8]);
        assert_eq!(forward_variance_at(&c, 0.05).unwrap(), 0.04);
    }

    #[test]
    fn first_knot_is_right_closed() {
        let c = default_curve((1..=8).map(|i| 0.01 * i as f64).collect());
        assert_eq!(c.at(0.1).unwrap(), 0.01);
        assert_eq!(c.at(0.1 + 1e-12).unwrap(), 0.02);
    }

    #[test]
    fn interval_lookup_matches_linear_scan() {
        let vals: Vec<f64> = (1..=8).map(|i| 0.01 * i as f64).collect();
        let c = default_curve(vals.clone());
        assert_eq!(c.at(1.0).unwrap(), vals[4]);
        // Direct scan oracle over a dense grid, including points past the last knot.
        for k in 1..=2500 {
            let t = k as f64 * 1e-3;
            let mut expected = *vals.last().unwrap();
            let mut prev = 0.0;
            for (i, &knot) in DEFAULT_KNOTS.iter().enumerate() {
                if prev < t && t <= knot {
                    expected = vals[i];
                    break;
                }
                prev = knot;
            }
            assert_eq!(c.at(t).unwrap(), expected, "t = {t}");
        }
    }

    #[test]
    fn nonpositive_time_is_domain_error() {
        let c = default_curve(vec![0.04; 8]);
        assert!(matches!(c.at(0.0), Err(Error::Domain(_))));
        assert!(matches!(c.at(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn curve_rejects_bad_input() {
        assert!(ForwardVarianceCurve::new(vec![0.1, 0.1], vec![0.04, 0.04]).is_err());
        assert!(ForwardVarianceCurve::new(vec![0.0, 0.1], vec![0.04, 0.04]).is_err());
        assert!(ForwardVarianceCurve::new(vec![0.1], vec![0.0]).is_err());
        assert!(ForwardVarianceCurve::new(vec![0.1, 0.2], vec![0.04]).is_err());
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let b = ModelKind::RoughBergomi.default_bounds();
        assert!(normalize_theta(&b.lower, &b).unwrap().iter().all(|&z| z == -1.0));
        assert!(normalize_theta(&b.upper, &b).unwrap().iter().all(|&z| z == 1.0));
        let mid = normalize_theta(&b.midpoint(), &b).unwrap();
        assert!(mid.iter().all(|z| z.abs() < 1e-15));
    }

    #[test]
    fn normalize_hurst_example() {
        let b = ParamBounds::new(vec![0.025], vec![0.5]).unwrap();
        let z = normalize_theta(&[0.1], &b).unwrap()[0];
        assert_relative_eq!(z, (0.2 - 0.525) / 0.475, max_relative = 1e-15);
        assert_relative_eq!(z, -0.684_210_526_315_789_5, max_relative = 1e-14);
    }

    #[test]
    fn out_of_box_errors() {
        let b = ParamBounds::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            normalize_theta(&[0.5, 1.5], &b),
            Err(Error::OutOfBox { index: 1, .. })
        ));
        assert!(matches!(denormalize_theta(&[0.0, -1.01], &b), Err(Error::Domain(_))));
    }

    #[test]
    fn denormalize_endpoints() {
        let b = ModelKind::OneFactorBergomi.default_bounds();
        let n = b.dim();
        assert_eq!(denormalize_theta(&vec![-1.0; n], &b).unwrap(), b.lower);
        assert_eq!(denormalize_theta(&vec![1.0; n], &b).unwrap(), b.upper);
        let mid = denormalize_theta(&vec![0.0; n], &b).unwrap();
        for (m, e) in mid.iter().zip(b.midpoint()) {
            assert_relative_eq!(*m, e, max_relative = 1e-15);
        }
    }

    #[test]
    fn feller_check() {
        assert!(!feller_holds(1.0, 0.04, 0.3));
        assert!(feller_holds(2.0, 0.04, 0.3));
        let theta = [1.0, 0.04, 0.3, -0.5];
        assert!(ModelParams::from_flat(ModelKind::Heston, &theta, &[]).is_err());
        let theta = [2.0, 0.04, 0.3, -0.5];
        let p = ModelParams::from_flat(ModelKind::Heston, &theta, &[]).unwrap();
        match p {
            ModelParams::Heston(h) => assert_eq!(h.v0, 0.04),
            _ => unreachable!(),
        }
    }

    #[test]
    fn flat_view_round_trips() {
        for kind in [ModelKind::RoughBergomi, ModelKind::OneFactorBergomi, ModelKind::Heston] {
            let b = kind.default_bounds();
            let mut theta = b.midpoint();
            if kind == ModelKind::Heston {
                theta = vec![3.0, 0.1, 0.5, -0.5];
            }
            let p = ModelParams::from_flat(kind, &theta, &DEFAULT_KNOTS).unwrap();
            assert_eq!(p.to_flat(), theta);
            assert_eq!(p.kind(), kind);
            assert_eq!(kind.param_names(8).len(), b.dim());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn normalize_denormalize_inverse(
            lo in -100.0f64..100.0,
            width in 1e-3f64..50.0,
            u in 0.0f64..=1.0,
        ) {
            let hi = lo + width;
            let b = ParamBounds::new(vec![lo], vec![hi]).unwrap();
            let x = (lo + u * width).min(hi);
            let z = normalize_theta(&[x], &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&z[0]));
            let back = denormalize_theta(&z, &b).unwrap()[0];
            prop_assert!((back - x).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}
