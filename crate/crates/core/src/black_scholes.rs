//! Black-Scholes calls (zero rates, no dividends) and implied-vol inversion.
//!
//! Strikes are price levels `K` with spot `S₀`; `d± = (ln(S₀/K) ± σ²T/2) / (σ√T)`.
//! In-the-money calls are priced and inverted through the out-of-the-money put
//! so the time value never comes from a cancelling difference.

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

use crate::error::{Error, Result};
use crate::grid::{StrikeMaturityGrid, VolSurface};
use crate::mc_engine::PriceGridResult;
use crate::normal::norm_cdf_scaled;

pub const VOL_FLOOR: f64 = 1e-4;
pub const VOL_CAP: f64 = 5.0;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BSQuote {
    pub sigma: f64,
    pub s0: f64,
    pub strike: f64,
    pub maturity: f64,
}

impl BSQuote {
    pub fn new(sigma: f64, s0: f64, strike: f64, maturity: f64) -> Result<Self> {
        if !(sigma > 0.0 && s0 > 0.0 && strike > 0.0 && maturity > 0.0) {
            return Err(Error::Domain(format!(
                "quote fields must be positive: sigma={sigma}, s0={s0}, K={strike}, T={maturity}"
            )));
        }
        Ok(Self { sigma, s0, strike, maturity })
    }
}

/// Standard normal CDF, `½·erfc(−x/√2)`.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Inverse normal CDF by bisection; only used off the hot paths.
pub fn norm_inv(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "norm_inv needs p in (0, 1)");
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if norm_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Value of the out-of-the-money option (call for `K ≥ S₀`, put otherwise).
#[inline]
pub fn otm_value(sigma: f64, s0: f64, strike: f64, maturity: f64) -> f64 {
    let sd = sigma * maturity.sqrt();
    let lm = (s0 / strike).ln();
    let d1 = lm / sd + 0.5 * sd;
    let d2 = d1 - sd;
    if strike >= s0 {
        s0 * norm_cdf(d1) - strike * norm_cdf(d2)
    } else {
        strike * norm_cdf(-d2) - s0 * norm_cdf(-d1)
    }
    .max(0.0)
}

/// Call price for the given quote.
pub fn bs_call(quote: &BSQuote) -> f64 {
    bs_call_price(quote.sigma, quote.s0, quote.strike, quote.maturity)
}

#[inline]
pub fn bs_call_price(sigma: f64, s0: f64, strike: f64, maturity: f64) -> f64 {
    let intrinsic = (s0 - strike).max(0.0);
    intrinsic + otm_value(sigma, s0, strike, maturity)
}

/// `∂C/∂σ = S₀ φ(d₁) √T`.
pub fn bs_vega(sigma: f64, s0: f64, strike: f64, maturity: f64) -> f64 {
    let sd = sigma * maturity.sqrt();
    let d1 = (s0 / strike).ln() / sd + 0.5 * sd;
    s0 * norm_pdf(d1) * maturity.sqrt()
}

/// Out-of-the-money value relative to spot 1 (call for `K ≥ 1`, put for
/// `K < 1`) given a conditional spot `exp(log_s)`, `ln K` and total standard
/// deviation `sd = √(σ²T)`. Used by the conditional Monte Carlo estimator.
#[inline]
pub(crate) fn conditional_otm_value(log_s: f64, s: f64, ln_k: f64, strike: f64, sd: f64) -> f64 {
    let call_side = strike >= 1.0;
    if sd <= 0.0 {
        return if call_side { (s - strike).max(0.0) } else { (strike - s).max(0.0) };
    }
    let d1 = (log_s - ln_k) / sd + 0.5 * sd;
    let d2 = d1 - sd;
    let g1 = (-0.5 * d1 * d1).exp();
    let g2 = g1 * s / strike;
    if call_side {
        (s * norm_cdf_scaled(d1, g1) - strike * norm_cdf_scaled(d2, g2)).max(0.0)
    } else {
        (strike * norm_cdf_scaled(-d2, g2) - s * norm_cdf_scaled(-d1, g1)).max(0.0)
    }
}

/// Implied volatility of a call price.
///
/// Prices at or outside `(max(S₀−K, 0), S₀)` return [`Error::Inversion`]
/// naming the violated bound, as do prices whose vol would fall outside the
/// bracket `[1e-4, 5]`.
pub fn implied_vol(price: f64, s0: f64, strike: f64, maturity: f64) -> Result<f64> {
    check_inputs(s0, strike, maturity)?;
    let intrinsic = (s0 - strike).max(0.0);
    let fail = |bound: &'static str, limit: f64| Error::Inversion {
        price,
        bound,
        limit,
        strike,
        maturity,
    };
    if !price.is_finite() || price <= intrinsic {
        return Err(fail("lower", intrinsic));
    }
    if price >= s0 {
        return Err(fail("upper", s0));
    }
    let time_value = if strike >= s0 { price } else { price - intrinsic };
    implied_vol_otm(time_value, s0, strike, maturity)
}

fn check_inputs(s0: f64, strike: f64, maturity: f64) -> Result<()> {
    if !(s0 > 0.0 && strike > 0.0 && maturity > 0.0) {
        return Err(Error::Domain(format!(
            "implied vol needs positive s0, K, T: {s0}, {strike}, {maturity}"
        )));
    }
    Ok(())
}

/// Implied volatility from the out-of-the-money value (call for `K ≥ S₀`,
/// put otherwise), which keeps full relative precision where the call price
/// itself would round to intrinsic.
///
/// Safeguarded Newton on `ln(value)` inside the bracket `[1e-4, 5]`.
pub fn implied_vol_otm(value: f64, s0: f64, strike: f64, maturity: f64) -> Result<f64> {
    check_inputs(s0, strike, maturity)?;
    let intrinsic = (s0 - strike).max(0.0);
    let fail = |bound: &'static str, limit: f64| Error::Inversion {
        price: intrinsic + value,
        bound,
        limit,
        strike,
        maturity,
    };
    if !value.is_finite() || value <= 0.0 {
        return Err(fail("lower", intrinsic));
    }
    // OTM call is capped by S₀, OTM put by K.
    let cap = if strike >= s0 { s0 } else { strike };
    if value >= cap {
        return Err(fail("upper", s0));
    }
    let ln_target = value.ln();
    let f = |s: f64| otm_value(s, s0, strike, maturity);
    let (mut lo, mut hi) = (VOL_FLOOR, VOL_CAP);
    if f(lo) >= value {
        return Err(fail("bracket floor", bs_call_price(lo, s0, strike, maturity)));
    }
    if f(hi) <= value {
        return Err(fail("bracket cap", bs_call_price(hi, s0, strike, maturity)));
    }

    // ATM approximation C ≈ S σ √T / √(2π), kept inside a sane range.
    let mut sigma = (SQRT_2 * std::f64::consts::PI.sqrt() * value / (s0 * maturity.sqrt()))
        .clamp(0.05, 1.0);
    for _ in 0..200 {
        let v = f(sigma);
        if v > value {
            hi = sigma;
        } else if v < value {
            lo = sigma;
        } else {
            return Ok(sigma);
        }
        let vega = bs_vega(sigma, s0, strike, maturity);
        let mut next = if v > 0.0 && vega > 0.0 {
            sigma - (v.ln() - ln_target) * v / vega
        } else {
            f64::NAN
        };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let step = (next - sigma).abs();
        sigma = next;
        if step <= 2.0 * f64::EPSILON * sigma || hi - lo <= 2.0 * f64::EPSILON * hi {
            break;
        }
    }
    Ok(sigma)
}

/// Elementwise inversion of a Monte Carlo call grid with spot 1. Errors carry
/// the `(row, col)` of the failing cell.
///
/// Inversion runs on the stored out-of-the-money values so deep in-the-money
/// cells keep their time value.
pub fn surface_from_prices(prices: &PriceGridResult, grid: &StrikeMaturityGrid) -> Result<VolSurface> {
    if prices.grid != *grid {
        return Err(Error::Domain("price grid and target grid differ".into()));
    }
    invert_cells(&prices.time_values, grid, implied_vol_otm)
}

fn invert_cells(
    values: &[f64],
    grid: &StrikeMaturityGrid,
    invert: fn(f64, f64, f64, f64) -> Result<f64>,
) -> Result<VolSurface> {
    if values.len() != grid.len() {
        return Err(Error::Domain(format!(
            "price grid has {} cells, grid has {}",
            values.len(),
            grid.len()
        )));
    }
    let n = grid.n_strikes();
    let mut vols = Vec::with_capacity(values.len());
    for (idx, &p) in values.iter().enumerate() {
        let (row, col) = (idx / n, idx % n);
        let v = invert(p, 1.0, grid.strikes()[col], grid.maturities()[row])
            .map_err(|e| Error::Cell { row, col, source: Box::new(e) })?;
        vols.push(v);
    }
    VolSurface::new(grid.clone(), vols)
}

/// Elementwise inversion of plain call prices with spot 1.
pub fn surface_from_price_slice(prices: &[f64], grid: &StrikeMaturityGrid) -> Result<VolSurface> {
    invert_cells(prices, grid, implied_vol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::default_training_grid;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn norm_cdf_reference_values() {
        // Reference values from a 50-digit evaluation of ½·erfc(−x/√2).
        let cases = [
            (0.0, 0.5),
            (0.1, 0.539_827_837_277_028_98),
            (-0.1, 0.460_172_162_722_971_02),
            (1.0, 0.841_344_746_068_542_9),
            (-3.0, 1.349_898_031_630_094_5e-3),
            (-10.0, 7.619_853_024_160_526_1e-24),
            (-20.0, 2.753_624_118_606_233_7e-89),
            (-37.0, 5.725_571_222_524_576_8e-300),
        ];
        for (x, expected) in cases {
            assert_relative_eq!(norm_cdf(x), expected, max_relative = 1e-14);
        }
        for (x, _) in cases {
            assert!((norm_cdf(x) + norm_cdf(-x) - 1.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn zero_vol_limit_is_intrinsic() {
        let q = BSQuote::new(1e-12, 1.0, 0.8, 1.0).unwrap();
        assert_relative_eq!(bs_call(&q), 0.2, max_relative = 1e-14);
    }

    #[test]
    fn atm_reference_price() {
        // d± = ±0.1, C = N(0.1) − N(−0.1).
        let q = BSQuote::new(0.2, 1.0, 1.0, 1.0).unwrap();
        let expected = 0.539_827_837_277_028_98 - 0.460_172_162_722_971_02;
        assert_relative_eq!(bs_call(&q), expected, max_relative = 1e-13);
        assert!((bs_call(&q) - 0.07966).abs() < 1e-5);
    }

    #[test]
    fn infinite_vol_limit_is_spot() {
        let q = BSQuote::new(200.0, 1.0, 1.2, 1.0).unwrap();
        assert!((bs_call(&q) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn round_trip_atm() {
        let p = bs_call_price(0.2, 1.0, 1.0, 1.0);
        assert!((implied_vol(p, 1.0, 1.0, 1.0).unwrap() - 0.2).abs() < 1e-10);
    }

    #[test]
    fn price_at_intrinsic_plus_epsilon_errors() {
        let err = implied_vol(1e-15, 1.0, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Inversion { bound: "bracket floor", .. }));
        let err = implied_vol(1.0 - 0.8, 1.0, 0.8, 1.0).unwrap_err();
        assert!(matches!(err, Error::Inversion { bound: "lower", .. }));
        let err = implied_vol(1.0, 1.0, 0.8, 1.0).unwrap_err();
        assert!(matches!(err, Error::Inversion { bound: "upper", .. }));
    }

    #[test]
    fn inversion_meets_price_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let s = rng.gen_range(0.05..1.0);
            let k = rng.gen_range(0.5..1.5);
            let t = rng.gen_range(0.1..2.0);
            let p = bs_call_price(s, 1.0, k, t);
            if let Ok(iv) = implied_vol(p, 1.0, k, t) {
                assert!((bs_call_price(iv, 1.0, k, t) - p).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn vega_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let s = rng.gen_range(0.05..1.0);
            let k = rng.gen_range(0.7..1.3);
            let t = rng.gen_range(0.1..2.0);
            let h = 1e-5 * s;
            let fd = (bs_call_price(s + h, 1.0, k, t) - bs_call_price(s - h, 1.0, k, t)) / (2.0 * h);
            let v = bs_vega(s, 1.0, k, t);
            if v > 1e-4 {
                assert_relative_eq!(fd, v, max_relative = 1e-7);
            }
        }
    }

    #[test]
    fn monotone_in_sigma_convex_in_strike() {
        let sigmas: Vec<f64> = (1..=20).map(|i| 0.05 * i as f64).collect();
        let strikes: Vec<f64> = (0..=40).map(|i| 0.5 + 0.025 * i as f64).collect();
        for &t in &[0.1, 1.0, 2.0] {
            for &k in &strikes {
                for w in sigmas.windows(2) {
                    // Strict where the time value is representable at all.
                    let (lo, hi) = (otm_value(w[0], 1.0, k, t), otm_value(w[1], 1.0, k, t));
                    assert!(hi > lo || hi == 0.0);
                    assert!(bs_call_price(w[1], 1.0, k, t) >= bs_call_price(w[0], 1.0, k, t));
                }
            }
            for &s in &sigmas {
                for w in strikes.windows(3) {
                    let c: Vec<f64> = w.iter().map(|&k| bs_call_price(s, 1.0, k, t)).collect();
                    assert!(c[0] - 2.0 * c[1] + c[2] >= -1e-15);
                }
            }
        }
    }

    fn flat_grid(sigma: f64) -> PriceGridResult {
        let g = default_training_grid();
        let mut prices = Vec::new();
        let mut time_values = Vec::new();
        for &t in g.maturities() {
            for &k in g.strikes() {
                prices.push(bs_call_price(sigma, 1.0, k, t));
                time_values.push(otm_value(sigma, 1.0, k, t));
            }
        }
        let n = prices.len();
        PriceGridResult {
            grid: g,
            prices,
            time_values,
            stderr: vec![0.0; n],
            stderr_plain: vec![0.0; n],
            n_paths: 1,
        }
    }

    #[test]
    fn flat_price_grid_gives_flat_surface() {
        let res = flat_grid(0.25);
        let s = surface_from_prices(&res, &res.grid).unwrap();
        assert!(s.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-9));
        // Plain call prices carry the same information wherever the time
        // value survives addition to intrinsic.
        let hi_vol = flat_grid(0.6);
        let s = surface_from_price_slice(&hi_vol.prices, &hi_vol.grid).unwrap();
        assert!(s.as_slice().iter().all(|v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn intrinsic_cell_reports_position() {
        let mut res = flat_grid(0.25);
        let idx = res.grid.index(3, 2);
        res.time_values[idx] = 0.0;
        match surface_from_prices(&res, &res.grid.clone()) {
            Err(Error::Cell { row: 3, col: 2, .. }) => {}
            other => panic!("expected positioned error, got {other:?}"),
        }
        let mut prices = flat_grid(0.6).prices;
        prices[idx] = 1.0 - res.grid.strikes()[2];
        match surface_from_price_slice(&prices, &res.grid) {
            Err(Error::Cell { row: 3, col: 2, .. }) => {}
            other => panic!("expected positioned error, got {other:?}"),
        }
    }
}
