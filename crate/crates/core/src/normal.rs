//! Scaled complementary error function used on the Monte Carlo hot path.
//!
//! `erfc(x) = e^{−x²}·erfcx(x)`; splitting off the Gaussian factor lets the
//! conditional call estimator share one `exp` between `N(d₁)` and `N(d₂)`
//! through `K·φ(d₂) = S·φ(d₁)`. Rational approximations after W. J. Cody.

#![allow(clippy::excessive_precision)] // coefficients as published

const A: [f64; 5] = [
    3.161_123_743_870_565_6e0,
    1.138_641_541_510_501_6e2,
    3.774_852_376_853_020_2e2,
    3.209_377_589_138_469_5e3,
    1.857_777_061_846_031_5e-1,
];
const B: [f64; 4] = [
    2.360_129_095_234_412e1,
    2.440_246_379_344_441_7e2,
    1.282_616_526_077_372_3e3,
    2.844_236_833_439_170_6e3,
];
const C: [f64; 9] = [
    5.641_884_969_886_701e-1,
    8.883_149_794_388_376,
    6.611_919_063_714_163e1,
    2.986_351_381_974_001_3e2,
    8.819_522_212_417_691e2,
    1.712_047_612_634_070_6e3,
    2.051_078_377_826_071_5e3,
    1.230_339_354_797_997_2e3,
    2.153_115_354_744_038_5e-8,
];
const D: [f64; 8] = [
    1.574_492_611_070_983_5e1,
    1.176_939_508_913_125e2,
    5.371_811_018_620_098_6e2,
    1.621_389_574_566_690_2e3,
    3.290_799_235_733_459_6e3,
    4.362_619_090_143_247e3,
    3.439_367_674_143_721_6e3,
    1.230_339_354_803_749_4e3,
];
const P: [f64; 6] = [
    3.053_266_349_612_323_4e-1,
    3.603_448_999_498_044_4e-1,
    1.257_817_261_112_292_5e-1,
    1.608_378_514_874_227_7e-2,
    6.587_491_615_298_378e-4,
    1.631_538_713_730_209_8e-2,
];
const Q: [f64; 5] = [
    2.568_520_192_289_822_4,
    1.872_952_849_923_467_3,
    5.279_051_029_514_284e-1,
    6.051_834_131_244_132e-2,
    2.335_204_976_268_691_8e-3,
];
const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// `erf(x)` for `|x| ≤ 0.5`.
#[inline]
fn erf_small(x: f64) -> f64 {
    let y = x * x;
    let mut num = A[4] * y;
    let mut den = y;
    for i in 0..3 {
        num = (num + A[i]) * y;
        den = (den + B[i]) * y;
    }
    x * (num + A[3]) / (den + B[3])
}

/// `erfcx(x) = e^{x²}·erfc(x)` for `x ≥ 0.5`.
#[inline]
fn erfcx_pos(x: f64) -> f64 {
    if x <= 4.0 {
        let mut num = C[8] * x;
        let mut den = x;
        for i in 0..7 {
            num = (num + C[i]) * x;
            den = (den + D[i]) * x;
        }
        (num + C[7]) / (den + D[7])
    } else {
        let z = 1.0 / (x * x);
        let mut num = P[5] * z;
        let mut den = z;
        for i in 0..4 {
            num = (num + P[i]) * z;
            den = (den + Q[i]) * z;
        }
        let r = z * (num + P[4]) / (den + Q[4]);
        (FRAC_1_SQRT_PI - r) / x
    }
}

/// `N(d)` given `g = e^{−d²/2}` computed by the caller.
#[inline]
pub(crate) fn norm_cdf_scaled(d: f64, g: f64) -> f64 {
    let x = -d * std::f64::consts::FRAC_1_SQRT_2;
    if x >= 0.5 {
        0.5 * g * erfcx_pos(x)
    } else if x <= -0.5 {
        1.0 - 0.5 * g * erfcx_pos(-x)
    } else {
        0.5 * (1.0 - erf_small(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm_cdf_fast(d: f64) -> f64 {
        norm_cdf_scaled(d, (-0.5 * d * d).exp())
    }
    use crate::black_scholes::norm_cdf;

    #[test]
    fn agrees_with_reference_erfc() {
        let mut worst: f64 = 0.0;
        for i in 0..=200_000 {
            let d = -37.0 + 45.0 * i as f64 / 200_000.0;
            let a = norm_cdf_fast(d);
            let b = norm_cdf(d);
            let rel = (a - b).abs() / b.max(1e-300);
            // Deep in the tail the caller's e^{−d²/2} carries a relative
            // error of order d²·ε.
            let allowed = if d < -5.0 { 4.0 * d * d * f64::EPSILON } else { 1e-14 };
            let dev = if d < 0.0 { rel } else { (a - b).abs() };
            worst = worst.max(dev / allowed);
        }
        assert!(worst < 1.0, "worst deviation ratio {worst}");
    }

    #[test]
    fn shared_exponential_identity() {
        // K φ(d₂) = S φ(d₁)
        let (s, k, sd) = (1.07f64, 1.3f64, 0.21f64);
        let d1 = (s / k).ln() / sd + 0.5 * sd;
        let d2 = d1 - sd;
        let g1 = (-0.5 * d1 * d1).exp();
        let g2 = g1 * s / k;
        assert!((g2 - (-0.5 * d2 * d2).exp()).abs() < 1e-15);
        assert!((norm_cdf_scaled(d2, g2) - norm_cdf(d2)).abs() < 1e-15);
    }
}
