use super::*;
use crate::black_scholes::{bs_call_price, norm_cdf};
use crate::grid::{default_barrier_grid, default_training_grid};
use crate::models::{
    ForwardVarianceCurve, HestonParams, OneFactorBergomiParams, RBergomiParams, DEFAULT_KNOTS,
};

fn flat_xi(v: f64) -> ForwardVarianceCurve {
    ForwardVarianceCurve::flat(DEFAULT_KNOTS.to_vec(), v).unwrap()
}

fn rough(nu: f64, rho: f64, hurst: f64) -> ModelParams {
    ModelParams::RoughBergomi(RBergomiParams { xi: flat_xi(0.04), nu, rho, hurst })
}

fn one_factor(eta: f64, beta: f64) -> ModelParams {
    ModelParams::OneFactorBergomi(OneFactorBergomiParams { xi: flat_xi(0.04), eta, rho: -0.7, beta })
}

fn heston(v: f64) -> ModelParams {
    heston_rho(v, -0.7)
}

fn heston_rho(v: f64, rho: f64) -> ModelParams {
    ModelParams::Heston(HestonParams { a: 2.0, b: 0.04, v, rho, v0: 0.04, s0: 1.0 })
}

// With strong correlation the far out-of-the-money short-dated cells (values
// near 1e-11) are carried by a handful of extreme conditional spots, and the
// sample standard error is unreliable there. Moderate correlation keeps every
// cell of the grid well sampled.
const ORACLE_RHO: f64 = -0.3;

#[test]
fn time_grid_contains_maturities() {
    let g = default_training_grid();
    let tg = TimeGrid::new(g.maturities(), 40).unwrap();
    assert_eq!(tg.n(), 40);
    let tg = TimeGrid::new(g.maturities(), 50).unwrap();
    assert_eq!(tg.n(), 54);
    for (m, &k) in g.maturities().iter().zip(&tg.maturity_idx) {
        assert_eq!(tg.times[k], *m);
    }
    assert!(tg.dt.iter().all(|&d| d > 0.0));
}

#[test]
fn config_validation() {
    assert!(SimConfig::new(1, 40, 0).validate().is_err());
    assert!(SimConfig::new(100, 7, 0).validate().is_err());
    let mut c = SimConfig::new(101, 40, 0);
    c.antithetic = true;
    assert!(c.validate().is_err());
}

#[test]
fn zero_vol_of_vol_matches_black_scholes() {
    let g = default_training_grid();
    let res = mc_vanilla_surface(&rough(0.0, ORACLE_RHO, 0.1), &g, &SimConfig::new(10_000, 40, 1)).unwrap();
    for i in 0..g.n_maturities() {
        for j in 0..g.n_strikes() {
            let cell = g.index(i, j);
            let bs = bs_call_price(0.2, 1.0, g.strikes()[j], g.maturities()[i]);
            let dev = (res.prices[cell] - bs).abs();
            assert!(dev <= 3.0 * res.stderr[cell] + 1e-15, "cell ({i},{j}) dev {dev:e} se {:e}", res.stderr[cell]);
        }
    }
}

#[test]
fn quiet_heston_matches_black_scholes() {
    let g = default_training_grid();
    let res = mc_vanilla_surface(&heston_rho(1e-6, ORACLE_RHO), &g, &SimConfig::new(10_000, 40, 2)).unwrap();
    for i in 0..g.n_maturities() {
        for j in 0..g.n_strikes() {
            let cell = g.index(i, j);
            let bs = bs_call_price(0.2, 1.0, g.strikes()[j], g.maturities()[i]);
            let dev = (res.prices[cell] - bs).abs();
            assert!(dev <= 3.0 * res.stderr[cell] + 1e-15, "cell ({i},{j}) dev {dev:e}");
        }
    }
}

#[test]
fn zero_vol_of_vol_variance_is_forward_curve() {
    let xi = ForwardVarianceCurve::new(
        DEFAULT_KNOTS.to_vec(),
        vec![0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09],
    )
    .unwrap();
    let m = ModelParams::RoughBergomi(RBergomiParams { xi: xi.clone(), nu: 0.0, rho: -0.5, hurst: 0.1 });
    let paths = simulate_paths(&m, &SimConfig::new(20, 40, 3), &DEFAULT_KNOTS).unwrap();
    for p in 0..paths.n_paths {
        for (k, &t) in paths.times.iter().enumerate() {
            assert_eq!(paths.variance[p * paths.n_times() + k], xi.at(t).unwrap());
        }
    }
}

#[test]
fn one_factor_small_beta_is_lognormal() {
    // β → 0: log V_t = ln ξ + ηZ_t − ½η²t, so Var[log V_t] = η²t.
    let eta = 1.5;
    let cfg = SimConfig::new(20_000, 40, 4);
    let paths = simulate_paths(&one_factor(eta, 1e-8), &cfg, &DEFAULT_KNOTS).unwrap();
    let n = paths.n_times();
    // Variance on the last step is driven by Y at its left point.
    let t_left = paths.times[n - 2];
    let logs: Vec<f64> = (0..paths.n_paths).map(|p| paths.variance[p * n + n - 1].ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let var = logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (logs.len() - 1) as f64;
    let expected = eta * eta * t_left;
    let se = expected * (2.0 / (logs.len() - 1) as f64).sqrt();
    assert!((var - expected).abs() < 3.0 * se, "var {var}, expected {expected}");
}

#[test]
fn heston_tiny_vol_of_vol_pins_variance() {
    let paths = simulate_paths(&heston(1e-8), &SimConfig::new(5_000, 40, 5), &DEFAULT_KNOTS).unwrap();
    let n = paths.n_times();
    let v: Vec<f64> = (0..paths.n_paths).map(|p| paths.variance[p * n + n - 1]).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    assert!(var < 1e-6);
    assert!((mean - 0.04).abs() < 1e-6);
}

#[test]
fn spot_is_martingale_for_all_models() {
    let models = [rough(1.9, -0.9, 0.07), one_factor(2.0, 3.0), heston(0.3)];
    for (s, m) in models.iter().enumerate() {
        let paths = simulate_paths(m, &SimConfig::new(20_000, 40, 10 + s as u64), &DEFAULT_KNOTS).unwrap();
        for &t in &DEFAULT_KNOTS {
            let k = paths.time_index(t).unwrap();
            let x: Vec<f64> = (0..paths.n_paths).map(|p| paths.spot_at(p, k)).collect();
            let nf = x.len() as f64;
            let mean = x.iter().sum::<f64>() / nf;
            let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
            assert!((mean - 1.0).abs() <= 3.0 * sd / nf.sqrt(), "{:?} T={t} mean {mean}", m.kind());
        }
    }
}

#[test]
fn positive_paths() {
    let paths = simulate_paths(&heston(0.39), &SimConfig::new(1_000, 40, 6), &DEFAULT_KNOTS).unwrap();
    assert!(paths.spot.iter().all(|&s| s > 0.0));
    assert!(paths.variance.iter().all(|&v| v >= 0.0));
    let paths = simulate_paths(&rough(3.0, -0.9, 0.05), &SimConfig::new(1_000, 40, 6), &DEFAULT_KNOTS).unwrap();
    assert!(paths.variance.iter().all(|&v| v > 0.0));
}

#[test]
fn control_variate_reduces_error() {
    let g = default_training_grid();
    let mut better = 0;
    let mut total = 0;
    for seed in 0..3 {
        let res = mc_vanilla_surface(&rough(1.5, -0.8, 0.1), &g, &SimConfig::new(4_000, 40, seed)).unwrap();
        for (a, b) in res.stderr.iter().zip(&res.stderr_plain) {
            total += 1;
            if a <= b {
                better += 1;
            }
        }
    }
    assert!(better as f64 >= 0.95 * total as f64, "{better}/{total}");
}

#[test]
fn stderr_halves_when_paths_quadruple() {
    let g = default_training_grid();
    let m = one_factor(1.5, 1.0);
    let a = mc_vanilla_surface(&m, &g, &SimConfig::new(4_000, 40, 7)).unwrap();
    let b = mc_vanilla_surface(&m, &g, &SimConfig::new(16_000, 40, 8)).unwrap();
    let ratio: Vec<f64> = a.stderr.iter().zip(&b.stderr).map(|(x, y)| y / x).collect();
    let median = {
        let mut r = ratio.clone();
        r.sort_by(|x, y| x.partial_cmp(y).unwrap());
        r[r.len() / 2]
    };
    assert!((median - 0.5).abs() < 0.05, "median ratio {median}");
}

#[test]
fn results_are_deterministic_and_thread_independent() {
    let g = default_training_grid();
    let m = rough(1.2, -0.6, 0.2);
    let cfg = SimConfig::new(1_600, 40, 9);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| mc_vanilla_surface(&m, &g, &cfg).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a, b);
    let other = mc_vanilla_surface(&m, &g, &cfg.with_seed(10)).unwrap();
    assert_ne!(a.prices, other.prices);
}

#[test]
fn prices_respect_no_arbitrage_bounds() {
    let g = default_training_grid();
    let res = mc_vanilla_surface(&rough(2.5, -0.9, 0.05), &g, &SimConfig::new(2_000, 40, 11)).unwrap();
    for i in 0..g.n_maturities() {
        for j in 0..g.n_strikes() {
            let c = res.prices[g.index(i, j)];
            let k = g.strikes()[j];
            assert!(c >= (1.0 - k).max(0.0) && c <= 1.0);
            if j > 0 {
                let prev = res.prices[g.index(i, j - 1)];
                assert!(c <= prev + 3.0 * res.stderr[g.index(i, j - 1)]);
            }
        }
    }
}

#[test]
fn spot_other_than_one_is_rejected() {
    let m = ModelParams::Heston(HestonParams { a: 2.0, b: 0.04, v: 0.3, rho: -0.7, v0: 0.04, s0: 1.1 });
    assert!(mc_vanilla_surface(&m, &default_training_grid(), &SimConfig::new(100, 40, 0)).is_err());
}

#[test]
fn barrier_pair_is_complementary_and_monotone() {
    let g = default_barrier_grid();
    let (din, dout) = mc_barrier_pair(&rough(1.5, -0.7, 0.1), &g, &SimConfig::new(4_000, 40, 12)).unwrap();
    for (a, b) in din.probs.iter().zip(&dout.probs) {
        assert_eq!(a + b, 1.0);
        assert!((0.0..=1.0).contains(a));
    }
    for j in 0..g.n_strikes() {
        for i in 1..g.n_maturities() {
            assert!(din.probs[g.index(i, j)] >= din.probs[g.index(i - 1, j)]);
        }
    }
    for i in 0..g.n_maturities() {
        for j in 1..g.n_strikes() {
            assert!(din.probs[g.index(i, j)] >= din.probs[g.index(i, j - 1)]);
        }
    }
}

#[test]
fn unreachable_barrier_and_bad_level() {
    let g = StrikeMaturityGrid::new(vec![0.5, 1.0], vec![1e-6]).unwrap();
    let (din, dout) = mc_barrier_pair(&heston(0.3), &g, &SimConfig::new(1_000, 40, 13)).unwrap();
    assert!(din.probs.iter().all(|&p| p == 0.0));
    assert!(dout.probs.iter().all(|&p| p == 1.0));
    let g = StrikeMaturityGrid::new(vec![1.0], vec![0.9, 1.0]).unwrap();
    assert!(matches!(
        mc_barrier_grid(&heston(0.3), &g, &SimConfig::new(100, 40, 0), BarrierKind::DownIn),
        Err(Error::Domain(_))
    ));
}

/// Probability that a Gaussian walk with per-step drift `−½σ²Δt_k` and
/// variance `σ²Δt_k`, started at 0, is at or below `ln B` at some monitoring
/// date up to each maturity. The surviving density is propagated on a fine
/// lattice with the trapezoid rule.
fn discrete_gbm_hit_probability(sigma: f64, barrier: f64, grid: &TimeGrid) -> Vec<f64> {
    let lb = barrier.ln();
    let t_max = *grid.times.last().unwrap();
    let hi = 8.0 * sigma * t_max.sqrt();
    let m = 3000;
    let h = (hi - lb) / m as f64;
    let xs: Vec<f64> = (0..=m).map(|i| lb + i as f64 * h).collect();
    let mut density: Option<Vec<f64>> = None;
    let mut out = Vec::new();
    for k in 0..grid.n() {
        let dt = grid.dt[k];
        let sd = sigma * dt.sqrt();
        let mu = -0.5 * sigma * sigma * dt;
        let next: Vec<f64> = match &density {
            None => xs
                .iter()
                .map(|&x| (-(x - mu).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt()))
                .collect(),
            Some(f) => xs
                .iter()
                .map(|&x| {
                    let mut acc = 0.0;
                    for (i, (&y, &fy)) in xs.iter().zip(f).enumerate() {
                        let w = if i == 0 || i == m { 0.5 } else { 1.0 };
                        let z = (x - y - mu) / sd;
                        if z.abs() < 12.0 {
                            acc += w * fy * (-0.5 * z * z).exp();
                        }
                    }
                    acc * h / (sd * (2.0 * std::f64::consts::PI).sqrt())
                })
                .collect(),
        };
        // Mass strictly above the barrier (the lattice starts at ln B).
        let survive: f64 = next
            .iter()
            .enumerate()
            .map(|(i, &f)| if i == 0 || i == m { 0.5 * f } else { f })
            .sum::<f64>()
            * h;
        density = Some(next);
        out.push(1.0 - survive);
    }
    out
}

#[test]
fn flat_variance_barrier_matches_discrete_gbm_oracle() {
    let maturities = vec![0.5, 1.0];
    let barriers = vec![0.8, 0.9];
    let g = StrikeMaturityGrid::new(maturities.clone(), barriers.clone()).unwrap();
    let cfg = SimConfig::new(20_000, 16, 14);
    let din = mc_barrier_grid(&rough(0.0, -0.5, 0.1), &g, &cfg, BarrierKind::DownIn).unwrap();
    let tg = TimeGrid::new(&maturities, 16).unwrap();
    for (j, &b) in barriers.iter().enumerate() {
        let oracle = discrete_gbm_hit_probability(0.2, b, &tg);
        for (i, &k) in tg.maturity_idx.iter().enumerate() {
            let cell = g.index(i, j);
            let dev = (din.probs[cell] - oracle[k]).abs();
            assert!(dev <= 3.0 * din.stderr[cell], "B={b} T={} mc {} oracle {}", maturities[i], din.probs[cell], oracle[k]);
        }
    }
    // Continuous monitoring hits at least as often as discrete monitoring.
    let b: f64 = 0.9;
    let (s, t) = (0.2f64, 1.0f64);
    let mu = -0.5 * s * s;
    let cont = norm_cdf((b.ln() - mu * t) / (s * t.sqrt()))
        + (2.0 * mu * b.ln() / (s * s)).exp() * norm_cdf((b.ln() + mu * t) / (s * t.sqrt()));
    assert!(cont > discrete_gbm_hit_probability(s, b, &tg)[tg.maturity_idx[1]]);
}

#[test]
fn antithetic_pairs_run() {
    let g = default_training_grid();
    let mut cfg = SimConfig::new(2_000, 40, 15);
    cfg.antithetic = true;
    let res = mc_vanilla_surface(&rough(0.0, -0.7, 0.1), &g, &cfg).unwrap();
    let cell = g.index(4, 5);
    assert!((res.prices[cell] - bs_call_price(0.2, 1.0, 1.0, 1.2)).abs() < 4.0 * res.stderr[cell] + 1e-12);
}
