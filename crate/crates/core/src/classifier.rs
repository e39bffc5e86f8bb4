//! Model recognition: which of Heston, one-factor Bergomi or rough Bergomi
//! generated a surface, or in what proportions a mixed surface was formed.
//!
//! Output index order is `[Heston, 1F Bergomi, rough Bergomi]`, i.e. the
//! coefficients `(a, b, c)` of `aΣ^Heston + bΣ^Bergomi + cΣ^rBergomi`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::StrikeMaturityGrid;
use crate::models::ModelKind;
use crate::neuralnet::{Mlp, WeightFile};

pub const MODEL_ORDER: [ModelKind; 3] = [ModelKind::Heston, ModelKind::OneFactorBergomi, ModelKind::RoughBergomi];
pub const CLASSIFIER_HIDDEN: [usize; 2] = [100, 50];

const SIMPLEX_TOL: f64 = 1e-12;

fn check_simplex(c: &[f64; 3]) -> Result<()> {
    let sum: f64 = c.iter().sum();
    if c.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Domain(format!("mixture coefficients {c:?} are not on the simplex")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSample {
    pub surface: Vec<f64>,
    pub coeffs: [f64; 3],
}

impl MixtureSample {
    pub fn new(surface: Vec<f64>, coeffs: [f64; 3]) -> Result<Self> {
        check_simplex(&coeffs)?;
        Ok(Self { surface, coeffs })
    }
}

/// Elementwise convex combination of one surface per model.
pub fn make_mixture(surfaces: [&[f64]; 3], coeffs: [f64; 3]) -> Result<Vec<f64>> {
    check_simplex(&coeffs)?;
    let n = surfaces[0].len();
    if surfaces.iter().any(|s| s.len() != n) {
        return Err(Error::Domain("mixture surfaces live on different grids".into()));
    }
    Ok((0..n).map(|i| (0..3).map(|m| coeffs[m] * surfaces[m][i]).sum()).collect())
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `H(p, q) = −Σ p_i log q_i`, with `0 · log 0 = 0`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(pi, _)| **pi > 0.0).map(|(pi, qi)| -pi * qi.ln()).sum()
}

pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a))).unwrap_or(0)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 32, learning_rate: 0.01, momentum: 0.9, seed: 0 }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("classifier epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("classifier needs learning_rate > 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierNet {
    pub mlp: Mlp,
    /// Per-cell z-score statistics of the training inputs.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub grid: StrikeMaturityGrid,
    pub config_hash: String,
}

impl ClassifierNet {
    fn standardize(&self, surface: &[f64]) -> Vec<f64> {
        surface.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    /// Membership probabilities `(â, b̂, ĉ)`.
    pub fn predict(&self, surface: &[f64]) -> [f64; 3] {
        let p = softmax(&self.mlp.forward(&self.standardize(surface)));
        [p[0], p[1], p[2]]
    }

    pub fn weight_file(&self) -> WeightFile {
        let mut f = WeightFile::from_mlp("classifier", &self.mlp, &self.grid, 0.0, 1.0);
        f.cell_mean = Some(self.mean.clone());
        f.cell_std = Some(self.std.clone());
        f.config = self.config_hash.clone();
        f
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.weight_file().write(path)
    }

    pub fn from_file(f: &WeightFile) -> Result<Self> {
        if f.kind != "classifier" {
            return Err(Error::Format(format!("expected a classifier, found `{}`", f.kind)));
        }
        let mlp = f.mlp()?;
        let mean = f.cell_mean.clone().ok_or_else(|| Error::Format("missing cell_mean".into()))?;
        let std = f.cell_std.clone().ok_or_else(|| Error::Format("missing cell_std".into()))?;
        if mlp.n_out() != 3 || mean.len() != mlp.n_in() || std.len() != mlp.n_in() {
            return Err(Error::Format("classifier shape does not match its statistics".into()));
        }
        Ok(Self { mlp, mean, std, grid: f.grid.clone(), config_hash: f.config.clone() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&WeightFile::read(path)?)
    }
}

pub fn predict_mixture(net: &ClassifierNet, surface: &[f64]) -> [f64; 3] {
    net.predict(surface)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Mini-batch SGD with momentum on the mean cross-entropy between the
/// coefficient triple (soft label) and the softmax output.
pub fn train_classifier(
    samples: &[MixtureSample],
    grid: &StrikeMaturityGrid,
    cfg: &ClassifierConfig,
) -> Result<(ClassifierNet, Vec<ClassifierEpoch>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Domain("no classifier training samples".into()));
    }
    let n_in = grid.len();
    for s in samples {
        if s.surface.len() != n_in {
            return Err(Error::Domain(format!("surface has {} cells, grid has {n_in}", s.surface.len())));
        }
        check_simplex(&s.coeffs)?;
    }
    let n = samples.len() as f64;
    let mean: Vec<f64> = (0..n_in).map(|c| samples.iter().map(|s| s.surface[c]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..n_in)
        .map(|c| {
            let v = samples.iter().map(|s| (s.surface[c] - mean[c]).powi(2)).sum::<f64>() / n;
            v.sqrt().max(1e-12)
        })
        .collect();
    let mut sizes = vec![n_in];
    sizes.extend(CLASSIFIER_HIDDEN);
    sizes.push(3);
    let mut net = ClassifierNet { mlp: Mlp::init(&sizes, cfg.seed)?, mean, std, grid: grid.clone(), config_hash: String::new() };
    let xs: Vec<Vec<f64>> = samples.iter().map(|s| net.standardize(&s.surface)).collect();
    let mut velocity = vec![0.0; net.mlp.param_count()];
    let mut grad = vec![0.0; net.mlp.param_count()];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (mut total, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let bx: Vec<Vec<f64>> = batch.iter().map(|&i| xs[i].clone()).collect();
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = net.mlp.backprop_with(&bx, &mut grad, |i, logits, delta| {
                let p = &samples[batch[i]].coeffs;
                let q = softmax(logits);
                if argmax(&q) == argmax(p) {
                    correct += 1;
                }
                for k in 0..3 {
                    delta[k] = (q[k] - p[k]) * inv;
                }
                cross_entropy(p, &q)
            });
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            total += loss;
            for ((w, v), g) in net.mlp.params_mut().iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *w += *v;
            }
        }
        let rec = ClassifierEpoch { epoch, loss: total / n, accuracy: correct as f64 / n };
        log::info!("classifier epoch {epoch}: loss {:.5} accuracy {:.4}", rec.loss, rec.accuracy);
        history.push(rec);
    }
    Ok((net, history))
}

/// Two-model mixtures `a·pools.0 + (1 − a)·pools.1` placed in output slots
/// `slots`, with `a` cycling through `a_values` and surfaces drawn at random
/// from each pool.
pub fn two_model_mixtures(
    pools: (&[Vec<f64>], &[Vec<f64>]),
    slots: (usize, usize),
    a_values: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<MixtureSample>> {
    if pools.0.is_empty() || pools.1.is_empty() || a_values.is_empty() {
        return Err(Error::Domain("empty surface pool or coefficient grid".into()));
    }
    if slots.0 == slots.1 || slots.0 > 2 || slots.1 > 2 {
        return Err(Error::Domain("mixture slots must be two distinct indices below 3".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let a = a_values[i % a_values.len()];
            let s0 = &pools.0[rng.gen_range(0..pools.0.len())];
            let s1 = &pools.1[rng.gen_range(0..pools.1.len())];
            let mut coeffs = [0.0; 3];
            coeffs[slots.0] = a;
            coeffs[slots.1] = 1.0 - a;
            let zero = vec![0.0; s0.len()];
            let mut parts: [&[f64]; 3] = [&zero, &zero, &zero];
            parts[slots.0] = s0;
            parts[slots.1] = s1;
            MixtureSample::new(make_mixture(parts, coeffs)?, coeffs)
        })
        .collect()
}

/// `{0, step, 2·step, …, 1}`.
pub fn coefficient_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub true_coeff: f64,
    pub mean_predicted: f64,
    pub count: usize,
}

/// Mean predicted coefficient in `slot` per distinct true coefficient,
/// sorted by the true value.
pub fn mixture_curve(net: &ClassifierNet, samples: &[MixtureSample], slot: usize) -> Vec<CurvePoint> {
    let mut pts: Vec<CurvePoint> = Vec::new();
    for s in samples {
        let pred = net.predict(&s.surface)[slot];
        let a = s.coeffs[slot];
        match pts.iter_mut().find(|p| (p.true_coeff - a).abs() < 1e-9) {
            Some(p) => {
                p.mean_predicted += pred;
                p.count += 1;
            }
            None => pts.push(CurvePoint { true_coeff: a, mean_predicted: pred, count: 1 }),
        }
    }
    for p in &mut pts {
        p.mean_predicted /= p.count as f64;
    }
    pts.sort_by(|a, b| a.true_coeff.total_cmp(&b.true_coeff));
    pts
}

/// Share of one-hot samples whose predicted argmax is the generating model,
/// with the number of such samples.
pub fn pure_accuracy(net: &ClassifierNet, samples: &[MixtureSample]) -> (f64, usize) {
    let pure: Vec<&MixtureSample> = samples.iter().filter(|s| s.coeffs.contains(&1.0)).collect();
    let hits = pure.iter().filter(|s| argmax(&net.predict(&s.surface)) == argmax(&s.coeffs)).count();
    (hits as f64 / pure.len().max(1) as f64, pure.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::default_training_grid;
    use proptest::prelude::{prop, prop_assert, proptest};

    #[test]
    fn mixture_identities() {
        let a: Vec<f64> = (0..88).map(|i| 0.2 + 0.001 * i as f64).collect();
        let b: Vec<f64> = (0..88).map(|i| 0.3 - 0.001 * i as f64).collect();
        let c = vec![0.25; 88];
        assert_eq!(make_mixture([&a, &b, &c], [1.0, 0.0, 0.0]).unwrap(), a);
        let third = 1.0 / 3.0;
        let same = make_mixture([&a, &a, &a], [third, third, 1.0 - 2.0 * third]).unwrap();
        assert!(same.iter().zip(&a).all(|(x, y)| (x - y).abs() < 1e-15));
        let m = make_mixture([&a, &b, &c], [0.2, 0.3, 0.5]).unwrap();
        for i in 0..88 {
            assert!((m[i] - (0.2 * a[i] + 0.3 * b[i] + 0.5 * c[i])).abs() < 1e-15);
        }
        assert!(make_mixture([&a, &b, &c], [0.5, 0.5, 0.5]).is_err());
        assert!(make_mixture([&a, &b, &c[..10]], [0.5, 0.5, 0.0]).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]), 0.0);
        let u = [1.0 / 3.0; 3];
        assert!((cross_entropy(&[1.0, 0.0, 0.0], &u) - 3f64.ln()).abs() < 1e-15);
    }

    fn simplex(raw: [f64; 3]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    proptest! {
        #[test]
        fn gibbs_inequality(p in prop::array::uniform3(0.01f64..1.0), q in prop::array::uniform3(0.01f64..1.0)) {
            let (p, q) = (simplex(p), simplex(q));
            prop_assert!(cross_entropy(&p, &q) >= cross_entropy(&p, &p) - 1e-12);
        }

        #[test]
        fn softmax_is_a_probability_vector(z in prop::array::uniform3(-500.0f64..500.0)) {
            let p = softmax(&z);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spearman_values() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 35.0, 100.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        // Ties get average ranks: ranks of y are (1.5, 1.5, 3, 4).
        let r = spearman(&x, &[1.0, 1.0, 2.0, 3.0]);
        assert!((r - 0.9486832980505138).abs() < 1e-12, "{r}");
    }

    fn toy_samples(n: usize, seed: u64) -> Vec<MixtureSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = [0.15, 0.25, 0.35];
        (0..n)
            .map(|i| {
                let m = i % 3;
                let surface = (0..88).map(|_| levels[m] + 0.01 * rng.gen::<f64>()).collect();
                let mut c = [0.0; 3];
                c[m] = 1.0;
                MixtureSample::new(surface, c).unwrap()
            })
            .collect()
    }

    #[test]
    fn separable_toy_is_learned_and_deterministic() {
        let grid = default_training_grid();
        let train = toy_samples(300, 1);
        let cfg = ClassifierConfig { seed: 5, ..Default::default() };
        let (net, hist) = train_classifier(&train, &grid, &cfg).unwrap();
        assert_eq!(hist.len(), 20);
        assert!(hist[19].loss < hist[0].loss);
        assert_eq!(pure_accuracy(&net, &train), (1.0, 300));
        assert_eq!(pure_accuracy(&net, &toy_samples(90, 2)).0, 1.0);
        let p = net.predict(&train[0].surface);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (again, _) = train_classifier(&train, &grid, &cfg).unwrap();
        assert_eq!(net.mlp.params(), again.mlp.params());
    }

    #[test]
    fn weight_file_round_trip() {
        let grid = default_training_grid();
        let cfg = ClassifierConfig { epochs: 1, ..Default::default() };
        let (net, _) = train_classifier(&toy_samples(30, 3), &grid, &cfg).unwrap();
        let f = net.weight_file();
        assert_eq!(f.kind, "classifier");
        let back = ClassifierNet::from_file(&WeightFile::parse(&f.to_string().unwrap()).unwrap()).unwrap();
        assert_eq!(back.mlp.params(), net.mlp.params());
        assert_eq!(back.std, net.std);
        assert!(crate::neuralnet::pricing_net_from_file(&f).is_err());
    }

    #[test]
    fn mixtures_and_curve() {
        let p0 = vec![vec![0.2; 88]];
        let p1 = vec![vec![0.4; 88]];
        let a = coefficient_grid(0.1);
        assert_eq!(a.len(), 11);
        assert_eq!((a[0], a[10]), (0.0, 1.0));
        let s = two_model_mixtures((&p0, &p1), (0, 2), &a, 22, 0).unwrap();
        assert_eq!(s[3].coeffs, [a[3], 0.0, 1.0 - a[3]]);
        assert!((s[3].surface[0] - (0.2 * a[3] + 0.4 * (1.0 - a[3]))).abs() < 1e-15);
        let grid = default_training_grid();
        let (net, _) = train_classifier(&s, &grid, &ClassifierConfig { epochs: 2, ..Default::default() }).unwrap();
        let curve = mixture_curve(&net, &s, 0);
        assert_eq!(curve.len(), 11);
        assert!(curve.iter().all(|p| p.count == 2));
        assert_eq!(curve[0].true_coeff, 0.0);
        assert_eq!(curve[10].true_coeff, 1.0);
    }
}
