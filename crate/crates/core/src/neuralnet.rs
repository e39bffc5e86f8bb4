//! Feedforward networks with ELU hidden layers and a linear output layer,
//! trained by mini-batch Adam with early stopping.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight matrix
//! (row-major, `out × in`) followed by its bias vector, so optimizers and
//! finite-difference checks can treat the network as a point in `ℝᵖ`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{NormalizationStats, NormalizedData, Target};
use crate::error::{Error, Result};
use crate::grid::StrikeMaturityGrid;
use crate::models::{denormalize_theta, normalize_theta, ModelKind, ParamBounds};

/// Hidden width and depth of the pricing network.
pub const HIDDEN: [usize; 4] = [30, 30, 30, 30];

#[inline]
pub fn elu(z: f64, alpha: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        alpha * z.exp_m1()
    }
}

#[inline]
fn elu_and_slope(z: f64, alpha: f64) -> (f64, f64) {
    if z >= 0.0 {
        (z, 1.0)
    } else {
        let em1 = z.exp_m1();
        (alpha * em1, alpha * (em1 + 1.0))
    }
}

/// `Σ (fan_in + 1) · fan_out`.
pub fn param_count_for(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

/// `[n_in, 30, 30, 30, 30, n_out]`.
pub fn pricing_layer_sizes(n_in: usize, n_out: usize) -> Vec<usize> {
    let mut s = vec![n_in];
    s.extend(HIDDEN);
    s.push(n_out);
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    alpha: f64,
    /// Start of each layer's weights; its biases follow at `+ out·in`.
    offsets: Vec<usize>,
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let mut offsets = Vec::with_capacity(sizes.len() - 1);
        let mut o = 0;
        for w in sizes.windows(2) {
            offsets.push(o);
            o += (w[0] + 1) * w[1];
        }
        Ok(Self { sizes: sizes.to_vec(), params: vec![0.0; o], alpha: 1.0, offsets })
    }

    /// Weights uniform on `±√(6/(fan_in+fan_out))`, zero biases.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..net.n_layers() {
            let (fi, fo) = (sizes[l], sizes[l + 1]);
            let lim = (6.0 / (fi + fo) as f64).sqrt();
            for w in net.weight_mut(l) {
                *w = rng.gen_range(-lim..lim);
            }
        }
        Ok(net)
    }

    pub fn from_parts(sizes: &[usize], weights: &[Vec<f64>], biases: &[Vec<f64>], alpha: f64) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        if weights.len() != net.n_layers() || biases.len() != net.n_layers() {
            return Err(Error::Format("layer count does not match layer sizes".into()));
        }
        for l in 0..net.n_layers() {
            if weights[l].len() != sizes[l] * sizes[l + 1] || biases[l].len() != sizes[l + 1] {
                return Err(Error::Format(format!("layer {l} has the wrong shape")));
            }
            net.weight_mut(l).copy_from_slice(&weights[l]);
            net.bias_mut(l).copy_from_slice(&biases[l]);
        }
        if !(alpha > 0.0) {
            return Err(Error::Format(format!("ELU alpha {alpha} must be positive")));
        }
        net.alpha = alpha;
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_in(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_out(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn weight(&self, l: usize) -> &[f64] {
        let o = self.offsets[l];
        &self.params[o..o + self.sizes[l] * self.sizes[l + 1]]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let o = self.offsets[l] + self.sizes[l] * self.sizes[l + 1];
        &self.params[o..o + self.sizes[l + 1]]
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut [f64] {
        let o = self.offsets[l];
        let n = self.sizes[l] * self.sizes[l + 1];
        &mut self.params[o..o + n]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let o = self.offsets[l] + self.sizes[l] * self.sizes[l + 1];
        let n = self.sizes[l + 1];
        &mut self.params[o..o + n]
    }

    fn check_input(&self, x: &[f64]) {
        assert_eq!(x.len(), self.n_in(), "network expects {} inputs", self.n_in());
    }

    /// `out = W·a + b` for layer `l`.
    #[inline]
    fn affine(&self, l: usize, a: &[f64], out: &mut [f64]) {
        let n_in = self.sizes[l];
        let w = self.weight(l);
        let b = self.bias(l);
        for (o, z) in out.iter_mut().enumerate() {
            let row = &w[o * n_in..(o + 1) * n_in];
            *z = b[o] + dot(row, a);
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.check_input(x);
        let mut a = x.to_vec();
        for l in 0..self.n_layers() {
            let mut z = vec![0.0; self.sizes[l + 1]];
            self.affine(l, &a, &mut z);
            if l + 1 < self.n_layers() {
                z.iter_mut().for_each(|v| *v = elu(*v, self.alpha));
            }
            a = z;
        }
        a
    }

    pub fn forward_batch(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    /// Forward pass keeping every layer's activations and activation slopes.
    fn forward_trace(&self, x: &[f64], acts: &mut [Vec<f64>], slopes: &mut [Vec<f64>]) {
        acts[0].copy_from_slice(x);
        for l in 0..self.n_layers() {
            let (head, tail) = acts.split_at_mut(l + 1);
            let out = &mut tail[0];
            self.affine(l, &head[l], out);
            if l + 1 < self.n_layers() {
                for (v, s) in out.iter_mut().zip(slopes[l].iter_mut()) {
                    let (a, d) = elu_and_slope(*v, self.alpha);
                    *v = a;
                    *s = d;
                }
            }
        }
    }

    /// Mean squared error over all outputs of the batch,
    /// `(1/(B·n_out)) Σ (F(x) − y)²`, and its gradient with respect to
    /// every parameter.
    pub fn loss_and_gradients(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut tape = Tape::new(self);
        let loss = self.accumulate(xs, ys, &mut grad, &mut tape);
        (loss, grad)
    }

    /// Adds the batch gradient into `grad` and returns the batch loss.
    fn accumulate(&self, xs: &[Vec<f64>], ys: &[Vec<f64>], grad: &mut [f64], tape: &mut Tape) -> f64 {
        assert_eq!(xs.len(), ys.len());
        let count = (xs.len() * self.n_out()) as f64;
        let scale = 2.0 / count;
        let loss = self.backprop(xs, grad, tape, |i, out, delta| {
            let mut l = 0.0;
            for ((d, o), t) in delta.iter_mut().zip(out).zip(&ys[i]) {
                let r = o - t;
                l += r * r;
                *d = scale * r;
            }
            l
        });
        loss / count
    }

    /// Backpropagation with a caller-supplied loss. For sample `i`,
    /// `out_grad(i, output, delta)` writes `∂loss/∂output` into `delta` and
    /// returns the sample's loss; the summed loss is returned and the
    /// parameter gradient is added into `grad`.
    pub fn backprop_with(
        &self,
        xs: &[Vec<f64>],
        grad: &mut [f64],
        out_grad: impl FnMut(usize, &[f64], &mut [f64]) -> f64,
    ) -> f64 {
        assert_eq!(grad.len(), self.params.len());
        let mut tape = Tape::new(self);
        self.backprop(xs, grad, &mut tape, out_grad)
    }

    fn backprop(
        &self,
        xs: &[Vec<f64>],
        grad: &mut [f64],
        tape: &mut Tape,
        mut out_grad: impl FnMut(usize, &[f64], &mut [f64]) -> f64,
    ) -> f64 {
        let n_l = self.n_layers();
        let mut loss = 0.0;
        for (i, x) in xs.iter().enumerate() {
            self.check_input(x);
            self.forward_trace(x, &mut tape.acts, &mut tape.slopes);
            loss += out_grad(i, &tape.acts[n_l], &mut tape.deltas[n_l - 1]);
            for l in (0..n_l).rev() {
                let n_in = self.sizes[l];
                let off = self.offsets[l];
                let (gw, gb) = grad[off..off + (n_in + 1) * self.sizes[l + 1]].split_at_mut(n_in * self.sizes[l + 1]);
                let a = &tape.acts[l];
                let delta = &tape.deltas[l];
                for (o, &d) in delta.iter().enumerate() {
                    gb[o] += d;
                    axpy(d, a, &mut gw[o * n_in..(o + 1) * n_in]);
                }
                if l > 0 {
                    let w = self.weight(l);
                    let (lower, upper) = tape.deltas.split_at_mut(l);
                    let back = &mut lower[l - 1];
                    back.iter_mut().for_each(|v| *v = 0.0);
                    for (o, &d) in upper[0].iter().enumerate() {
                        axpy(d, &w[o * n_in..(o + 1) * n_in], back);
                    }
                    for (b, s) in back.iter_mut().zip(&tape.slopes[l - 1]) {
                        *b *= s;
                    }
                }
            }
        }
        loss
    }

    /// Mean squared error without gradients.
    pub fn mse(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
        let mut s = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            for (o, t) in self.forward(x).iter().zip(y) {
                s += (o - t) * (o - t);
            }
        }
        s / (xs.len().max(1) * self.n_out()) as f64
    }

    /// `∂F/∂x`, row-major `n_out × n_in`.
    pub fn input_jacobian(&self, x: &[f64]) -> Vec<f64> {
        self.forward_with_jacobian(x).1
    }

    /// Output and input Jacobian in one pass (forward-mode propagation of
    /// `∂a_l/∂x`).
    pub fn forward_with_jacobian(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.check_input(x);
        let n0 = self.n_in();
        let mut a = x.to_vec();
        // jac is (width × n0), row-major; starts as the identity.
        let mut jac = vec![0.0; n0 * n0];
        for i in 0..n0 {
            jac[i * n0 + i] = 1.0;
        }
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = self.weight(l);
            let mut z = vec![0.0; n_out];
            self.affine(l, &a, &mut z);
            let mut next = vec![0.0; n_out * n0];
            for o in 0..n_out {
                let row = &mut next[o * n0..(o + 1) * n0];
                for i in 0..n_in {
                    axpy(w[o * n_in + i], &jac[i * n0..(i + 1) * n0], row);
                }
            }
            if l + 1 < self.n_layers() {
                for o in 0..n_out {
                    let (v, s) = elu_and_slope(z[o], self.alpha);
                    z[o] = v;
                    next[o * n0..(o + 1) * n0].iter_mut().for_each(|j| *j *= s);
                }
            }
            a = z;
            jac = next;
        }
        (a, jac)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Scratch space for backpropagation.
struct Tape {
    acts: Vec<Vec<f64>>,
    slopes: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Tape {
    fn new(net: &Mlp) -> Self {
        let s = &net.sizes;
        Self {
            acts: s.iter().map(|&n| vec![0.0; n]).collect(),
            slopes: s[1..].iter().map(|&n| vec![0.0; n]).collect(),
            deltas: s[1..].iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs without validation improvement before the step size halves.
    pub lr_patience: usize,
    pub min_learning_rate: f64,
    pub seed: u64,
    /// Share of the data used for fitting when no explicit split exists.
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 200,
            patience: 25,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr_patience: 10,
            min_learning_rate: 1e-6,
            seed: 0,
            train_fraction: 0.85,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose weights were returned.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

/// Mini-batch Adam. Batches are reshuffled every epoch from a generator
/// seeded by `config.seed`. Training stops `patience` epochs after the last
/// validation improvement and returns the weights of the best epoch.
pub fn train(net: &Mlp, train_set: &NormalizedData, val_set: &NormalizedData, config: &TrainConfig) -> Result<(Mlp, TrainHistory)> {
    train_with(net, train_set, val_set, config, |_, _| {})
}

/// [`train`] with a callback after every epoch (used for logging).
pub fn train_with(
    net: &Mlp,
    train_set: &NormalizedData,
    val_set: &NormalizedData,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Mlp),
) -> Result<(Mlp, TrainHistory)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let val = if val_set.is_empty() { train_set } else { val_set };
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let p = net.param_count();
    let (mut m, mut v) = (vec![0.0; p], vec![0.0; p]);
    let mut grad = vec![0.0; p];
    let mut tape = Tape::new(&net);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut lr = config.learning_rate;
    let mut step = 0i32;
    let mut best = (f64::INFINITY, net.clone(), 0usize);
    let mut since_best = 0;
    let mut since_lr = 0;
    let mut history = TrainHistory { epochs: Vec::new(), best_epoch: 0, stopped_epoch: 0 };
    let mut bx: Vec<Vec<f64>> = Vec::with_capacity(config.batch_size);
    let mut by: Vec<Vec<f64>> = Vec::with_capacity(config.batch_size);
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(config.batch_size) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.push(train_set.x[i].clone());
                by.push(train_set.y[i].clone());
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = net.accumulate(&bx, &by, &mut grad, &mut tape);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            loss_sum += loss;
            n_batches += 1;
            step += 1;
            let c1 = 1.0 - config.beta1.powi(step);
            let c2 = 1.0 - config.beta2.powi(step);
            for (((w, g), mi), vi) in net.params.iter_mut().zip(&grad).zip(&mut m).zip(&mut v) {
                *mi = config.beta1 * *mi + (1.0 - config.beta1) * g;
                *vi = config.beta2 * *vi + (1.0 - config.beta2) * g * g;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + config.epsilon);
            }
        }
        let val_loss = net.mse(&val.x, &val.y);
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_loss,
            learning_rate: lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec, &net);
        history.epochs.push(rec);
        history.stopped_epoch = epoch;
        if val_loss < best.0 {
            best = (val_loss, net.clone(), epoch);
            since_best = 0;
            since_lr = 0;
        } else {
            since_best += 1;
            since_lr += 1;
            if since_best >= config.patience {
                break;
            }
            if since_lr >= config.lr_patience && lr > config.min_learning_rate {
                lr = (0.5 * lr).max(config.min_learning_rate);
                since_lr = 0;
            }
        }
    }
    history.best_epoch = best.2;
    Ok((best.1, history))
}

/// A trained pricing map: raw `θ` in, surface values in grid units out.
#[derive(Debug, Clone, PartialEq)]
pub struct PricingNet {
    pub mlp: Mlp,
    pub stats: NormalizationStats,
    pub grid: StrikeMaturityGrid,
    pub model: ModelKind,
    pub target: Target,
    pub config_hash: String,
}

impl PricingNet {
    pub fn bounds(&self) -> &ParamBounds {
        &self.stats.theta_bounds
    }

    /// Surface for normalized inputs `z ∈ [-1, 1]ⁿ`.
    pub fn surface_normalized(&self, z: &[f64]) -> Vec<f64> {
        self.stats.denormalize_surface(&self.mlp.forward(z))
    }

    /// Surface for raw parameters.
    pub fn surface(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let z = normalize_theta(theta, self.bounds())?;
        Ok(self.surface_normalized(&z))
    }

    /// Surface and `∂surface/∂z` (row-major cells × inputs) at normalized `z`.
    pub fn surface_and_jacobian_normalized(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (y, mut j) = self.mlp.forward_with_jacobian(z);
        let n_in = self.mlp.n_in();
        for c in 0..y.len() {
            let s = self.stats.scale(c);
            j[c * n_in..(c + 1) * n_in].iter_mut().for_each(|v| *v *= s);
        }
        (self.stats.denormalize_surface(&y), j)
    }

    /// `∂surface/∂θ` in raw parameter units.
    pub fn jacobian(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let z = normalize_theta(theta, self.bounds())?;
        let (_, mut j) = self.surface_and_jacobian_normalized(&z);
        let b = self.bounds();
        let n_in = z.len();
        for row in j.chunks_mut(n_in) {
            for (i, v) in row.iter_mut().enumerate() {
                *v *= 2.0 / (b.upper[i] - b.lower[i]);
            }
        }
        Ok(j)
    }

    pub fn denormalize(&self, z: &[f64]) -> Result<Vec<f64>> {
        denormalize_theta(z, self.bounds())
    }
}

/// Identifies weight files.
pub const WEIGHT_MAGIC: &str = "roughcal-mlp-v1";

/// On-disk layout shared by pricing and classifier networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFile {
    pub format: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Target>,
    pub layer_sizes: Vec<usize>,
    pub activation: String,
    pub alpha: f64,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_bounds: Option<ParamBounds>,
    pub vol_mean: f64,
    pub vol_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_std: Option<Vec<f64>>,
    pub grid: StrikeMaturityGrid,
    #[serde(default)]
    pub config: String,
}

impl WeightFile {
    pub fn from_mlp(kind: &str, mlp: &Mlp, grid: &StrikeMaturityGrid, vol_mean: f64, vol_std: f64) -> Self {
        Self {
            format: WEIGHT_MAGIC.into(),
            kind: kind.into(),
            model: None,
            target: None,
            layer_sizes: mlp.layer_sizes().to_vec(),
            activation: "elu".into(),
            alpha: mlp.alpha(),
            weights: (0..mlp.n_layers()).map(|l| mlp.weight(l).to_vec()).collect(),
            biases: (0..mlp.n_layers()).map(|l| mlp.bias(l).to_vec()).collect(),
            theta_bounds: None,
            vol_mean,
            vol_std,
            cell_mean: None,
            cell_std: None,
            grid: grid.clone(),
            config: String::new(),
        }
    }

    pub fn mlp(&self) -> Result<Mlp> {
        if self.activation != "elu" {
            return Err(Error::Format(format!("unsupported activation `{}`", self.activation)));
        }
        Mlp::from_parts(&self.layer_sizes, &self.weights, &self.biases, self.alpha)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        let mut ser = serde_json::Serializer::with_formatter(&mut w, Digits17);
        self.serialize(&mut ser)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn to_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, Digits17);
        self.serialize(&mut ser)?;
        Ok(String::from_utf8(buf).expect("JSON is UTF-8"))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format").and_then(|v| v.as_str()) {
            Some(WEIGHT_MAGIC) => {}
            other => return Err(Error::Format(format!("not a weight file (format tag {other:?})"))),
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// JSON formatter printing every float with 17 significant digits.
struct Digits17;

impl serde_json::ser::Formatter for Digits17 {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

pub fn save_weights(net: &PricingNet, path: &Path) -> Result<()> {
    pricing_weight_file(net).write(path)
}

pub fn pricing_weight_file(net: &PricingNet) -> WeightFile {
    let mut f = WeightFile::from_mlp("pricing", &net.mlp, &net.grid, net.stats.vol_mean, net.stats.vol_std);
    f.model = Some(net.model);
    f.target = Some(net.target);
    f.theta_bounds = Some(net.stats.theta_bounds.clone());
    f.cell_mean = net.stats.cell_mean.clone();
    f.cell_std = net.stats.cell_std.clone();
    f.config = net.config_hash.clone();
    f
}

pub fn pricing_net_from_file(f: &WeightFile) -> Result<PricingNet> {
    if f.kind != "pricing" {
        return Err(Error::Format(format!("expected a pricing network, found `{}`", f.kind)));
    }
    let mlp = f.mlp()?;
    let bounds = f.theta_bounds.clone().ok_or_else(|| Error::Format("missing theta_bounds".into()))?;
    if bounds.dim() != mlp.n_in() || f.grid.len() != mlp.n_out() {
        return Err(Error::Format("network shape does not match bounds and grid".into()));
    }
    Ok(PricingNet {
        mlp,
        stats: NormalizationStats {
            theta_bounds: bounds,
            vol_mean: f.vol_mean,
            vol_std: f.vol_std,
            cell_mean: f.cell_mean.clone(),
            cell_std: f.cell_std.clone(),
        },
        grid: f.grid.clone(),
        model: f.model.ok_or_else(|| Error::Format("missing model".into()))?,
        target: f.target.unwrap_or(Target::ImpliedVol),
        config_hash: f.config.clone(),
    })
}

pub fn load_weights(path: &Path) -> Result<PricingNet> {
    pricing_net_from_file(&WeightFile::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::default_training_grid;
    use crate::models::ModelKind;

    fn random_input(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn parameter_count_is_shape_sum() {
        let net = Mlp::zeros(&pricing_layer_sizes(11, 88)).unwrap();
        // 12·30 + 3·31·30 + 31·88
        assert_eq!(net.param_count(), 5878);
        for n in 1..20 {
            let direct: usize = pricing_layer_sizes(n, 88).windows(2).map(|w| w[0] * w[1] + w[1]).sum();
            assert_eq!(param_count_for(&pricing_layer_sizes(n, 88)), direct);
            assert_eq!(direct, 30 * n + 5548);
        }
        // The closed form 30n + 6478 counts four 30→30 blocks, which is the
        // shape sum of a network with five hidden layers.
        assert_eq!(param_count_for(&[11, 30, 30, 30, 30, 30, 88]), 6808);
        assert_eq!(param_count_for(&[4, 30, 30, 30, 30, 30, 88]), 6598);
    }

    #[test]
    fn zero_net_gives_zero_output_and_jacobian() {
        let net = Mlp::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(net.forward(&[0.3, -1.0, 2.0]), vec![0.0, 0.0]);
        assert!(net.input_jacobian(&[0.3, -1.0, 2.0]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input() {
        let w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let net = Mlp::from_parts(&[3, 3], std::slice::from_ref(&w), &[vec![0.0; 3]], 1.0).unwrap();
        let x = [0.5, -2.0, 7.0];
        assert_eq!(net.forward(&x), x.to_vec());
        assert_eq!(net.input_jacobian(&x), w);
    }

    #[test]
    fn linear_region_jacobian_is_weight_product() {
        // Positive weights and inputs keep every ELU in its identity branch.
        let w1 = vec![0.5, 0.2, 0.1, 0.3];
        let w2 = vec![1.5, 0.25];
        let net = Mlp::from_parts(&[2, 2, 1], &[w1, w2], &[vec![0.1, 0.1], vec![0.0]], 1.0).unwrap();
        let j = net.input_jacobian(&[0.4, 0.9]);
        assert!((j[0] - (1.5 * 0.5 + 0.25 * 0.1)).abs() < 1e-15);
        assert!((j[1] - (1.5 * 0.2 + 0.25 * 0.3)).abs() < 1e-15);
    }

    #[test]
    fn elu_branches() {
        assert_eq!(elu(2.0, 1.0), 2.0);
        assert!((elu(-1.0, 1.0) - (-1.0f64).exp_m1()).abs() < 1e-16);
        // C¹ at the origin for α = 1.
        let (_, s_neg) = elu_and_slope(-1e-12, 1.0);
        assert!((s_neg - 1.0).abs() < 1e-11);
    }

    #[test]
    fn batch_rows_match_single_forward() {
        let net = Mlp::init(&pricing_layer_sizes(11, 88), 3).unwrap();
        let xs: Vec<Vec<f64>> = (0..5).map(|s| random_input(11, s)).collect();
        let batch = net.forward_batch(&xs);
        for (x, row) in xs.iter().zip(&batch) {
            let single = net.forward(x);
            assert!(single.iter().zip(row).all(|(a, b)| (a - b).abs() <= 1e-14));
        }
    }

    #[test]
    fn one_one_one_chain_rule_by_hand() {
        // y = w2·elu(w1·x + b1) + b2 with w1·x + b1 < 0.
        let (w1, b1, w2, b2) = (0.7, -0.4, -1.3, 0.2);
        let net = Mlp::from_parts(&[1, 1, 1], &[vec![w1], vec![w2]], &[vec![b1], vec![b2]], 1.0).unwrap();
        let (x, t) = (0.3, 0.5);
        let z = w1 * x + b1;
        let h = z.exp() - 1.0;
        let y = w2 * h + b2;
        let r = y - t;
        let (loss, g) = net.loss_and_gradients(&[vec![x]], &[vec![t]]);
        assert!((loss - r * r).abs() < 1e-15);
        // Layout: w1, b1, w2, b2.
        let dz = 2.0 * r * w2 * z.exp();
        let expected = [dz * x, dz, 2.0 * r * h, 2.0 * r];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let net = Mlp::init(&[4, 6, 3], 9).unwrap();
        let x = random_input(4, 1);
        let y = net.forward(&x);
        let (loss, g) = net.loss_and_gradients(&[x], &[y]);
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    pub(crate) fn fd_rel_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Fourth-order central difference.
    fn fd5(f: impl Fn(f64) -> f64, h: f64) -> f64 {
        (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
    }

    #[test]
    fn weight_gradients_match_central_differences() {
        let net = Mlp::init(&[5, 8, 8, 4], 21).unwrap();
        let xs: Vec<Vec<f64>> = (0..3).map(|s| random_input(5, 100 + s)).collect();
        let ys: Vec<Vec<f64>> = (0..3).map(|s| random_input(4, 200 + s)).collect();
        let (_, g) = net.loss_and_gradients(&xs, &ys);
        let mut worst: f64 = 0.0;
        for k in 0..net.param_count() {
            let h = 1e-5;
            let mut p = net.clone();
            p.params_mut()[k] += h;
            let lp = p.mse(&xs, &ys);
            p.params_mut()[k] -= 2.0 * h;
            let lm = p.mse(&xs, &ys);
            worst = worst.max(fd_rel_error((lp - lm) / (2.0 * h), g[k]));
        }
        assert!(worst < 1e-6, "worst {worst:e}");
    }

    #[test]
    fn input_jacobian_matches_central_differences() {
        let net = Mlp::init(&pricing_layer_sizes(11, 88), 5).unwrap();
        let x = random_input(11, 6);
        let j = net.input_jacobian(&x);
        for i in 0..11 {
            for o in 0..88 {
                let fd = fd5(
                    |d| {
                        let mut xp = x.clone();
                        xp[i] += d;
                        net.forward(&xp)[o]
                    },
                    1e-3,
                );
                let e = fd_rel_error(fd, j[o * 11 + i]);
                assert!(e < 1e-6, "({o},{i}) {fd} vs {} rel {e:e}", j[o * 11 + i]);
            }
        }
    }

    fn toy_linear(n: usize, seed: u64) -> NormalizedData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let t: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            y.push(vec![t[0], t[1], 0.5 * t[0] - t[1]]);
            x.push(t);
        }
        NormalizedData { x, y }
    }

    #[test]
    fn fits_linear_map() {
        let data = toy_linear(512, 1);
        let val = toy_linear(128, 2);
        let w = vec![0.3, -0.1, 0.2, 0.4, -0.3, 0.1];
        let net = Mlp::from_parts(&[2, 3], &[w], &[vec![0.0; 3]], 1.0).unwrap();
        let cfg = TrainConfig { learning_rate: 1e-2, ..Default::default() };
        let (fit, hist) = train(&net, &data, &val, &cfg).unwrap();
        assert!(fit.mse(&val.x, &val.y) < 1e-8, "mse {}", fit.mse(&val.x, &val.y));
        assert!(hist.stopped_epoch <= 200);
    }

    #[test]
    fn early_stopping_returns_best_epoch() {
        // Validation targets unrelated to the inputs: the best epoch comes
        // early and training halts `patience` epochs later.
        let data = toy_linear(256, 3);
        let mut val = toy_linear(64, 4);
        val.y.iter_mut().for_each(|y| y.iter_mut().for_each(|v| *v = 5.0));
        let net = Mlp::init(&[2, 8, 3], 1).unwrap();
        let cfg = TrainConfig { max_epochs: 200, patience: 25, ..Default::default() };
        let (best, hist) = train(&net, &data, &val, &cfg).unwrap();
        let losses: Vec<f64> = hist.epochs.iter().map(|e| e.val_loss).collect();
        let argmin = losses.iter().enumerate().min_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0 + 1;
        assert_eq!(hist.best_epoch, argmin);
        if hist.stopped_epoch < 200 {
            assert_eq!(hist.stopped_epoch, hist.best_epoch + 25);
        }
        assert_eq!(best.mse(&val.x, &val.y), losses[argmin - 1]);
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_linear(128, 5);
        let net = Mlp::init(&[2, 6, 3], 2).unwrap();
        let cfg = TrainConfig { max_epochs: 10, patience: 5, seed: 3, ..Default::default() };
        let a = train(&net, &data, &data, &cfg).unwrap();
        let b = train(&net, &data, &data, &cfg).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn divergence_is_reported() {
        let data = toy_linear(64, 6);
        let net = Mlp::init(&[2, 6, 3], 2).unwrap();
        let mut bad = data.clone();
        bad.y[0][0] = f64::NAN;
        assert!(matches!(train(&net, &bad, &data, &TrainConfig::default()), Err(Error::Divergence { epoch: 1 })));
    }

    fn pricing_net() -> PricingNet {
        PricingNet {
            mlp: Mlp::init(&pricing_layer_sizes(11, 88), 8).unwrap(),
            stats: NormalizationStats {
                theta_bounds: ModelKind::RoughBergomi.default_bounds(),
                vol_mean: 0.25,
                vol_std: 0.07,
                cell_mean: None,
                cell_std: None,
            },
            grid: default_training_grid(),
            model: ModelKind::RoughBergomi,
            target: Target::ImpliedVol,
            config_hash: "deadbeef".into(),
        }
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        let net = pricing_net();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        save_weights(&net, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back, net);
        let theta = net.bounds().midpoint();
        let a = net.surface(&theta).unwrap();
        let b = back.surface(&theta).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"activation\":\"elu\""));
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let net = pricing_net();
        let text = pricing_weight_file(&net).to_string().unwrap().replace(WEIGHT_MAGIC, "something-else");
        assert!(matches!(WeightFile::parse(&text), Err(Error::Format(_))));
    }

    #[test]
    fn raw_jacobian_chains_through_normalization() {
        let net = pricing_net();
        let theta = net.bounds().midpoint();
        let j = net.jacobian(&theta).unwrap();
        for i in [0, 8, 9, 10] {
            let h = 1e-7 * (net.bounds().upper[i] - net.bounds().lower[i]);
            let mut tp = theta.clone();
            tp[i] += h;
            let mut tm = theta.clone();
            tm[i] -= h;
            let (fp, fm) = (net.surface(&tp).unwrap(), net.surface(&tm).unwrap());
            for c in [0, 40, 87] {
                let fd = (fp[c] - fm[c]) / (2.0 * h);
                assert!(fd_rel_error(fd, j[c * 11 + i]) < 1e-6);
            }
        }
    }
}
