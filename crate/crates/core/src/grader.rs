//! Variational autoencoder used as a motion anomaly grader.
//!
//! Input windows hold the last `W` samples of `(q, tau_o)`, oldest first, each
//! slot laid out as `[q_1..q_n, tau_1..tau_n]`. The score of a window is the
//! scaled squared reconstruction error through the latent mean:
//!
//! ```text
//! s = kappa * || x - dec(mu_z(x)) ||^2
//! ```
//!
//! where `x` is the per-feature normalized window.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{row_major, vector};
use crate::promp::Demonstration;

/// Upper edge of the safe region on the calibrated score scale.
pub const SAFE_THRESHOLD: f64 = 3.0;

const CALIBRATION_PERCENTILE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraderConfig {
    pub window: usize,
    pub stride: usize,
    pub latent: usize,
    pub hidden: usize,
    pub kl_weight: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Fraction of windows held out for model selection.
    pub validation_fraction: f64,
}

impl Default for GraderConfig {
    fn default() -> Self {
        GraderConfig {
            window: 10,
            stride: 1,
            latent: 4,
            hidden: 32,
            kl_weight: 1e-3,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            validation_fraction: 0.2,
        }
    }
}

impl GraderConfig {
    pub fn input_dim(&self, n_joints: usize) -> usize {
        2 * n_joints * self.window
    }

    pub fn validate(&self, n_joints: usize) -> Result<()> {
        if self.window < 1 || self.stride < 1 || self.hidden < 1 || self.batch_size < 1 {
            return Err(Error::Config("grader window, stride, hidden width and batch size must be >= 1".into()));
        }
        if self.latent < 1 || self.latent >= self.input_dim(n_joints) {
            return Err(Error::Config(format!(
                "latent size {} must lie in [1, {})",
                self.latent,
                self.input_dim(n_joints)
            )));
        }
        if !(self.kl_weight >= 0.0) || !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("grader needs kl_weight >= 0, learning_rate > 0, momentum in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Sliding raw (unnormalized) windows over a demonstration.
pub fn make_windows(demo: &Demonstration, config: &GraderConfig) -> Result<Vec<DVector<f64>>> {
    let w = config.window;
    if demo.len() < w {
        return Err(Error::Shape(format!("demonstration has {} samples, window needs {w}", demo.len())));
    }
    let n = demo.n_joints();
    let mut out = Vec::new();
    let mut start = 0;
    while start + w <= demo.len() {
        out.push(window_from_rows(&demo.q.rows(start, w).into_owned(), &demo.tau_o.rows(start, w).into_owned(), n));
        start += config.stride;
    }
    Ok(out)
}

/// Packs `W x n` blocks of `q` and `tau_o` (oldest row first) into a window.
pub fn window_from_rows(q: &DMatrix<f64>, tau: &DMatrix<f64>, n: usize) -> DVector<f64> {
    let w = q.nrows();
    let mut x = DVector::zeros(2 * n * w);
    for k in 0..w {
        for j in 0..n {
            x[2 * n * k + j] = q[(k, j)];
            x[2 * n * k + n + j] = tau[(k, j)];
        }
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Per-feature mean and population standard deviation. Constant features
    /// get unit scale.
    pub fn fit(windows: &[DVector<f64>]) -> Result<Self> {
        let first = windows.first().ok_or_else(|| Error::Shape("no windows to normalize".into()))?;
        let d = first.len();
        let count = windows.len() as f64;
        let mut mean = vec![0.0; d];
        for x in windows {
            if x.len() != d {
                return Err(Error::Shape("windows differ in length".into()));
            }
            for i in 0..d {
                mean[i] += x[i];
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; d];
        for x in windows {
            for i in 0..d {
                var[i] += (x[i] - mean[i]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / count).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Ok(Normalization { mean, std })
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| (x[i] - self.mean[i]) / self.std[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out x in`.
    #[serde(with = "row_major")]
    pub w: DMatrix<f64>,
    #[serde(with = "vector")]
    pub b: DVector<f64>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Dense { w: DMatrix::zeros(out, inp), b: DVector::zeros(out) }
    }

    fn random(out: usize, inp: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let limit = gain * (6.0 / (inp + out) as f64).sqrt();
        Dense { w: DMatrix::from_fn(out, inp, |_, _| rng.random_range(-limit..limit)), b: DVector::zeros(out) }
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.w * x + &self.b
    }

    fn accumulate(&mut self, delta: &DVector<f64>, input: &DVector<f64>) {
        self.w.ger(1.0, delta, input, 1.0);
        self.b += delta;
    }
}

/// Encoder and decoder weights, in a fixed order used for flattening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeParams {
    pub enc_hidden: Dense,
    pub enc_mean: Dense,
    pub enc_logvar: Dense,
    pub dec_hidden: Dense,
    pub dec_out: Dense,
}

impl VaeParams {
    fn zeros_like(other: &VaeParams) -> Self {
        let z = |d: &Dense| Dense::zeros(d.w.nrows(), d.w.ncols());
        VaeParams {
            enc_hidden: z(&other.enc_hidden),
            enc_mean: z(&other.enc_mean),
            enc_logvar: z(&other.enc_logvar),
            dec_hidden: z(&other.dec_hidden),
            dec_out: z(&other.dec_out),
        }
    }

    fn layers(&self) -> [&Dense; 5] {
        [&self.enc_hidden, &self.enc_mean, &self.enc_logvar, &self.dec_hidden, &self.dec_out]
    }

    fn layers_mut(&mut self) -> [&mut Dense; 5] {
        [&mut self.enc_hidden, &mut self.enc_mean, &mut self.enc_logvar, &mut self.dec_hidden, &mut self.dec_out]
    }

    pub fn len(&self) -> usize {
        self.layers().iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for l in self.layers() {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.b.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for l in self.layers_mut() {
            let nw = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
    }

    fn axpy(&mut self, a: f64, other: &VaeParams) {
        for (dst, src) in self.layers_mut().into_iter().zip(other.layers()) {
            dst.w += &src.w * a;
            dst.b += &src.b * a;
        }
    }

    fn scale(&mut self, a: f64) {
        for l in self.layers_mut() {
            l.w *= a;
            l.b *= a;
        }
    }

    fn is_finite(&self) -> bool {
        self.layers().iter().all(|l| l.w.iter().chain(l.b.iter()).all(|x| x.is_finite()))
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
struct Trace {
    x: DVector<f64>,
    h1: DVector<f64>,
    mu: DVector<f64>,
    logvar: DVector<f64>,
    eps: DVector<f64>,
    z: DVector<f64>,
    h2: DVector<f64>,
    x_hat: DVector<f64>,
}

impl VaeParams {
    fn new(input: usize, hidden: usize, latent: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VaeParams {
            enc_hidden: Dense::random(hidden, input, 1.0, &mut rng),
            enc_mean: Dense::random(latent, hidden, 1.0, &mut rng),
            enc_logvar: Dense::random(latent, hidden, 0.1, &mut rng),
            dec_hidden: Dense::random(hidden, latent, 1.0, &mut rng),
            dec_out: Dense::random(input, hidden, 1.0, &mut rng),
        }
    }

    fn encode_mean(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let h1 = self.enc_hidden.apply(x).map(f64::tanh);
        let mu = self.enc_mean.apply(&h1);
        (h1, mu)
    }

    fn decode(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let h2 = self.dec_hidden.apply(z).map(f64::tanh);
        let x_hat = self.dec_out.apply(&h2);
        (h2, x_hat)
    }

    fn forward(&self, x: &DVector<f64>, eps: &DVector<f64>) -> Trace {
        let (h1, mu) = self.encode_mean(x);
        let logvar = self.enc_logvar.apply(&h1);
        let z = &mu + logvar.map(|v| (0.5 * v).exp()).component_mul(eps);
        let (h2, x_hat) = self.decode(&z);
        Trace { x: x.clone(), h1, mu, logvar, eps: eps.clone(), z, h2, x_hat }
    }

    fn loss(tr: &Trace, beta: f64) -> f64 {
        let recon = (&tr.x_hat - &tr.x).norm_squared();
        let kl = 0.5 * tr.mu.iter().zip(tr.logvar.iter()).map(|(m, lv)| lv.exp() + m * m - 1.0 - lv).sum::<f64>();
        recon + beta * kl
    }

    /// Adds `scale * d loss / d params` for one sample into `g`.
    fn backward(&self, tr: &Trace, beta: f64, scale: f64, g: &mut VaeParams) {
        let g_xhat = (&tr.x_hat - &tr.x) * (2.0 * scale);
        g.dec_out.accumulate(&g_xhat, &tr.h2);
        let g_h2 = self.dec_out.w.tr_mul(&g_xhat);
        let a2 = g_h2.component_mul(&tr.h2.map(|h| 1.0 - h * h));
        g.dec_hidden.accumulate(&a2, &tr.z);
        let g_z = self.dec_hidden.w.tr_mul(&a2);

        let g_mu = &g_z + &tr.mu * (beta * scale);
        let g_lv = DVector::from_fn(tr.logvar.len(), |i, _| {
            let lv = tr.logvar[i];
            g_z[i] * tr.eps[i] * 0.5 * (0.5 * lv).exp() + beta * scale * 0.5 * (lv.exp() - 1.0)
        });
        g.enc_mean.accumulate(&g_mu, &tr.h1);
        g.enc_logvar.accumulate(&g_lv, &tr.h1);
        let g_h1 = self.enc_mean.w.tr_mul(&g_mu) + self.enc_logvar.w.tr_mul(&g_lv);
        let a1 = g_h1.component_mul(&tr.h1.map(|h| 1.0 - h * h));
        g.enc_hidden.accumulate(&a1, &tr.x);
    }
}

/// Mean loss over a batch of normalized windows with fixed reparameterization
/// noise, and its gradient with respect to every parameter.
pub fn batch_loss_and_gradient(
    params: &VaeParams,
    xs: &[DVector<f64>],
    eps: &[DVector<f64>],
    kl_weight: f64,
) -> (f64, VaeParams) {
    let mut g = VaeParams::zeros_like(params);
    let scale = 1.0 / xs.len() as f64;
    let mut loss = 0.0;
    for (x, e) in xs.iter().zip(eps) {
        let tr = params.forward(x, e);
        loss += VaeParams::loss(&tr, kl_weight) * scale;
        params.backward(&tr, kl_weight, scale, &mut g);
    }
    (loss, g)
}

/// Mean loss with the latent noise set to zero.
fn deterministic_loss(params: &VaeParams, xs: &[DVector<f64>], kl_weight: f64) -> f64 {
    let latent = params.enc_mean.b.len();
    let zero = DVector::zeros(latent);
    xs.iter().map(|x| VaeParams::loss(&params.forward(x, &zero), kl_weight)).sum::<f64>() / xs.len() as f64
}

/// Score gradient with respect to the newest sample of a raw window.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGradient {
    pub ds_dq: DVector<f64>,
    pub ds_dtau: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraderNet {
    pub config: GraderConfig,
    pub n_joints: usize,
    pub params: VaeParams,
    pub normalization: Normalization,
    pub kappa: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub best_epoch: usize,
}

impl GraderNet {
    /// Untrained network with freshly initialized weights.
    pub fn init(n_joints: usize, config: &GraderConfig, normalization: Normalization, seed: u64) -> Result<Self> {
        config.validate(n_joints)?;
        let d = config.input_dim(n_joints);
        if normalization.mean.len() != d || normalization.std.len() != d {
            return Err(Error::Shape(format!("normalization has {} features, expected {d}", normalization.mean.len())));
        }
        Ok(GraderNet {
            config: config.clone(),
            n_joints,
            params: VaeParams::new(d, config.hidden, config.latent, seed),
            normalization,
            kappa: 1.0,
            threshold: SAFE_THRESHOLD,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim(self.n_joints)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate(self.n_joints)?;
        let d = self.input_dim();
        let p = &self.params;
        let (h, l) = (self.config.hidden, self.config.latent);
        let shapes = [
            (p.enc_hidden.w.shape(), (h, d)),
            (p.enc_mean.w.shape(), (l, h)),
            (p.enc_logvar.w.shape(), (l, h)),
            (p.dec_hidden.w.shape(), (h, l)),
            (p.dec_out.w.shape(), (d, h)),
        ];
        if shapes.iter().any(|(a, b)| a != b) || p.layers().iter().any(|l| l.b.len() != l.w.nrows()) {
            return Err(Error::Shape("grader layer shapes do not match the configuration".into()));
        }
        if !p.is_finite() {
            return Err(Error::Numeric("grader parameters are not finite".into()));
        }
        if self.normalization.mean.len() != d || self.normalization.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Shape("grader normalization is inconsistent".into()));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::Config(format!("score scale must be positive, got {}", self.kappa)));
        }
        Ok(())
    }

    fn check_window(&self, window: &DVector<f64>) -> Result<()> {
        if window.len() != self.input_dim() {
            return Err(Error::Shape(format!("window has {} entries, grader expects {}", window.len(), self.input_dim())));
        }
        Ok(())
    }

    /// Anomaly score of a raw window.
    pub fn score(&self, window: &DVector<f64>) -> Result<f64> {
        self.check_window(window)?;
        let x = self.normalization.apply(window);
        let (_, mu) = self.params.encode_mean(&x);
        let (_, x_hat) = self.params.decode(&mu);
        Ok(self.kappa * (x - x_hat).norm_squared())
    }

    /// Gradient of the score with respect to every entry of the raw window.
    pub fn input_gradient(&self, window: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_window(window)?;
        let p = &self.params;
        let x = self.normalization.apply(window);
        let (h1, mu) = p.encode_mean(&x);
        let (h2, x_hat) = p.decode(&mu);
        let r = &x - &x_hat;
        // through the reconstruction path
        let g_xhat = &r * (-2.0 * self.kappa);
        let a2 = p.dec_out.w.tr_mul(&g_xhat).component_mul(&h2.map(|h| 1.0 - h * h));
        let g_mu = p.dec_hidden.w.tr_mul(&a2);
        let a1 = p.enc_mean.w.tr_mul(&g_mu).component_mul(&h1.map(|h| 1.0 - h * h));
        let g_x = &r * (2.0 * self.kappa) + p.enc_hidden.w.tr_mul(&a1);
        Ok(DVector::from_fn(g_x.len(), |i, _| g_x[i] / self.normalization.std[i]))
    }

    /// Score gradient with respect to the newest slot's `q` and `tau_o`.
    pub fn score_gradient(&self, window: &DVector<f64>) -> Result<ScoreGradient> {
        let g = self.input_gradient(window)?;
        let n = self.n_joints;
        let base = 2 * n * (self.config.window - 1);
        Ok(ScoreGradient { ds_dq: g.rows(base, n).into_owned(), ds_dtau: g.rows(base + n, n).into_owned() })
    }

    pub fn with_kappa(&self, kappa: f64) -> Self {
        GraderNet { kappa, ..self.clone() }
    }
}

/// Trains a grader on raw healthy windows.
pub fn train(
    windows: &[DVector<f64>],
    n_joints: usize,
    config: &GraderConfig,
    epochs: usize,
    seed: u64,
) -> Result<GraderNet> {
    train_with_report(windows, n_joints, config, epochs, seed).map(|(net, _)| net)
}

pub fn train_with_report(
    windows: &[DVector<f64>],
    n_joints: usize,
    config: &GraderConfig,
    epochs: usize,
    seed: u64,
) -> Result<(GraderNet, TrainReport)> {
    config.validate(n_joints)?;
    if windows.len() < 2 {
        return Err(Error::Shape("grader training needs at least two windows".into()));
    }
    let normalization = Normalization::fit(windows)?;
    let mut net = GraderNet::init(n_joints, config, normalization, seed)?;
    let xs: Vec<DVector<f64>> = windows.iter().map(|w| net.normalization.apply(w)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((xs.len() as f64 * config.validation_fraction).round() as usize).min(xs.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val: Vec<DVector<f64>> = val_idx.iter().map(|&i| xs[i].clone()).collect();
    let mut train_idx = train_idx.to_vec();
    let select = if val.is_empty() { train_idx.iter().map(|&i| xs[i].clone()).collect() } else { val };

    let mut report = TrainReport { train_loss: Vec::new(), validation_loss: Vec::new(), best_epoch: 0 };
    let mut best = net.params.clone();
    let mut best_loss = deterministic_loss(&net.params, &select, config.kl_weight);
    let mut velocity = VaeParams::zeros_like(&net.params);
    let latent = config.latent;

    for epoch in 1..=epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in train_idx.chunks(config.batch_size) {
            let batch: Vec<DVector<f64>> = chunk.iter().map(|&i| xs[i].clone()).collect();
            let eps: Vec<DVector<f64>> = (0..batch.len())
                .map(|_| DVector::from_fn(latent, |_, _| StandardNormal.sample(&mut rng)))
                .collect();
            let (loss, grad) = batch_loss_and_gradient(&net.params, &batch, &eps, config.kl_weight);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, learning_rate: config.learning_rate });
            }
            epoch_loss += loss * batch.len() as f64;
            velocity.scale(config.momentum);
            velocity.axpy(-config.learning_rate, &grad);
            net.params.axpy(1.0, &velocity);
        }
        let val_loss = deterministic_loss(&net.params, &select, config.kl_weight);
        if !val_loss.is_finite() || !net.params.is_finite() {
            return Err(Error::Divergence { epoch, learning_rate: config.learning_rate });
        }
        report.train_loss.push(epoch_loss / train_idx.len() as f64);
        report.validation_loss.push(val_loss);
        if val_loss < best_loss {
            best_loss = val_loss;
            best = net.params.clone();
            report.best_epoch = epoch;
        }
        log::debug!("grader epoch {epoch}: train {:.5} validation {val_loss:.5}", epoch_loss / train_idx.len() as f64);
    }
    net.params = best;
    Ok((net, report))
}

/// Linear-interpolation percentile of unsorted data, `p` in `[0, 1]`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Sets the score scale so that 95 % of healthy windows score at most the
/// safe threshold. Returns `(threshold, kappa)` and updates the net.
pub fn calibrate(net: &mut GraderNet, healthy: &[DVector<f64>]) -> Result<(f64, f64)> {
    if healthy.len() < 100 {
        return Err(Error::Calibration(format!("need at least 100 healthy windows, got {}", healthy.len())));
    }
    let unit = net.with_kappa(1.0);
    let scores = healthy.iter().map(|w| unit.score(w)).collect::<Result<Vec<f64>>>()?;
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let p = percentile(&scores, CALIBRATION_PERCENTILE);
    if !(hi > lo) || !(p > 0.0) || !p.is_finite() {
        return Err(Error::Calibration("healthy scores are degenerate".into()));
    }
    net.kappa = SAFE_THRESHOLD / p;
    net.threshold = SAFE_THRESHOLD;
    Ok((net.threshold, net.kappa))
}

/// Mann-Whitney estimate of the ROC AUC for `positive` scoring above `negative`.
pub fn roc_auc(negative: &[f64], positive: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in positive {
        for &n in negative {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (negative.len() * positive.len()) as f64
}
