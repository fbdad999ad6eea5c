//! Probabilistic movement primitives.
//!
//! A trajectory is `y_t = Psi_t^T w + eps`, with `y_t = [q_1, q_1', ..., q_n, q_n']`
//! and a Gaussian prior over the stacked weight vector `w`. The prior and the
//! observation noise are fitted by expectation maximization over a set of
//! demonstrations resampled onto a common phase grid.
//!
//! Every quantity the EM loop needs is a function of a handful of per-demo
//! sufficient statistics (see [`DemoStats`]), so an iteration costs
//! `O(demos * (D n)^2)` regardless of the trajectory length.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::SampledTrajectory;
use crate::error::{Error, Result};
use crate::linalg::{floor_eigenvalues, row_major, symmetrize, vector};

/// Eigenvalue floor applied to both covariance matrices.
pub const COVARIANCE_FLOOR: f64 = 1e-8;

/// Initial isotropic spread added to the weight covariance before EM.
const INITIAL_WEIGHT_SPREAD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    /// Basis functions per joint (D).
    pub n_basis: usize,
    /// Centers in phase units.
    pub centers: Vec<f64>,
    /// Gaussian variance in phase^2 units.
    pub bandwidth: f64,
    pub n_joints: usize,
    /// Duration T of the common phase grid, seconds.
    pub duration: f64,
    /// Sample spacing of the grid, seconds.
    pub dt: f64,
}

impl BasisConfig {
    /// `n_basis` centers spread uniformly over [-0.1, 1.1] with variance
    /// half the squared center spacing.
    pub fn uniform(n_joints: usize, n_basis: usize, duration: f64, dt: f64) -> Self {
        let spacing = 1.2 / (n_basis.max(2) - 1) as f64;
        let centers = (0..n_basis).map(|i| -0.1 + spacing * i as f64).collect();
        BasisConfig { n_basis, centers, bandwidth: 0.5 * spacing * spacing, n_joints, duration, dt }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_basis < 2 || self.centers.len() != self.n_basis {
            return Err(Error::Config("basis needs at least two centers, one per basis function".into()));
        }
        if self.centers.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("basis centers must be strictly increasing".into()));
        }
        if !(self.bandwidth > 0.0) || self.n_joints == 0 {
            return Err(Error::Config("basis bandwidth and joint count must be positive".into()));
        }
        if !(self.duration > 0.0 && self.dt > 0.0 && self.dt <= self.duration) {
            return Err(Error::Config("basis duration and dt must be positive with dt <= duration".into()));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        grid_len(self.duration, self.dt)
    }

    pub fn weight_dim(&self) -> usize {
        self.n_basis * self.n_joints
    }

    /// Normalized basis values and their phase derivatives at phase `z`.
    fn values(&self, z: f64) -> (DVector<f64>, DVector<f64>) {
        let d = self.n_basis;
        let raw: Vec<f64> =
            self.centers.iter().map(|c| (-(z - c).powi(2) / (2.0 * self.bandwidth)).exp()).collect();
        let raw_dz: Vec<f64> =
            self.centers.iter().zip(&raw).map(|(c, b)| -(z - c) / self.bandwidth * b).collect();
        let sum: f64 = raw.iter().sum();
        let sum_dz: f64 = raw_dz.iter().sum();
        let phi = DVector::from_iterator(d, raw.iter().map(|b| b / sum));
        let dphi = DVector::from_iterator(d, (0..d).map(|i| (raw_dz[i] * sum - raw[i] * sum_dz) / (sum * sum)));
        (phi, dphi)
    }
}

pub(crate) fn grid_len(duration: f64, dt: f64) -> usize {
    (duration / dt + 1e-9).floor() as usize + 1
}

/// Dense `(D n) x (2 n)` basis matrix at time `t`. Column `2i` holds joint
/// `i`'s position basis and column `2i + 1` its time derivative.
pub fn basis_matrix(t: f64, config: &BasisConfig) -> Result<DMatrix<f64>> {
    if !(0.0..=config.duration).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, {}]", config.duration)));
    }
    let (phi, dphi) = config.values(t / config.duration);
    let d = config.n_basis;
    let n = config.n_joints;
    let mut psi = DMatrix::zeros(d * n, 2 * n);
    for j in 0..n {
        for a in 0..d {
            psi[(j * d + a, 2 * j)] = phi[a];
            psi[(j * d + a, 2 * j + 1)] = dphi[a] / config.duration;
        }
    }
    Ok(psi)
}

/// Uniformly sampled demonstration of joint positions, velocities and SEA torque.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub dt: f64,
    /// One row per sample, one column per joint.
    pub q: DMatrix<f64>,
    pub q_dot: DMatrix<f64>,
    pub tau_o: DMatrix<f64>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.nrows() == 0
    }

    pub fn n_joints(&self) -> usize {
        self.q.ncols()
    }

    pub fn duration(&self) -> f64 {
        (self.len().saturating_sub(1)) as f64 * self.dt
    }

    pub fn validate(&self) -> Result<()> {
        if self.len() < 10 {
            return Err(Error::Shape(format!("demonstration needs at least 10 samples, has {}", self.len())));
        }
        let (r, c) = self.q.shape();
        if self.q_dot.shape() != (r, c) || self.tau_o.shape() != (r, c) {
            return Err(Error::Shape("demonstration q, q_dot and tau_o shapes differ".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Shape("demonstration dt must be positive".into()));
        }
        if self.q.iter().chain(self.q_dot.iter()).chain(self.tau_o.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Domain("demonstration contains non-finite samples".into()));
        }
        Ok(())
    }

    pub fn trajectory(&self) -> SampledTrajectory {
        SampledTrajectory { dt: self.dt, q: self.q.clone(), q_dot: self.q_dot.clone() }
    }
}

/// Resamples a demonstration onto the basis grid by linear time
/// normalization. Returns `N_T x 2n` rows `[q_1, q_1', ..., q_n, q_n']`.
fn resample(demo: &Demonstration, config: &BasisConfig) -> Result<DMatrix<f64>> {
    demo.validate()?;
    if demo.n_joints() != config.n_joints {
        return Err(Error::Shape(format!(
            "demonstration has {} joints, model expects {}",
            demo.n_joints(),
            config.n_joints
        )));
    }
    let n = config.n_joints;
    let n_t = config.n_samples();
    let scale = demo.duration() / config.duration;
    let last = demo.len() - 1;
    let mut y = DMatrix::zeros(n_t, 2 * n);
    for k in 0..n_t {
        let phase = if n_t > 1 { k as f64 / (n_t - 1) as f64 } else { 0.0 };
        let x = phase * last as f64;
        let i = (x.floor() as usize).min(last);
        let j = (i + 1).min(last);
        let f = x - i as f64;
        for c in 0..n {
            y[(k, 2 * c)] = demo.q[(i, c)] * (1.0 - f) + demo.q[(j, c)] * f;
            y[(k, 2 * c + 1)] = (demo.q_dot[(i, c)] * (1.0 - f) + demo.q_dot[(j, c)] * f) * scale;
        }
    }
    Ok(y)
}

/// Basis values on the grid plus their Gram matrices.
struct GridBasis {
    /// `phi[k]`, `dphi[k]` (time derivative) at grid sample `k`.
    phi: Vec<DVector<f64>>,
    dphi: Vec<DVector<f64>>,
    /// `gram[c][d] = sum_k B_c(k) B_d(k)^T` with `B_0 = phi`, `B_1 = dphi`.
    gram: [[DMatrix<f64>; 2]; 2],
}

impl GridBasis {
    fn new(config: &BasisConfig) -> Self {
        let n_t = config.n_samples();
        let d = config.n_basis;
        let mut phi = Vec::with_capacity(n_t);
        let mut dphi = Vec::with_capacity(n_t);
        for k in 0..n_t {
            let z = if n_t > 1 { k as f64 / (n_t - 1) as f64 } else { 0.0 };
            let (p, dp) = config.values(z);
            phi.push(p);
            dphi.push(dp / config.duration);
        }
        let mut gram: [[DMatrix<f64>; 2]; 2] =
            std::array::from_fn(|_| std::array::from_fn(|_| DMatrix::zeros(d, d)));
        for k in 0..n_t {
            let b = [&phi[k], &dphi[k]];
            for c in 0..2 {
                for e in 0..2 {
                    gram[c][e] += b[c] * b[e].transpose();
                }
            }
        }
        GridBasis { phi, dphi, gram }
    }
}

/// Sufficient statistics of one resampled demonstration.
#[derive(Debug, Clone)]
struct DemoStats {
    /// `sum_k y_k y_k^T`
    syy: DMatrix<f64>,
    /// `proj[c] = sum_k B_c(k) y_k^T`, `D x 2n`
    proj: [DMatrix<f64>; 2],
}

impl DemoStats {
    fn new(y: &DMatrix<f64>, grid: &GridBasis) -> Self {
        let dim = y.ncols();
        let d = grid.phi[0].len();
        let mut syy = DMatrix::zeros(dim, dim);
        let mut proj = [DMatrix::zeros(d, dim), DMatrix::zeros(d, dim)];
        for k in 0..y.nrows() {
            let yk = y.row(k).transpose();
            syy += &yk * yk.transpose();
            proj[0] += &grid.phi[k] * yk.transpose();
            proj[1] += &grid.dphi[k] * yk.transpose();
        }
        DemoStats { syy, proj }
    }
}

fn joint_block(w: &DVector<f64>, j: usize, d: usize) -> DVector<f64> {
    w.rows(j * d, d).into_owned()
}

/// `sum_k (y_k - Psi_k^T w)(y_k - Psi_k^T w)^T` from sufficient statistics.
fn residual_moment(stats: &DemoStats, grid: &GridBasis, w: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let d = grid.phi[0].len();
    let dim = 2 * n;
    // cross[k_idx, (j, c)] = sum_t y_t[k_idx] * B_c(t)^T w_j
    let mut cross = DMatrix::zeros(dim, dim);
    let blocks: Vec<DVector<f64>> = (0..n).map(|j| joint_block(w, j, d)).collect();
    for j in 0..n {
        for c in 0..2 {
            let col = stats.proj[c].transpose() * &blocks[j];
            cross.set_column(2 * j + c, &col);
        }
    }
    let mut model = DMatrix::zeros(dim, dim);
    for i in 0..n {
        for c in 0..2 {
            for j in 0..n {
                for e in 0..2 {
                    model[(2 * i + c, 2 * j + e)] = blocks[i].dot(&(&grid.gram[c][e] * &blocks[j]));
                }
            }
        }
    }
    &stats.syy - &cross - cross.transpose() + model
}

/// `Psi^T Sigma_Y^-1 y` summed over the grid, i.e. `sum_k Psi_k S y_k`.
fn projected_data(stats: &DemoStats, sy_inv: &DMatrix<f64>, n: usize, d: usize) -> DVector<f64> {
    let mut b = DVector::zeros(n * d);
    // proj[c] (D x 2n) * sy_inv^T -> columns indexed by (j, c)
    let weighted = [&stats.proj[0] * sy_inv, &stats.proj[1] * sy_inv];
    for j in 0..n {
        let mut block = DVector::zeros(d);
        for c in 0..2 {
            block += weighted[c].column(2 * j + c);
        }
        b.rows_mut(j * d, d).copy_from(&block);
    }
    b
}

/// `sum_k Psi_k Sigma_y^-1 Psi_k^T`.
fn precision_sum(grid: &GridBasis, sy_inv: &DMatrix<f64>, n: usize, d: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(n * d, n * d);
    for i in 0..n {
        for j in 0..n {
            let mut block = DMatrix::zeros(d, d);
            for c in 0..2 {
                for e in 0..2 {
                    block += &grid.gram[c][e] * sy_inv[(2 * i + c, 2 * j + e)];
                }
            }
            h.view_mut((i * d, j * d), (d, d)).copy_from(&block);
        }
    }
    h
}

/// `sum_k Psi_k^T S Psi_k` for a weight-space matrix `S`.
fn weight_cov_moment(grid: &GridBasis, s: &DMatrix<f64>, n: usize, d: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let sij = s.view((i * d, j * d), (d, d));
            for c in 0..2 {
                for e in 0..2 {
                    // sum_k B_c^T S_ij B_e = tr(S_ij gram[e][c])
                    out[(2 * i + c, 2 * j + e)] = sij.component_mul(&grid.gram[c][e]).sum();
                }
            }
        }
    }
    out
}

fn spd_log_det(m: &DMatrix<f64>) -> Result<f64> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("covariance lost positive definiteness".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>())
}

fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| symmetrize(&c.inverse()))
        .ok_or_else(|| Error::Numeric("covariance lost positive definiteness".into()))
}

/// Resampled demonstration kept by the model for iterative refits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredDemo {
    pub weight: f64,
    /// Grid samples, `N_T x 2n`.
    #[serde(with = "row_major")]
    pub y: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrompModel {
    pub basis: BasisConfig,
    #[serde(with = "vector")]
    pub mu_w: DVector<f64>,
    #[serde(with = "row_major")]
    pub sigma_w: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub sigma_y: DMatrix<f64>,
    /// Number of demonstrations absorbed so far (k).
    pub demo_count: usize,
    /// EM iterations used by refits.
    pub em_iters: usize,
    pub demos: Vec<StoredDemo>,
}

#[derive(Debug, Clone)]
struct EmParams {
    mu: DVector<f64>,
    sigma_w: DMatrix<f64>,
    sigma_y: DMatrix<f64>,
}

struct EmProblem<'a> {
    config: &'a BasisConfig,
    grid: GridBasis,
    stats: Vec<DemoStats>,
    weights: Vec<f64>,
}

struct EStep {
    log_likelihood: f64,
    posterior_means: Vec<DVector<f64>>,
    posterior_cov: DMatrix<f64>,
}

impl<'a> EmProblem<'a> {
    fn new(config: &'a BasisConfig, demos: &[StoredDemo]) -> Result<Self> {
        let grid = GridBasis::new(config);
        let stats = demos.iter().map(|d| DemoStats::new(&d.y, &grid)).collect();
        let weights: Vec<f64> = demos.iter().map(|d| d.weight).collect();
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Domain("demonstration weights must be finite and non-negative".into()));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Domain("total demonstration weight must be positive".into()));
        }
        Ok(EmProblem { config, grid, stats, weights })
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.config.n_joints, self.config.n_basis, self.config.n_samples())
    }

    /// Ridge least-squares weights per demo, then moment estimates.
    fn initial_params(&self) -> Result<EmParams> {
        let (n, d, n_t) = self.dims();
        let gram = &self.grid.gram[0][0] + &self.grid.gram[1][1];
        let ridge = 1e-8 * gram.trace() / d as f64;
        let solver = (gram + DMatrix::identity(d, d) * ridge)
            .cholesky()
            .ok_or_else(|| Error::Numeric("basis Gram matrix is singular".into()))?;
        let fits: Vec<DVector<f64>> = self
            .stats
            .iter()
            .map(|s| {
                let mut w = DVector::zeros(n * d);
                for j in 0..n {
                    let rhs = s.proj[0].column(2 * j) + s.proj[1].column(2 * j + 1);
                    w.rows_mut(j * d, d).copy_from(&solver.solve(&rhs));
                }
                w
            })
            .collect();
        let total: f64 = self.weights.iter().sum();
        let mu = fits.iter().zip(&self.weights).fold(DVector::zeros(n * d), |acc, (f, w)| acc + f * *w) / total;
        let mut cov = DMatrix::identity(n * d, n * d) * INITIAL_WEIGHT_SPREAD;
        let mut resid = DMatrix::zeros(2 * n, 2 * n);
        for ((f, w), s) in fits.iter().zip(&self.weights).zip(&self.stats) {
            let e = f - &mu;
            cov += &e * e.transpose() * (*w / total);
            resid += residual_moment(s, &self.grid, f, n) * *w;
        }
        resid /= total * n_t as f64;
        Ok(EmParams {
            mu,
            sigma_w: floor_eigenvalues(&cov, COVARIANCE_FLOOR),
            sigma_y: floor_eigenvalues(&resid, COVARIANCE_FLOOR),
        })
    }

    fn e_step(&self, p: &EmParams) -> Result<EStep> {
        let (n, d, n_t) = self.dims();
        let dim_w = n * d;
        let sy_inv = spd_inverse(&p.sigma_y)?;
        let h = precision_sum(&self.grid, &sy_inv, n, d);
        let l = p
            .sigma_w
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("weight covariance lost positive definiteness".into()))?
            .l();
        // S = (Sigma^-1 + H)^-1 = L (I + L^T H L)^-1 L^T, never inverting Sigma.
        let inner = DMatrix::identity(dim_w, dim_w) + l.transpose() * &h * &l;
        let inner_chol = symmetrize(&inner)
            .cholesky()
            .ok_or_else(|| Error::Numeric("posterior precision is not positive definite".into()))?;
        let log_det_inner = 2.0 * inner_chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let s = symmetrize(&(&l * inner_chol.inverse() * l.transpose()));
        let log_det_c = n_t as f64 * spd_log_det(&p.sigma_y)? + log_det_inner;
        let const_term = (n_t * 2 * n) as f64 * (2.0 * std::f64::consts::PI).ln();

        let hmu = &h * &p.mu;
        let mut ll = 0.0;
        let mut means = Vec::with_capacity(self.stats.len());
        for (stats, w) in self.stats.iter().zip(&self.weights) {
            let g = projected_data(stats, &sy_inv, n, d) - &hmu;
            let sg = &s * &g;
            let quad = residual_moment(stats, &self.grid, &p.mu, n).component_mul(&sy_inv).sum() - g.dot(&sg);
            ll += w * -0.5 * (const_term + log_det_c + quad);
            means.push(&p.mu + sg);
        }
        Ok(EStep { log_likelihood: ll, posterior_means: means, posterior_cov: s })
    }

    fn m_step(&self, e: &EStep) -> EmParams {
        let (n, d, n_t) = self.dims();
        let total: f64 = self.weights.iter().sum();
        let mu = e
            .posterior_means
            .iter()
            .zip(&self.weights)
            .fold(DVector::zeros(n * d), |acc, (m, w)| acc + m * *w)
            / total;
        let mut sigma_w = e.posterior_cov.clone();
        let mut resid = weight_cov_moment(&self.grid, &e.posterior_cov, n, d) * total;
        for ((m, w), stats) in e.posterior_means.iter().zip(&self.weights).zip(&self.stats) {
            let dev = m - &mu;
            sigma_w += &dev * dev.transpose() * (*w / total);
            resid += residual_moment(stats, &self.grid, m, n) * *w;
        }
        resid /= total * n_t as f64;
        EmParams {
            mu,
            sigma_w: floor_eigenvalues(&sigma_w, COVARIANCE_FLOOR),
            sigma_y: floor_eigenvalues(&resid, COVARIANCE_FLOOR),
        }
    }

    /// Runs `iters` EM updates. The returned trace holds the marginal
    /// log-likelihood before each update and after the last one.
    fn run(&self, mut params: EmParams, iters: usize) -> Result<(EmParams, Vec<f64>)> {
        let mut trace = Vec::with_capacity(iters + 1);
        for _ in 0..iters {
            let e = self.e_step(&params)?;
            trace.push(e.log_likelihood);
            params = self.m_step(&e);
        }
        trace.push(self.e_step(&params)?.log_likelihood);
        Ok((params, trace))
    }
}

/// Fits a model to `demos` with `iters` EM iterations.
pub fn fit_em(demos: &[Demonstration], config: &BasisConfig, iters: usize) -> Result<PrompModel> {
    fit_em_traced(demos, config, iters).map(|(m, _)| m)
}

/// As [`fit_em`], also returning the marginal log-likelihood trace.
pub fn fit_em_traced(
    demos: &[Demonstration],
    config: &BasisConfig,
    iters: usize,
) -> Result<(PrompModel, Vec<f64>)> {
    config.validate()?;
    if demos.is_empty() {
        return Err(Error::Shape("at least one demonstration is required".into()));
    }
    let stored = demos
        .iter()
        .map(|d| Ok(StoredDemo { weight: 1.0, y: resample(d, config)? }))
        .collect::<Result<Vec<_>>>()?;
    fit_stored(config, stored, iters, None)
}

fn fit_stored(
    config: &BasisConfig,
    demos: Vec<StoredDemo>,
    iters: usize,
    warm: Option<EmParams>,
) -> Result<(PrompModel, Vec<f64>)> {
    let problem = EmProblem::new(config, &demos)?;
    let init = match warm {
        Some(p) => p,
        None => problem.initial_params()?,
    };
    let (params, trace) = problem.run(init, iters)?;
    let model = PrompModel {
        basis: config.clone(),
        mu_w: params.mu,
        sigma_w: params.sigma_w,
        sigma_y: params.sigma_y,
        demo_count: demos.len(),
        em_iters: iters,
        demos,
    };
    Ok((model, trace))
}

impl PrompModel {
    pub fn n_joints(&self) -> usize {
        self.basis.n_joints
    }

    /// Marginal log-likelihood of the stored demonstrations under the current parameters.
    pub fn log_likelihood(&self) -> Result<f64> {
        let problem = EmProblem::new(&self.basis, &self.demos)?;
        Ok(problem.e_step(&self.params())?.log_likelihood)
    }

    fn params(&self) -> EmParams {
        EmParams { mu: self.mu_w.clone(), sigma_w: self.sigma_w.clone(), sigma_y: self.sigma_y.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.basis.validate()?;
        let dw = self.basis.weight_dim();
        let dy = 2 * self.basis.n_joints;
        if self.mu_w.len() != dw || self.sigma_w.shape() != (dw, dw) || self.sigma_y.shape() != (dy, dy) {
            return Err(Error::Shape("model parameter shapes do not match the basis".into()));
        }
        let n_t = self.basis.n_samples();
        if self.demos.iter().any(|d| d.y.shape() != (n_t, dy)) {
            return Err(Error::Shape("stored demonstrations do not match the basis grid".into()));
        }
        Ok(())
    }

    fn trajectory_from_weights(&self, w: &DVector<f64>, duration: f64, dt: f64) -> SampledTrajectory {
        let n = self.n_joints();
        let d = self.basis.n_basis;
        let len = grid_len(duration, dt);
        let mut q = DMatrix::zeros(len, n);
        let mut q_dot = DMatrix::zeros(len, n);
        for k in 0..len {
            let z = ((k as f64 * dt) / duration).min(1.0);
            let (phi, dphi) = self.basis.values(z);
            for j in 0..n {
                let wj = w.rows(j * d, d);
                q[(k, j)] = phi.dot(&wj);
                q_dot[(k, j)] = dphi.dot(&wj) / duration;
            }
        }
        SampledTrajectory { dt, q, q_dot }
    }
}

/// `y_t = Psi_t^T mu_w` on a grid of `floor(T / dt) + 1` samples.
pub fn mean_trajectory(model: &PrompModel, duration: f64, dt: f64) -> SampledTrajectory {
    model.trajectory_from_weights(&model.mu_w, duration, dt)
}

/// Draws `w ~ N(mu_w, Sigma_w)` and returns its trajectory on the model grid.
pub fn sample_trajectory(model: &PrompModel, seed: u64) -> Result<SampledTrajectory> {
    let l = model
        .sigma_w
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("weight covariance is not positive definite".into()))?
        .l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = DVector::from_iterator(model.mu_w.len(), (0..model.mu_w.len()).map(|_| StandardNormal.sample(&mut rng)));
    let w = &model.mu_w + l * eps;
    Ok(model.trajectory_from_weights(&w, model.basis.duration, model.basis.dt))
}

/// Appends a demonstration with the given weight and refits, warm-started
/// from the current parameters.
pub fn update_with_demo(model: &PrompModel, demo: &Demonstration, weight: f64) -> Result<PrompModel> {
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(Error::Domain(format!("demo weight must be finite and non-negative, got {weight}")));
    }
    let y = resample(demo, &model.basis)?;
    let mut demos = model.demos.clone();
    demos.push(StoredDemo { weight, y });
    let (mut next, _) = fit_stored(&model.basis, demos, model.em_iters, Some(model.params()))?;
    next.demo_count = model.demo_count + 1;
    Ok(next)
}

/// Refits from scratch on the model's stored (weighted) demonstrations.
pub fn refit_from_scratch(model: &PrompModel, iters: usize) -> Result<PrompModel> {
    let (mut m, _) = fit_stored(&model.basis, model.demos.clone(), iters, None)?;
    m.em_iters = model.em_iters;
    m.demo_count = model.demo_count;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config1(d: usize) -> BasisConfig {
        BasisConfig::uniform(1, d, 1.0, 0.01)
    }

    #[test]
    fn position_rows_sum_to_one_and_derivatives_to_zero() {
        let cfg = BasisConfig::uniform(3, 15, 5.0, 0.01);
        for &t in &[0.0, 0.7, 2.5, 4.99, 5.0] {
            let psi = basis_matrix(t, &cfg).unwrap();
            for j in 0..3 {
                let pos: f64 = psi.column(2 * j).iter().sum();
                let vel: f64 = psi.column(2 * j + 1).iter().sum();
                assert!((pos - 1.0).abs() < 1e-10);
                assert!(vel.abs() < 1e-10);
                assert!(psi.column(2 * j).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn symmetric_two_basis_midpoint() {
        let mut cfg = config1(2);
        cfg.centers = vec![0.0, 1.0];
        let psi = basis_matrix(0.5, &cfg).unwrap();
        assert!((psi[(0, 0)] - psi[(1, 0)]).abs() < 1e-15);
    }

    #[test]
    fn basis_rejects_time_outside_span() {
        let cfg = config1(5);
        assert!(matches!(basis_matrix(1.5, &cfg), Err(Error::Domain(_))));
        assert!(matches!(basis_matrix(-0.1, &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = config1(5);
        cfg.centers[2] = cfg.centers[1];
        assert!(cfg.validate().is_err());
        let mut cfg = config1(5);
        cfg.bandwidth = 0.0;
        assert!(cfg.validate().is_err());
        assert!(BasisConfig::uniform(1, 1, 1.0, 0.01).validate().is_err());
    }

    #[test]
    fn inconsistent_demo_shapes_rejected() {
        let cfg = BasisConfig::uniform(2, 5, 1.0, 0.01);
        let demo = Demonstration {
            dt: 0.01,
            q: DMatrix::zeros(20, 1),
            q_dot: DMatrix::zeros(20, 1),
            tau_o: DMatrix::zeros(20, 1),
        };
        assert!(matches!(fit_em(&[demo], &cfg, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn short_demo_rejected() {
        let demo =
            Demonstration { dt: 0.01, q: DMatrix::zeros(5, 1), q_dot: DMatrix::zeros(5, 1), tau_o: DMatrix::zeros(5, 1) };
        assert!(demo.validate().is_err());
    }

    #[test]
    fn grid_length_is_floor_plus_one() {
        let cfg = BasisConfig::uniform(1, 5, 5.0, 0.01);
        assert_eq!(cfg.n_samples(), 501);
        assert_eq!(grid_len(1.0, 0.3), 4);
    }
}
