//! Exact Gaussian-process regression with an isotropic RBF kernel.
//!
//! Inputs are mapped to the unit cube through the search bounds and
//! outputs are standardized per model, so the prior mean is zero and one
//! shared lengthscale is meaningful. Hyperparameters are fitted by ML-II
//! with a bounded multi-start Nelder–Mead search in log space.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DUPLICATE_TOLERANCE: f64 = 1e-9;
const JITTER_LADDER: [f64; 5] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    pub signal_variance: f64,
    pub lengthscale: f64,
    pub noise_variance: f64,
}

impl KernelHyper {
    fn from_log(theta: &[f64; 3]) -> Self {
        Self {
            signal_variance: theta[0].exp(),
            lengthscale: theta[1].exp(),
            noise_variance: theta[2].exp(),
        }
    }
}

/// σ²·exp(−‖a − b‖² / (2l²))
pub fn rbf(a: &[f64], b: &[f64], hyper: &KernelHyper) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    hyper.signal_variance * (-d2 / (2.0 * hyper.lengthscale * hyper.lengthscale)).exp()
}

/// Per-axis box used to map raw inputs onto the unit cube.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl InputBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::invalid("bounds need matching, non-empty lower/upper vectors"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::invalid("every axis needs finite lower < upper"));
        }
        Ok(Self { lower, upper })
    }

    pub fn unit(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| (v - l) / (u - l))
            .collect()
    }
}

/// ML-II search settings. Bounds are on natural logs.
#[derive(Debug, Clone, PartialEq)]
pub struct GpConfig {
    pub n_starts: usize,
    pub max_evals_per_start: usize,
    pub log_signal_bounds: (f64, f64),
    pub log_lengthscale_bounds: (f64, f64),
    pub log_noise_bounds: (f64, f64),
    pub seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            n_starts: 8,
            max_evals_per_start: 200,
            log_signal_bounds: (1e-3f64.ln(), 1e2f64.ln()),
            log_lengthscale_bounds: (0.05f64.ln(), 2.0f64.ln()),
            log_noise_bounds: (1e-6f64.ln(), 1e-1f64.ln()),
            seed: 0,
        }
    }
}

impl GpConfig {
    fn lower(&self) -> [f64; 3] {
        [self.log_signal_bounds.0, self.log_lengthscale_bounds.0, self.log_noise_bounds.0]
    }

    fn upper(&self) -> [f64; 3] {
        [self.log_signal_bounds.1, self.log_lengthscale_bounds.1, self.log_noise_bounds.1]
    }
}

/// How raw outputs are mapped to the zero-mean model scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputScaling {
    /// Sample mean and population std of the training targets.
    Standardize,
    Fixed { mean: f64, std: f64 },
}

/// Lower-triangular Cholesky factor; `None` if a pivot is not positive.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Some(l)
}

/// Cholesky of a positive semi-definite matrix: pivots within `tol` of zero
/// zero out their column. `None` if a pivot is clearly negative.
fn cholesky_psd(a: &[f64], n: usize, tol: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if diag < -tol || !diag.is_finite() {
            return None;
        }
        if diag <= tol {
            continue;
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Some(l)
}

/// Solves L·x = b for lower-triangular L.
fn forward_substitute(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[i * n + k] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Solves Lᵀ·x = b for lower-triangular L.
fn back_substitute(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

fn gram(x: &[Vec<f64>], hyper: &KernelHyper) -> Vec<f64> {
    let n = x.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = rbf(&x[i], &x[j], hyper);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
        k[i * n + i] += hyper.noise_variance;
    }
    k
}

/// Factorizes K + σ_n²I, escalating diagonal jitter 1e−8 … 1e−4 on failure.
fn factorize(x: &[Vec<f64>], hyper: &KernelHyper) -> Result<(Vec<f64>, f64)> {
    let n = x.len();
    let k = gram(x, hyper);
    if let Some(l) = cholesky(&k, n) {
        return Ok((l, 0.0));
    }
    for jitter in JITTER_LADDER {
        let mut kj = k.clone();
        for i in 0..n {
            kj[i * n + i] += jitter;
        }
        if let Some(l) = cholesky(&kj, n) {
            return Ok((l, jitter));
        }
    }
    Err(Error::numerical(format!(
        "kernel matrix of {n} points is not positive definite even with 1e-4 jitter"
    )))
}

fn log_marginal_likelihood(l: &[f64], n: usize, y: &[f64], weights: &[f64]) -> f64 {
    let fit: f64 = y.iter().zip(weights).map(|(a, b)| a * b).sum();
    let log_det: f64 = (0..n).map(|i| l[i * n + i].ln()).sum();
    -0.5 * fit - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Bounded Nelder–Mead minimization; points are clamped into the box.
fn nelder_mead(
    f: &mut impl FnMut(&[f64; 3]) -> f64,
    start: [f64; 3],
    lower: [f64; 3],
    upper: [f64; 3],
    max_evals: usize,
) -> ([f64; 3], f64) {
    let clamp = |p: [f64; 3]| -> [f64; 3] {
        let mut q = p;
        for i in 0..3 {
            q[i] = q[i].clamp(lower[i], upper[i]);
        }
        q
    };
    let mut simplex: Vec<([f64; 3], f64)> = Vec::with_capacity(4);
    let start = clamp(start);
    simplex.push((start, f(&start)));
    for i in 0..3 {
        let step = 0.15 * (upper[i] - lower[i]);
        let mut p = start;
        p[i] = if p[i] + step <= upper[i] { p[i] + step } else { p[i] - step };
        simplex.push((p, f(&p)));
    }
    let mut evals = 4;
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[3].1);
        if (worst - best).abs() <= 1e-9 * (1.0 + best.abs()) {
            break;
        }
        let mut centroid = [0.0; 3];
        for (p, _) in &simplex[..3] {
            for i in 0..3 {
                centroid[i] += p[i] / 3.0;
            }
        }
        let along = |t: f64| -> [f64; 3] {
            let mut q = [0.0; 3];
            for i in 0..3 {
                q[i] = centroid[i] + t * (simplex[3].0[i] - centroid[i]);
            }
            clamp(q)
        };
        let reflected = along(-1.0);
        let fr = f(&reflected);
        evals += 1;
        if fr < simplex[0].1 {
            let expanded = along(-2.0);
            let fe = f(&expanded);
            evals += 1;
            simplex[3] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (reflected, fr);
        } else {
            let contracted = if fr < simplex[3].1 { along(-0.5) } else { along(0.5) };
            let fc = f(&contracted);
            evals += 1;
            if fc < simplex[3].1.min(fr) {
                simplex[3] = (contracted, fc);
            } else {
                let best_point = simplex[0].0;
                for entry in simplex.iter_mut().skip(1) {
                    let mut q = [0.0; 3];
                    for i in 0..3 {
                        q[i] = best_point[i] + 0.5 * (entry.0[i] - best_point[i]);
                    }
                    *entry = (q, f(&q));
                    evals += 1;
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

/// Fitted single-objective surrogate.
#[derive(Debug, Clone)]
pub struct GpModel {
    bounds: InputBounds,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    hyper: KernelHyper,
    chol: Vec<f64>,
    weights: Vec<f64>,
    jitter: f64,
    y_mean: f64,
    y_std: f64,
    log_likelihood: f64,
    fit_seconds: f64,
}

/// Averages targets of inputs closer than the duplicate tolerance.
fn merge_duplicates(x: Vec<Vec<f64>>, y: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut ux: Vec<Vec<f64>> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for (xi, yi) in x.into_iter().zip(y) {
        let hit = ux.iter().position(|u| {
            u.iter().zip(&xi).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() < DUPLICATE_TOLERANCE
        });
        match hit {
            Some(k) => {
                sums[k].0 += yi;
                sums[k].1 += 1;
            }
            None => {
                ux.push(xi);
                sums.push((*yi, 1));
            }
        }
    }
    let uy = sums.into_iter().map(|(s, c)| s / c as f64).collect();
    (ux, uy)
}

fn prepare(
    x: &[Vec<f64>],
    y: &[f64],
    bounds: &InputBounds,
    scaling: OutputScaling,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, f64, f64)> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::invalid(format!("{} inputs but {} targets", x.len(), y.len())));
    }
    if x.iter().any(|r| r.len() != bounds.dim() || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid(format!("inputs must be finite {}-vectors", bounds.dim())));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("targets must be finite"));
    }
    let xn = x.iter().map(|r| bounds.normalize(r)).collect();
    let (xn, ym) = merge_duplicates(xn, y);
    let (mean, std) = match scaling {
        OutputScaling::Fixed { mean, std } => {
            if !(std > 0.0) {
                return Err(Error::invalid("output scale must be positive"));
            }
            (mean, std)
        }
        OutputScaling::Standardize => {
            let mean = ym.iter().sum::<f64>() / ym.len() as f64;
            let var = ym.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / ym.len() as f64;
            let std = var.sqrt();
            (mean, if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 })
        }
    };
    let ys = ym.iter().map(|v| (v - mean) / std).collect();
    Ok((xn, ys, mean, std))
}

impl GpModel {
    /// Fits hyperparameters by ML-II and caches the factorized solve.
    pub fn fit(x: &[Vec<f64>], y: &[f64], bounds: &InputBounds, config: &GpConfig) -> Result<Self> {
        let started = Instant::now();
        if x.len() < 2 {
            return Err(Error::invalid("a GP needs at least two observations"));
        }
        let (xn, ys, mean, std) = prepare(x, y, bounds, OutputScaling::Standardize)?;
        let n = xn.len();
        let mut objective = |theta: &[f64; 3]| -> f64 {
            let hyper = KernelHyper::from_log(theta);
            match factorize(&xn, &hyper) {
                Ok((l, _)) => {
                    let w = back_substitute(&l, n, &forward_substitute(&l, n, &ys));
                    -log_marginal_likelihood(&l, n, &ys, &w)
                }
                Err(_) => f64::INFINITY,
            }
        };
        let (lo, hi) = (config.lower(), config.upper());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut best: Option<([f64; 3], f64)> = None;
        for start in 0..config.n_starts.max(1) {
            let theta0 = if start == 0 {
                [0.0f64.clamp(lo[0], hi[0]), 0.3f64.ln().clamp(lo[1], hi[1]), 1e-3f64.ln().clamp(lo[2], hi[2])]
            } else {
                [
                    rng.random_range(lo[0]..=hi[0]),
                    rng.random_range(lo[1]..=hi[1]),
                    rng.random_range(lo[2]..=hi[2]),
                ]
            };
            let candidate = nelder_mead(&mut objective, theta0, lo, hi, config.max_evals_per_start);
            if best.is_none_or(|b| candidate.1 < b.1) {
                best = Some(candidate);
            }
        }
        let (theta, value) = best.expect("at least one start");
        if !value.is_finite() {
            return Err(Error::numerical("no hyperparameter setting gave a factorizable kernel"));
        }
        let mut model = Self::assemble(bounds.clone(), xn, ys, mean, std, KernelHyper::from_log(&theta))?;
        model.fit_seconds = started.elapsed().as_secs_f64();
        Ok(model)
    }

    /// Conditions on data with fixed hyperparameters (no fitting).
    pub fn condition(
        x: &[Vec<f64>],
        y: &[f64],
        bounds: &InputBounds,
        hyper: KernelHyper,
        scaling: OutputScaling,
    ) -> Result<Self> {
        if !(hyper.signal_variance > 0.0 && hyper.lengthscale > 0.0 && hyper.noise_variance >= 0.0) {
            return Err(Error::invalid("kernel hyperparameters must be positive"));
        }
        let (xn, ys, mean, std) = prepare(x, y, bounds, scaling)?;
        Self::assemble(bounds.clone(), xn, ys, mean, std, hyper)
    }

    fn assemble(
        bounds: InputBounds,
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
        y_mean: f64,
        y_std: f64,
        hyper: KernelHyper,
    ) -> Result<Self> {
        let n = x.len();
        let (chol, jitter) = factorize(&x, &hyper)?;
        let weights = back_substitute(&chol, n, &forward_substitute(&chol, n, &y));
        let log_likelihood = log_marginal_likelihood(&chol, n, &y, &weights);
        Ok(Self {
            bounds,
            x,
            y,
            hyper,
            chol,
            weights,
            jitter,
            y_mean,
            y_std,
            log_likelihood,
            fit_seconds: 0.0,
        })
    }

    pub fn hyper(&self) -> &KernelHyper {
        &self.hyper
    }

    pub fn bounds(&self) -> &InputBounds {
        &self.bounds
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    /// Training inputs on the unit cube (after duplicate merging).
    pub fn normalized_inputs(&self) -> &[Vec<f64>] {
        &self.x
    }

    /// Training targets on the model scale.
    pub fn standardized_targets(&self) -> &[f64] {
        &self.y
    }

    /// (mean, std) mapping model scale back to raw outputs.
    pub fn output_scaling(&self) -> (f64, f64) {
        (self.y_mean, self.y_std)
    }

    /// σ_n² plus any jitter the factorization needed.
    pub fn effective_noise(&self) -> f64 {
        self.hyper.noise_variance + self.jitter
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn fit_seconds(&self) -> f64 {
        self.fit_seconds
    }

    /// Prior variance on the raw output scale.
    pub fn prior_variance(&self) -> f64 {
        self.hyper.signal_variance * self.y_std * self.y_std
    }

    fn cross(&self, xn: &[f64]) -> Vec<f64> {
        self.x.iter().map(|xi| rbf(xi, xn, &self.hyper)).collect()
    }

    /// Posterior mean and latent-function variance at a raw input.
    pub fn posterior(&self, x: &[f64]) -> Posterior {
        let xn = self.bounds.normalize(x);
        let ks = self.cross(&xn);
        let mean: f64 = ks.iter().zip(&self.weights).map(|(a, b)| a * b).sum();
        let v = forward_substitute(&self.chol, self.x.len(), &ks);
        let var = (self.hyper.signal_variance - v.iter().map(|a| a * a).sum::<f64>()).max(0.0);
        Posterior {
            mean: self.y_mean + self.y_std * mean,
            variance: var * self.y_std * self.y_std,
        }
    }

    /// Joint posterior mean vector and covariance (row-major) over `xs`.
    pub fn posterior_joint(&self, xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let m = xs.len();
        let n = self.x.len();
        let xn: Vec<Vec<f64>> = xs.iter().map(|x| self.bounds.normalize(x)).collect();
        let vs: Vec<Vec<f64>> = xn
            .iter()
            .map(|p| forward_substitute(&self.chol, n, &self.cross(p)))
            .collect();
        let means = xn
            .iter()
            .map(|p| {
                let mu: f64 = self.cross(p).iter().zip(&self.weights).map(|(a, b)| a * b).sum();
                self.y_mean + self.y_std * mu
            })
            .collect();
        let scale = self.y_std * self.y_std;
        let mut cov = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..=i {
                let prior = rbf(&xn[i], &xn[j], &self.hyper);
                let reduction: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
                let mut c = (prior - reduction) * scale;
                if i == j {
                    c = c.max(0.0);
                }
                cov[i * m + j] = c;
                cov[j * m + i] = c;
            }
        }
        (means, cov)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    pub variance: f64,
}

/// Anything that yields a Gaussian posterior at a point.
pub trait Surrogate {
    fn posterior(&self, x: &[f64]) -> Posterior;
    /// Prior variance, used to rank exploration candidates.
    fn prior_variance(&self) -> f64;
}

impl Surrogate for GpModel {
    fn posterior(&self, x: &[f64]) -> Posterior {
        GpModel::posterior(self, x)
    }

    fn prior_variance(&self) -> f64 {
        GpModel::prior_variance(self)
    }
}

/// Samples of shape (samples × candidates × objectives).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTensor {
    pub n_samples: usize,
    pub n_candidates: usize,
    pub n_objectives: usize,
    pub data: Vec<f64>,
}

impl SampleTensor {
    pub fn get(&self, sample: usize, candidate: usize, objective: usize) -> f64 {
        self.data[(sample * self.n_candidates + candidate) * self.n_objectives + objective]
    }
}

/// Draws joint posterior samples over `candidates` from each independent
/// model. Deterministic for a fixed seed.
pub fn sample_joint(
    models: &[&GpModel],
    candidates: &[Vec<f64>],
    n_samples: usize,
    seed: u64,
) -> Result<SampleTensor> {
    let Some(first) = models.first() else {
        return Err(Error::invalid("no models to sample from"));
    };
    if models.iter().any(|m| m.dim() != first.dim()) {
        return Err(Error::invalid("models disagree on input dimension"));
    }
    let m = candidates.len();
    let n_obj = models.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; n_samples * m * n_obj];
    for (o, model) in models.iter().enumerate() {
        let (means, cov) = model.posterior_joint(candidates);
        let scale = cov.iter().step_by(m + 1).cloned().fold(0.0, f64::max).max(model.prior_variance());
        let mut factor = cholesky_psd(&cov, m, 1e-12 * scale);
        if factor.is_none() {
            for jitter in JITTER_LADDER {
                let mut cj = cov.clone();
                for i in 0..m {
                    cj[i * m + i] += jitter * scale;
                }
                factor = cholesky_psd(&cj, m, 1e-12 * scale);
                if factor.is_some() {
                    break;
                }
            }
        }
        let l = factor.ok_or_else(|| Error::numerical("candidate posterior covariance is not PSD"))?;
        let mut z = vec![0.0; m];
        for s in 0..n_samples {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            for c in 0..m {
                let mut v = means[c];
                for k in 0..=c {
                    v += l[c * m + k] * z[k];
                }
                data[(s * m + c) * n_obj + o] = v;
            }
        }
    }
    Ok(SampleTensor {
        n_samples,
        n_candidates: m,
        n_objectives: n_obj,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();
        let y = x
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, v)| ((i + 1) as f64 * 3.0 * v).sin()).sum::<f64>())
            .collect();
        (x, y)
    }

    /// Posterior computed with an LU solve of the dense system.
    fn dense_posterior(model: &GpModel, xs: &[f64]) -> (f64, f64) {
        let h = model.hyper();
        let xn = model.normalized_inputs();
        let n = xn.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            let d2: f64 = xn[i].iter().zip(&xn[j]).map(|(a, b)| (a - b).powi(2)).sum();
            h.signal_variance * (-d2 / (2.0 * h.lengthscale.powi(2))).exp()
                + if i == j { model.effective_noise() } else { 0.0 }
        });
        let p: Vec<f64> = xs
            .iter()
            .zip(model.bounds().lower().iter().zip(model.bounds().upper()))
            .map(|(v, (l, u))| (v - l) / (u - l))
            .collect();
        let ks = DVector::from_fn(n, |i, _| {
            let d2: f64 = xn[i].iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
            h.signal_variance * (-d2 / (2.0 * h.lengthscale.powi(2))).exp()
        });
        let lu = k.lu();
        let alpha = lu.solve(&DVector::from_column_slice(model.standardized_targets())).unwrap();
        let beta = lu.solve(&ks).unwrap();
        let (mean, std) = model.output_scaling();
        (
            mean + std * ks.dot(&alpha),
            (h.signal_variance - ks.dot(&beta)).max(0.0) * std * std,
        )
    }

    fn close(a: f64, b: f64, scale: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(scale)
    }

    #[test]
    fn rbf_values() {
        let h = KernelHyper { signal_variance: 1.0, lengthscale: 1.0, noise_variance: 0.0 };
        assert!((rbf(&[0.0, 0.0], &[1.0, 0.0], &h) - 0.60653).abs() < 1e-5);
        assert_eq!(rbf(&[0.3, 0.1], &[0.3, 0.1], &KernelHyper { signal_variance: 2.5, ..h }), 2.5);
        assert!(rbf(&[0.0], &[100.0], &h) < 1e-300);
    }

    #[test]
    fn fitted_solve_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (x, y) = random_problem(&mut rng, 20, 3);
        let model = GpModel::fit(&x, &y, &InputBounds::unit(3), &GpConfig::default()).unwrap();
        let h = model.hyper();
        assert!(h.noise_variance >= 1e-6 * (1.0 - 1e-12));
        for _ in 0..20 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-0.2..1.2)).collect();
            let (m, v) = dense_posterior(&model, &q);
            let post = model.posterior(&q);
            assert!(close(post.mean, m, model.output_scaling().1, 1e-8), "{} vs {m}", post.mean);
            assert!(close(post.variance, v, model.prior_variance(), 1e-8), "{} vs {v}", post.variance);
            assert!(post.variance <= model.prior_variance());
        }
    }

    #[test]
    fn cached_weights_solve_the_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = random_problem(&mut rng, 25, 4);
        let model = GpModel::fit(&x, &y, &InputBounds::unit(4), &GpConfig::default()).unwrap();
        let xn = model.normalized_inputs();
        let w = model.weights();
        let ys = model.standardized_targets();
        let norm = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut residual = 0.0;
        for i in 0..xn.len() {
            let mut s = model.effective_noise() * w[i];
            for j in 0..xn.len() {
                s += rbf(&xn[i], &xn[j], model.hyper()) * w[j];
            }
            residual += (s - ys[i]).powi(2);
        }
        assert!(residual.sqrt() <= 1e-8 * norm);
    }

    #[test]
    fn two_point_closed_form() {
        let h = KernelHyper { signal_variance: 1.7, lengthscale: 0.4, noise_variance: 0.05 };
        let x = vec![vec![0.2, 0.3], vec![0.6, 0.9]];
        let y = vec![1.5, -0.5];
        let model = GpModel::condition(&x, &y, &InputBounds::unit(2), h, OutputScaling::Fixed { mean: 0.0, std: 1.0 }).unwrap();
        let q = [0.4, 0.5];
        let a = h.signal_variance + h.noise_variance;
        let b = h.signal_variance * (-(0.16 + 0.36) / (2.0 * 0.16f64)).exp();
        let det = a * a - b * b;
        let k1 = h.signal_variance * (-(0.04 + 0.04) / 0.32f64).exp();
        let k2 = h.signal_variance * (-(0.04 + 0.16) / 0.32f64).exp();
        let w1 = (a * y[0] - b * y[1]) / det;
        let w2 = (-b * y[0] + a * y[1]) / det;
        let mean = k1 * w1 + k2 * w2;
        let quad = (a * k1 * k1 - 2.0 * b * k1 * k2 + a * k2 * k2) / det;
        let post = model.posterior(&q);
        assert!((post.mean - mean).abs() < 1e-12);
        assert!((post.variance - (h.signal_variance - quad)).abs() < 1e-12);
    }

    #[test]
    fn interpolates_training_points_at_noise_floor() {
        let h = KernelHyper { signal_variance: 1.0, lengthscale: 0.3, noise_variance: 1e-6 };
        let x = vec![vec![0.1], vec![0.5], vec![0.8]];
        let y = vec![2.0, 3.0, 1.0];
        let model = GpModel::condition(&x, &y, &InputBounds::unit(1), h, OutputScaling::Standardize).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            let p = model.posterior(xi);
            assert!((p.mean - yi).abs() < 1e-5 * model.output_scaling().1.max(1.0));
            assert!(p.variance < 1e-5 * model.prior_variance());
        }
        let far = model.posterior(&[50.0]);
        assert!((far.mean - model.output_scaling().0).abs() < 1e-12);
        assert!((far.variance - model.prior_variance()).abs() < 1e-12);
    }

    #[test]
    fn constant_targets() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 / 5.0, (i * i) as f64 / 25.0]).collect();
        let y = vec![4.2; 6];
        let model = GpModel::fit(&x, &y, &InputBounds::unit(2), &GpConfig::default()).unwrap();
        for q in [[0.3, 0.3], [0.9, 0.1], [0.0, 1.0]] {
            assert!((model.posterior(&q).mean - 4.2).abs() < 1e-9);
        }
        assert!(model.hyper().signal_variance < 1e-2);
    }

    #[test]
    fn duplicates_are_averaged() {
        let x = vec![vec![0.2], vec![0.2], vec![0.7]];
        let y = vec![1.0, 3.0, 0.0];
        let model = GpModel::fit(&x, &y, &InputBounds::unit(1), &GpConfig::default()).unwrap();
        assert_eq!(model.normalized_inputs().len(), 2);
        let (m, s) = model.output_scaling();
        assert!((model.standardized_targets()[0] * s + m - 2.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_prior_hyperparameters() {
        let truth = KernelHyper { signal_variance: 1.0, lengthscale: 0.3, noise_variance: 1e-2 };
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 60;
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random(), rng.random()]).collect();
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                cov[i * n + j] = rbf(&x[i], &x[j], &truth) + if i == j { truth.noise_variance } else { 0.0 };
            }
        }
        let l = cholesky(&cov, n).unwrap();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..n).map(|i| (0..=i).map(|k| l[i * n + k] * z[k]).sum()).collect();
        let model = GpModel::fit(&x, &y, &InputBounds::unit(2), &GpConfig { seed: 5, ..GpConfig::default() }).unwrap();
        let s2 = model.output_scaling().1.powi(2);
        let h = model.hyper();
        assert!((h.signal_variance * s2).ln().abs() < 1.0, "{h:?}");
        assert!((h.lengthscale / truth.lengthscale).ln().abs() < 1.0, "{h:?}");
        assert!((h.noise_variance * s2 / truth.noise_variance).ln().abs() < 1.0, "{h:?}");
        assert!(model.fit_seconds() > 0.0);
    }

    #[test]
    fn fit_is_deterministic_and_validates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, y) = random_problem(&mut rng, 10, 2);
        let b = InputBounds::unit(2);
        let a1 = GpModel::fit(&x, &y, &b, &GpConfig::default()).unwrap();
        let a2 = GpModel::fit(&x, &y, &b, &GpConfig::default()).unwrap();
        assert_eq!(a1.hyper(), a2.hyper());
        assert!(GpModel::fit(&x[..1], &y[..1], &b, &GpConfig::default()).is_err());
        assert!(GpModel::fit(&x, &y[..3], &b, &GpConfig::default()).is_err());
        assert!(InputBounds::new(vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn sample_mean_converges_to_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x, y) = random_problem(&mut rng, 8, 2);
        let b = InputBounds::unit(2);
        let m1 = GpModel::fit(&x, &y, &b, &GpConfig::default()).unwrap();
        let y2: Vec<f64> = y.iter().map(|v| v * v).collect();
        let m2 = GpModel::fit(&x, &y2, &b, &GpConfig::default()).unwrap();
        let cands = vec![vec![0.1, 0.9], vec![0.5, 0.5], vec![0.95, 0.05]];
        let n = 100_000;
        let t = sample_joint(&[&m1, &m2], &cands, n, 99).unwrap();
        for (o, model) in [&m1, &m2].iter().enumerate() {
            for (c, q) in cands.iter().enumerate() {
                let p = model.posterior(q);
                let mean = (0..n).map(|s| t.get(s, c, o)).sum::<f64>() / n as f64;
                let var = (0..n).map(|s| (t.get(s, c, o) - mean).powi(2)).sum::<f64>() / n as f64;
                let se = (p.variance / n as f64).sqrt();
                assert!((mean - p.mean).abs() < 4.0 * se + 1e-12, "{mean} vs {}", p.mean);
                assert!((var - p.variance).abs() < 0.03 * p.variance + 1e-12);
            }
        }
        assert_eq!(t, sample_joint(&[&m1, &m2], &cands, n, 99).unwrap());
    }

    #[test]
    fn zero_variance_samples_equal_mean() {
        let h = KernelHyper { signal_variance: 1.0, lengthscale: 0.2, noise_variance: 0.0 };
        let x = vec![vec![0.1], vec![0.6], vec![0.9]];
        let model = GpModel::condition(&x, &[1.0, -1.0, 0.5], &InputBounds::unit(1), h, OutputScaling::Standardize).unwrap();
        let t = sample_joint(&[&model], &x, 50, 4).unwrap();
        for c in 0..3 {
            let mean = model.posterior(&x[c]).mean;
            for s in 0..50 {
                assert_eq!(t.get(s, c, 0), mean);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn variance_never_increases_with_data(seed in any::<u64>(), n in 2usize..15, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = random_problem(&mut rng, n + 1, d);
            let h = KernelHyper {
                signal_variance: rng.random_range(0.1..5.0),
                lengthscale: rng.random_range(0.05..2.0),
                noise_variance: rng.random_range(1e-6..1e-1),
            };
            let scaling = OutputScaling::Fixed { mean: 0.3, std: 1.7 };
            let b = InputBounds::unit(d);
            let small = GpModel::condition(&x[..n], &y[..n], &b, h, scaling).unwrap();
            let big = GpModel::condition(&x, &y, &b, h, scaling).unwrap();
            for _ in 0..10 {
                let q: Vec<f64> = (0..d).map(|_| rng.random()).collect();
                prop_assert!(big.posterior(&q).variance <= small.posterior(&q).variance + 1e-8);
            }
        }

        #[test]
        fn kernel_matrix_is_psd(seed in any::<u64>(), n in 2usize..20, d in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, _) = random_problem(&mut rng, n, d);
            let h = KernelHyper {
                signal_variance: rng.random_range(0.1..5.0),
                lengthscale: rng.random_range(0.05..2.0),
                noise_variance: rng.random_range(1e-6..1e-1),
            };
            let k = gram(&x, &h);
            let eig = DMatrix::from_row_slice(n, n, &k).symmetric_eigen();
            prop_assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-10));
        }

        #[test]
        fn predictions_ignore_training_order(seed in any::<u64>(), n in 2usize..15, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = random_problem(&mut rng, n, d);
            let h = KernelHyper { signal_variance: 1.3, lengthscale: 0.4, noise_variance: 1e-4 };
            let b = InputBounds::unit(d);
            let a = GpModel::condition(&x, &y, &b, h, OutputScaling::Standardize).unwrap();
            let (xr, yr): (Vec<_>, Vec<_>) = x.iter().cloned().zip(y.iter().cloned()).rev().unzip();
            let r = GpModel::condition(&xr, &yr, &b, h, OutputScaling::Standardize).unwrap();
            for _ in 0..10 {
                let q: Vec<f64> = (0..d).map(|_| rng.random()).collect();
                let (pa, pr) = (a.posterior(&q), r.posterior(&q));
                prop_assert!((pa.mean - pr.mean).abs() <= 1e-8 * pa.mean.abs().max(1.0));
                prop_assert!((pa.variance - pr.variance).abs() <= 1e-8 * a.prior_variance());
            }
        }

        #[test]
        fn fit_reproduces_training_targets(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = random_problem(&mut rng, 12, 2);
            let model = GpModel::fit(&x, &y, &InputBounds::unit(2), &GpConfig::default()).unwrap();
            let noise_sd = (model.effective_noise()).sqrt() * model.output_scaling().1;
            for (xi, yi) in x.iter().zip(&y) {
                prop_assert!((model.posterior(xi).mean - yi).abs() <= 4.0 * noise_sd + 1e-6);
            }
        }
    }
}
