//! Sensitivity scores and TCAV variants.
//!
//! Under the Gaussian model a CAV's projected sensitivity is
//! `S_N ~ N(μ, σ²/N)`. The closed forms used by [`predict_tcav_distribution`]:
//!
//! | method    | mean              | variance                                 |
//! |-----------|-------------------|------------------------------------------|
//! | indicator | `Φ(√N μ/σ)`       | `p(1 − p)`                               |
//! | multi     | `Φ(√n μ/σ)`       | `p(1 − p)/s`, `n = N/s`                  |
//! | alpha     | logit-normal `m`  | `m(1−m)(1 − 1/√(1 + τ₂α²σ²/N))`          |
//!
//! Calibrated sharpness values: `α* = (1/σ)√(n/(τ₁(1 − 1/s)))` matches the
//! α-TCAV mean to Multi-TCAV, and `α† = (1/σ)√(N/τ₁)` turns the score into the
//! posterior probability `Φ(√N S/σ)` that the concept has positive influence.
//! On real sensitivities both are applied to `S/γ` with `σ` replaced by
//! `σ̂_eff/γ`.
//!
//! Two readings of an α-TCAV score coexist: [`alpha_tcav`] averages over test
//! inputs for one fitted CAV (conditional on that CAV), while
//! [`predict_tcav_distribution`] describes the score's law over CAV draws.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cav::Estimator;
use crate::error::{Error, Result};
use crate::statfun::{indicator_positive, logit_normal, normal_cdf, Sharpness, TAU1, TAU2};

pub const DEFAULT_GAMMA_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityBatch {
    pub scores: Vec<f64>,
    pub cav_id: Option<String>,
    /// Number of samples used to fit the CAV (`N`).
    pub n_train: usize,
}

impl SensitivityBatch {
    pub fn new(scores: Vec<f64>, n_train: usize) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Data("sensitivity batch is empty".into()));
        }
        if !scores.iter().all(|s| s.is_finite()) {
            return Err(Error::Data("sensitivity scores must be finite".into()));
        }
        Ok(Self { scores, cav_id: None, n_train })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.cav_id = Some(id.into());
        self
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Scores divided by `gamma`.
    pub fn normalized(&self, gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self {
            scores: self.scores.iter().map(|s| s / gamma).collect(),
            cav_id: self.cav_id.clone(),
            n_train: self.n_train,
        })
    }
}

/// `S(x_i) = ⟨∇h(x_i), w⟩` for each gradient row.
pub fn sensitivity_scores(grads: &DMatrix<f64>, cav: &DVector<f64>, n_train: usize) -> Result<SensitivityBatch> {
    if grads.ncols() != cav.len() {
        return Err(Error::Data(format!(
            "gradients have {} columns but the CAV has length {}",
            grads.ncols(),
            cav.len()
        )));
    }
    let scores = grads * cav;
    SensitivityBatch::new(scores.as_slice().to_vec(), n_train)
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sum::<f64>() / n
}

/// Fraction of strictly positive scores.
pub fn tcav_indicator(batch: &SensitivityBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("sensitivity batch is empty".into()));
    }
    Ok(mean(batch.scores.iter().map(|&s| indicator_positive(s))))
}

/// Mean of `s_α(S)`, or of the midpoint Heaviside step for `Sharpness::Infinite`.
pub fn alpha_tcav(batch: &SensitivityBatch, alpha: Sharpness) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("sensitivity batch is empty".into()));
    }
    let alpha = alpha.validate()?;
    Ok(mean(batch.scores.iter().map(|&s| alpha.apply(s))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTcav {
    pub score: f64,
    pub per_subset: Vec<f64>,
}

/// Sizes of `s` contiguous blocks covering `n` rows, remainder spread from the front.
pub fn block_sizes(n: usize, s: usize) -> Vec<usize> {
    let base = n / s;
    let extra = n % s;
    (0..s).map(|j| base + usize::from(j < extra)).collect()
}

fn shuffled_blocks(m: &DMatrix<f64>, s: usize, seed: u64, stream: u64) -> Result<Vec<DMatrix<f64>>> {
    let n = m.nrows();
    if n < s {
        return Err(Error::Partition(format!("cannot split {n} rows into {s} non-empty subsets")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if s > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        order.shuffle(&mut rng);
    }
    let mut start = 0;
    Ok(block_sizes(n, s)
        .into_iter()
        .map(|len| {
            let rows = &order[start..start + len];
            start += len;
            m.select_rows(rows.iter())
        })
        .collect())
}

/// Averages indicator TCAV over `s` CAVs fitted on disjoint subsets.
pub fn multi_tcav(
    concept: &DMatrix<f64>,
    random: &DMatrix<f64>,
    grads: &DMatrix<f64>,
    s: usize,
    estimator: Estimator,
    seed: u64,
) -> Result<MultiTcav> {
    if s == 0 {
        return Err(Error::Parameter("s must be at least 1".into()));
    }
    let cb = shuffled_blocks(concept, s, seed, 0)?;
    let rb = shuffled_blocks(random, s, seed, 1)?;
    let mut per_subset = Vec::with_capacity(s);
    for (c, r) in cb.iter().zip(rb.iter()) {
        let est = estimator.fit(c, r)?;
        let batch = sensitivity_scores(grads, &est.w, est.n_total())?;
        per_subset.push(tcav_indicator(&batch)?);
    }
    let score = per_subset.iter().sum::<f64>() / s as f64;
    Ok(MultiTcav { score, per_subset })
}

/// Root-mean-square of the scores plus `eps`.
pub fn gamma_norm(batch: &SensitivityBatch, eps: f64) -> f64 {
    let ms = mean(batch.scores.iter().map(|s| s * s));
    ms.sqrt() + eps
}

/// Average of the RMS scales of several high-sample CAVs.
pub fn gamma_norm_averaged(batches: &[SensitivityBatch], eps: f64) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Data("no batches to average gamma over".into()));
    }
    Ok(batches.iter().map(|b| gamma_norm(b, 0.0)).sum::<f64>() / batches.len() as f64 + eps)
}

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
}

/// `σ̂_eff = √(Var̂(S) · N)`; zero for constant scores.
pub fn sigma_eff(batch: &SensitivityBatch) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::InsufficientSamples("sigma_eff needs at least 2 scores".into()));
    }
    if batch.n_train == 0 {
        return Err(Error::Parameter("batch has no training sample count".into()));
    }
    Ok((sample_variance(&batch.scores) * batch.n_train as f64).sqrt())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma == 0.0 {
        return Err(Error::Degenerate("sigma is zero".into()));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// `α*` expressed through the full budget `N = s·n`: `(1/σ)√(N/(τ₁(s − 1)))`.
fn alpha_star_budget(sigma: f64, big_n: f64, s: usize) -> Result<f64> {
    check_sigma(sigma)?;
    if s < 2 {
        return Err(Error::Parameter("alpha* needs s >= 2 (it diverges at s = 1)".into()));
    }
    Ok((big_n / (TAU1 * (s as f64 - 1.0))).sqrt() / sigma)
}

/// `α* = (1/σ)√(n/(τ₁(1 − 1/s)))` for per-subset size `n`.
pub fn alpha_star(sigma: f64, n: usize, s: usize) -> Result<f64> {
    check_sigma(sigma)?;
    if s < 2 {
        return Err(Error::Parameter("alpha* needs s >= 2 (it diverges at s = 1)".into()));
    }
    Ok((n as f64 / (TAU1 * (1.0 - 1.0 / s as f64))).sqrt() / sigma)
}

/// `α*` on the γ-normalised scale.
pub fn alpha_star_norm(gamma: f64, sigma_eff: f64, n: usize, s: usize) -> Result<f64> {
    Ok(gamma * alpha_star(sigma_eff, n, s)?)
}

/// `α† = (1/σ)√(N/τ₁)`.
pub fn alpha_dagger(sigma: f64, n_total: usize) -> Result<f64> {
    check_sigma(sigma)?;
    Ok((n_total as f64 / TAU1).sqrt() / sigma)
}

/// `Φ(√N S/σ)`.
pub fn posterior_sign_probability(s_obs: f64, sigma: f64, n_total: usize) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(normal_cdf((n_total as f64).sqrt() * s_obs / sigma))
}

/// `r(s) = s(1 − 1/√(1 + (τ₂/τ₁)/(s − 1)))`.
pub fn variance_ratio(s: usize) -> Result<f64> {
    if s < 2 {
        return Err(Error::Parameter("variance ratio needs s >= 2".into()));
    }
    let s = s as f64;
    Ok(s * (1.0 - 1.0 / (1.0 + (TAU2 / TAU1) / (s - 1.0)).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TcavMethod {
    Indicator,
    Multi,
    Alpha,
}

/// Gaussian model parameters of a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionParams {
    pub mu: f64,
    pub sigma: f64,
    pub n_total: usize,
    pub s: Option<usize>,
    /// Per-subset size (multi only).
    pub n: Option<usize>,
    pub alpha: Option<Sharpness>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TcavPrediction {
    pub method: TcavMethod,
    pub mean: f64,
    pub variance: f64,
    pub params: PredictionParams,
}

/// Closed-form law of a TCAV variant under `S_N ~ N(μ, σ²/N)`.
pub fn predict_tcav_distribution(
    mu: f64,
    sigma: f64,
    n_total: usize,
    s: usize,
    alpha: Option<Sharpness>,
    method: TcavMethod,
) -> Result<TcavPrediction> {
    check_sigma(sigma)?;
    if !mu.is_finite() {
        return Err(Error::Parameter("mu must be finite".into()));
    }
    if n_total == 0 {
        return Err(Error::Parameter("N must be positive".into()));
    }
    let nf = n_total as f64;
    let mut params = PredictionParams { mu, sigma, n_total, s: None, n: None, alpha: None };
    let (mean, variance) = match method {
        TcavMethod::Indicator => {
            let p = normal_cdf(nf.sqrt() * mu / sigma);
            (p, p * (1.0 - p))
        }
        TcavMethod::Multi => {
            if s == 0 || n_total % s != 0 {
                return Err(Error::Parameter(format!("multi needs s dividing N (N = {n_total}, s = {s})")));
            }
            let n = n_total / s;
            params.s = Some(s);
            params.n = Some(n);
            let p = normal_cdf((n as f64).sqrt() * mu / sigma);
            (p, p * (1.0 - p) / s as f64)
        }
        TcavMethod::Alpha => {
            let a = alpha.ok_or_else(|| Error::Parameter("alpha method needs a sharpness".into()))?;
            params.alpha = Some(a);
            let ln = logit_normal(mu, sigma * sigma / nf, a)?;
            (ln.m, ln.v)
        }
    };
    Ok(TcavPrediction { method, mean, variance, params })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Calibration {
    #[default]
    Star,
    Dagger,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub gamma: f64,
    pub sigma_eff: f64,
    /// `α*` on the normalised scale; `None` when `s < 2`.
    pub alpha_star: Option<f64>,
    /// `α†` on the normalised scale.
    pub alpha_dagger: f64,
    pub s: usize,
    /// Per-subset size `N/s` (rounded down when `s ∤ N`).
    pub n: usize,
}

/// Options for [`calibrate`].
#[derive(Debug, Clone, Copy)]
pub struct CalibrationOptions {
    pub s: usize,
    pub epsilon: f64,
    /// Known σ on the raw scale, replacing `σ̂_eff`.
    pub sigma_override: Option<f64>,
    /// Use this γ instead of the batch RMS (e.g. an averaged γ).
    pub gamma_override: Option<f64>,
}

impl CalibrationOptions {
    pub fn new(s: usize) -> Self {
        Self { s, epsilon: DEFAULT_GAMMA_EPS, sigma_override: None, gamma_override: None }
    }
}

/// γ, σ̂_eff and the two sharpness values on the normalised scale.
pub fn calibrate(batch: &SensitivityBatch, opts: &CalibrationOptions) -> Result<CalibrationResult> {
    if opts.s == 0 {
        return Err(Error::Parameter("s must be at least 1".into()));
    }
    let gamma = match opts.gamma_override {
        Some(g) if g.is_finite() && g > 0.0 => g,
        Some(g) => return Err(Error::Parameter(format!("gamma must be positive, got {g}"))),
        None => gamma_norm(batch, opts.epsilon),
    };
    let sigma = match opts.sigma_override {
        Some(s) => s,
        None => sigma_eff(batch)?,
    };
    check_sigma(sigma)?;
    let big_n = batch.n_train as f64;
    // The normalised scores have noise scale σ/γ.
    let sigma_norm = sigma / gamma;
    let alpha_star = if opts.s >= 2 { Some(alpha_star_budget(sigma_norm, big_n, opts.s)?) } else { None };
    let alpha_dagger = alpha_dagger(sigma_norm, batch.n_train)?;
    Ok(CalibrationResult { gamma, sigma_eff: sigma, alpha_star, alpha_dagger, s: opts.s, n: batch.n_train / opts.s })
}
