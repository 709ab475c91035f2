//! Monte Carlo harness for the Gaussian sensitivity model and for synthetic
//! two-class data.
//!
//! Every trial owns a ChaCha8 stream keyed by the seed with the trial index as
//! stream id, so draws do not depend on scheduling. Per-trial outputs are
//! collected in trial order and reduced sequentially with compensated sums,
//! which makes reports identical for any worker count.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::cav::{ClassMoments, Estimator};
use crate::classify::{predict_accuracy, AccuracyOptions, CavTreatment, ClassWeights, ScoreSource};
use crate::error::{Error, Result};
use crate::statfun::{indicator_positive, Sharpness};
use crate::tcav::{alpha_dagger, alpha_star, predict_tcav_distribution, TcavMethod};

pub const RNG_NAME: &str = "ChaCha8 (key = seed, stream = trial index)";
pub const NORMAL_SAMPLER: &str = "ziggurat (rand_distr::StandardNormal)";

/// Sharpness used on an α path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaChoice {
    Fixed(Sharpness),
    /// `α*` for the configured `s`.
    Star,
    /// `α†` for the configured `N`.
    Dagger,
}

impl AlphaChoice {
    pub fn label(&self) -> String {
        match self {
            AlphaChoice::Fixed(Sharpness::Finite(a)) => format!("alpha={a}"),
            AlphaChoice::Fixed(Sharpness::Infinite) => "alpha=inf".into(),
            AlphaChoice::Star => "alpha_star".into(),
            AlphaChoice::Dagger => "alpha_dagger".into(),
        }
    }
}

impl std::str::FromStr for AlphaChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "star" => Ok(AlphaChoice::Star),
            "dagger" => Ok(AlphaChoice::Dagger),
            other => Ok(AlphaChoice::Fixed(other.parse()?)),
        }
    }
}

impl Serialize for AlphaChoice {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AlphaChoice::Fixed(a) => a.serialize(ser),
            AlphaChoice::Star => ser.serialize_str("star"),
            AlphaChoice::Dagger => ser.serialize_str("dagger"),
        }
    }
}

impl<'de> Deserialize<'de> for AlphaChoice {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Tag(String),
        }
        let parsed = match Repr::deserialize(de)? {
            Repr::Num(a) => Sharpness::finite(a).map(AlphaChoice::Fixed),
            Repr::Tag(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

/// Source of σ when resolving `α*`/`α†` inside a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaSource {
    /// The model σ.
    #[default]
    Known,
    /// The sample standard deviation of the trial's own draws.
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianModelSpec {
    pub mu: f64,
    pub sigma: f64,
    pub n_total: usize,
    pub s: usize,
    pub trials: usize,
    pub seed: u64,
    pub alphas: Vec<AlphaChoice>,
    #[serde(default)]
    pub sigma_source: SigmaSource,
}

impl GaussianModelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Parameter(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !self.mu.is_finite() {
            return Err(Error::Parameter("mu must be finite".into()));
        }
        if self.n_total == 0 || self.s == 0 || self.n_total % self.s != 0 {
            return Err(Error::Parameter(format!("s must divide N (N = {}, s = {})", self.n_total, self.s)));
        }
        if self.trials == 0 {
            return Err(Error::Parameter("trials must be at least 1".into()));
        }
        if self.sigma_source == SigmaSource::Estimated && self.n_total < 2 {
            return Err(Error::Parameter("estimating sigma needs N >= 2".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.n_total / self.s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub axis: f64,
    pub method: String,
    pub empirical_mean: f64,
    pub empirical_var: f64,
    pub theory_mean: f64,
    pub theory_var: f64,
    /// Standard error of the empirical mean.
    pub stderr: f64,
    /// Standard error of the empirical variance.
    pub var_stderr: f64,
    pub mu: f64,
    pub n_total: usize,
    pub s: usize,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationMetadata {
    pub rng: String,
    pub normal_sampler: String,
    pub seed: u64,
    pub trials: usize,
    pub sigma_source: SigmaSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub axis_name: String,
    pub rows: Vec<ReportRow>,
    pub metadata: SimulationMetadata,
}

impl SimulationReport {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Long-format CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "axis,method,empirical_mean,empirical_var,theory_mean,theory_var,stderr,mu,n_total,s\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.axis, r.method, r.empirical_mean, r.empirical_var, r.theory_mean, r.theory_var, r.stderr, r.mu, r.n_total, r.s
            ));
        }
        out
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Sample mean, unbiased variance, and standard errors of both.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub var: f64,
    pub stderr: f64,
    pub var_stderr: f64,
}

pub fn summarize(xs: &[f64]) -> Summary {
    let n = xs.len() as f64;
    let mut s = KahanSum::default();
    xs.iter().for_each(|&x| s.add(x));
    let mean = s.value() / n;
    let mut s2 = KahanSum::default();
    let mut s4 = KahanSum::default();
    for &x in xs {
        let d2 = (x - mean) * (x - mean);
        s2.add(d2);
        s4.add(d2 * d2);
    }
    let var = if xs.len() > 1 { s2.value() / (n - 1.0) } else { 0.0 };
    let m2 = s2.value() / n;
    let m4 = s4.value() / n;
    Summary {
        mean,
        var,
        stderr: (var / n).sqrt(),
        var_stderr: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
    }
}

fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn resolve_alpha(choice: AlphaChoice, sigma: f64, spec: &GaussianModelSpec) -> Result<Sharpness> {
    match choice {
        AlphaChoice::Fixed(a) => a.validate(),
        AlphaChoice::Star => Ok(Sharpness::Finite(alpha_star(sigma, spec.batch_size(), spec.s)?)),
        AlphaChoice::Dagger => Ok(Sharpness::Finite(alpha_dagger(sigma, spec.n_total)?)),
    }
}

/// Output columns of one trial: raw average, indicator, multi, then one per α.
fn run_trial(spec: &GaussianModelSpec, known: &[Sharpness], trial: usize) -> Vec<f64> {
    let mut rng = trial_rng(spec.seed, trial as u64);
    let n = spec.batch_size();
    let mut total = 0.0;
    let mut total_sq = 0.0;
    let mut multi = 0.0;
    for _ in 0..spec.s {
        let mut block = 0.0;
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            let x = spec.mu + spec.sigma * z;
            block += x;
            total_sq += x * x;
        }
        total += block;
        multi += indicator_positive(block / n as f64);
    }
    let nf = spec.n_total as f64;
    let avg = total / nf;
    let mut out = Vec::with_capacity(3 + spec.alphas.len());
    out.push(avg);
    out.push(indicator_positive(avg));
    out.push(multi / spec.s as f64);
    match spec.sigma_source {
        SigmaSource::Known => {
            for a in known {
                out.push(a.apply(avg));
            }
        }
        SigmaSource::Estimated => {
            let var = ((total_sq - nf * avg * avg) / (nf - 1.0)).max(0.0);
            let sd = var.sqrt();
            for (choice, fallback) in spec.alphas.iter().zip(known) {
                let a = match choice {
                    AlphaChoice::Fixed(_) => *fallback,
                    // A degenerate draw (σ̂ = 0) reduces to the Heaviside limit.
                    _ => resolve_alpha(*choice, sd, spec).unwrap_or(Sharpness::Infinite),
                };
                out.push(a.apply(avg));
            }
        }
    }
    out
}

/// Runs all TCAV variants on the Gaussian model and attaches closed forms.
pub fn simulate_tcav_variants(spec: &GaussianModelSpec) -> Result<SimulationReport> {
    simulate_at(spec, "mu", spec.mu)
}

fn simulate_at(spec: &GaussianModelSpec, axis_name: &str, axis: f64) -> Result<SimulationReport> {
    spec.validate()?;
    let known: Vec<Sharpness> = spec
        .alphas
        .iter()
        .map(|&c| resolve_alpha(c, spec.sigma, spec))
        .collect::<Result<_>>()?;
    let per_trial: Vec<Vec<f64>> = (0..spec.trials).into_par_iter().map(|t| run_trial(spec, &known, t)).collect();

    let nf = spec.n_total as f64;
    let mut theory = vec![
        ("average".to_string(), spec.mu, spec.sigma * spec.sigma / nf),
    ];
    let ind = predict_tcav_distribution(spec.mu, spec.sigma, spec.n_total, spec.s, None, TcavMethod::Indicator)?;
    theory.push(("indicator".into(), ind.mean, ind.variance));
    let multi = predict_tcav_distribution(spec.mu, spec.sigma, spec.n_total, spec.s, None, TcavMethod::Multi)?;
    theory.push(("multi".into(), multi.mean, multi.variance));
    for (choice, a) in spec.alphas.iter().zip(&known) {
        let p = predict_tcav_distribution(spec.mu, spec.sigma, spec.n_total, spec.s, Some(*a), TcavMethod::Alpha)?;
        theory.push((choice.label(), p.mean, p.variance));
    }

    let mut column = Vec::with_capacity(spec.trials);
    let rows = theory
        .into_iter()
        .enumerate()
        .map(|(k, (method, tm, tv))| {
            column.clear();
            column.extend(per_trial.iter().map(|v| v[k]));
            let s = summarize(&column);
            ReportRow {
                axis,
                method,
                empirical_mean: s.mean,
                empirical_var: s.var,
                theory_mean: tm,
                theory_var: tv,
                stderr: s.stderr,
                var_stderr: s.var_stderr,
                mu: spec.mu,
                n_total: spec.n_total,
                s: spec.s,
                trials: spec.trials,
            }
        })
        .collect();
    Ok(SimulationReport {
        axis_name: axis_name.into(),
        rows,
        metadata: metadata(spec.seed, spec.trials, spec.sigma_source),
    })
}

fn metadata(seed: u64, trials: usize, sigma_source: SigmaSource) -> SimulationMetadata {
    SimulationMetadata {
        rng: RNG_NAME.into(),
        normal_sampler: NORMAL_SAMPLER.into(),
        seed,
        trials,
        sigma_source,
    }
}

/// `(Σ)_ij = α^{|i−j|}`.
pub fn toeplitz(d: usize, alpha: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| alpha.powi(i.abs_diff(j) as i32))
}

fn sample_gaussian_rows(
    n: usize,
    mean: &DVector<f64>,
    chol: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let d = mean.len();
    let z = DMatrix::from_row_iterator(n, d, (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let mut x = z * chol.transpose();
    for mut row in x.row_iter_mut() {
        row += mean.transpose();
    }
    x
}

fn toeplitz_factor(d: usize, alpha: f64) -> Result<DMatrix<f64>> {
    if !(0.0..1.0).contains(&alpha.abs()) {
        return Err(Error::Parameter(format!("Toeplitz decay must satisfy |alpha| < 1, got {alpha}")));
    }
    Ok(toeplitz(d, alpha)
        .cholesky()
        .ok_or_else(|| Error::Numerical("Toeplitz covariance is not positive definite".into()))?
        .l())
}

/// Two Gaussian classes with Toeplitz covariances drawn from streams `(s, s+1)`.
#[allow(clippy::too_many_arguments)]
pub fn gen_two_class_gaussian_streams(
    mu1: &DVector<f64>,
    mu2: &DVector<f64>,
    alpha1: f64,
    alpha2: f64,
    n1: usize,
    n2: usize,
    seed: u64,
    stream: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = mu1.len();
    if mu2.len() != d {
        return Err(Error::Data("class means differ in length".into()));
    }
    let l1 = toeplitz_factor(d, alpha1)?;
    let l2 = toeplitz_factor(d, alpha2)?;
    let random = sample_gaussian_rows(n1, mu1, &l1, &mut trial_rng(seed, stream));
    let concept = sample_gaussian_rows(n2, mu2, &l2, &mut trial_rng(seed, stream + 1));
    Ok((concept, random))
}

/// Returns `(concept, random)`: `n₂` rows from `N(μ₂, T(α₂))` and `n₁` rows
/// from `N(μ₁, T(α₁))`.
#[allow(clippy::too_many_arguments)]
pub fn gen_two_class_gaussian(
    d: usize,
    mu1: &DVector<f64>,
    mu2: &DVector<f64>,
    alpha1: f64,
    alpha2: f64,
    n1: usize,
    n2: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if mu1.len() != d {
        return Err(Error::Data(format!("means must have length {d}")));
    }
    gen_two_class_gaussian_streams(mu1, mu2, alpha1, alpha2, n1, n2, seed, 0)
}

/// Random direction of norm `norm` drawn from its own stream.
pub fn random_direction(d: usize, norm: f64, seed: u64, stream: u64) -> DVector<f64> {
    let mut rng = trial_rng(seed, stream);
    let v = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let len = v.norm();
    v * (norm / len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    VaryMu,
    #[serde(rename = "vary_N")]
    VaryN,
    VaryS,
    Classification,
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vary_mu" => Ok(ExperimentKind::VaryMu),
            "vary_N" | "vary_n" => Ok(ExperimentKind::VaryN),
            "vary_s" => Ok(ExperimentKind::VaryS),
            "classification" => Ok(ExperimentKind::Classification),
            other => Err(Error::Config(format!("unknown experiment kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassificationConfig {
    pub d: usize,
    pub n1: usize,
    pub n2: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Norm of `μ₁` (and `μ₂ = −μ₁`).
    pub mean_norm: f64,
    pub lambdas: Vec<f64>,
    pub test_points: usize,
    pub weights: ClassWeights,
}

impl Default for ClassificationConfig {
    fn default() -> Self {
        Self {
            d: 50,
            n1: 250,
            n2: 250,
            alpha1: 0.2,
            alpha2: 0.4,
            mean_norm: 1.0,
            lambdas: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            test_points: 100_000,
            weights: ClassWeights::Empirical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mu: Vec<f64>,
    pub sigma: f64,
    pub n_total: Vec<usize>,
    pub s: Vec<usize>,
    /// Fixed per-subset size for `vary_N` (then `s = N / batch_size`).
    pub batch_size: Option<usize>,
    pub trials: usize,
    pub seed: u64,
    pub alphas: Vec<AlphaChoice>,
    pub sigma_source: SigmaSource,
    pub classification: ClassificationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mu: vec![-0.5, 0.0, 0.5],
            sigma: 1.0,
            n_total: vec![10, 20, 40, 80, 160, 320, 640],
            s: vec![2, 5, 10],
            batch_size: None,
            trials: 10_000,
            seed: 0,
            alphas: [0.5, 1.0, 2.0, 3.0, 5.0]
                .iter()
                .map(|&a| AlphaChoice::Fixed(Sharpness::Finite(a)))
                .chain([AlphaChoice::Star, AlphaChoice::Dagger])
                .collect(),
            sigma_source: SigmaSource::Known,
            classification: ClassificationConfig::default(),
        }
    }
}

/// Defaults for each sweep: the swept axis keeps its grid, the others their first value.
pub fn default_config(kind: ExperimentKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    match kind {
        ExperimentKind::VaryMu => {
            cfg.n_total = vec![100];
            cfg.s = vec![10];
        }
        ExperimentKind::VaryN => cfg.s = vec![10],
        ExperimentKind::VaryS => {
            cfg.n_total = vec![100];
            cfg.s = vec![2, 5, 10, 20, 50];
        }
        ExperimentKind::Classification => {}
    }
    cfg
}

fn first<T: Copy>(xs: &[T], what: &str) -> Result<T> {
    xs.first().copied().ok_or_else(|| Error::Config(format!("{what} grid is empty")))
}

/// Sweeps one axis and concatenates the per-point reports.
pub fn run_experiment(kind: ExperimentKind, cfg: &ExperimentConfig) -> Result<SimulationReport> {
    if kind == ExperimentKind::Classification {
        return run_classification(cfg);
    }
    let model = |mu: f64, n_total: usize, s: usize| GaussianModelSpec {
        mu,
        sigma: cfg.sigma,
        n_total,
        s,
        trials: cfg.trials,
        seed: cfg.seed,
        alphas: cfg.alphas.clone(),
        sigma_source: cfg.sigma_source,
    };
    let mut points = Vec::new();
    let axis_name = match kind {
        ExperimentKind::VaryMu => {
            let (n, s) = (first(&cfg.n_total, "N")?, first(&cfg.s, "s")?);
            for &mu in &cfg.mu {
                points.push((mu, model(mu, n, s)));
            }
            "mu"
        }
        ExperimentKind::VaryN => {
            for &mu in &cfg.mu {
                for &n in &cfg.n_total {
                    let s = match cfg.batch_size {
                        Some(b) if b > 0 && n % b == 0 => n / b,
                        Some(b) => return Err(Error::Config(format!("batch size {b} does not divide N = {n}"))),
                        None => first(&cfg.s, "s")?,
                    };
                    points.push((n as f64, model(mu, n, s)));
                }
            }
            "N"
        }
        ExperimentKind::VaryS => {
            let n = first(&cfg.n_total, "N")?;
            for &mu in &cfg.mu {
                for &s in &cfg.s {
                    points.push((s as f64, model(mu, n, s)));
                }
            }
            "s"
        }
        ExperimentKind::Classification => unreachable!(),
    };
    let mut rows = Vec::new();
    for (axis, spec) in &points {
        rows.extend(simulate_at(spec, axis_name, *axis)?.rows);
    }
    Ok(SimulationReport { axis_name: axis_name.into(), rows, metadata: metadata(cfg.seed, cfg.trials, cfg.sigma_source) })
}

/// Predicted vs empirical classification error for one estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationPoint {
    pub estimator: Estimator,
    pub predicted_error: f64,
    pub empirical_error: f64,
    pub stderr: f64,
}

impl ClassificationPoint {
    /// Whether the prediction lies within 3 standard errors.
    pub fn agrees(&self) -> bool {
        (self.predicted_error - self.empirical_error).abs() <= 3.0 * self.stderr
    }
}

/// Fits each estimator on synthetic Toeplitz classes and scores it on fresh
/// test points drawn with the class proportions of the training set.
pub fn classification_points(cfg: &ClassificationConfig, seed: u64) -> Result<Vec<ClassificationPoint>> {
    let c = cfg;
    if c.d == 0 || c.n1 < 2 || c.n2 < 2 || c.test_points < 2 {
        return Err(Error::Config("classification config needs d >= 1, n1, n2 >= 2, test_points >= 2".into()));
    }
    let mu1 = random_direction(c.d, c.mean_norm, seed, 100);
    let mu2 = -&mu1;
    let (concept, random) = gen_two_class_gaussian_streams(&mu1, &mu2, c.alpha1, c.alpha2, c.n1, c.n2, seed, 0)?;
    let (w1, w2) = match c.weights {
        ClassWeights::Empirical => (c.n1 as f64 / (c.n1 + c.n2) as f64, c.n2 as f64 / (c.n1 + c.n2) as f64),
        ClassWeights::Balanced => (0.5, 0.5),
    };
    let m1_test = ((c.test_points as f64) * w1).round() as usize;
    let m2_test = c.test_points - m1_test;
    let (test2, test1) = gen_two_class_gaussian_streams(&mu1, &mu2, c.alpha1, c.alpha2, m1_test, m2_test, seed, 2)?;
    let pop1 = ClassMoments::from_population(c.n1, mu1.clone(), toeplitz(c.d, c.alpha1))?;
    let pop2 = ClassMoments::from_population(c.n2, mu2.clone(), toeplitz(c.d, c.alpha2))?;

    let mut estimators = vec![Estimator::Pattern, Estimator::Fast];
    estimators.extend(c.lambdas.iter().map(|&lambda| Estimator::Ridge { lambda }));
    estimators
        .into_iter()
        .map(|est| {
            let opts = AccuracyOptions {
                estimator: est,
                weights: c.weights,
                treatment: CavTreatment::Fixed,
                source: ScoreSource::Population(pop1.clone(), pop2.clone()),
            };
            let pred = predict_accuracy(&concept, &random, &opts)?;
            let concept_high = pred.spec2.mean >= pred.spec1.mean;
            let says_concept = |g: f64| (g > pred.eta_star) == concept_high;
            let g1 = &test1 * &pred.w;
            let g2 = &test2 * &pred.w;
            let e1 = g1.iter().filter(|&&g| says_concept(g)).count() as f64 / m1_test.max(1) as f64;
            let e2 = g2.iter().filter(|&&g| !says_concept(g)).count() as f64 / m2_test.max(1) as f64;
            let empirical = w1 * e1 + w2 * e2;
            let var = w1 * w1 * e1 * (1.0 - e1) / m1_test.max(1) as f64 + w2 * w2 * e2 * (1.0 - e2) / m2_test.max(1) as f64;
            Ok(ClassificationPoint { estimator: est, predicted_error: pred.error, empirical_error: empirical, stderr: var.sqrt() })
        })
        .collect()
}

fn run_classification(cfg: &ExperimentConfig) -> Result<SimulationReport> {
    let points = classification_points(&cfg.classification, cfg.seed)?;
    let (pattern_fast, ridge): (Vec<&ClassificationPoint>, Vec<&ClassificationPoint>) =
        points.iter().partition(|p| !matches!(p.estimator, Estimator::Ridge { .. }));
    let row = |axis: f64, p: &ClassificationPoint| ReportRow {
        axis,
        method: p.estimator.method().to_string(),
        empirical_mean: p.empirical_error,
        empirical_var: p.empirical_error * (1.0 - p.empirical_error),
        theory_mean: p.predicted_error,
        theory_var: p.predicted_error * (1.0 - p.predicted_error),
        stderr: p.stderr,
        var_stderr: f64::NAN,
        mu: cfg.classification.mean_norm,
        n_total: cfg.classification.n1 + cfg.classification.n2,
        s: 1,
        trials: cfg.classification.test_points,
    };
    let mut rows = Vec::new();
    for r in &ridge {
        let Estimator::Ridge { lambda } = r.estimator else { unreachable!() };
        for p in &pattern_fast {
            rows.push(row(lambda, p));
        }
        rows.push(row(lambda, r));
    }
    Ok(SimulationReport {
        axis_name: "lambda".into(),
        rows,
        metadata: metadata(cfg.seed, cfg.classification.test_points, SigmaSource::Known),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mu: f64, n_total: usize, s: usize, trials: usize) -> GaussianModelSpec {
        GaussianModelSpec {
            mu,
            sigma: 1.0,
            n_total,
            s,
            trials,
            seed: 7,
            alphas: vec![AlphaChoice::Fixed(Sharpness::Finite(1.0)), AlphaChoice::Star],
            sigma_source: SigmaSource::Known,
        }
    }

    #[test]
    fn kahan_beats_naive_sum() {
        let mut k = KahanSum::default();
        let mut naive = 0.0;
        for x in [1e16, 1.0, -1e16, 1.0] {
            k.add(x);
            naive += x;
        }
        assert_eq!(k.value(), 2.0);
        assert_ne!(naive, 2.0);
    }

    #[test]
    fn summary_of_known_sample() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.var - 5.0 / 3.0).abs() < 1e-15);
        assert!((s.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn indicator_variance_at_zero_effect() {
        let r = simulate_tcav_variants(&spec(0.0, 40, 10, 10_000)).unwrap();
        let ind = r.row("indicator").unwrap();
        assert!((ind.empirical_var - 0.25).abs() <= 3.0 * ind.var_stderr.max(1e-4));
        assert_eq!(ind.theory_var, 0.25);
    }

    #[test]
    fn multi_mean_matches_closed_form() {
        let r = simulate_tcav_variants(&spec(0.5, 100, 10, 10_000)).unwrap();
        let m = r.row("multi").unwrap();
        let expected = crate::statfun::normal_cdf(10f64.sqrt() * 0.5);
        assert_eq!(m.theory_mean, expected);
        assert!((m.empirical_mean - expected).abs() <= 3.0 * m.stderr);
    }

    #[test]
    fn variance_of_average() {
        let r = simulate_tcav_variants(&spec(0.3, 25, 5, 20_000)).unwrap();
        let a = r.row("average").unwrap();
        assert!((a.empirical_var - 1.0 / 25.0).abs() <= 3.0 * a.var_stderr);
        assert!((a.empirical_mean - 0.3).abs() <= 3.0 * a.stderr);
    }

    #[test]
    fn single_block_multi_equals_indicator_per_trial() {
        let sp = spec(0.1, 30, 1, 2000);
        let known = vec![Sharpness::Finite(1.0), Sharpness::Finite(2.0)];
        for t in 0..sp.trials {
            let v = run_trial(&sp, &known, t);
            assert_eq!(v[1], v[2]);
        }
    }

    #[test]
    fn variances_respect_popoviciu() {
        for mu in [-0.5, 0.0, 0.5] {
            let r = simulate_tcav_variants(&spec(mu, 20, 2, 5000)).unwrap();
            for row in r.rows.iter().filter(|r| r.method != "average") {
                // The bound holds exactly for the empirical law (divisor n).
                let n = row.trials as f64;
                assert!(row.empirical_var * (n - 1.0) / n <= 0.25 + 1e-12, "{}: {}", row.method, row.empirical_var);
            }
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = simulate_tcav_variants(&spec(0.2, 50, 5, 3000)).unwrap();
        let b = simulate_tcav_variants(&spec(0.2, 50, 5, 3000)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn spec_validation() {
        assert!(simulate_tcav_variants(&spec(0.0, 10, 3, 10)).is_err());
        assert!(simulate_tcav_variants(&spec(0.0, 10, 2, 0)).is_err());
        let mut s = spec(0.0, 10, 1, 10);
        s.alphas = vec![AlphaChoice::Star];
        assert!(matches!(simulate_tcav_variants(&s), Err(Error::Parameter(_))));
    }

    #[test]
    fn estimated_sigma_path_runs() {
        let mut s = spec(0.2, 40, 4, 4000);
        s.sigma_source = SigmaSource::Estimated;
        let r = simulate_tcav_variants(&s).unwrap();
        let star = r.row("alpha_star").unwrap();
        assert!((star.empirical_mean - star.theory_mean).abs() < 0.05);
    }

    #[test]
    fn identity_toeplitz_and_determinism() {
        assert_eq!(toeplitz(3, 0.0), DMatrix::identity(3, 3));
        let mu = DVector::zeros(3);
        let a = gen_two_class_gaussian(3, &mu, &mu, 0.2, 0.4, 5, 4, 11).unwrap();
        let b = gen_two_class_gaussian(3, &mu, &mu, 0.2, 0.4, 5, 4, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.shape(), (4, 3));
        assert_eq!(a.1.shape(), (5, 3));
        assert!(gen_two_class_gaussian(3, &mu, &mu, 1.0, 0.4, 5, 4, 11).is_err());
    }

    #[test]
    fn alpha_choice_serde() {
        let v: Vec<AlphaChoice> = serde_json::from_str(r#"[0.5, "inf", "star", "dagger"]"#).unwrap();
        assert_eq!(
            v,
            vec![
                AlphaChoice::Fixed(Sharpness::Finite(0.5)),
                AlphaChoice::Fixed(Sharpness::Infinite),
                AlphaChoice::Star,
                AlphaChoice::Dagger
            ]
        );
        assert_eq!(serde_json::to_string(&v).unwrap(), r#"[0.5,"inf","star","dagger"]"#);
    }
}
