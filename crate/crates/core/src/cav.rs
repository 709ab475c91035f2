//! CAV estimators and their finite-sample laws.
//!
//! Class 1 is the random (non-concept) class, class 2 the concept class.
//! Activation matrices are passed with one sample per row.
//!
//! * `pattern`: `w = μ̂₂ − μ̂₁`
//! * `fast`: `w = μ̂₂ − μ̂₁∪₂`, which equals `n₁/(n₁+n₂) · w_pattern`
//! * `ridge`: `w = (XXᵀ/n + λI)⁻¹ X y / √n`, `X` holding samples as columns and
//!   `y ∈ {−1, +1}ⁿ` (−1 for class 1)
//!
//! For Gaussian classes the pattern CAV is `N(μ₂ − μ₁, Σ₁/n₁ + Σ₂/n₂)` and the
//! fast CAV is the same law scaled by `c = n₁/(n₁+n₂)` (covariance by `c²`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::classify::GaussianSpec;
use crate::error::{Error, Result};

/// Default upper bound on the ridge Gram dimension.
pub const DEFAULT_RIDGE_MAX_DIM: usize = 8192;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMoments {
    pub n: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Second-moment matrix `Σ + μμᵀ`.
    pub gcov: DMatrix<f64>,
}

impl ClassMoments {
    /// Builds moments from known population quantities (simulation and theory).
    pub fn from_population(n: usize, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InsufficientSamples("class size must be at least 1".into()));
        }
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Data(format!(
                "covariance is {}x{}, mean has length {d}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        check_all_finite(mean.as_slice(), "mean")?;
        check_all_finite(cov.as_slice(), "covariance")?;
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-10 * cov.amax().max(1.0) {
            return Err(Error::Data(format!("covariance is not symmetric (max gap {asym:e})")));
        }
        let gcov = &cov + &mean * mean.transpose();
        Ok(Self { n, mean, cov, gcov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_all_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} contains non-finite entries")))
    }
}

/// Column average of an `n×d` sample matrix.
pub fn class_mean(samples: &DMatrix<f64>) -> Result<DVector<f64>> {
    if samples.nrows() == 0 {
        return Err(Error::InsufficientSamples("mean needs at least one sample".into()));
    }
    check_all_finite(samples.as_slice(), "samples")?;
    let n = samples.nrows() as f64;
    Ok(DVector::from_iterator(
        samples.ncols(),
        samples.column_iter().map(|c| c.sum() / n),
    ))
}

/// Sample mean and unbiased (divisor `n − 1`) covariance.
pub fn class_moments(samples: &DMatrix<f64>) -> Result<ClassMoments> {
    let n = samples.nrows();
    if n < 2 {
        return Err(Error::InsufficientSamples(format!(
            "covariance needs at least 2 samples, got {n}"
        )));
    }
    let mean = class_mean(samples)?;
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    cov = (&cov + cov.transpose()) * 0.5;
    let gcov = &cov + &mean * mean.transpose();
    Ok(ClassMoments { n, mean, cov, gcov })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CavMethod {
    Pattern,
    Fast,
    Ridge,
}

impl std::fmt::Display for CavMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CavMethod::Pattern => "pattern",
            CavMethod::Fast => "fast",
            CavMethod::Ridge => "ridge",
        })
    }
}

/// An estimator choice together with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Estimator {
    Pattern,
    Fast,
    Ridge { lambda: f64 },
}

impl Estimator {
    pub fn method(&self) -> CavMethod {
        match self {
            Estimator::Pattern => CavMethod::Pattern,
            Estimator::Fast => CavMethod::Fast,
            Estimator::Ridge { .. } => CavMethod::Ridge,
        }
    }

    pub fn fit(&self, concept: &DMatrix<f64>, random: &DMatrix<f64>) -> Result<CavEstimate> {
        match *self {
            Estimator::Pattern => pattern_cav(concept, random),
            Estimator::Fast => fast_cav(concept, random),
            Estimator::Ridge { lambda } => ridge_cav_from_classes(concept, random, lambda),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CavTheory {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CavEstimate {
    pub w: DVector<f64>,
    pub method: CavMethod,
    /// Random-class count.
    pub n1: usize,
    /// Concept-class count.
    pub n2: usize,
    pub lambda: Option<f64>,
    pub theory: Option<CavTheory>,
}

impl CavEstimate {
    pub fn n_total(&self) -> usize {
        self.n1 + self.n2
    }

    /// Fills the theoretical law from class moments (pattern and fast only).
    pub fn attach_theory(&mut self, m1: &ClassMoments, m2: &ClassMoments) -> Result<()> {
        self.theory = Some(cav_theoretical_distribution(m1, m2, self.method)?);
        Ok(())
    }
}

fn check_pair(concept: &DMatrix<f64>, random: &DMatrix<f64>) -> Result<()> {
    if concept.ncols() != random.ncols() {
        return Err(Error::Data(format!(
            "concept has {} columns, random has {}",
            concept.ncols(),
            random.ncols()
        )));
    }
    if concept.nrows() == 0 || random.nrows() == 0 {
        return Err(Error::InsufficientSamples("both classes need at least one sample".into()));
    }
    Ok(())
}

pub fn pattern_cav(concept: &DMatrix<f64>, random: &DMatrix<f64>) -> Result<CavEstimate> {
    check_pair(concept, random)?;
    let w = class_mean(concept)? - class_mean(random)?;
    Ok(CavEstimate {
        w,
        method: CavMethod::Pattern,
        n1: random.nrows(),
        n2: concept.nrows(),
        lambda: None,
        theory: None,
    })
}

pub fn fast_cav(concept: &DMatrix<f64>, random: &DMatrix<f64>) -> Result<CavEstimate> {
    check_pair(concept, random)?;
    let n1 = random.nrows();
    let n2 = concept.nrows();
    // μ̂₂ − μ̂₁∪₂ = c·(μ̂₂ − μ̂₁); the scaled form avoids cancellation against the pooled mean.
    let c = n1 as f64 / (n1 + n2) as f64;
    Ok(CavEstimate {
        w: (class_mean(concept)? - class_mean(random)?) * c,
        method: CavMethod::Fast,
        n1,
        n2,
        lambda: None,
        theory: None,
    })
}

/// Ridge solver with a configurable dimension cap.
#[derive(Debug, Clone, Copy)]
pub struct RidgeSolver {
    pub lambda: f64,
    pub max_dim: usize,
}

impl RidgeSolver {
    pub fn new(lambda: f64) -> Self {
        Self { lambda, max_dim: DEFAULT_RIDGE_MAX_DIM }
    }

    /// `x` is `d×n` (samples as columns); `y` holds ±1 labels.
    pub fn solve(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<CavEstimate> {
        let lambda = self.lambda;
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::Parameter(format!("ridge lambda must be positive, got {lambda}")));
        }
        let (d, n) = x.shape();
        if y.len() != n {
            return Err(Error::Data(format!("{n} samples but {} labels", y.len())));
        }
        if n == 0 {
            return Err(Error::InsufficientSamples("ridge needs at least one sample".into()));
        }
        if d > self.max_dim {
            return Err(Error::Parameter(format!(
                "dimension {d} exceeds the ridge cap {}",
                self.max_dim
            )));
        }
        check_all_finite(x.as_slice(), "design matrix")?;
        let mut n1 = 0;
        let mut n2 = 0;
        for &label in y {
            if label == 1.0 {
                n2 += 1;
            } else if label == -1.0 {
                n1 += 1;
            } else {
                return Err(Error::Data(format!("labels must be exactly -1 or +1, got {label}")));
            }
        }
        let nf = n as f64;
        let mut gram = x * x.transpose() / nf;
        for i in 0..d {
            gram[(i, i)] += lambda;
        }
        let rhs = x * DVector::from_column_slice(y) / nf.sqrt();
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Numerical("ridge Gram matrix is not positive definite".into()))?;
        let w = chol.solve(&rhs);
        Ok(CavEstimate { w, method: CavMethod::Ridge, n1, n2, lambda: Some(lambda), theory: None })
    }
}

pub fn ridge_cav(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<CavEstimate> {
    RidgeSolver::new(lambda).solve(x, y)
}

/// Stacks random rows (label −1) then concept rows (label +1) and fits ridge.
pub fn ridge_cav_from_classes(
    concept: &DMatrix<f64>,
    random: &DMatrix<f64>,
    lambda: f64,
) -> Result<CavEstimate> {
    check_pair(concept, random)?;
    let (x, y) = stack_classes(concept, random);
    ridge_cav(&x, &y, lambda)
}

/// Builds the `d×n` design matrix with class-1 columns first.
pub fn stack_classes(concept: &DMatrix<f64>, random: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n1 = random.nrows();
    let n2 = concept.nrows();
    let d = concept.ncols();
    let mut x = DMatrix::zeros(d, n1 + n2);
    x.columns_mut(0, n1).copy_from(&random.transpose());
    x.columns_mut(n1, n2).copy_from(&concept.transpose());
    let mut y = vec![-1.0; n1];
    y.resize(n1 + n2, 1.0);
    (x, y)
}

/// Exact Gaussian law of the pattern or fast CAV.
pub fn cav_theoretical_distribution(
    m1: &ClassMoments,
    m2: &ClassMoments,
    method: CavMethod,
) -> Result<CavTheory> {
    if m1.dim() != m2.dim() {
        return Err(Error::Data("class moments have different dimensions".into()));
    }
    let mean = &m2.mean - &m1.mean;
    let cov = &m1.cov / m1.n as f64 + &m2.cov / m2.n as f64;
    match method {
        CavMethod::Pattern => Ok(CavTheory { mean, cov }),
        CavMethod::Fast => {
            let c = m1.n as f64 / (m1.n + m2.n) as f64;
            Ok(CavTheory { mean: mean * c, cov: cov * (c * c) })
        }
        CavMethod::Ridge => Err(Error::Unsupported(
            "ridge CAV has no closed-form law; use the deterministic equivalents in rmt".into(),
        )),
    }
}

/// Total CAV variance, `Tr(Cov(w))`.
pub fn cav_total_variance(cov: &DMatrix<f64>) -> Result<f64> {
    if !cov.is_square() {
        return Err(Error::Data(format!("covariance is {}x{}", cov.nrows(), cov.ncols())));
    }
    Ok(cov.trace())
}

/// Law of `⟨z, w_pattern⟩`.
pub fn projection_distribution(
    z: &DVector<f64>,
    m1: &ClassMoments,
    m2: &ClassMoments,
) -> Result<GaussianSpec> {
    if z.len() != m1.dim() || z.len() != m2.dim() {
        return Err(Error::Data("projection vector and moments disagree in dimension".into()));
    }
    check_all_finite(z.as_slice(), "projection vector")?;
    let mean = z.dot(&(&m2.mean - &m1.mean));
    let var = (z.transpose() * &m1.cov * z)[0] / m1.n as f64
        + (z.transpose() * &m2.cov * z)[0] / m2.n as f64;
    GaussianSpec::new(mean, var)
}
