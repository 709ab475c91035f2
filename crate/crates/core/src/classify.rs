//! Gaussian score model for CAV classifiers.
//!
//! A linear score `g(x) = wᵀx` is modelled as `N(μ_ℓ, σ_ℓ²)` within class ℓ.
//! The rule "class 2 iff g > η" has error
//! `ε(η) = c₁(1 − Φ((η−μ₁)/σ₁)) + c₂Φ((η−μ₂)/σ₂)`, minimised where the two
//! weighted densities cross between the means.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cav::{cav_theoretical_distribution, class_moments, ClassMoments, Estimator};
use crate::error::{Error, Result};
use crate::rmt::{fixed_point_for, ridge_deterministic_mean, ridge_second_moment_trace, FixedPointOptions};
use crate::statfun::{normal_cdf, normal_pdf};

const EQUAL_VAR_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: f64,
    pub var: f64,
}

impl GaussianSpec {
    pub fn new(mean: f64, var: f64) -> Result<Self> {
        if !mean.is_finite() {
            return Err(Error::Data(format!("Gaussian mean must be finite, got {mean}")));
        }
        if !(var.is_finite() && var > 0.0) {
            return Err(Error::Degenerate(format!("Gaussian variance must be positive, got {var}")));
        }
        Ok(Self { mean, var })
    }

    pub fn sd(&self) -> f64 {
        self.var.sqrt()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        normal_pdf((x - self.mean) / self.sd()) / self.sd()
    }

    fn log_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd();
        -0.5 * z * z - 0.5 * self.var.ln()
    }

    /// Law of `c·X` for `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        GaussianSpec::new(self.mean * c, self.var * c * c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    EqualAll,
    EqualVar,
    General,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub roots: Vec<f64>,
    /// Root strictly between the means, if the means differ.
    pub eta_star: Option<f64>,
    pub regime: Regime,
}

fn near_equal_var(g1: &GaussianSpec, g2: &GaussianSpec) -> bool {
    (g1.var - g2.var).abs() <= EQUAL_VAR_RTOL * g1.var.max(g2.var)
}

/// One Newton step on `h = log f₁ − log f₂`, kept only if it shrinks `|h|`.
fn polish(g1: &GaussianSpec, g2: &GaussianSpec, x: f64) -> f64 {
    let h = |t: f64| g1.log_pdf(t) - g2.log_pdf(t);
    let dh = -(x - g1.mean) / g1.var + (x - g2.mean) / g2.var;
    let hx = h(x);
    if dh == 0.0 || !dh.is_finite() {
        return x;
    }
    let cand = x - hx / dh;
    if cand.is_finite() && h(cand).abs() < hx.abs() {
        cand
    } else {
        x
    }
}

fn strictly_between(x: f64, a: f64, b: f64) -> bool {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    x > lo && x < hi
}

/// Crossing points of the two densities.
pub fn gaussian_intersections(g1: &GaussianSpec, g2: &GaussianSpec) -> ThresholdReport {
    let same_mean = g1.mean == g2.mean;
    if near_equal_var(g1, g2) {
        if same_mean {
            return ThresholdReport { roots: vec![], eta_star: None, regime: Regime::EqualAll };
        }
        let mid = 0.5 * (g1.mean + g2.mean);
        return ThresholdReport { roots: vec![mid], eta_star: Some(mid), regime: Regime::EqualVar };
    }
    let (m1, m2, v1, v2) = (g1.mean, g2.mean, g1.var, g2.var);
    let a = 1.0 / v2 - 1.0 / v1;
    let b = 2.0 * (m1 / v1 - m2 / v2);
    let c = (v2 / v1).ln() + m2 * m2 / v2 - m1 * m1 / v1;
    let disc = (b * b - 4.0 * a * c).max(0.0);
    // Cancellation-free pair of quadratic roots.
    let qq = -0.5 * (b + b.signum() * disc.sqrt());
    let mut roots = if qq == 0.0 {
        vec![0.0]
    } else {
        vec![qq / a, c / qq]
    };
    for r in roots.iter_mut() {
        *r = polish(g1, g2, *r);
    }
    roots.sort_by(f64::total_cmp);
    roots.dedup();
    let eta_star = roots.iter().copied().find(|&r| strictly_between(r, m1, m2));
    ThresholdReport { roots, eta_star, regime: Regime::General }
}

/// Discriminant of the intersection quadratic (zero in the equal-variance branch).
pub fn intersection_discriminant(g1: &GaussianSpec, g2: &GaussianSpec) -> f64 {
    let (m1, m2, v1, v2) = (g1.mean, g2.mean, g1.var, g2.var);
    let a = 1.0 / v2 - 1.0 / v1;
    let b = 2.0 * (m1 / v1 - m2 / v2);
    let c = (v2 / v1).ln() + m2 * m2 / v2 - m1 * m1 / v1;
    b * b - 4.0 * a * c
}

/// Error-minimising threshold for the rule oriented from the lower-mean class
/// to the higher-mean class.
///
/// Usually the crossing between the means. When the narrower density dominates
/// the whole interval between the means, no crossing lies there and the
/// minimiser is the outer root at which h'' > 0.
pub fn optimal_threshold(g1: &GaussianSpec, g2: &GaussianSpec) -> Result<f64> {
    if g1.mean == g2.mean {
        return Err(Error::NoSeparation("class score means coincide".into()));
    }
    let report = gaussian_intersections(g1, g2);
    let (lo, hi) = if g1.mean < g2.mean { (g1, g2) } else { (g2, g1) };
    // At a crossing f_lo = f_hi = f, so h''(η) = f·[(η−μ_lo)/σ_lo² − (η−μ_hi)/σ_hi²].
    let bracket = |x: f64| (x - lo.mean) / lo.var - (x - hi.mean) / hi.var;
    if let Some(eta) = report.eta_star {
        if !(bracket(eta) > 0.0) {
            return Err(Error::Numerical(format!("threshold curvature is not positive at {eta}")));
        }
        return Ok(eta);
    }
    let eta = report
        .roots
        .iter()
        .copied()
        .find(|&r| bracket(r) > 0.0)
        .ok_or_else(|| Error::Numerical("no density crossing with positive curvature".into()))?;
    log::warn!("no density crossing between the means; using outer crossing {eta}");
    Ok(eta)
}

fn check_weights(c1: f64, c2: f64) -> Result<()> {
    if !(c1 >= 0.0 && c2 >= 0.0 && (c1 + c2 - 1.0).abs() <= 1e-12) {
        return Err(Error::Parameter(format!("class weights must be nonnegative and sum to 1, got ({c1}, {c2})")));
    }
    Ok(())
}

/// Probability of error of "class 2 iff g > η".
pub fn misclassification_error(g1: &GaussianSpec, g2: &GaussianSpec, eta: f64, c1: f64, c2: f64) -> Result<f64> {
    check_weights(c1, c2)?;
    let e = c1 * normal_cdf(-(eta - g1.mean) / g1.sd()) + c2 * normal_cdf((eta - g2.mean) / g2.sd());
    Ok(e.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreMoments {
    pub mean: f64,
    /// `E_w[Var_x g]`.
    pub var_x_expected: f64,
    /// `Var_{w,x} g`.
    pub var_joint: f64,
}

/// Moments of `g = wᵀx/√n` for independent random `w` and `x`.
pub fn score_moments(
    xbar: &DVector<f64>,
    sx: &DMatrix<f64>,
    wbar: &DVector<f64>,
    sw: &DMatrix<f64>,
    n: usize,
) -> Result<ScoreMoments> {
    let d = xbar.len();
    if wbar.len() != d || sx.shape() != (d, d) || sw.shape() != (d, d) {
        return Err(Error::Data("score moment inputs disagree in dimension".into()));
    }
    if n == 0 {
        return Err(Error::Parameter("n must be at least 1".into()));
    }
    let nf = n as f64;
    let tr_swsx = sw.component_mul(&sx.transpose()).sum();
    let sx_ww = (wbar.transpose() * sx * wbar)[0];
    let sw_xx = (xbar.transpose() * sw * xbar)[0];
    Ok(ScoreMoments {
        mean: wbar.dot(xbar) / nf.sqrt(),
        var_x_expected: (tr_swsx + sx_ww) / nf,
        var_joint: (tr_swsx + sw_xx + sx_ww) / nf,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeights {
    /// `c_ℓ = n_ℓ / n`.
    #[default]
    Empirical,
    Balanced,
}

/// Treatment of the CAV when forming per-class score laws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CavTreatment {
    /// Condition on the fitted `w`: mean `wᵀμ_ℓ`, variance `wᵀΣ_ℓw`.
    #[default]
    Fixed,
    /// Integrate over the CAV's sampling law (joint score moments).
    Random,
}

/// Per-class moments used to describe test-time scores.
#[derive(Debug, Clone, Default)]
pub enum ScoreSource {
    /// Use the moments fitted on the training classes.
    #[default]
    Fitted,
    /// Use known population moments (random class first, then concept).
    Population(ClassMoments, ClassMoments),
}

#[derive(Debug, Clone)]
pub struct AccuracyOptions {
    pub estimator: Estimator,
    pub weights: ClassWeights,
    pub treatment: CavTreatment,
    pub source: ScoreSource,
}

impl AccuracyOptions {
    pub fn new(estimator: Estimator) -> Self {
        Self { estimator, weights: ClassWeights::default(), treatment: CavTreatment::default(), source: ScoreSource::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyPrediction {
    pub method: Estimator,
    pub eta_star: f64,
    pub error: f64,
    pub accuracy: f64,
    /// Score law of the random class.
    pub spec1: GaussianSpec,
    /// Score law of the concept class.
    pub spec2: GaussianSpec,
    pub weights: (f64, f64),
    pub treatment: CavTreatment,
    #[serde(skip)]
    pub w: DVector<f64>,
}

fn specs_for_fixed(w: &DVector<f64>, p1: &ClassMoments, p2: &ClassMoments) -> Result<(GaussianSpec, GaussianSpec)> {
    let spec = |m: &ClassMoments| GaussianSpec::new(w.dot(&m.mean), (w.transpose() * &m.cov * w)[0]);
    Ok((spec(p1)?, spec(p2)?))
}

fn specs_for_random(
    estimator: Estimator,
    f1: &ClassMoments,
    f2: &ClassMoments,
    p1: &ClassMoments,
    p2: &ClassMoments,
) -> Result<(GaussianSpec, GaussianSpec)> {
    match estimator {
        Estimator::Pattern | Estimator::Fast => {
            let law = cav_theoretical_distribution(f1, f2, estimator.method())?;
            let spec = |m: &ClassMoments| -> Result<GaussianSpec> {
                let sm = score_moments(&m.mean, &m.cov, &law.mean, &law.cov, 1)?;
                GaussianSpec::new(sm.mean, sm.var_joint)
            };
            Ok((spec(p1)?, spec(p2)?))
        }
        Estimator::Ridge { lambda } => {
            // Var_{w,x}(wᵀx) = E Tr((Σ + μμᵀ) w wᵀ) − (w̄ᵀμ)².
            let st = fixed_point_for(f1, f2, lambda, &FixedPointOptions::default())?;
            let wbar = ridge_deterministic_mean(&st, &f1.mean, &f2.mean)?;
            let spec = |m: &ClassMoments| -> Result<GaussianSpec> {
                let mean = wbar.dot(&m.mean);
                let second = ridge_second_moment_trace(&st, &m.gcov, f1, f2)?;
                GaussianSpec::new(mean, second - mean * mean)
            };
            Ok((spec(p1)?, spec(p2)?))
        }
    }
}

/// Fits the CAV on the two classes and predicts its classification error.
pub fn predict_accuracy(
    concept: &DMatrix<f64>,
    random: &DMatrix<f64>,
    opts: &AccuracyOptions,
) -> Result<AccuracyPrediction> {
    let est = opts.estimator.fit(concept, random)?;
    let f1 = class_moments(random)?;
    let f2 = class_moments(concept)?;
    let (p1, p2) = match &opts.source {
        ScoreSource::Fitted => (&f1, &f2),
        ScoreSource::Population(a, b) => (a, b),
    };
    if p1.dim() != est.w.len() || p2.dim() != est.w.len() {
        return Err(Error::Data("population moments disagree with the data dimension".into()));
    }
    let (spec1, spec2) = match opts.treatment {
        CavTreatment::Fixed => specs_for_fixed(&est.w, p1, p2)?,
        CavTreatment::Random => specs_for_random(opts.estimator, &f1, &f2, p1, p2)?,
    };
    let (c1, c2) = match opts.weights {
        ClassWeights::Empirical => {
            let n = (est.n1 + est.n2) as f64;
            (est.n1 as f64 / n, est.n2 as f64 / n)
        }
        ClassWeights::Balanced => (0.5, 0.5),
    };
    let eta = optimal_threshold(&spec1, &spec2)?;
    let error = if spec1.mean <= spec2.mean {
        misclassification_error(&spec1, &spec2, eta, c1, c2)?
    } else {
        // Rule flips when the concept scores sit below the random scores.
        misclassification_error(&spec2, &spec1, eta, c2, c1)?
    };
    Ok(AccuracyPrediction {
        method: opts.estimator,
        eta_star: eta,
        error,
        accuracy: 1.0 - error,
        spec1,
        spec2,
        weights: (c1, c2),
        treatment: opts.treatment,
        w: est.w,
    })
}
