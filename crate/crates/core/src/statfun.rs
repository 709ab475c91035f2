//! Scalar special functions: the scaled sigmoid, Heaviside and strict
//! indicator steps, the standard normal CDF, and the logit-normal moment
//! approximations used throughout the toolkit.
//!
//! The logit-normal moments of `Y = s_α(X)`, `X ~ N(μ, v)` are approximated by
//!
//! ```text
//! m = s(αμ / √(1 + τ₁α²v))
//! Var(Y) ≈ m(1 − m)(1 − 1/√(1 + τ₂α²v))
//! ```
//!
//! with `τ₁ = π/8` (the probit matching constant) and `τ₂ = 0.358`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Probit matching constant `π/8`.
pub const TAU1: f64 = PI / 8.0;
/// Variance-approximation constant.
pub const TAU2: f64 = 0.358;

/// Beyond this magnitude of `α·x` the sigmoid saturates to exactly 0 or 1.
const SIGMOID_SATURATION: f64 = 745.0;

/// Sigmoid sharpness. `Infinite` selects the Heaviside step (value 0.5 at 0)
/// and is kept as its own variant so it never travels as a float infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sharpness {
    Finite(f64),
    Infinite,
}

impl Sharpness {
    pub fn finite(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Parameter(format!(
                "sigmoid sharpness must be finite and positive, got {alpha}"
            )));
        }
        Ok(Sharpness::Finite(alpha))
    }

    pub fn validate(self) -> Result<Self> {
        match self {
            Sharpness::Finite(a) => Sharpness::finite(a),
            Sharpness::Infinite => Ok(self),
        }
    }

    /// Applies `s_α` (or the Heaviside step) to `x`. Assumes a validated value.
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Sharpness::Finite(a) => logistic(a * x),
            Sharpness::Infinite => heaviside_half(x),
        }
    }
}

impl fmt::Display for Sharpness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sharpness::Finite(a) => write!(f, "{a}"),
            Sharpness::Infinite => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for Sharpness {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
            return Ok(Sharpness::Infinite);
        }
        let a: f64 = t
            .parse()
            .map_err(|_| Error::Parameter(format!("cannot parse sharpness '{s}'")))?;
        Sharpness::finite(a)
    }
}

impl Serialize for Sharpness {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Sharpness::Finite(a) => ser.serialize_f64(*a),
            Sharpness::Infinite => ser.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Sharpness {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Tag(String),
        }
        let parsed = match Repr::deserialize(de)? {
            Repr::Num(a) => Sharpness::finite(a),
            Repr::Tag(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

/// Validated sigmoid parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidParams {
    pub alpha: Sharpness,
}

impl SigmoidParams {
    pub fn new(alpha: Sharpness) -> Result<Self> {
        Ok(Self { alpha: alpha.validate()? })
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        check_finite(x)?;
        Ok(self.alpha.apply(x))
    }
}

fn check_finite(x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("expected a finite argument, got {x}")))
    }
}

/// Standard logistic `1/(1+e^{−z})` in the branch-stable form.
#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= SIGMOID_SATURATION {
        1.0
    } else if z <= -SIGMOID_SATURATION {
        0.0
    } else if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `s_α(x) = 1/(1 + e^{−αx})`.
pub fn sigmoid(x: f64, alpha: f64) -> Result<f64> {
    check_finite(x)?;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Domain(format!("sharpness must be finite and positive, got {alpha}")));
    }
    Ok(logistic(alpha * x))
}

/// Heaviside step with the midpoint convention `H(0) = 0.5`.
#[inline]
pub fn heaviside_half(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        0.0
    } else {
        0.5
    }
}

/// Strict indicator `1{x > 0}`; zero counts as non-positive.
#[inline]
pub fn indicator_positive(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Standard normal CDF via `Φ(t) = erfc(−t/√2)/2`.
#[inline]
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t * FRAC_1_SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * PI).sqrt()
}

/// `Φ(√τ₁·z)`, the probit surrogate for the logistic `s(z)`.
pub fn sigmoid_probit_bridge(z: f64) -> f64 {
    normal_cdf(TAU1.sqrt() * z)
}

/// Approximate mean and variance of `s_α(X)`, `X ~ N(μ, var)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitNormalApprox {
    pub m: f64,
    pub v: f64,
    pub tau1: f64,
    pub tau2: f64,
}

fn check_logit_args(mu: f64, var: f64) -> Result<()> {
    check_finite(mu)?;
    if !(var >= 0.0) || var.is_infinite() {
        return Err(Error::Domain(format!("variance must be finite and nonnegative, got {var}")));
    }
    Ok(())
}

fn lnm(mu: f64, var: f64, alpha: Sharpness) -> f64 {
    match alpha {
        Sharpness::Finite(a) => logistic(a * mu / (1.0 + TAU1 * a * a * var).sqrt()),
        Sharpness::Infinite => {
            if var == 0.0 {
                heaviside_half(mu)
            } else {
                logistic(mu / (var * TAU1).sqrt())
            }
        }
    }
}

fn lnv_factor(var: f64, alpha: Sharpness) -> f64 {
    match alpha {
        Sharpness::Finite(a) => 1.0 - 1.0 / (1.0 + TAU2 * a * a * var).sqrt(),
        Sharpness::Infinite => {
            if var == 0.0 {
                0.0
            } else {
                1.0
            }
        }
    }
}

/// Logit-normal moment pair. The `Infinite` sharpness gives the α→∞ limits
/// `m = s(μ/(σ√τ₁))`, `Var = m(1−m)`.
pub fn logit_normal(mu: f64, var: f64, alpha: Sharpness) -> Result<LogitNormalApprox> {
    check_logit_args(mu, var)?;
    let alpha = alpha.validate()?;
    let m = lnm(mu, var, alpha);
    let v = m * (1.0 - m) * lnv_factor(var, alpha);
    Ok(LogitNormalApprox { m, v, tau1: TAU1, tau2: TAU2 })
}

pub fn logit_normal_mean(mu: f64, var: f64, alpha: f64) -> Result<f64> {
    Ok(logit_normal(mu, var, Sharpness::finite(alpha)?)?.m)
}

pub fn logit_normal_variance(mu: f64, var: f64, alpha: f64) -> Result<f64> {
    Ok(logit_normal(mu, var, Sharpness::finite(alpha)?)?.v)
}
