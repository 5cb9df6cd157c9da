//! Dose-response model families.
//!
//! Every family has the form `mu(d) = alpha + beta * x(d)` where the
//! standardized shape `x` depends only on a small vector of nonlinear
//! parameters. Shape, inverse shape and all partial derivatives are closed
//! form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    #[serde(alias = "linlog")]
    LinLog,
    Emax,
    #[serde(alias = "exp")]
    Exponential,
    Quadratic,
    #[serde(alias = "sigemax")]
    SigEmax,
    Power,
    #[serde(alias = "trunclogistic", alias = "tlog")]
    TruncLogistic,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        ModelKind::Linear,
        ModelKind::LinLog,
        ModelKind::Emax,
        ModelKind::Exponential,
        ModelKind::Quadratic,
        ModelKind::SigEmax,
        ModelKind::Power,
        ModelKind::TruncLogistic,
    ];

    /// Number of nonlinear shape parameters.
    pub fn arity(self) -> usize {
        match self {
            ModelKind::Linear => 0,
            ModelKind::SigEmax | ModelKind::TruncLogistic => 2,
            _ => 1,
        }
    }

    /// Number of nonlinear parameters that are estimated. The log-linear
    /// offset is a fixed constant, never fitted.
    pub fn free_arity(self) -> usize {
        match self {
            ModelKind::LinLog => 0,
            k => k.arity(),
        }
    }

    /// Number of estimated parameters including intercept and slope.
    pub fn n_free(self) -> usize {
        2 + self.free_arity()
    }

    /// Shape is monotone increasing on the nonnegative half line.
    pub fn is_monotone(self) -> bool {
        self != ModelKind::Quadratic
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::LinLog => "linlog",
            ModelKind::Emax => "emax",
            ModelKind::Exponential => "exponential",
            ModelKind::Quadratic => "quadratic",
            ModelKind::SigEmax => "sigemax",
            ModelKind::Power => "power",
            ModelKind::TruncLogistic => "trunclogistic",
        }
    }

    pub fn gamma_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::Linear => &[],
            ModelKind::LinLog => &["offset"],
            ModelKind::Emax => &["ed50"],
            ModelKind::Exponential => &["delta"],
            ModelKind::Quadratic => &["ratio"],
            ModelKind::SigEmax => &["ed50", "hill"],
            ModelKind::Power => &["exponent"],
            ModelKind::TruncLogistic => &["steepness", "inflection"],
        }
    }

    /// Checks the positivity/sign constraints on the nonlinear parameters.
    pub fn validate_gamma(self, gamma: &[f64]) -> Result<()> {
        if gamma.len() != self.arity() {
            return Err(Error::Domain(format!(
                "{} expects {} nonlinear parameter(s), got {}",
                self,
                self.arity(),
                gamma.len()
            )));
        }
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::Domain(format!("{self}: non-finite parameter")));
        }
        let ok = match self {
            ModelKind::Linear => true,
            ModelKind::LinLog | ModelKind::Emax | ModelKind::Exponential | ModelKind::Power => {
                gamma[0] > 0.0
            }
            ModelKind::Quadratic => gamma[0] < 0.0,
            ModelKind::SigEmax => gamma[0] > 0.0 && gamma[1] > 0.0,
            ModelKind::TruncLogistic => gamma[0] > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "{self}: parameters {gamma:?} violate the family constraints"
            )))
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(ModelKind::Linear),
            "linlog" | "loglinear" => Ok(ModelKind::LinLog),
            "emax" => Ok(ModelKind::Emax),
            "exponential" | "exp" => Ok(ModelKind::Exponential),
            "quadratic" => Ok(ModelKind::Quadratic),
            "sigemax" | "sigmoidemax" => Ok(ModelKind::SigEmax),
            "power" => Ok(ModelKind::Power),
            "trunclogistic" | "tlog" => Ok(ModelKind::TruncLogistic),
            other => Err(Error::InvalidInput(format!("unknown model '{other}'"))),
        }
    }
}

/// Intercept, slope and nonlinear shape parameters of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub gamma: Vec<f64>,
}

impl Theta {
    pub fn new(alpha: f64, beta: f64, gamma: impl Into<Vec<f64>>) -> Self {
        Theta { alpha, beta, gamma: gamma.into() }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Domain("non-finite intercept or slope".into()));
        }
        kind.validate_gamma(&self.gamma)
    }

    /// The estimated parameters `(alpha, beta, free gamma...)`.
    pub fn free_params(&self, kind: ModelKind) -> Vec<f64> {
        let mut v = Vec::with_capacity(kind.n_free());
        v.push(self.alpha);
        v.push(self.beta);
        v.extend_from_slice(&self.gamma[..kind.free_arity()]);
        v
    }

    /// Replace the estimated parameters, keeping any fixed shape constants.
    pub fn with_free(&self, kind: ModelKind, free: &[f64]) -> Theta {
        debug_assert_eq!(free.len(), kind.n_free());
        let mut gamma = self.gamma.clone();
        gamma[..kind.free_arity()].copy_from_slice(&free[2..]);
        Theta { alpha: free[0], beta: free[1], gamma }
    }
}

/// Parallel-group design: ascending doses with a patient count per dose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseDesign {
    doses: Vec<f64>,
    allocations: Vec<usize>,
}

impl DoseDesign {
    pub fn new(doses: Vec<f64>, allocations: Vec<usize>) -> Result<Self> {
        if doses.is_empty() {
            return Err(Error::InvalidInput("design has no doses".into()));
        }
        if doses.len() != allocations.len() {
            return Err(Error::InvalidInput(format!(
                "{} doses but {} allocations",
                doses.len(),
                allocations.len()
            )));
        }
        if doses.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidInput("doses must be finite and nonnegative".into()));
        }
        if doses.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("doses must be strictly increasing".into()));
        }
        if allocations.iter().any(|&n| n == 0) {
            return Err(Error::InvalidInput("allocations must be positive".into()));
        }
        Ok(DoseDesign { doses, allocations })
    }

    pub fn balanced(doses: Vec<f64>, per_group: usize) -> Result<Self> {
        let n = doses.len();
        DoseDesign::new(doses, vec![per_group; n])
    }

    pub fn doses(&self) -> &[f64] {
        &self.doses
    }

    pub fn allocations(&self) -> &[usize] {
        &self.allocations
    }

    pub fn len(&self) -> usize {
        self.doses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doses.is_empty()
    }

    pub fn total(&self) -> usize {
        self.allocations.iter().sum()
    }

    /// Allocation fractions `n_i / n`.
    pub fn fractions(&self) -> Vec<f64> {
        let n = self.total() as f64;
        self.allocations.iter().map(|&a| a as f64 / n).collect()
    }

    pub fn placebo(&self) -> f64 {
        self.doses[0]
    }

    pub fn max_dose(&self) -> f64 {
        *self.doses.last().expect("design is never empty")
    }

    /// Doses above placebo.
    pub fn active_doses(&self) -> &[f64] {
        &self.doses[1..]
    }

    pub fn index_of(&self, dose: f64) -> Option<usize> {
        self.doses.iter().position(|&d| d == dose)
    }
}

/// Value of the standardized shape `x(d)`.
pub fn standardized_shape(kind: ModelKind, gamma: &[f64], d: f64) -> Result<f64> {
    kind.validate_gamma(gamma)?;
    check_dose(d)?;
    Ok(shape(kind, gamma, d))
}

/// Model mean `alpha + beta * x(d)`.
pub fn eval_mean(kind: ModelKind, theta: &Theta, d: f64) -> Result<f64> {
    theta.validate(kind)?;
    check_dose(d)?;
    Ok(mean(kind, theta, d))
}

/// Dose at which the standardized shape equals `u`. For the quadratic the
/// smallest nonnegative root is returned.
pub fn inverse_shape(kind: ModelKind, gamma: &[f64], u: f64) -> Result<f64> {
    kind.validate_gamma(gamma)?;
    inverse(kind, gamma, u)
}

/// Gradient of the mean with respect to `(alpha, beta, gamma...)`, including
/// fixed shape constants.
pub fn mean_gradient(kind: ModelKind, theta: &Theta, d: f64) -> Result<Vec<f64>> {
    theta.validate(kind)?;
    check_dose(d)?;
    let mut g = vec![0.0; 2 + kind.arity()];
    g[0] = 1.0;
    g[1] = shape(kind, &theta.gamma, d);
    shape_gamma_gradient(kind, &theta.gamma, d, &mut g[2..]);
    for v in &mut g[2..] {
        *v *= theta.beta;
    }
    Ok(g)
}

fn check_dose(d: f64) -> Result<()> {
    if d.is_finite() && d >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("dose {d} must be finite and nonnegative")))
    }
}

#[inline]
pub(crate) fn mean(kind: ModelKind, theta: &Theta, d: f64) -> f64 {
    theta.alpha + theta.beta * shape(kind, &theta.gamma, d)
}

/// Unchecked shape evaluation; callers guarantee valid `gamma` and `d >= 0`.
#[inline]
pub(crate) fn shape(kind: ModelKind, gamma: &[f64], d: f64) -> f64 {
    match kind {
        ModelKind::Linear => d,
        ModelKind::LinLog => (d + gamma[0]).ln(),
        ModelKind::Emax => d / (gamma[0] + d),
        ModelKind::Exponential => (d / gamma[0]).exp_m1(),
        ModelKind::Quadratic => d + gamma[0] * d * d,
        ModelKind::SigEmax => {
            if d <= 0.0 {
                0.0
            } else {
                1.0 / (1.0 + (gamma[0] / d).powf(gamma[1]))
            }
        }
        ModelKind::Power => d.powf(gamma[0]),
        ModelKind::TruncLogistic => 1.0 / (1.0 + (gamma[0] * (gamma[1] - d)).exp()),
    }
}

/// `dx/dd`.
pub(crate) fn shape_dose_derivative(kind: ModelKind, gamma: &[f64], d: f64) -> f64 {
    match kind {
        ModelKind::Linear => 1.0,
        ModelKind::LinLog => 1.0 / (d + gamma[0]),
        ModelKind::Emax => gamma[0] / ((gamma[0] + d) * (gamma[0] + d)),
        ModelKind::Exponential => (d / gamma[0]).exp() / gamma[0],
        ModelKind::Quadratic => 1.0 + 2.0 * gamma[0] * d,
        ModelKind::SigEmax => {
            let h = gamma[1];
            if d <= 0.0 {
                if h > 1.0 {
                    0.0
                } else if h == 1.0 {
                    1.0 / gamma[0]
                } else {
                    f64::INFINITY
                }
            } else {
                let x = shape(kind, gamma, d);
                x * (1.0 - x) * h / d
            }
        }
        ModelKind::Power => {
            let p = gamma[0];
            if d <= 0.0 {
                if p > 1.0 {
                    0.0
                } else if p == 1.0 {
                    1.0
                } else {
                    f64::INFINITY
                }
            } else {
                p * d.powf(p - 1.0)
            }
        }
        ModelKind::TruncLogistic => {
            let x = shape(kind, gamma, d);
            x * (1.0 - x) * gamma[0]
        }
    }
}

/// Partial derivatives of `x(d)` with respect to each nonlinear parameter.
pub(crate) fn shape_gamma_gradient(kind: ModelKind, gamma: &[f64], d: f64, out: &mut [f64]) {
    match kind {
        ModelKind::Linear => {}
        ModelKind::LinLog => out[0] = 1.0 / (d + gamma[0]),
        ModelKind::Emax => out[0] = -d / ((gamma[0] + d) * (gamma[0] + d)),
        ModelKind::Exponential => {
            let delta = gamma[0];
            out[0] = -d / (delta * delta) * (d / delta).exp();
        }
        ModelKind::Quadratic => out[0] = d * d,
        ModelKind::SigEmax => {
            if d <= 0.0 {
                out[0] = 0.0;
                out[1] = 0.0;
            } else {
                let x = shape(kind, gamma, d);
                let s = x * (1.0 - x);
                out[0] = -gamma[1] * s / gamma[0];
                out[1] = s * (d / gamma[0]).ln();
            }
        }
        ModelKind::Power => {
            out[0] = if d <= 0.0 { 0.0 } else { d.powf(gamma[0]) * d.ln() };
        }
        ModelKind::TruncLogistic => {
            let x = shape(kind, gamma, d);
            let s = x * (1.0 - x);
            out[0] = -s * (gamma[1] - d);
            out[1] = -s * gamma[0];
        }
    }
}

pub(crate) fn inverse(kind: ModelKind, gamma: &[f64], u: f64) -> Result<f64> {
    let none = || Error::NoSolution { value: u };
    if !u.is_finite() {
        return Err(none());
    }
    let d = match kind {
        ModelKind::Linear => {
            if u < 0.0 {
                return Err(none());
            }
            u
        }
        ModelKind::LinLog => {
            let d = u.exp() - gamma[0];
            if d < 0.0 {
                // within rounding of the placebo
                if d > -1e-12 * gamma[0] {
                    0.0
                } else {
                    return Err(none());
                }
            } else {
                d
            }
        }
        ModelKind::Emax => {
            if !(0.0..1.0).contains(&u) {
                return Err(none());
            }
            gamma[0] * u / (1.0 - u)
        }
        ModelKind::Exponential => {
            if u < 0.0 {
                return Err(none());
            }
            gamma[0] * u.ln_1p()
        }
        ModelKind::Quadratic => {
            let q = gamma[0];
            let disc = 1.0 + 4.0 * q * u;
            if u < 0.0 || disc < 0.0 {
                return Err(none());
            }
            2.0 * u / (1.0 + disc.sqrt())
        }
        ModelKind::SigEmax => {
            if !(0.0..1.0).contains(&u) {
                return Err(none());
            }
            if u == 0.0 {
                0.0
            } else {
                gamma[0] * (u / (1.0 - u)).powf(1.0 / gamma[1])
            }
        }
        ModelKind::Power => {
            if u < 0.0 {
                return Err(none());
            }
            u.powf(1.0 / gamma[0])
        }
        ModelKind::TruncLogistic => {
            if !(u > 0.0 && u < 1.0) {
                return Err(none());
            }
            let d = gamma[1] + (u / (1.0 - u)).ln() / gamma[0];
            if d < 0.0 {
                return Err(none());
            }
            d
        }
    };
    if d.is_finite() {
        Ok(d)
    } else {
        Err(none())
    }
}
