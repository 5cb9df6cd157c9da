//! Minimum effective dose: point estimates, gradient and the classical
//! delta-method interval.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{full_gradient, FitResult};
use crate::linalg::{information, z_quantile, PseudoInverse};
use crate::models::{self, DoseDesign, ModelKind, Theta};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MedRequest {
    /// Clinically relevant effect over placebo.
    pub delta: f64,
    /// One-sided level of the lower bound used by the screen.
    #[serde(default = "default_alpha")]
    pub alpha_level: f64,
    /// Two-sided confidence level of MED intervals.
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    /// Dose grid size used by the screened estimator.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

fn default_alpha() -> f64 {
    0.05
}
fn default_ci_level() -> f64 {
    0.95
}
fn default_grid_points() -> usize {
    1001
}

impl MedRequest {
    pub fn new(delta: f64) -> Self {
        MedRequest {
            delta,
            alpha_level: default_alpha(),
            ci_level: default_ci_level(),
            grid_points: default_grid_points(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidInput(format!("delta {} must be positive", self.delta)));
        }
        if !(self.alpha_level > 0.0 && self.alpha_level < 0.5) {
            return Err(Error::InvalidInput(format!("alpha {} must lie in (0, 0.5)", self.alpha_level)));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::InvalidInput(format!("CI level {} must lie in (0, 1)", self.ci_level)));
        }
        if self.grid_points < 2 {
            return Err(Error::InvalidInput("grid_points must be at least 2".into()));
        }
        Ok(())
    }

    /// Two-sided normal quantile for the interval.
    pub fn ci_quantile(&self) -> f64 {
        z_quantile(0.5 + self.ci_level / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MedMethod {
    Plugin,
    Screened,
    Classical,
    Irwls,
    Rr,
    PBootstrap,
    ProfLik,
}

impl fmt::Display for MedMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MedMethod::Plugin => "plugin",
            MedMethod::Screened => "screened",
            MedMethod::Classical => "classical",
            MedMethod::Irwls => "irwls",
            MedMethod::Rr => "rr",
            MedMethod::PBootstrap => "pboot",
            MedMethod::ProfLik => "proflik",
        })
    }
}

/// A MED value (absent when not estimable) with optional bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedEstimate {
    pub value: Option<f64>,
    pub method: MedMethod,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub se: Option<f64>,
}

impl MedEstimate {
    pub fn not_estimable(method: MedMethod) -> Self {
        MedEstimate { value: None, method, lower: None, upper: None, se: None }
    }

    pub fn point(value: f64, method: MedMethod) -> Self {
        MedEstimate { value: Some(value), method, lower: None, upper: None, se: None }
    }

    pub fn is_estimable(&self) -> bool {
        self.value.is_some()
    }

    /// Whether `truth` lies inside the interval, up to a relative round-off
    /// allowance of 1e-9. A missing bound leaves that side open; an interval
    /// with neither bound covers nothing.
    pub fn covers(&self, truth: f64) -> bool {
        let tol = 1e-9 * truth.abs();
        match (self.lower, self.upper) {
            (None, None) => false,
            (l, u) => l.map_or(true, |l| l <= truth + tol) && u.map_or(true, |u| truth - tol <= u),
        }
    }
}

/// MED implied by `theta` with placebo at dose zero.
pub fn med_from_theta(kind: ModelKind, theta: &Theta, delta: f64) -> Result<f64> {
    med_from_theta_at(kind, theta, delta, 0.0)
}

/// `x^{-1}(x(d0) + delta / beta)`.
pub fn med_from_theta_at(kind: ModelKind, theta: &Theta, delta: f64, d0: f64) -> Result<f64> {
    theta.validate(kind)?;
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("delta {delta} must be positive")));
    }
    if !(theta.beta > 0.0) {
        return Err(Error::NotEstimable(format!("slope {} is not positive", theta.beta)));
    }
    let u = models::shape(kind, &theta.gamma, d0) + delta / theta.beta;
    match models::inverse(kind, &theta.gamma, u) {
        Ok(d) if d > d0 => Ok(d),
        Ok(d) => Err(Error::NotEstimable(format!("MED {d} does not exceed placebo"))),
        Err(_) => Err(Error::NotEstimable(format!(
            "effect {delta} is beyond the reach of the fitted {kind} curve"
        ))),
    }
}

/// Gradient of the MED with respect to `(alpha, beta, gamma...)`, including
/// any fixed shape constants.
pub fn med_gradient(kind: ModelKind, theta: &Theta, delta: f64) -> Result<Vec<f64>> {
    med_gradient_full(kind, theta, delta, 0.0)
}

pub(crate) fn med_gradient_full(kind: ModelKind, theta: &Theta, delta: f64, d0: f64) -> Result<Vec<f64>> {
    let med = med_from_theta_at(kind, theta, delta, d0)?;
    let slope = models::shape_dose_derivative(kind, &theta.gamma, med);
    if !(slope.is_finite() && slope > 0.0) {
        return Err(Error::NotEstimable(format!("flat curve at MED {med}")));
    }
    let m = kind.arity();
    let mut at0 = vec![0.0; m];
    let mut at_med = vec![0.0; m];
    models::shape_gamma_gradient(kind, &theta.gamma, d0, &mut at0);
    models::shape_gamma_gradient(kind, &theta.gamma, med, &mut at_med);
    let mut b = Vec::with_capacity(2 + m);
    b.push(0.0);
    b.push(-delta / (theta.beta * theta.beta * slope));
    b.extend(at0.iter().zip(&at_med).map(|(a, c)| (a - c) / slope));
    Ok(b)
}

/// Gradient in the estimated parameters only.
pub(crate) fn med_gradient_free(kind: ModelKind, theta: &Theta, delta: f64, d0: f64) -> Result<Vec<f64>> {
    let mut b = med_gradient_full(kind, theta, delta, d0)?;
    b.truncate(kind.n_free());
    Ok(b)
}

/// Equispaced screening grid over `[d0, dk]`.
pub fn screen_grid(design: &DoseDesign, points: usize) -> Vec<f64> {
    let (lo, hi) = (design.placebo(), design.max_dose());
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

/// Smallest grid dose whose fitted effect exceeds delta and whose pointwise
/// lower Wald bound exceeds the fitted placebo mean.
pub fn med_estimator_with_screen(
    fit: &FitResult,
    request: &MedRequest,
    design: &DoseDesign,
    dose_grid: &[f64],
) -> MedEstimate {
    let kind = fit.kind;
    let theta = &fit.theta;
    if !(theta.beta > 0.0) || theta.validate(kind).is_err() {
        return MedEstimate::not_estimable(MedMethod::Screened);
    }
    let d0 = design.placebo();
    let mu0 = models::mean(kind, theta, d0);
    let z = z_quantile(1.0 - request.alpha_level);
    let pinv = PseudoInverse::new(&information(kind, theta, design, None));
    let scale = fit.sigma / (design.total() as f64).sqrt();
    let mut g = vec![0.0; 2 + kind.arity()];
    for &d in dose_grid.iter().filter(|&&d| d > d0) {
        let mu = models::mean(kind, theta, d);
        if !(mu > mu0 + request.delta) {
            continue;
        }
        full_gradient(kind, theta, d, &mut g);
        let lower = match pinv.quad(&g[..kind.n_free()]) {
            Ok(q) => mu - z * scale * q.sqrt(),
            Err(_) => continue,
        };
        if lower > mu0 {
            return MedEstimate::point(d, MedMethod::Screened);
        }
    }
    MedEstimate::not_estimable(MedMethod::Screened)
}

/// Delta-method interval `MED +- u * sigma / sqrt(n) * sqrt(b' M^- b)`.
pub fn classical_med_ci(fit: &FitResult, request: &MedRequest, design: &DoseDesign) -> Result<MedEstimate> {
    let m = information(fit.kind, &fit.theta, design, None);
    delta_method_ci(fit.kind, &fit.theta, request, design, &m, fit.sigma, MedMethod::Classical)
}

pub(crate) fn delta_method_ci(
    kind: ModelKind,
    theta: &Theta,
    request: &MedRequest,
    design: &DoseDesign,
    info: &nalgebra::DMatrix<f64>,
    sigma: f64,
    method: MedMethod,
) -> Result<MedEstimate> {
    let d0 = design.placebo();
    let value = med_from_theta_at(kind, theta, request.delta, d0)?;
    let b = med_gradient_free(kind, theta, request.delta, d0)?;
    let q = PseudoInverse::new(info).quad(&b)?;
    let se = sigma / (design.total() as f64).sqrt() * q.sqrt();
    Ok(symmetric_interval(value, se, request, method))
}

pub(crate) fn symmetric_interval(value: f64, se: f64, request: &MedRequest, method: MedMethod) -> MedEstimate {
    let half = request.ci_quantile() * se;
    MedEstimate {
        value: Some(value),
        method,
        lower: Some((value - half).max(0.0)),
        upper: Some(value + half),
        se: Some(se),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitting::{fit_ols, Dataset, GridBounds};
    use proptest::prelude::*;

    fn bretz(n: usize) -> DoseDesign {
        DoseDesign::balanced(vec![0.0, 0.05, 0.2, 0.6, 1.0], n).unwrap()
    }

    #[test]
    fn med_examples() {
        let emax = Theta::new(0.2, 0.7, vec![0.2]);
        let m = med_from_theta(ModelKind::Emax, &emax, 0.4).unwrap();
        assert!((m - 0.266_666_666_666_666_6).abs() < 1e-12);
        let m = med_from_theta(ModelKind::Emax, &Theta::new(0.32, 0.74, vec![0.14]), 0.2).unwrap();
        assert!((m - 0.051_851_851_851_851_87).abs() < 1e-12);
        let sig = Theta::new(0.2, 0.615, vec![0.4, 4.0]);
        let m = med_from_theta(ModelKind::SigEmax, &sig, 0.4).unwrap();
        assert!((m - 0.467_159_703_560_304_06).abs() < 1e-10);
        let m = med_from_theta(ModelKind::Linear, &Theta::new(0.2, 0.6, vec![]), 0.4).unwrap();
        assert!((m - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn unreachable_effect_is_not_estimable() {
        let th = Theta::new(0.2, 0.3, vec![0.2]);
        assert!(matches!(med_from_theta(ModelKind::Emax, &th, 0.4), Err(Error::NotEstimable(_))));
        let th = Theta::new(0.2, -0.3, vec![]);
        assert!(matches!(med_from_theta(ModelKind::Linear, &th, 0.4), Err(Error::NotEstimable(_))));
    }

    #[test]
    fn gradient_examples() {
        let b = med_gradient(ModelKind::Linear, &Theta::new(0.0, 0.6, vec![]), 0.4).unwrap();
        assert_eq!(b[0], 0.0);
        assert!((b[1] + 0.4 / 0.36).abs() < 1e-12);
        let b = med_gradient(ModelKind::Emax, &Theta::new(0.2, 0.7, vec![0.2]), 0.4).unwrap();
        assert!((b[2] - 4.0 / 3.0).abs() < 1e-12);
    }

    fn noiseless(theta: &Theta, design: &DoseDesign, bump: f64) -> Dataset {
        let groups: Vec<Vec<f64>> = design
            .doses()
            .iter()
            .zip(design.allocations())
            .map(|(&d, &n)| {
                let mu = models::eval_mean(ModelKind::Emax, theta, d).unwrap();
                (0..n).map(|j| mu + if j % 2 == 0 { bump } else { -bump }).collect()
            })
            .collect();
        Dataset::from_groups(design.clone(), &groups).unwrap()
    }

    #[test]
    fn screen_agrees_with_plugin_on_clean_data() {
        let design = bretz(50);
        let truth = Theta::new(0.2, 0.7, vec![0.2]);
        let data = noiseless(&truth, &design, 0.0);
        let fit = fit_ols(ModelKind::Emax, &data, &GridBounds::default_for(ModelKind::Emax, &design)).unwrap();
        let req = MedRequest::new(0.4);
        let est = med_estimator_with_screen(&fit, &req, &design, &screen_grid(&design, 1001));
        assert!((est.value.unwrap() - 0.2667).abs() <= 0.001);
    }

    #[test]
    fn screen_fails_with_huge_noise() {
        let design = bretz(2);
        let truth = Theta::new(0.2, 0.7, vec![0.2]);
        let data = noiseless(&truth, &design, 5.0);
        let fit = fit_ols(ModelKind::Emax, &data, &GridBounds::default_for(ModelKind::Emax, &design)).unwrap();
        let est = med_estimator_with_screen(&fit, &MedRequest::new(0.4), &design, &screen_grid(&design, 1001));
        assert!(!est.is_estimable());
    }

    #[test]
    fn classical_ci_for_linear_matches_closed_form() {
        let design = bretz(10);
        let data = Dataset::from_groups(
            design.clone(),
            &design.doses().iter().map(|&d| (0..10).map(|j| 0.2 + 0.6 * d + 0.1 * ((j % 3) as f64 - 1.0)).collect()).collect::<Vec<_>>(),
        )
        .unwrap();
        let fit = fit_ols(ModelKind::Linear, &data, &GridBounds::default_for(ModelKind::Linear, &design)).unwrap();
        let req = MedRequest::new(0.4);
        let ci = classical_med_ci(&fit, &req, &design).unwrap();
        // Var(beta) = sigma^2 / Sxx, dMED/dbeta = -delta / beta^2
        let dm: f64 = design.doses().iter().sum::<f64>() / 5.0;
        let sxx: f64 = design.doses().iter().map(|d| 10.0 * (d - dm).powi(2)).sum();
        let b = fit.theta.beta;
        let se = fit.sigma / sxx.sqrt() * 0.4 / (b * b);
        assert!((ci.se.unwrap() - se).abs() < 1e-8 * se);
        assert!(ci.lower.unwrap() <= ci.value.unwrap() && ci.value.unwrap() <= ci.upper.unwrap());
    }

    #[test]
    fn zero_sigma_gives_zero_width() {
        let design = bretz(5);
        let data = noiseless(&Theta::new(0.2, 0.7, vec![0.2]), &design, 0.0);
        let mut fit = fit_ols(ModelKind::Emax, &data, &GridBounds::default_for(ModelKind::Emax, &design)).unwrap();
        fit.sigma = 0.0;
        let ci = classical_med_ci(&fit, &MedRequest::new(0.4), &design).unwrap();
        assert_eq!(ci.lower, ci.value);
        assert_eq!(ci.upper, ci.value);
    }

    #[test]
    fn coverage_convention() {
        let mut e = MedEstimate::point(0.3, MedMethod::PBootstrap);
        assert!(!e.covers(0.3));
        e.lower = Some(0.2);
        assert!(e.covers(0.5));
        assert!(!e.covers(0.1));
        e.upper = Some(0.4);
        assert!(!e.covers(0.5));
    }

    proptest! {
        #[test]
        fn round_trip_effect(alpha in -1.0f64..1.0, beta in 0.3f64..2.0, ed50 in 0.02f64..1.0, h in 0.7f64..6.0, frac in 0.05f64..0.9) {
            let theta = Theta::new(alpha, beta, vec![ed50, h]);
            let delta = frac * beta;
            let m = med_from_theta(ModelKind::SigEmax, &theta, delta).unwrap();
            let eff = models::eval_mean(ModelKind::SigEmax, &theta, m).unwrap() - models::eval_mean(ModelKind::SigEmax, &theta, 0.0).unwrap();
            prop_assert!((eff - delta).abs() < 1e-9);
        }

        #[test]
        fn monotone_in_delta(beta in 0.3f64..2.0, ed50 in 0.02f64..1.0, f1 in 0.05f64..0.9, f2 in 0.05f64..0.9) {
            prop_assume!((f1 - f2).abs() > 1e-6);
            let theta = Theta::new(0.0, beta, vec![ed50]);
            let m1 = med_from_theta(ModelKind::Emax, &theta, f1.min(f2) * beta).unwrap();
            let m2 = med_from_theta(ModelKind::Emax, &theta, f1.max(f2) * beta).unwrap();
            prop_assert!(m1 < m2);
        }
    }
}
