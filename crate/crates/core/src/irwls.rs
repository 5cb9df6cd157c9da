//! Iterated re-weighted least squares for target-dose weights.
//!
//! Starting from least squares, the weights are recomputed from the current
//! MED estimate and the model refitted until the MED settles. Any failure
//! returns the least squares fit, flagged as not converged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{fit_dose_weighted, fit_ols, Dataset, FitResult, GridBounds, TraceEntry};
use crate::linalg::information;
use crate::med::{delta_method_ci, med_from_theta_at, MedEstimate, MedMethod, MedRequest};
use crate::models::{self, DoseDesign, ModelKind, Theta};
use crate::weights::{design_weights, WeightSpec, WeightTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    /// Squared relative change of the MED.
    MedRelative,
    /// Squared relative change of the mean response at the MED.
    ResponseAtMed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrwlsConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub criterion: Criterion,
    pub weight: WeightSpec,
}

impl IrwlsConfig {
    pub fn new(weight: WeightSpec) -> Self {
        IrwlsConfig { tol: 0.001, max_iter: 100, criterion: Criterion::MedRelative, weight }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput(format!("tolerance {} must be positive", self.tol)));
        }
        if self.max_iter < 1 {
            return Err(Error::InvalidInput("max_iter must be at least 1".into()));
        }
        self.weight.validate()
    }
}

pub fn irwls_fit(
    kind: ModelKind,
    data: &Dataset,
    bounds: &GridBounds,
    request: &MedRequest,
    config: &IrwlsConfig,
) -> Result<(FitResult, MedEstimate)> {
    config.validate()?;
    request.validate()?;
    let design = data.design();
    let d0 = design.placebo();
    let ols = fit_ols(kind, data, bounds)?;
    let med_of = |theta: &Theta| med_from_theta_at(kind, theta, request.delta, d0).ok();

    let mut trace = vec![TraceEntry { theta: ols.theta.clone(), med: med_of(&ols.theta) }];
    let fallback = |trace: Vec<TraceEntry>| {
        let mut fit = ols.clone();
        fit.converged = false;
        fit.iterations = trace.len();
        fit.trace = trace;
        let est = match med_of(&fit.theta) {
            Some(m) => MedEstimate::point(m, MedMethod::Irwls),
            None => MedEstimate::not_estimable(MedMethod::Irwls),
        };
        (fit, est)
    };

    let Some(mut med_old) = trace[0].med else {
        return Ok(fallback(trace));
    };
    let mut resp_old = models::mean(kind, &ols.theta, med_old);
    for _ in 2..=config.max_iter {
        let w = match design_weights(&config.weight, med_old, design) {
            Ok(w) => w,
            Err(_) => return Ok(fallback(trace)),
        };
        let fit = match fit_dose_weighted(kind, data, bounds, &w) {
            Ok(f) => f,
            Err(_) => return Ok(fallback(trace)),
        };
        let med_new = med_of(&fit.theta);
        trace.push(TraceEntry { theta: fit.theta.clone(), med: med_new });
        let Some(med_new) = med_new else {
            return Ok(fallback(trace));
        };
        let resp_new = models::mean(kind, &fit.theta, med_new);
        let change = match config.criterion {
            Criterion::MedRelative => (med_new - med_old) / med_old,
            Criterion::ResponseAtMed => (resp_new - resp_old) / resp_old,
        };
        if change * change <= config.tol {
            let est = MedEstimate::point(med_new, MedMethod::Irwls);
            let fit = FitResult { iterations: trace.len(), trace, converged: true, ..fit };
            return Ok((fit, est));
        }
        med_old = med_new;
        resp_old = resp_new;
    }
    Ok(fallback(trace))
}

/// Delta-method interval around a converged weighted fit, with the
/// information matrix weighted at the fitted MED.
pub fn irwls_med_ci(
    fit: &FitResult,
    request: &MedRequest,
    design: &DoseDesign,
    weight: &WeightSpec,
) -> Result<MedEstimate> {
    if weight.tag == WeightTag::W7 {
        return Err(Error::UnsupportedWeight("w7 (discrete weights have no interval)".into()));
    }
    if !fit.converged {
        return Err(Error::NotEstimable("IRWLS did not converge".into()));
    }
    let med = med_from_theta_at(fit.kind, &fit.theta, request.delta, design.placebo())?;
    let w = design_weights(weight, med, design)?;
    let m = information(fit.kind, &fit.theta, design, Some(&w));
    delta_method_ci(fit.kind, &fit.theta, request, design, &m, fit.sigma, MedMethod::Irwls)
}
