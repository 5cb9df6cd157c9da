//! Multiple-contrast proof-of-concept test, model selection and MED
//! estimation on the selected model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::fitting::{fit_ols, Dataset, GridBounds};
use crate::med::{med_estimator_with_screen, med_from_theta_at, screen_grid, MedEstimate, MedMethod, MedRequest};
use crate::models::{self, DoseDesign, ModelKind};
use crate::robust::{rr_fit, RrConfig};
use crate::weights::WeightSpec;

/// A model family with guesstimates for its shape parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub kind: ModelKind,
    #[serde(default)]
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub models: Vec<Candidate>,
}

impl Default for CandidateSet {
    fn default() -> Self {
        CandidateSet {
            models: vec![
                Candidate { kind: ModelKind::Linear, gamma: vec![] },
                Candidate { kind: ModelKind::Emax, gamma: vec![0.2] },
                Candidate { kind: ModelKind::SigEmax, gamma: vec![0.4, 4.0] },
            ],
        }
    }
}

impl CandidateSet {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::InvalidInput("candidate set is empty".into()));
        }
        for c in &self.models {
            c.kind.validate_gamma(&c.gamma).map_err(|e| Error::InvalidInput(format!("candidate {}: {e}", c.kind)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum CritMethod {
    /// Quantile of the simulated maximum of the multivariate t statistics.
    Simulated { draws: usize, seed: u64 },
    Bonferroni,
}

impl Default for CritMethod {
    fn default() -> Self {
        CritMethod::Simulated { draws: 50_000, seed: 20_130_101 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    #[default]
    MaxT,
    Aic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PocConfig {
    /// One-sided familywise level.
    pub alpha: f64,
    pub crit: CritMethod,
    pub selection: Selection,
}

impl Default for PocConfig {
    fn default() -> Self {
        PocConfig { alpha: 0.025, crit: CritMethod::default(), selection: Selection::MaxT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PocResult {
    pub models: Vec<ModelKind>,
    pub statistics: Vec<f64>,
    pub critical_value: f64,
    /// Indices into `models`.
    pub significant: Vec<usize>,
    pub selected: Option<usize>,
}

impl PocResult {
    pub fn rejected(&self) -> bool {
        !self.significant.is_empty()
    }

    pub fn selected_kind(&self) -> Option<ModelKind> {
        self.selected.map(|i| self.models[i])
    }
}

/// Unit-norm contrasts `c ∝ diag(n) (mu0 - weighted mean of mu0)`.
pub fn optimal_contrasts(candidates: &CandidateSet, design: &DoseDesign) -> Result<Vec<Vec<f64>>> {
    candidates.validate()?;
    if design.len() < 2 {
        return Err(Error::InvalidInput("contrasts need at least two doses".into()));
    }
    let n: Vec<f64> = design.allocations().iter().map(|&a| a as f64).collect();
    let total: f64 = n.iter().sum();
    candidates
        .models
        .iter()
        .map(|c| {
            let mu: Vec<f64> = design.doses().iter().map(|&d| models::shape(c.kind, &c.gamma, d)).collect();
            let mean = mu.iter().zip(&n).map(|(m, w)| m * w).sum::<f64>() / total;
            let raw: Vec<f64> = mu.iter().zip(&n).map(|(m, w)| w * (m - mean)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 1e-12) || !norm.is_finite() {
                return Err(Error::InvalidInput(format!("candidate {} is constant over the design", c.kind)));
            }
            Ok(raw.into_iter().map(|v| v / norm).collect())
        })
        .collect()
}

/// `sqrt(sum c_i^2 / n_i)`.
fn contrast_scale(c: &[f64], design: &DoseDesign) -> f64 {
    c.iter().zip(design.allocations()).map(|(c, &n)| c * c / n as f64).sum::<f64>().sqrt()
}

/// Multiplicity-adjusted one-sided critical value for the maximum contrast
/// statistic with `df` error degrees of freedom.
pub fn critical_value(contrasts: &[Vec<f64>], design: &DoseDesign, df: usize, alpha: f64, method: CritMethod) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::InvalidInput(format!("alpha {alpha} must lie in (0, 0.5)")));
    }
    if df == 0 {
        return Err(Error::InvalidInput("no error degrees of freedom".into()));
    }
    match method {
        CritMethod::Bonferroni => {
            let t = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
            Ok(t.inverse_cdf(1.0 - alpha / contrasts.len() as f64))
        }
        CritMethod::Simulated { draws, seed } => {
            if draws < 100 {
                return Err(Error::InvalidInput(format!("{draws} draws are too few")));
            }
            let sd: Vec<f64> = design.allocations().iter().map(|&n| (1.0 / n as f64).sqrt()).collect();
            let scales: Vec<f64> = contrasts.iter().map(|c| contrast_scale(c, design)).collect();
            let chi = ChiSquared::new(df as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
            const CHUNK: usize = 1000;
            let chunks = draws.div_ceil(CHUNK);
            let mut maxima: Vec<f64> = (0..chunks)
                .into_par_iter()
                .flat_map_iter(|k| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(k as u64);
                    let len = CHUNK.min(draws - k * CHUNK);
                    let mut z = vec![0.0; sd.len()];
                    (0..len)
                        .map(|_| {
                            for (zi, s) in z.iter_mut().zip(&sd) {
                                let e: f64 = StandardNormal.sample(&mut rng);
                                *zi = e * s;
                            }
                            let root = (chi.sample(&mut rng) / df as f64).sqrt();
                            contrasts
                                .iter()
                                .zip(&scales)
                                .map(|(c, s)| c.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / (s * root))
                                .fold(f64::NEG_INFINITY, f64::max)
                        })
                        .collect::<Vec<_>>()
                })
                .collect();
            maxima.sort_by(f64::total_cmp);
            let k = ((draws as f64 * (1.0 - alpha)) - 1e-9).ceil() as usize;
            Ok(maxima[k.clamp(1, draws) - 1])
        }
    }
}

/// Contrast statistics `c' ybar / (s sqrt(sum c^2 / n))` with the pooled
/// standard deviation `s`.
pub fn contrast_statistics(contrasts: &[Vec<f64>], data: &Dataset) -> Result<Vec<f64>> {
    let design = data.design();
    let s = data
        .pooled_variance()
        .ok_or_else(|| Error::InvalidInput("no degrees of freedom for the pooled variance".into()))?
        .sqrt();
    let means = data.group_means();
    Ok(contrasts
        .iter()
        .map(|c| {
            let num: f64 = c.iter().zip(&means).map(|(a, b)| a * b).sum();
            let den = s * contrast_scale(c, design);
            if num == 0.0 {
                0.0
            } else if den > 0.0 {
                num / den
            } else {
                num.signum() * f64::INFINITY
            }
        })
        .collect())
}

/// Test statistics against a precomputed critical value, then selection.
pub fn poc_test_with_critical(
    candidates: &CandidateSet,
    contrasts: &[Vec<f64>],
    data: &Dataset,
    critical: f64,
    selection: Selection,
) -> Result<PocResult> {
    let statistics = contrast_statistics(contrasts, data)?;
    let significant: Vec<usize> = (0..statistics.len()).filter(|&i| statistics[i] > critical).collect();
    let selected = match selection {
        Selection::MaxT => significant
            .iter()
            .copied()
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if statistics[b] >= statistics[i] => Some(b),
                _ => Some(i),
            }),
        Selection::Aic => {
            let mut best: Option<(usize, f64)> = None;
            for &i in &significant {
                let kind = candidates.models[i].kind;
                let Ok(fit) = fit_ols(kind, data, &GridBounds::default_for(kind, data.design())) else { continue };
                let n = data.len() as f64;
                let aic = n * (fit.sse / n).ln() + 2.0 * (kind.n_free() + 1) as f64;
                if best.map_or(true, |(_, a)| aic < a) {
                    best = Some((i, aic));
                }
            }
            best.map(|b| b.0)
        }
    };
    Ok(PocResult {
        models: candidates.models.iter().map(|c| c.kind).collect(),
        statistics,
        critical_value: critical,
        significant,
        selected,
    })
}

pub fn poc_test(candidates: &CandidateSet, data: &Dataset, config: &PocConfig) -> Result<PocResult> {
    let design = data.design();
    let contrasts = optimal_contrasts(candidates, design)?;
    let df = data.len().saturating_sub(design.len());
    let crit = critical_value(&contrasts, design, df, config.alpha, config.crit)?;
    poc_test_with_critical(candidates, &contrasts, data, crit, config.selection)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "estimator")]
pub enum McpEstimator {
    /// Least squares refit and the screened MED estimator.
    Classical,
    /// Target-dose weighted M-estimation and the plug-in MED.
    Rr { weight: WeightSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McpModResult {
    pub poc: PocResult,
    pub estimate: MedEstimate,
}

/// MED on the model selected by a given PoC result.
pub fn med_after_selection(
    poc: &PocResult,
    data: &Dataset,
    request: &MedRequest,
    estimator: McpEstimator,
) -> Result<MedEstimate> {
    let method = match estimator {
        McpEstimator::Classical => MedMethod::Screened,
        McpEstimator::Rr { .. } => MedMethod::Rr,
    };
    let Some(kind) = poc.selected_kind() else {
        return Ok(MedEstimate::not_estimable(method));
    };
    let design = data.design();
    let bounds = GridBounds::default_for(kind, design);
    let est = match estimator {
        McpEstimator::Classical => {
            let fit = fit_ols(kind, data, &bounds)?;
            med_estimator_with_screen(&fit, request, design, &screen_grid(design, request.grid_points))
        }
        McpEstimator::Rr { weight } => {
            let rr = rr_fit(kind, data, &bounds, request, &RrConfig::new(weight))?;
            match med_from_theta_at(kind, &rr.fit.theta, request.delta, design.placebo()) {
                Ok(m) if m <= design.max_dose() => MedEstimate::point(m, MedMethod::Rr),
                _ => MedEstimate::not_estimable(MedMethod::Rr),
            }
        }
    };
    Ok(est)
}

/// PoC test, selection and MED estimation. Returns a not-estimable MED when
/// no contrast is significant.
pub fn mcpmod_med(
    data: &Dataset,
    candidates: &CandidateSet,
    request: &MedRequest,
    estimator: McpEstimator,
    config: &PocConfig,
) -> Result<McpModResult> {
    let poc = poc_test(candidates, data, config)?;
    let estimate = med_after_selection(&poc, data, request, estimator)?;
    Ok(McpModResult { poc, estimate })
}
