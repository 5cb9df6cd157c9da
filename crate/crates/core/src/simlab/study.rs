use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics};

use super::{generate_dataset, Generated, MethodSpec, SimScenario, StudyKind};
use crate::error::{Error, Result};
use crate::fitting::{fit_ols, GridBounds};
use crate::intervals::{bootstrap_effects, invert_band_for_med, profile_med_ci, BootstrapConfig};
use crate::irwls::{irwls_fit, irwls_med_ci, IrwlsConfig};
use crate::mcpmod::{
    critical_value, med_after_selection, optimal_contrasts, poc_test_with_critical, CandidateSet, McpEstimator, PocConfig,
    PocResult,
};
use crate::med::{classical_med_ci, med_estimator_with_screen, med_from_theta_at, screen_grid, MedEstimate, MedMethod, MedRequest};
use crate::models::{DoseDesign, ModelKind};
use crate::robust::{rr_fit, rr_fit_ci, RrConfig};
use crate::weights::WeightSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub n: usize,
    pub replicate: usize,
    pub method: String,
    pub true_med: Option<f64>,
    pub estimate: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// The iterative fit converged (always true for direct methods).
    pub converged: bool,
    pub covered: Option<bool>,
    pub r_i: Option<f64>,
    pub selected: Option<ModelKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub n: usize,
    pub method: String,
    pub replicates: usize,
    pub estimable: usize,
    pub not_estimable_rate: f64,
    pub mean_r: Option<f64>,
    pub median_r: Option<f64>,
    pub iqr_r: Option<f64>,
    pub coverage: Option<f64>,
    pub coverage_mcse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub scenario: SimScenario,
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<ReplicateRecord>,
}

impl SimSummary {
    pub fn get(&self, n: usize, method: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.n == n && s.method == method)
    }

    pub fn records_for<'a>(&'a self, n: usize, method: &'a str) -> impl Iterator<Item = &'a ReplicateRecord> + 'a {
        self.records.iter().filter(move |r| r.n == n && r.method == method)
    }
}

/// Everything shared by the replicates of one group size.
struct Context {
    design: DoseDesign,
    fit_kind: ModelKind,
    bounds: GridBounds,
    request: MedRequest,
    mcp: Option<(CandidateSet, Vec<Vec<f64>>, f64, PocConfig)>,
}

impl Context {
    fn new(s: &SimScenario, n: usize) -> Result<Self> {
        let design = s.design(n)?;
        let fit_kind = s.fit_kind();
        let request = MedRequest { ci_level: s.ci_level, alpha_level: s.alpha_level, ..MedRequest::new(s.delta) };
        let mcp = if s.methods.iter().any(|m| m.uses_mcpmod()) {
            let set = s.candidates.clone().unwrap_or_default();
            let cfg = s.poc.unwrap_or_default();
            let contrasts = optimal_contrasts(&set, &design)?;
            let df = design.total() - design.len();
            let crit = critical_value(&contrasts, &design, df, cfg.alpha, cfg.crit)?;
            Some((set, contrasts, crit, cfg))
        } else {
            None
        };
        Ok(Context { bounds: GridBounds::default_for(fit_kind, &design), design, fit_kind, request, mcp })
    }
}

struct Outcome {
    est: MedEstimate,
    converged: bool,
    selected: Option<ModelKind>,
}

impl Outcome {
    fn plain(est: MedEstimate) -> Self {
        Outcome { est, converged: true, selected: None }
    }
}

fn point_or_none(value: Result<f64>, method: MedMethod) -> MedEstimate {
    match value {
        Ok(v) => MedEstimate::point(v, method),
        Err(_) => MedEstimate::not_estimable(method),
    }
}

fn evaluate(
    method: &MethodSpec,
    study: StudyKind,
    s: &SimScenario,
    ctx: &Context,
    g: &Generated,
    poc: &mut Option<Option<PocResult>>,
) -> Outcome {
    let data = &g.data;
    let kind = ctx.fit_kind;
    let req = &ctx.request;
    let d0 = ctx.design.placebo();
    let coverage = study == StudyKind::Coverage;
    match *method {
        MethodSpec::Truth => {
            let mut est = MedEstimate::not_estimable(MedMethod::Plugin);
            if let Some(m) = g.true_med {
                est = MedEstimate { lower: Some(m), upper: Some(m), ..MedEstimate::point(m, MedMethod::Plugin) };
            }
            Outcome::plain(est)
        }
        MethodSpec::Plugin => Outcome::plain(match fit_ols(kind, data, &ctx.bounds) {
            Ok(fit) => point_or_none(med_from_theta_at(kind, &fit.theta, req.delta, d0), MedMethod::Plugin),
            Err(_) => MedEstimate::not_estimable(MedMethod::Plugin),
        }),
        MethodSpec::Classical => {
            let Ok(fit) = fit_ols(kind, data, &ctx.bounds) else {
                return Outcome::plain(MedEstimate::not_estimable(MedMethod::Classical));
            };
            let est = if coverage {
                classical_med_ci(&fit, req, &ctx.design).unwrap_or_else(|_| {
                    point_or_none(med_from_theta_at(kind, &fit.theta, req.delta, d0), MedMethod::Classical)
                })
            } else {
                med_estimator_with_screen(&fit, req, &ctx.design, &screen_grid(&ctx.design, req.grid_points))
            };
            Outcome::plain(est)
        }
        MethodSpec::Irwls { weight } => {
            let spec = WeightSpec::new(weight);
            match irwls_fit(kind, data, &ctx.bounds, req, &IrwlsConfig::new(spec)) {
                Ok((fit, point)) => {
                    let est = if coverage {
                        irwls_med_ci(&fit, req, &ctx.design, &spec).unwrap_or(point)
                    } else {
                        point
                    };
                    Outcome { est, converged: fit.converged, selected: None }
                }
                Err(_) => Outcome { est: MedEstimate::not_estimable(MedMethod::Irwls), converged: false, selected: None },
            }
        }
        MethodSpec::Rr { weight, sandwich } => {
            let config = RrConfig { variant: sandwich, ..RrConfig::new(WeightSpec::new(weight)) };
            match rr_fit(kind, data, &ctx.bounds, req, &config) {
                Ok(rr) => {
                    let point = point_or_none(med_from_theta_at(kind, &rr.fit.theta, req.delta, d0), MedMethod::Rr);
                    let est = if coverage { rr_fit_ci(data, &rr, req, &config).unwrap_or(point) } else { point };
                    Outcome { est, converged: rr.diagnostics.converged, selected: None }
                }
                Err(_) => Outcome { est: MedEstimate::not_estimable(MedMethod::Rr), converged: false, selected: None },
            }
        }
        MethodSpec::Pboot => {
            let cfg = BootstrapConfig {
                b_samples: s.bootstrap.b_samples,
                grid_points: s.bootstrap.grid_points,
                seed: g.aux_seed,
                level: s.ci_level,
            };
            Outcome::plain(match bootstrap_effects(kind, data, &ctx.bounds, &cfg) {
                Ok(samples) => invert_band_for_med(&samples.band(s.ci_level), req.delta),
                Err(_) => MedEstimate::not_estimable(MedMethod::PBootstrap),
            })
        }
        MethodSpec::Proflik => Outcome::plain(
            profile_med_ci(kind, data, &ctx.bounds, req, s.profile_grid)
                .unwrap_or_else(|_| MedEstimate::not_estimable(MedMethod::ProfLik)),
        ),
        MethodSpec::Mcpmod | MethodSpec::McpmodRr { .. } => {
            let (set, contrasts, crit, cfg) = ctx.mcp.as_ref().expect("context prepared for mcpmod");
            let shared = poc.get_or_insert_with(|| poc_test_with_critical(set, contrasts, data, *crit, cfg.selection).ok());
            let estimator = match *method {
                MethodSpec::McpmodRr { weight } => McpEstimator::Rr { weight: WeightSpec::new(weight) },
                _ => McpEstimator::Classical,
            };
            let Some(p) = shared.as_ref() else {
                return Outcome::plain(MedEstimate::not_estimable(MedMethod::Screened));
            };
            let est = med_after_selection(p, data, req, estimator)
                .unwrap_or_else(|_| MedEstimate::not_estimable(MedMethod::Screened));
            Outcome { est, converged: true, selected: p.selected_kind() }
        }
    }
}

fn relative_deviation(estimate: Option<f64>, truth: Option<f64>) -> Option<f64> {
    let (e, t) = (estimate?, truth?);
    (t > 0.0).then(|| 100.0 * (e - t) / t)
}

/// Runs every replicate at every group size. Replicates are independent and
/// processed in parallel; the output does not depend on the pool size.
pub fn run_study(scenario: &SimScenario) -> Result<SimSummary> {
    scenario.validate()?;
    let mut records = Vec::new();
    for &n in &scenario.n_per_group {
        let ctx = Context::new(scenario, n)?;
        let dmax = ctx.design.max_dose();
        let per_rep: Vec<Result<Vec<ReplicateRecord>>> = (0..scenario.replicates)
            .into_par_iter()
            .map(|r| {
                let g = generate_dataset(scenario, n, r)?;
                let mut poc = None;
                Ok(scenario
                    .methods
                    .iter()
                    .map(|m| {
                        let mut out = evaluate(m, scenario.study, scenario, &ctx, &g, &mut poc);
                        // The screened estimator cannot pass the top dose; hold the others to the same range.
                        if scenario.study == StudyKind::Estimation && out.est.value.is_some_and(|v| v > dmax) {
                            out.est.value = None;
                        }
                        let covered = (scenario.study == StudyKind::Coverage)
                            .then(|| g.true_med.is_some_and(|t| out.est.covers(t)));
                        ReplicateRecord {
                            n,
                            replicate: r,
                            method: m.label(),
                            true_med: g.true_med,
                            estimate: out.est.value,
                            lower: out.est.lower,
                            upper: out.est.upper,
                            converged: out.converged,
                            covered,
                            r_i: relative_deviation(out.est.value, g.true_med),
                            selected: out.selected,
                        }
                    })
                    .collect())
            })
            .collect();
        for rep in per_rep {
            records.extend(rep?);
        }
    }
    let summaries = summarize(scenario, &records);
    Ok(SimSummary { scenario: scenario.clone(), summaries, records })
}

pub fn run_estimation_study(scenario: &SimScenario) -> Result<SimSummary> {
    if scenario.study != StudyKind::Estimation {
        return Err(Error::InvalidInput("field 'study': expected \"estimation\"".into()));
    }
    run_study(scenario)
}

pub fn run_coverage_study(scenario: &SimScenario) -> Result<SimSummary> {
    if scenario.study != StudyKind::Coverage {
        return Err(Error::InvalidInput("field 'study': expected \"coverage\"".into()));
    }
    run_study(scenario)
}

/// Per (n, method) aggregates, recomputable from the records alone.
pub fn summarize(scenario: &SimScenario, records: &[ReplicateRecord]) -> Vec<MethodSummary> {
    let mut out = Vec::new();
    for &n in &scenario.n_per_group {
        for m in &scenario.methods {
            let label = m.label();
            let rows: Vec<&ReplicateRecord> = records.iter().filter(|r| r.n == n && r.method == label).collect();
            let total = rows.len();
            let estimable = rows.iter().filter(|r| r.estimate.is_some()).count();
            let rs: Vec<f64> = rows.iter().filter_map(|r| r.r_i).collect();
            let (mean_r, median_r, iqr_r) = if rs.is_empty() {
                (None, None, None)
            } else {
                let mean = rs.iter().sum::<f64>() / rs.len() as f64;
                let mut data = Data::new(rs);
                (Some(mean), Some(data.median()), Some(data.interquartile_range()))
            };
            let (coverage, coverage_mcse) = if scenario.study == StudyKind::Coverage && total > 0 {
                let p = rows.iter().filter(|r| r.covered == Some(true)).count() as f64 / total as f64;
                (Some(p), Some((p * (1.0 - p) / total as f64).sqrt()))
            } else {
                (None, None)
            };
            out.push(MethodSummary {
                n,
                method: label,
                replicates: total,
                estimable,
                not_estimable_rate: if total > 0 { 1.0 - estimable as f64 / total as f64 } else { 0.0 },
                mean_r,
                median_r,
                iqr_r,
                coverage,
                coverage_mcse,
            });
        }
    }
    out
}
