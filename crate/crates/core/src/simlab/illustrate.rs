use serde::{Deserialize, Serialize};

use super::{generate_dataset, MethodSpec, SimScenario, StudyKind, Truth};
use crate::error::Result;
use crate::fitting::{fit_ols, full_gradient, Dataset, GridBounds};
use crate::linalg::{information, PseudoInverse};
use crate::med::{med_from_theta_at, MedRequest};
use crate::models::{self, DoseDesign, ModelKind, Theta};
use crate::robust::{rr_fit, RrConfig};
use crate::weights::{WeightSpec, WeightTag};

/// Effect curves with pointwise Wald bands for least squares and the
/// weighted M-estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllustrationRow {
    pub dose: f64,
    pub actual: f64,
    pub classical: f64,
    pub classical_lower: f64,
    pub classical_upper: f64,
    pub rr: Option<f64>,
    pub rr_lower: Option<f64>,
    pub rr_upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Illustration {
    pub data: Dataset,
    pub true_med: Option<f64>,
    pub classical_med: Option<f64>,
    pub rr_med: Option<f64>,
    pub rows: Vec<IllustrationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IllustrationConfig {
    pub kind: ModelKind,
    pub theta: Theta,
    pub sigma: f64,
    pub doses: Vec<f64>,
    pub n_per_group: usize,
    pub delta: f64,
    pub weight: WeightTag,
    pub seed: u64,
    pub grid_points: usize,
    pub ci_level: f64,
}

impl Default for IllustrationConfig {
    fn default() -> Self {
        IllustrationConfig {
            kind: ModelKind::Emax,
            theta: Theta::new(0.32, 0.74, vec![0.14]),
            sigma: 0.65,
            doses: vec![0.0, 0.05, 0.2, 0.6, 1.0],
            n_per_group: 100,
            delta: 0.2,
            weight: WeightTag::W5,
            seed: 2,
            grid_points: 201,
            ci_level: 0.95,
        }
    }
}

/// Gradient of `mu(d) - mu(d0)` in the estimated parameters.
fn effect_gradient(kind: ModelKind, theta: &Theta, d: f64, d0: f64) -> Vec<f64> {
    let mut a = vec![0.0; 2 + kind.arity()];
    let mut b = vec![0.0; 2 + kind.arity()];
    full_gradient(kind, theta, d, &mut a);
    full_gradient(kind, theta, d0, &mut b);
    a.iter().zip(&b).take(kind.n_free()).map(|(x, y)| x - y).collect()
}

fn effect(kind: ModelKind, theta: &Theta, d: f64, d0: f64) -> f64 {
    models::mean(kind, theta, d) - models::mean(kind, theta, d0)
}

pub fn illustrate(cfg: &IllustrationConfig) -> Result<Illustration> {
    let scenario = SimScenario {
        name: "illustration".into(),
        study: StudyKind::Estimation,
        truth: Truth { kind: cfg.kind, theta: cfg.theta.clone(), noise: None },
        fit_model: None,
        doses: cfg.doses.clone(),
        n_per_group: vec![cfg.n_per_group],
        sigma: cfg.sigma,
        delta: cfg.delta,
        replicates: 1,
        seed: cfg.seed,
        methods: vec![MethodSpec::Truth],
        ci_level: cfg.ci_level,
        alpha_level: 0.05,
        bootstrap: Default::default(),
        profile_grid: cfg.grid_points,
        candidates: None,
        poc: None,
        noiseless: false,
    };
    scenario.validate()?;
    let g = generate_dataset(&scenario, cfg.n_per_group, 0)?;
    let design: &DoseDesign = g.data.design();
    let d0 = design.placebo();
    let kind = cfg.kind;
    let bounds = GridBounds::default_for(kind, design);
    let request = MedRequest { ci_level: cfg.ci_level, ..MedRequest::new(cfg.delta) };
    let z = request.ci_quantile();
    let n = design.total() as f64;

    let ols = fit_ols(kind, &g.data, &bounds)?;
    let pinv = PseudoInverse::new(&information(kind, &ols.theta, design, None));
    let rr = rr_fit(kind, &g.data, &bounds, &request, &RrConfig::new(WeightSpec::new(cfg.weight)))?;
    let rr_ok = rr.diagnostics.converged;

    let rows = crate::med::screen_grid(design, cfg.grid_points)
        .into_iter()
        .map(|d| {
            let c = effect(kind, &ols.theta, d, d0);
            let q = pinv.quad(&effect_gradient(kind, &ols.theta, d, d0)).unwrap_or(0.0);
            let half = z * ols.sigma * (q / n).sqrt();
            let (mut r, mut rl, mut ru) = (None, None, None);
            if rr_ok {
                let e = effect(kind, &rr.fit.theta, d, d0);
                r = Some(e);
                if let Some(cov) = &rr.cov {
                    let gv = nalgebra::DVector::from_vec(effect_gradient(kind, &rr.fit.theta, d, d0));
                    let var = gv.dot(&(&cov.covariance * &gv)).max(0.0) / n;
                    rl = Some(e - z * var.sqrt());
                    ru = Some(e + z * var.sqrt());
                }
            }
            IllustrationRow {
                dose: d,
                actual: effect(kind, &cfg.theta, d, d0),
                classical: c,
                classical_lower: c - half,
                classical_upper: c + half,
                rr: r,
                rr_lower: rl,
                rr_upper: ru,
            }
        })
        .collect();
    Ok(Illustration {
        true_med: g.true_med,
        classical_med: med_from_theta_at(kind, &ols.theta, cfg.delta, d0).ok(),
        rr_med: if rr_ok { med_from_theta_at(kind, &rr.fit.theta, cfg.delta, d0).ok() } else { None },
        data: g.data,
        rows,
    })
}

impl Illustration {
    pub fn to_csv_writer<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record(["dose", "actual", "classical", "classical_lower", "classical_upper", "rr", "rr_lower", "rr_upper"])?;
        for r in &self.rows {
            w.write_record([
                r.dose.to_string(),
                r.actual.to_string(),
                r.classical.to_string(),
                r.classical_lower.to_string(),
                r.classical_upper.to_string(),
                opt(r.rr),
                opt(r.rr_lower),
                opt(r.rr_upper),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
