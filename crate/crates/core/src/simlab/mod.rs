//! Monte-Carlo studies: scenario files, data generation, estimation and
//! coverage summaries.

mod illustrate;
mod output;
mod study;

pub use illustrate::{illustrate, Illustration, IllustrationConfig, IllustrationRow};
pub use output::{write_outputs, Manifest, COVERAGE_FILE, MANIFEST_FILE, REPLICATES_FILE, SUMMARY_FILE};
pub use study::{summarize, run_coverage_study, run_estimation_study, run_study, MethodSummary, ReplicateRecord, SimSummary};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::Dataset;
use crate::intervals::DEFAULT_BAND_POINTS;
use crate::mcpmod::{CandidateSet, PocConfig};
use crate::med::med_from_theta_at;
use crate::models::{self, DoseDesign, ModelKind, Theta};
use crate::robust::SandwichVariant;
use crate::weights::WeightTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    Estimation,
    Coverage,
}

/// Parameter slot of the truth that a noise variable is added to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamSlot {
    Alpha,
    Beta,
    Gamma0,
    Gamma1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseVar {
    Eps1,
    Eps2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub param: ParamSlot,
    pub eps: NoiseVar,
}

/// Uniform parameter noise drawn once per replicate. Every perturbation
/// that names the same variable receives the same draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default = "default_eps1")]
    pub eps1: (f64, f64),
    #[serde(default = "default_eps2")]
    pub eps2: (f64, f64),
    pub terms: Vec<Perturbation>,
}

fn default_eps1() -> (f64, f64) {
    (0.0, 0.01)
}
fn default_eps2() -> (f64, f64) {
    (0.0, 0.06)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Truth {
    pub kind: ModelKind,
    pub theta: Theta,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
}

/// Estimator or interval method evaluated on every replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method", deny_unknown_fields)]
pub enum MethodSpec {
    /// MED of the data-generating parameters.
    Truth,
    /// Least squares plug-in MED.
    Plugin,
    /// Screened estimator for point studies, delta-method interval for coverage.
    Classical,
    Irwls { weight: WeightTag },
    Rr {
        weight: WeightTag,
        #[serde(default, skip_serializing_if = "is_default_bread")]
        sandwich: SandwichVariant,
    },
    Pboot,
    Proflik,
    Mcpmod,
    McpmodRr { weight: WeightTag },
}

fn is_default_bread(v: &SandwichVariant) -> bool {
    *v == SandwichVariant::default()
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self {
            MethodSpec::Truth => "truth".into(),
            MethodSpec::Plugin => "plugin".into(),
            MethodSpec::Classical => "classical".into(),
            MethodSpec::Irwls { weight } => format!("irwls-{weight}"),
            MethodSpec::Rr { weight, sandwich: SandwichVariant::Full } => format!("rr-{weight}-full"),
            MethodSpec::Rr { weight, .. } => format!("rr-{weight}"),
            MethodSpec::Pboot => "pboot".into(),
            MethodSpec::Proflik => "proflik".into(),
            MethodSpec::Mcpmod => "mcpmod".into(),
            MethodSpec::McpmodRr { weight } => format!("mcpmod-rr-{weight}"),
        }
    }

    fn weight(&self) -> Option<WeightTag> {
        match *self {
            MethodSpec::Irwls { weight } | MethodSpec::Rr { weight, .. } | MethodSpec::McpmodRr { weight } => Some(weight),
            _ => None,
        }
    }

    fn uses_mcpmod(&self) -> bool {
        matches!(self, MethodSpec::Mcpmod | MethodSpec::McpmodRr { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSettings {
    pub b_samples: usize,
    pub grid_points: usize,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        BootstrapSettings { b_samples: 1000, grid_points: DEFAULT_BAND_POINTS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub name: String,
    pub study: StudyKind,
    pub truth: Truth,
    /// Model fitted to the data; the truth family when absent.
    #[serde(default)]
    pub fit_model: Option<ModelKind>,
    pub doses: Vec<f64>,
    pub n_per_group: Vec<usize>,
    pub sigma: f64,
    pub delta: f64,
    pub replicates: usize,
    pub seed: u64,
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    #[serde(default = "default_alpha")]
    pub alpha_level: f64,
    #[serde(default)]
    pub bootstrap: BootstrapSettings,
    #[serde(default = "default_profile_grid")]
    pub profile_grid: usize,
    #[serde(default)]
    pub candidates: Option<CandidateSet>,
    #[serde(default)]
    pub poc: Option<PocConfig>,
    /// Responses equal the mean curve exactly.
    #[serde(default)]
    pub noiseless: bool,
}

fn default_ci_level() -> f64 {
    0.95
}
fn default_alpha() -> f64 {
    0.05
}
fn default_profile_grid() -> usize {
    DEFAULT_BAND_POINTS
}

impl SimScenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: SimScenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn fit_kind(&self) -> ModelKind {
        self.fit_model.unwrap_or(self.truth.kind)
    }

    pub fn design(&self, n: usize) -> Result<DoseDesign> {
        DoseDesign::balanced(self.doses.clone(), n)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::InvalidInput(format!("field '{field}': {why}")));
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return bad("sigma", format!("{} must be positive", self.sigma));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return bad("delta", format!("{} must be positive", self.delta));
        }
        if self.replicates < 1 {
            return bad("replicates", "must be at least 1".into());
        }
        if self.n_per_group.is_empty() || self.n_per_group.contains(&0) {
            return bad("n_per_group", "needs at least one positive group size".into());
        }
        if self.methods.is_empty() {
            return bad("methods", "is empty".into());
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad("ci_level", format!("{} must lie in (0, 1)", self.ci_level));
        }
        if !(self.alpha_level > 0.0 && self.alpha_level < 0.5) {
            return bad("alpha_level", format!("{} must lie in (0, 0.5)", self.alpha_level));
        }
        if let Err(e) = self.design(self.n_per_group[0]) {
            return bad("doses", e.to_string());
        }
        if let Err(e) = self.truth.theta.validate(self.truth.kind) {
            return bad("truth.theta", e.to_string());
        }
        if let Some(noise) = &self.truth.noise {
            for (name, (lo, hi)) in [("eps1", noise.eps1), ("eps2", noise.eps2)] {
                if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                    return bad(&format!("truth.noise.{name}"), format!("invalid range ({lo}, {hi})"));
                }
            }
            for t in &noise.terms {
                let slot = match t.param {
                    ParamSlot::Gamma0 => 0,
                    ParamSlot::Gamma1 => 1,
                    _ => continue,
                };
                if slot >= self.truth.kind.arity() {
                    return bad("truth.noise.terms", format!("{} has no {:?} parameter", self.truth.kind, t.param));
                }
            }
        }
        for (i, m) in self.methods.iter().enumerate() {
            if let Some(w) = m.weight() {
                if w == WeightTag::W7 && !matches!(m, MethodSpec::Irwls { .. }) {
                    return bad(&format!("methods[{i}].weight"), "w7 is only available for irwls".into());
                }
                if w == WeightTag::W7 && self.study == StudyKind::Coverage {
                    return bad(&format!("methods[{i}].weight"), "w7 has no interval".into());
                }
            }
            if m.uses_mcpmod() && self.fit_model.is_some() {
                return bad("fit_model", "mcpmod methods select their own model".into());
            }
        }
        if self.methods.contains(&MethodSpec::Pboot) {
            let b = self.bootstrap;
            if b.b_samples < 100 || b.grid_points < 11 {
                return bad("bootstrap", "needs b_samples >= 100 and grid_points >= 11".into());
            }
        }
        if self.profile_grid < 11 {
            return bad("profile_grid", "must be at least 11".into());
        }
        if let Some(c) = &self.candidates {
            if let Err(e) = c.validate() {
                return bad("candidates", e.to_string());
            }
        }
        Ok(())
    }
}

/// One simulated trial with the parameters that generated it.
#[derive(Debug, Clone)]
pub struct Generated {
    pub data: Dataset,
    pub theta: Theta,
    pub true_med: Option<f64>,
    /// Seed for any resampling done on this replicate.
    pub aux_seed: u64,
}

fn stream_seed(seed: u64, n: usize) -> u64 {
    seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Replicate `index` at `n` patients per dose; a pure function of the
/// scenario seed, `n` and `index`.
pub fn generate_dataset(scenario: &SimScenario, n: usize, index: usize) -> Result<Generated> {
    let design = scenario.design(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(scenario.seed, n));
    rng.set_stream(index as u64);
    let kind = scenario.truth.kind;
    let mut theta = scenario.truth.theta.clone();
    if let Some(noise) = &scenario.truth.noise {
        let e1 = draw_uniform(&mut rng, noise.eps1);
        let e2 = draw_uniform(&mut rng, noise.eps2);
        for t in &noise.terms {
            let e = match t.eps {
                NoiseVar::Eps1 => e1,
                NoiseVar::Eps2 => e2,
            };
            match t.param {
                ParamSlot::Alpha => theta.alpha += e,
                ParamSlot::Beta => theta.beta += e,
                ParamSlot::Gamma0 => theta.gamma[0] += e,
                ParamSlot::Gamma1 => theta.gamma[1] += e,
            }
        }
    }
    let normal = Normal::new(0.0, scenario.sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let groups: Vec<Vec<f64>> = design
        .doses()
        .iter()
        .map(|&d| {
            let mu = models::mean(kind, &theta, d);
            (0..n)
                .map(|_| {
                    let e = normal.sample(&mut rng);
                    if scenario.noiseless {
                        mu
                    } else {
                        mu + e
                    }
                })
                .collect()
        })
        .collect();
    let aux_seed = rng.random();
    let true_med = med_from_theta_at(kind, &theta, scenario.delta, design.placebo()).ok();
    Ok(Generated { data: Dataset::from_groups(design, &groups)?, theta, true_med, aux_seed })
}

fn draw_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}
