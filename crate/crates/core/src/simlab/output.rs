use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SimScenario, SimSummary};
use crate::error::Result;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPLICATES_FILE: &str = "replicates.csv";
pub const COVERAGE_FILE: &str = "coverage.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to rerun a study byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: SimScenario,
    pub version: String,
    pub files: Vec<String>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `summary.csv`, `replicates.csv`, `coverage.csv` and
/// `manifest.json` into `dir`, creating it if needed.
pub fn write_outputs(summary: &SimSummary, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;

    let mut w = csv::Writer::from_path(dir.join(SUMMARY_FILE))?;
    w.write_record([
        "n",
        "method",
        "replicates",
        "estimable",
        "not_estimable_rate",
        "mean_r",
        "median_r",
        "iqr_r",
        "coverage",
        "coverage_mcse",
    ])?;
    for s in &summary.summaries {
        w.write_record([
            s.n.to_string(),
            s.method.clone(),
            s.replicates.to_string(),
            s.estimable.to_string(),
            s.not_estimable_rate.to_string(),
            opt(s.mean_r),
            opt(s.median_r),
            opt(s.iqr_r),
            opt(s.coverage),
            opt(s.coverage_mcse),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(REPLICATES_FILE))?;
    w.write_record([
        "n", "replicate", "method", "true_med", "estimate", "lower", "upper", "converged", "covered", "r_i", "selected",
    ])?;
    for r in &summary.records {
        w.write_record([
            r.n.to_string(),
            r.replicate.to_string(),
            r.method.clone(),
            opt(r.true_med),
            opt(r.estimate),
            opt(r.lower),
            opt(r.upper),
            r.converged.to_string(),
            r.covered.map(|c| c.to_string()).unwrap_or_default(),
            opt(r.r_i),
            r.selected.map(|k| k.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(COVERAGE_FILE))?;
    w.write_record(["n", "method", "replicates", "covered", "coverage", "mc_se"])?;
    for s in summary.summaries.iter().filter(|s| s.coverage.is_some()) {
        let p = s.coverage.unwrap_or_default();
        w.write_record([
            s.n.to_string(),
            s.method.clone(),
            s.replicates.to_string(),
            ((p * s.replicates as f64).round() as usize).to_string(),
            p.to_string(),
            opt(s.coverage_mcse),
        ])?;
    }
    w.flush()?;

    let manifest = Manifest {
        scenario: summary.scenario.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        files: [SUMMARY_FILE, REPLICATES_FILE, COVERAGE_FILE].iter().map(|s| s.to_string()).collect(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}
