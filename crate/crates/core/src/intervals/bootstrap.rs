use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{band_grid, EffectCurveBand, DEFAULT_BAND_POINTS};
use crate::error::{Error, Result};
use crate::fitting::{fit_ols, Dataset, GridBounds};
use crate::med::MedMethod;
use crate::models::{self, ModelKind, Theta};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub b_samples: usize,
    pub grid_points: usize,
    pub seed: u64,
    /// Pointwise two-sided level of the band.
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { b_samples: 1000, grid_points: DEFAULT_BAND_POINTS, seed: 0, level: 0.95 }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b_samples < 100 {
            return Err(Error::InvalidInput(format!("B = {} is below the minimum of 100", self.b_samples)));
        }
        if self.grid_points < 11 {
            return Err(Error::InvalidInput(format!("G = {} is below the minimum of 11", self.grid_points)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidInput(format!("level {} must lie in (0, 1)", self.level)));
        }
        Ok(())
    }
}

/// Effect curves of the successful resample refits, one sorted column per
/// grid dose.
#[derive(Debug, Clone)]
pub struct BootstrapSamples {
    pub grid: Vec<f64>,
    pub fitted: Vec<f64>,
    sorted: Vec<Vec<f64>>,
    pub failed: usize,
    pub total: usize,
}

impl BootstrapSamples {
    pub fn successes(&self) -> usize {
        self.total - self.failed
    }

    /// Percentile band at `level` from the stored resamples.
    pub fn band(&self, level: f64) -> EffectCurveBand {
        let q = (1.0 - level) / 2.0;
        let lower = self.sorted.iter().map(|v| order_stat(v, q)).collect();
        let upper = self.sorted.iter().map(|v| order_stat(v, 1.0 - q)).collect();
        EffectCurveBand {
            grid: self.grid.clone(),
            fitted: self.fitted.clone(),
            lower,
            upper,
            level,
            method: MedMethod::PBootstrap,
        }
    }
}

/// Order statistic `ceil(m q)` (1-based) of an ascending sample.
fn order_stat(sorted: &[f64], q: f64) -> f64 {
    let m = sorted.len();
    let k = ((m as f64 * q) - 1e-9).ceil().clamp(1.0, m as f64) as usize;
    sorted[k - 1]
}

fn effect_curve(kind: ModelKind, theta: &Theta, grid: &[f64]) -> Vec<f64> {
    let base = models::mean(kind, theta, grid[0]);
    let mut e: Vec<f64> = grid.iter().map(|&d| models::mean(kind, theta, d) - base).collect();
    e[0] = 0.0;
    e
}

/// Resamples within dose groups and refits each resample by least squares.
/// Resample `b` draws from its own stream of the master seed.
pub fn bootstrap_effects(
    kind: ModelKind,
    data: &Dataset,
    bounds: &GridBounds,
    config: &BootstrapConfig,
) -> Result<BootstrapSamples> {
    config.validate()?;
    let fit = fit_ols(kind, data, bounds)?;
    let grid = band_grid(data.design(), config.grid_points)?;
    let fitted = effect_curve(kind, &fit.theta, &grid);
    let groups = data.groups();
    let curves: Vec<Option<Vec<f64>>> = (0..config.b_samples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(b as u64);
            let resampled: Vec<f64> = groups
                .iter()
                .flat_map(|g| (0..g.len()).map(|_| g[rng.random_range(0..g.len())]).collect::<Vec<_>>())
                .collect();
            let ds = data.with_responses(&regroup(data, &groups, &resampled)).ok()?;
            let f = fit_ols(kind, &ds, bounds).ok()?;
            Some(effect_curve(kind, &f.theta, &grid))
        })
        .collect();
    let failed = curves.iter().filter(|c| c.is_none()).count();
    if failed * 5 > config.b_samples {
        return Err(Error::BootstrapFailures { failed, total: config.b_samples });
    }
    let ok: Vec<Vec<f64>> = curves.into_iter().flatten().collect();
    let sorted = (0..grid.len())
        .map(|g| {
            let mut col: Vec<f64> = ok.iter().map(|c| c[g]).collect();
            col.sort_by(f64::total_cmp);
            col
        })
        .collect();
    Ok(BootstrapSamples { grid, fitted, sorted, failed, total: config.b_samples })
}

/// Maps group-ordered responses back to observation order.
fn regroup(data: &Dataset, groups: &[Vec<f64>], grouped: &[f64]) -> Vec<f64> {
    let mut offset = Vec::with_capacity(groups.len());
    let mut acc = 0;
    for g in groups {
        offset.push(acc);
        acc += g.len();
    }
    let mut seen = vec![0usize; groups.len()];
    data.observations()
        .iter()
        .map(|o| {
            let i = o.dose_index;
            let y = grouped[offset[i] + seen[i]];
            seen[i] += 1;
            y
        })
        .collect()
}

pub fn percentile_bootstrap_band(
    kind: ModelKind,
    data: &Dataset,
    bounds: &GridBounds,
    config: &BootstrapConfig,
) -> Result<EffectCurveBand> {
    Ok(bootstrap_effects(kind, data, bounds, config)?.band(config.level))
}
