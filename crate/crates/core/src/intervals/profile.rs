use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{band_grid, EffectCurveBand};
use crate::error::{Error, Result};
use crate::fitting::{fit_ols, refine_bounds, Dataset, GridBounds, Suff};
use crate::med::{MedEstimate, MedMethod, MedRequest};
use crate::models::{self, ModelKind, Theta};

const REFINE_ROUNDS: usize = 4;

/// Normal log-likelihood profile with `sigma` concentrated out, so the
/// deviance is `n log(SSE_pinned / SSE_hat)`.
struct Profiler<'a> {
    kind: ModelKind,
    suff: Suff,
    bounds: &'a GridBounds,
    d0: f64,
    n: f64,
    sse_hat: f64,
    theta_hat: Theta,
}

impl<'a> Profiler<'a> {
    fn new(kind: ModelKind, data: &Dataset, bounds: &'a GridBounds) -> Result<Self> {
        let fit = fit_ols(kind, data, bounds)?;
        Ok(Profiler {
            kind,
            suff: Suff::new(data, &vec![1.0; data.len()]),
            bounds,
            d0: data.design().placebo(),
            n: data.len() as f64,
            sse_hat: fit.sse,
            theta_hat: fit.theta,
        })
    }

    fn fitted_effect(&self, dose: f64) -> f64 {
        models::mean(self.kind, &self.theta_hat, dose) - models::mean(self.kind, &self.theta_hat, self.d0)
    }

    /// Least squares with `beta` tied to the effect at `dose`, for fixed shape.
    fn pinned_sse(&self, gamma: &[f64], dose: f64, effect: f64) -> Option<f64> {
        let x0 = models::shape(self.kind, gamma, self.d0);
        let denom = models::shape(self.kind, gamma, dose) - x0;
        if !(denom.abs() > 1e-12) || !denom.is_finite() {
            return None;
        }
        let beta = effect / denom;
        let s = &self.suff;
        let mut sw = 0.0;
        let mut sr = 0.0;
        for i in 0..s.doses.len() {
            sw += s.w[i];
            sr += s.w[i] * (s.ybar[i] - beta * models::shape(self.kind, gamma, s.doses[i]));
        }
        let alpha = sr / sw;
        let sse = s.sse(self.kind, &Theta::new(alpha, beta, gamma.to_vec()));
        sse.is_finite().then_some(sse)
    }

    fn profile_sse(&self, dose: f64, effect: f64) -> Option<f64> {
        if self.bounds.ranges.is_empty() {
            return self.pinned_sse(&self.bounds.fixed, dose, effect);
        }
        let mut bounds = self.bounds.clone();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for round in 0..=REFINE_ROUNDS {
            if round > 0 {
                let start = best.as_ref()?.1.clone();
                bounds = refine_bounds(&start, &bounds);
            }
            self.scan(&bounds, dose, effect, &mut best);
        }
        best.map(|b| b.0)
    }

    fn scan(&self, bounds: &GridBounds, dose: f64, effect: f64, best: &mut Option<(f64, Vec<f64>)>) {
        let m = bounds.ranges.len();
        let n = bounds.grid_points;
        let mut idx = vec![0usize; m];
        let mut free = vec![0.0; m];
        loop {
            for j in 0..m {
                let (lo, hi) = bounds.ranges[j];
                free[j] = lo + (hi - lo) * idx[j] as f64 / (n - 1) as f64;
            }
            let mut gamma = free.clone();
            gamma.extend_from_slice(&bounds.fixed);
            if self.kind.validate_gamma(&gamma).is_ok() {
                if let Some(sse) = self.pinned_sse(&gamma, dose, effect) {
                    if best.as_ref().map_or(true, |b| sse < b.0) {
                        *best = Some((sse, free.clone()));
                    }
                }
            }
            let mut j = m;
            loop {
                if j == 0 {
                    return;
                }
                j -= 1;
                idx[j] += 1;
                if idx[j] < n {
                    break;
                }
                idx[j] = 0;
            }
        }
    }

    fn deviance(&self, dose: f64, effect: f64) -> Option<f64> {
        let sse = self.profile_sse(dose, effect)?;
        let ratio = sse / self.sse_hat.max(f64::MIN_POSITIVE);
        Some((self.n * ratio.ln()).max(0.0))
    }

    /// Endpoint of `{e: deviance(e) <= crit}` on one side of the fitted effect.
    fn endpoint(&self, dose: f64, crit: f64, sign: f64) -> Option<f64> {
        let center = self.fitted_effect(dose);
        let mut inside = 0.0;
        let mut h = 1e-3 * center.abs().max(0.1);
        let mut outside = None;
        for _ in 0..80 {
            if self.deviance(dose, center + sign * h)? > crit {
                outside = Some(h);
                break;
            }
            inside = h;
            h *= 2.0;
        }
        let mut out = outside?;
        for _ in 0..100 {
            if out - inside <= 1e-10 * (1.0 + center.abs()) {
                break;
            }
            let mid = 0.5 * (inside + out);
            if self.deviance(dose, center + sign * mid)? > crit {
                out = mid;
            } else {
                inside = mid;
            }
        }
        Some(center + sign * 0.5 * (inside + out))
    }
}

fn chi2_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level {level} must lie in (0, 1)")));
    }
    Ok(ChiSquared::new(1.0).expect("one degree of freedom").inverse_cdf(level))
}

/// Profile deviance of the hypothesis "effect at `dose` equals `effect`".
pub fn profile_deviance(kind: ModelKind, data: &Dataset, bounds: &GridBounds, dose: f64, effect: f64) -> Result<f64> {
    bounds.validate(kind)?;
    let p = Profiler::new(kind, data, bounds)?;
    p.deviance(dose, effect)
        .ok_or_else(|| Error::ProfileFailure { dose, reason: "effect is not identified at this dose".into() })
}

/// Pointwise profile-likelihood band for the effect over `grid`. An isolated
/// grid dose where profiling fails takes the average of its neighbours.
pub fn profile_likelihood_band(
    kind: ModelKind,
    data: &Dataset,
    bounds: &GridBounds,
    level: f64,
    grid: &[f64],
) -> Result<EffectCurveBand> {
    bounds.validate(kind)?;
    let crit = chi2_quantile(level)?;
    let prof = Profiler::new(kind, data, bounds)?;
    let d0 = prof.d0;
    let rows: Vec<Option<(f64, f64)>> = grid
        .par_iter()
        .map(|&d| {
            if d <= d0 {
                return Some((0.0, 0.0));
            }
            Some((prof.endpoint(d, crit, -1.0)?, prof.endpoint(d, crit, 1.0)?))
        })
        .collect();
    let mut lower = Vec::with_capacity(grid.len());
    let mut upper = Vec::with_capacity(grid.len());
    for (i, row) in rows.iter().enumerate() {
        let (l, u) = match row {
            Some(r) => *r,
            None => {
                let prev = i.checked_sub(1).and_then(|j| rows[j]);
                let next = rows.get(i + 1).copied().flatten();
                match (prev, next) {
                    (Some(a), Some(b)) => (0.5 * (a.0 + b.0), 0.5 * (a.1 + b.1)),
                    _ => {
                        return Err(Error::ProfileFailure {
                            dose: grid[i],
                            reason: "profiling failed here and at a neighbouring grid dose".into(),
                        })
                    }
                }
            }
        };
        lower.push(l);
        upper.push(u);
    }
    Ok(EffectCurveBand {
        grid: grid.to_vec(),
        fitted: grid.iter().map(|&d| if d <= d0 { 0.0 } else { prof.fitted_effect(d) }).collect(),
        lower,
        upper,
        level,
        method: MedMethod::ProfLik,
    })
}

/// MED interval of the inverted profile band, computed from the deviance at
/// `delta` alone: the upper band exceeds `delta` where the fitted effect
/// does or `delta` is inside the band, the lower band where the fitted effect
/// does and `delta` is outside. Agrees with inverting the full band.
pub fn profile_med_ci(
    kind: ModelKind,
    data: &Dataset,
    bounds: &GridBounds,
    request: &MedRequest,
    grid_points: usize,
) -> Result<MedEstimate> {
    bounds.validate(kind)?;
    request.validate()?;
    let crit = chi2_quantile(request.ci_level)?;
    let prof = Profiler::new(kind, data, bounds)?;
    let delta = request.delta;
    let mut est = MedEstimate::not_estimable(MedMethod::ProfLik);
    let mut failed_prev = false;
    for &d in band_grid(data.design(), grid_points)?.iter().filter(|&&d| d > prof.d0) {
        let fitted = prof.fitted_effect(d);
        if est.value.is_none() && fitted > delta {
            est.value = Some(d);
        }
        let Some(dev) = prof.deviance(d, delta) else {
            if failed_prev {
                return Err(Error::ProfileFailure { dose: d, reason: "consecutive profiling failures".into() });
            }
            failed_prev = true;
            continue;
        };
        failed_prev = false;
        let upper_above = fitted > delta || dev < crit;
        let lower_above = fitted > delta && dev > crit;
        if est.lower.is_none() && upper_above {
            est.lower = Some(d);
        }
        if lower_above {
            est.upper = Some(d);
            break;
        }
    }
    Ok(est)
}
