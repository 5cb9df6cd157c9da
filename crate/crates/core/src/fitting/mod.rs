//! Least squares fits by grid search over the nonlinear parameters.
//!
//! For a fixed shape parameter the model is linear in `(alpha, beta)`, so
//! every grid point costs one weighted two-column solve. The best grid point
//! is refined once on a narrower grid, then polished by a short bounded
//! Gauss-Newton run so that the result is a stationary point of the
//! weighted objective.

mod dataset;

pub use dataset::{Dataset, Observation};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{self, DoseDesign, ModelKind, Theta};

pub const DEFAULT_GRID_POINTS: usize = 30;

/// Search box for the nonlinear parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridBounds {
    /// One `(lower, upper)` pair per estimated nonlinear parameter.
    pub ranges: Vec<(f64, f64)>,
    pub grid_points: usize,
    /// Values of nonlinear parameters that are held fixed (the log-linear offset).
    #[serde(default)]
    pub fixed: Vec<f64>,
}

impl GridBounds {
    /// Family defaults scaled to the largest design dose.
    pub fn default_for(kind: ModelKind, design: &DoseDesign) -> Self {
        let dmax = design.max_dose();
        let ranges = match kind {
            ModelKind::Linear | ModelKind::LinLog => vec![],
            ModelKind::Emax => vec![(0.001 * dmax, 1.5 * dmax)],
            ModelKind::SigEmax => vec![(0.001 * dmax, 1.5 * dmax), (0.5, 10.0)],
            ModelKind::Exponential => vec![(0.1 * dmax, 2.0 * dmax)],
            ModelKind::Quadratic => vec![(-2.0 / dmax, -0.001 / dmax)],
            ModelKind::Power => vec![(0.05, 5.0)],
            ModelKind::TruncLogistic => vec![(0.5 / dmax, 50.0 / dmax), (0.0, 1.5 * dmax)],
        };
        let fixed = match kind {
            ModelKind::LinLog => vec![0.2 * dmax],
            _ => vec![],
        };
        GridBounds { ranges, grid_points: DEFAULT_GRID_POINTS, fixed }
    }

    pub fn with_offset(mut self, offset: f64) -> Self {
        self.fixed = vec![offset];
        self
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        if self.ranges.len() != kind.free_arity() {
            return Err(Error::InvalidInput(format!(
                "{kind} needs {} search range(s), got {}",
                kind.free_arity(),
                self.ranges.len()
            )));
        }
        if self.fixed.len() != kind.arity() - kind.free_arity() {
            return Err(Error::InvalidInput(format!("{kind}: wrong number of fixed parameters")));
        }
        if self.grid_points < 2 {
            return Err(Error::InvalidInput("grid_points must be at least 2".into()));
        }
        for &(lo, hi) in &self.ranges {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidInput(format!("invalid search range ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    fn gamma(&self, free: &[f64]) -> Vec<f64> {
        let mut g = free.to_vec();
        g.extend_from_slice(&self.fixed);
        g
    }

    pub fn contains(&self, free_gamma: &[f64]) -> bool {
        self.ranges.iter().zip(free_gamma).all(|(&(lo, hi), &g)| g >= lo && g <= hi)
    }
}

/// Narrows each range to `start +- 1.1 (upper - lower) / N`, clamped to the
/// original range.
pub fn refine_bounds(start: &[f64], bounds: &GridBounds) -> GridBounds {
    let n = bounds.grid_points as f64;
    let ranges = bounds
        .ranges
        .iter()
        .zip(start)
        .map(|(&(lo, hi), &s)| {
            let dif = (hi - lo) / n;
            ((s - 1.1 * dif).max(lo), (s + 1.1 * dif).min(hi))
        })
        .collect();
    GridBounds { ranges, grid_points: bounds.grid_points, fixed: bounds.fixed.clone() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub theta: Theta,
    pub med: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub kind: ModelKind,
    pub theta: Theta,
    pub sigma: f64,
    pub sse: f64,
    pub weights_used: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<TraceEntry>,
}

impl FitResult {
    pub fn n(&self) -> usize {
        self.weights_used.len()
    }
}

/// Unweighted least squares.
pub fn fit_ols(kind: ModelKind, data: &Dataset, bounds: &GridBounds) -> Result<FitResult> {
    fit_weighted(kind, data, bounds, &vec![1.0; data.len()])
}

/// Weighted least squares with one positive weight per observation.
pub fn fit_weighted(
    kind: ModelKind,
    data: &Dataset,
    bounds: &GridBounds,
    weights: &[f64],
) -> Result<FitResult> {
    bounds.validate(kind)?;
    if weights.len() != data.len() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} observations",
            weights.len(),
            data.len()
        )));
    }
    if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidInput("weights must be finite and positive".into()));
    }
    let p = kind.n_free();
    if data.design().len() < p + 1 {
        return Err(Error::RankDeficient(format!(
            "{kind} has {p} parameters but the data contain only {} distinct dose(s)",
            data.design().len()
        )));
    }
    if data.len() <= p {
        return Err(Error::RankDeficient(format!("{} observations for {p} parameters", data.len())));
    }
    let suff = Suff::new(data, weights);
    let theta = minimize(kind, &suff, bounds)?;
    let sse = suff.sse(kind, &theta);
    Ok(FitResult {
        kind,
        sigma: (sse / (data.len() - p) as f64).sqrt(),
        sse,
        weights_used: weights.to_vec(),
        converged: true,
        iterations: 1,
        trace: vec![TraceEntry { theta: theta.clone(), med: None }],
        theta,
    })
}

/// Weighted least squares with one weight per design dose.
pub fn fit_dose_weighted(
    kind: ModelKind,
    data: &Dataset,
    bounds: &GridBounds,
    dose_weights: &[f64],
) -> Result<FitResult> {
    let w: Vec<f64> = data.observations().iter().map(|o| dose_weights[o.dose_index]).collect();
    fit_weighted(kind, data, bounds, &w)
}

/// `sum w (y - mu)^2` at `theta`.
pub fn weighted_sse(kind: ModelKind, data: &Dataset, theta: &Theta, weights: &[f64]) -> Result<f64> {
    theta.validate(kind)?;
    Ok(data
        .observations()
        .iter()
        .zip(weights)
        .map(|(o, w)| w * (o.response - models::mean(kind, theta, data.dose_of(o))).powi(2))
        .sum())
}

/// Weighted per-dose sufficient statistics.
pub(crate) struct Suff {
    pub doses: Vec<f64>,
    /// Total weight per dose.
    pub w: Vec<f64>,
    /// Weighted mean response per dose.
    pub ybar: Vec<f64>,
    /// Weighted within-dose sum of squares.
    pub within: f64,
}

impl Suff {
    pub fn new(data: &Dataset, weights: &[f64]) -> Self {
        let k = data.design().len();
        let mut w = vec![0.0; k];
        let mut s = vec![0.0; k];
        for (o, &wi) in data.observations().iter().zip(weights) {
            w[o.dose_index] += wi;
            s[o.dose_index] += wi * o.response;
        }
        let ybar: Vec<f64> = s.iter().zip(&w).map(|(s, w)| s / w).collect();
        let within = data
            .observations()
            .iter()
            .zip(weights)
            .map(|(o, wi)| wi * (o.response - ybar[o.dose_index]).powi(2))
            .sum();
        Suff { doses: data.design().doses().to_vec(), w, ybar, within }
    }

    pub fn sse(&self, kind: ModelKind, theta: &Theta) -> f64 {
        self.within + self.between(kind, theta)
    }

    /// Lack-of-fit part of the objective.
    pub fn between(&self, kind: ModelKind, theta: &Theta) -> f64 {
        self.doses
            .iter()
            .zip(&self.w)
            .zip(&self.ybar)
            .map(|((&d, &w), &y)| w * (y - models::mean(kind, theta, d)).powi(2))
            .sum()
    }

    /// Weighted linear solve for fixed shape parameters. Returns
    /// `(alpha, beta, sse)` or `None` if the shape is constant over the design.
    fn solve_linear(&self, kind: ModelKind, gamma: &[f64], x: &mut [f64]) -> Option<(f64, f64, f64)> {
        let mut sw = 0.0;
        let mut sx = 0.0;
        let mut sy = 0.0;
        for (i, &d) in self.doses.iter().enumerate() {
            x[i] = models::shape(kind, gamma, d);
            if !x[i].is_finite() {
                return None;
            }
            sw += self.w[i];
            sx += self.w[i] * x[i];
            sy += self.w[i] * self.ybar[i];
        }
        let xm = sx / sw;
        let ym = sy / sw;
        let (mut sxx, mut sxy, mut syy, mut sx2) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..self.doses.len() {
            let dx = x[i] - xm;
            let dy = self.ybar[i] - ym;
            sxx += self.w[i] * dx * dx;
            sxy += self.w[i] * dx * dy;
            syy += self.w[i] * dy * dy;
            sx2 += self.w[i] * x[i] * x[i];
        }
        if !(sxx > 1e-12 * sx2) || sxx <= f64::MIN_POSITIVE {
            return None;
        }
        let beta = sxy / sxx;
        let alpha = ym - beta * xm;
        let sse = self.within + (syy - sxy * sxy / sxx).max(0.0);
        Some((alpha, beta, sse))
    }
}

struct Best {
    sse: f64,
    theta: Theta,
}

fn grid_search(kind: ModelKind, suff: &Suff, bounds: &GridBounds, best: &mut Option<Best>) {
    let m = bounds.ranges.len();
    let n = bounds.grid_points;
    let mut idx = vec![0usize; m];
    let mut free = vec![0.0; m];
    let mut x = vec![0.0; suff.doses.len()];
    loop {
        for j in 0..m {
            let (lo, hi) = bounds.ranges[j];
            free[j] = lo + (hi - lo) * idx[j] as f64 / (n - 1) as f64;
        }
        let gamma = bounds.gamma(&free);
        if kind.validate_gamma(&gamma).is_ok() {
            if let Some((a, b, sse)) = suff.solve_linear(kind, &gamma, &mut x) {
                if best.as_ref().map_or(true, |bst| sse < bst.sse) {
                    *best = Some(Best { sse, theta: Theta::new(a, b, gamma) });
                }
            }
        }
        // lexicographic odometer, first parameter slowest
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

fn minimize(kind: ModelKind, suff: &Suff, bounds: &GridBounds) -> Result<Theta> {
    let mut best = None;
    if bounds.ranges.is_empty() {
        let mut x = vec![0.0; suff.doses.len()];
        let gamma = bounds.fixed.clone();
        kind.validate_gamma(&gamma)?;
        if let Some((a, b, sse)) = suff.solve_linear(kind, &gamma, &mut x) {
            best = Some(Best { sse, theta: Theta::new(a, b, gamma) });
        }
        return best
            .map(|b| b.theta)
            .ok_or_else(|| Error::RankDeficient(format!("{kind}: design matrix is singular")));
    }
    grid_search(kind, suff, bounds, &mut best);
    let coarse = best
        .as_ref()
        .ok_or_else(|| Error::RankDeficient(format!("{kind}: design matrix singular at every grid point")))?;
    let start = coarse.theta.gamma[..kind.free_arity()].to_vec();
    let fine = refine_bounds(&start, bounds);
    grid_search(kind, suff, &fine, &mut best);
    let best = best.expect("coarse best exists");
    Ok(polish(kind, suff, bounds, best))
}

/// Half the negative gradient of the lack-of-fit sum, `J'r`, and `J'J`.
fn normal_terms(kind: ModelKind, suff: &Suff, theta: &Theta) -> (DVector<f64>, DMatrix<f64>) {
    let p = kind.n_free();
    let mut grad = vec![0.0; 2 + kind.arity()];
    let mut jtj = DMatrix::<f64>::zeros(p, p);
    let mut jtr = DVector::<f64>::zeros(p);
    for (i, &d) in suff.doses.iter().enumerate() {
        full_gradient(kind, theta, d, &mut grad);
        let r = suff.ybar[i] - models::mean(kind, theta, d);
        for a in 0..p {
            jtr[a] += suff.w[i] * grad[a] * r;
            for b in 0..p {
                jtj[(a, b)] += suff.w[i] * grad[a] * grad[b];
            }
        }
    }
    (jtr, jtj)
}

/// Newton step from a differenced Hessian when it is positive definite,
/// otherwise a (ridged) Gauss-Newton step.
fn newton_step(kind: ModelKind, suff: &Suff, theta: &Theta, jtr: &DVector<f64>, jtj: &DMatrix<f64>) -> Option<DVector<f64>> {
    let p = kind.n_free();
    let base = theta.free_params(kind);
    let mut hess = DMatrix::<f64>::zeros(p, p);
    let mut ok = true;
    for j in 0..p {
        let h = 1e-6 * base[j].abs().max(1e-3);
        let mut up = base.clone();
        let mut dn = base.clone();
        up[j] += h;
        dn[j] -= h;
        let (tu, td) = (theta.with_free(kind, &up), theta.with_free(kind, &dn));
        if tu.validate(kind).is_err() || td.validate(kind).is_err() {
            ok = false;
            break;
        }
        let col = (normal_terms(kind, suff, &td).0 - normal_terms(kind, suff, &tu).0) / (2.0 * h);
        hess.set_column(j, &col);
    }
    if ok && hess.iter().all(|v| v.is_finite()) {
        let sym = (&hess + hess.transpose()) * 0.5;
        if let Some(c) = sym.cholesky() {
            return Some(c.solve(jtr));
        }
    }
    let mut ridge = 0.0;
    loop {
        let mut lhs = jtj.clone();
        for a in 0..p {
            lhs[(a, a)] += ridge * jtj[(a, a)].max(1e-300);
        }
        if let Some(c) = lhs.cholesky() {
            return Some(c.solve(jtr));
        }
        ridge = if ridge == 0.0 { 1e-10 } else { ridge * 100.0 };
        if ridge > 1e6 {
            return None;
        }
    }
}

/// Bounded Newton iteration with step halving on all estimated parameters.
/// Only steps that lower the objective are kept.
fn polish(kind: ModelKind, suff: &Suff, bounds: &GridBounds, start: Best) -> Theta {
    let mut theta = start.theta;
    let mut sse = suff.between(kind, &theta);
    for _ in 0..100 {
        let (jtr, jtj) = normal_terms(kind, suff, &theta);
        let Some(step) = newton_step(kind, suff, &theta, &jtr, &jtj) else { break };
        let free = theta.free_params(kind);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut cand: Vec<f64> = free.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            for (j, &(lo, hi)) in bounds.ranges.iter().enumerate() {
                cand[2 + j] = cand[2 + j].clamp(lo, hi);
            }
            let next = theta.with_free(kind, &cand);
            if next.validate(kind).is_ok() {
                let s = suff.between(kind, &next);
                if s < sse {
                    accepted = Some((next, s, cand));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((next, s, cand)) = accepted else { break };
        let moved = free
            .iter()
            .zip(&cand)
            .map(|(a, b)| (a - b).abs() / (1.0 + a.abs()))
            .fold(0.0, f64::max);
        theta = next;
        sse = s;
        if moved < 1e-13 {
            break;
        }
    }
    theta
}

/// Mean gradient restricted to the estimated parameters.
pub(crate) fn full_gradient(kind: ModelKind, theta: &Theta, d: f64, out: &mut [f64]) {
    out[0] = 1.0;
    out[1] = models::shape(kind, &theta.gamma, d);
    models::shape_gamma_gradient(kind, &theta.gamma, d, &mut out[2..2 + kind.arity()]);
    for v in &mut out[2..2 + kind.arity()] {
        *v *= theta.beta;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn bretz_design(n: usize) -> DoseDesign {
        DoseDesign::balanced(vec![0.0, 0.05, 0.2, 0.6, 1.0], n).unwrap()
    }

    fn noiseless(kind: ModelKind, theta: &Theta, design: &DoseDesign) -> Dataset {
        let groups: Vec<Vec<f64>> = design
            .doses()
            .iter()
            .zip(design.allocations())
            .map(|(&d, &n)| vec![models::eval_mean(kind, theta, d).unwrap(); n])
            .collect();
        Dataset::from_groups(design.clone(), &groups).unwrap()
    }

    fn simulated(kind: ModelKind, theta: &Theta, design: &DoseDesign, sigma: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let groups: Vec<Vec<f64>> = design
            .doses()
            .iter()
            .zip(design.allocations())
            .map(|(&d, &n)| {
                let mu = models::eval_mean(kind, theta, d).unwrap();
                (0..n).map(|_| mu + noise.sample(&mut rng)).collect()
            })
            .collect();
        Dataset::from_groups(design.clone(), &groups).unwrap()
    }

    #[test]
    fn refine_examples() {
        let b = GridBounds { ranges: vec![(0.0, 3.0)], grid_points: 30, fixed: vec![] };
        let r = refine_bounds(&[1.5], &b);
        assert!((r.ranges[0].0 - 1.39).abs() < 1e-12 && (r.ranges[0].1 - 1.61).abs() < 1e-12);
        let r = refine_bounds(&[0.0], &b);
        assert_eq!(r.ranges[0].0, 0.0);
        assert!((r.ranges[0].1 - 0.11).abs() < 1e-12);
        let narrow = GridBounds { ranges: vec![(0.05, 0.05 + 1e-9)], grid_points: 30, fixed: vec![] };
        let r = refine_bounds(&[0.05], &narrow);
        assert!(r.ranges[0].0 >= 0.05 && r.ranges[0].1 <= 0.05 + 1e-9);
    }

    #[test]
    fn recovers_noiseless_emax() {
        let design = bretz_design(25);
        let truth = Theta::new(0.2, 0.7, vec![0.2]);
        let data = noiseless(ModelKind::Emax, &truth, &design);
        let fit = fit_ols(ModelKind::Emax, &data, &GridBounds::default_for(ModelKind::Emax, &design)).unwrap();
        assert!((fit.theta.alpha - 0.2).abs() < 1e-6);
        assert!((fit.theta.beta - 0.7).abs() < 1e-6);
        assert!((fit.theta.gamma[0] - 0.2).abs() < 1e-6);
        assert!(fit.sse < 1e-20);
    }

    #[test]
    fn exact_line() {
        let design = bretz_design(3);
        let data = noiseless(ModelKind::Linear, &Theta::new(0.2, 0.6, vec![]), &design);
        let fit = fit_ols(ModelKind::Linear, &data, &GridBounds::default_for(ModelKind::Linear, &design)).unwrap();
        assert!((fit.theta.alpha - 0.2).abs() < 1e-14);
        assert!((fit.theta.beta - 0.6).abs() < 1e-14);
        assert!(fit.sigma < 1e-7);
    }

    #[test]
    fn constant_response_gives_zero_slope() {
        let design = bretz_design(4);
        let data = noiseless(ModelKind::Linear, &Theta::new(1.0, 0.0, vec![]), &design);
        let fit = fit_ols(ModelKind::Linear, &data, &GridBounds::default_for(ModelKind::Linear, &design)).unwrap();
        assert!((fit.theta.alpha - 1.0).abs() < 1e-15);
        assert_eq!(fit.theta.beta, 0.0);
        let fit = fit_ols(ModelKind::Emax, &data, &GridBounds::default_for(ModelKind::Emax, &design)).unwrap();
        assert!(fit.theta.beta.abs() < 1e-12);
    }

    #[test]
    fn too_few_doses_is_rank_deficient() {
        let data = Dataset::from_pairs(&[(0.0, 0.1), (0.0, 0.2), (1.0, 0.8), (1.0, 0.9)]).unwrap();
        let bounds = GridBounds::default_for(ModelKind::Emax, data.design());
        assert!(matches!(fit_ols(ModelKind::Emax, &data, &bounds), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn unit_weights_reproduce_ols_bitwise() {
        let design = bretz_design(10);
        let data = simulated(ModelKind::Emax, &Theta::new(0.2, 0.7, vec![0.2]), &design, 0.65, 3);
        let b = GridBounds::default_for(ModelKind::Emax, &design);
        let ols = fit_ols(ModelKind::Emax, &data, &b).unwrap();
        let w = fit_weighted(ModelKind::Emax, &data, &b, &vec![1.0; data.len()]).unwrap();
        assert_eq!(ols, w);
        let w2 = fit_weighted(ModelKind::Emax, &data, &b, &vec![2.0; data.len()]).unwrap();
        for (a, b) in ols.theta.free_params(ModelKind::Emax).iter().zip(w2.theta.free_params(ModelKind::Emax)) {
            assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn weighted_line_matches_normal_equations() {
        let design = bretz_design(4);
        let data = simulated(ModelKind::Linear, &Theta::new(0.2, 0.6, vec![]), &design, 0.3, 9);
        // almost all mass on three doses
        let dose_w = [1e-9, 3.0, 1e-9, 2.0, 5.0];
        let fit = fit_dose_weighted(ModelKind::Linear, &data, &GridBounds::default_for(ModelKind::Linear, &design), &dose_w)
            .unwrap();
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for o in data.observations() {
            let w = dose_w[o.dose_index];
            let d = data.dose_of(o);
            s0 += w;
            s1 += w * d;
            s2 += w * d * d;
            t0 += w * o.response;
            t1 += w * d * o.response;
        }
        let det = s0 * s2 - s1 * s1;
        let beta = (s0 * t1 - s1 * t0) / det;
        let alpha = (s2 * t0 - s1 * t1) / det;
        assert!((fit.theta.alpha - alpha).abs() < 1e-10);
        assert!((fit.theta.beta - beta).abs() < 1e-10);
    }

    #[test]
    fn fit_beats_every_grid_candidate() {
        let design = bretz_design(8);
        let data = simulated(ModelKind::SigEmax, &Theta::new(0.2, 0.615, vec![0.4, 4.0]), &design, 0.65, 11);
        let mut b = GridBounds::default_for(ModelKind::SigEmax, &design);
        b.grid_points = 6;
        let fit = fit_ols(ModelKind::SigEmax, &data, &b).unwrap();
        let ones = vec![1.0; data.len()];
        let suff = Suff::new(&data, &ones);
        let mut x = vec![0.0; 5];
        for i in 0..6 {
            for j in 0..6 {
                let e = b.ranges[0].0 + (b.ranges[0].1 - b.ranges[0].0) * i as f64 / 5.0;
                let h = b.ranges[1].0 + (b.ranges[1].1 - b.ranges[1].0) * j as f64 / 5.0;
                if let Some((_, _, sse)) = suff.solve_linear(ModelKind::SigEmax, &[e, h], &mut x) {
                    assert!(fit.sse <= sse + 1e-12);
                }
            }
        }
    }

    #[test]
    fn sigma_estimate_is_consistent() {
        let design = bretz_design(200);
        let truth = Theta::new(0.2, 0.7, vec![0.2]);
        let b = GridBounds::default_for(ModelKind::Emax, &design);
        let reps = 200;
        let mean_sigma: f64 = (0..reps)
            .map(|s| fit_ols(ModelKind::Emax, &simulated(ModelKind::Emax, &truth, &design, 0.65, s), &b).unwrap().sigma)
            .sum::<f64>()
            / reps as f64;
        assert!((mean_sigma - 0.65).abs() < 0.065, "{mean_sigma}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn refinement_never_hurts(seed in 0u64..10_000) {
            let design = bretz_design(5);
            let data = simulated(ModelKind::Emax, &Theta::new(0.2, 0.7, vec![0.2]), &design, 0.65, seed);
            let b = GridBounds::default_for(ModelKind::Emax, &design);
            let ones = vec![1.0; data.len()];
            let suff = Suff::new(&data, &ones);
            let mut coarse = None;
            grid_search(ModelKind::Emax, &suff, &b, &mut coarse);
            let fit = fit_ols(ModelKind::Emax, &data, &b).unwrap();
            prop_assert!(fit.sse <= coarse.unwrap().sse + 1e-12);
        }

        #[test]
        fn refined_bounds_are_nested(lo in -5.0f64..5.0, width in 1e-6f64..10.0, t in 0.0f64..1.0, n in 2usize..60) {
            let b = GridBounds { ranges: vec![(lo, lo + width)], grid_points: n, fixed: vec![] };
            let r = refine_bounds(&[lo + t * width], &b);
            prop_assert!(r.ranges[0].0 >= lo && r.ranges[0].1 <= lo + width);
            prop_assert!(r.ranges[0].0 <= lo + t * width && r.ranges[0].1 >= lo + t * width);
        }
    }
}
