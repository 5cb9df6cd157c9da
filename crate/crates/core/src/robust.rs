//! Target-dose weighted M-estimation.
//!
//! The estimator solves `sum_i w(d_i; MED(theta)) (y_i - mu_i) g_i = 0`
//! with a damped Newton-Raphson iteration started from least squares. The
//! weight moves with the parameters through the MED, so the Jacobian is
//! taken by central differences. Its asymptotic covariance is the sandwich
//! `A^-1 V A^-T`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{fit_dose_weighted, fit_ols, full_gradient, Dataset, FitResult, GridBounds, TraceEntry};
use crate::linalg::z_quantile;
use crate::med::{med_from_theta_at, med_gradient_free, MedEstimate, MedMethod, MedRequest};
use crate::models::{self, DoseDesign, ModelKind, Theta};
use crate::weights::{compute_weight, design_weights, WeightSpec, WeightTag};

/// Estimating function of one observation.
#[derive(Debug, Clone)]
pub struct ScoreFunction {
    pub kind: ModelKind,
    pub weight: WeightSpec,
    pub request: MedRequest,
    pub design: DoseDesign,
}

impl ScoreFunction {
    pub fn new(kind: ModelKind, weight: WeightSpec, request: MedRequest, design: DoseDesign) -> Result<Self> {
        if weight.tag == WeightTag::W7 {
            return Err(Error::UnsupportedWeight("w7 (the score must be smooth in theta)".into()));
        }
        weight.validate()?;
        Ok(ScoreFunction { kind, weight, request, design })
    }

    fn med(&self, theta: &Theta) -> Result<f64> {
        med_from_theta_at(self.kind, theta, self.request.delta, self.design.placebo())
            .map_err(|e| Error::OutOfRegion(e.to_string()))
    }

    /// Weight at each design dose for parameters `theta`.
    fn dose_weights(&self, theta: &Theta) -> Result<Vec<f64>> {
        if self.weight.tag == WeightTag::Uniform {
            return Ok(vec![1.0; self.design.len()]);
        }
        let med = self.med(theta)?;
        design_weights(&self.weight, med, &self.design)
    }
}

/// `phi = (y - mu(d)) w(d) dmu/dtheta` in the estimated parameters.
pub fn score_eval(sf: &ScoreFunction, y: f64, d: f64, theta: &Theta) -> Result<Vec<f64>> {
    theta.validate(sf.kind)?;
    let w = if sf.weight.tag == WeightTag::Uniform {
        1.0
    } else {
        compute_weight(&sf.weight, d, sf.med(theta)?, &sf.design)?
    };
    let mut g = vec![0.0; 2 + sf.kind.arity()];
    full_gradient(sf.kind, theta, d, &mut g);
    g.truncate(sf.kind.n_free());
    let r = y - models::mean(sf.kind, theta, d);
    Ok(g.into_iter().map(|v| r * w * v).collect())
}

/// Per-dose response totals; the summed score only depends on these.
struct Totals {
    doses: Vec<f64>,
    n: Vec<f64>,
    sum: Vec<f64>,
}

impl Totals {
    fn new(data: &Dataset) -> Self {
        let design = data.design();
        let mut sum = vec![0.0; design.len()];
        for o in data.observations() {
            sum[o.dose_index] += o.response;
        }
        Totals {
            doses: design.doses().to_vec(),
            n: design.allocations().iter().map(|&n| n as f64).collect(),
            sum,
        }
    }
}

fn total_score(sf: &ScoreFunction, totals: &Totals, theta: &Theta) -> Result<DVector<f64>> {
    let kind = sf.kind;
    if theta.validate(kind).is_err() {
        return Err(Error::OutOfRegion("invalid parameters".into()));
    }
    let w = sf.dose_weights(theta)?;
    let p = kind.n_free();
    let mut g = vec![0.0; 2 + kind.arity()];
    let mut out = DVector::<f64>::zeros(p);
    for i in 0..totals.doses.len() {
        let d = totals.doses[i];
        full_gradient(kind, theta, d, &mut g);
        let r = totals.sum[i] - totals.n[i] * models::mean(kind, theta, d);
        for a in 0..p {
            out[a] += w[i] * r * g[a];
        }
    }
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::OutOfRegion("non-finite score".into()))
    }
}

fn fd_jacobian(sf: &ScoreFunction, totals: &Totals, theta: &Theta, rel_step: f64) -> Result<DMatrix<f64>> {
    let kind = sf.kind;
    let p = kind.n_free();
    let base = theta.free_params(kind);
    let mut jac = DMatrix::zeros(p, p);
    for j in 0..p {
        let h = rel_step * base[j].abs().max(1.0);
        let mut up = base.clone();
        let mut dn = base.clone();
        up[j] += h;
        dn[j] -= h;
        let fu = total_score(sf, totals, &theta.with_free(kind, &up))?;
        let fd = total_score(sf, totals, &theta.with_free(kind, &dn))?;
        jac.set_column(j, &((fu - fd) / (2.0 * h)));
    }
    Ok(jac)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SandwichVariant {
    /// Bread from the full score derivative, including the term carried by
    /// the residual times the derivative of `w g`.
    Full,
    /// Bread `-(1/n) sum w g g'`, which drops that term. The dropped term has
    /// mean zero under the model but is erratic near the kinks of the
    /// target-dose weights.
    #[default]
    ModelBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RrConfig {
    pub weight: WeightSpec,
    pub max_iter: usize,
    /// Convergence when the sup norm of the summed score is below `score_tol * n`.
    pub score_tol: f64,
    pub step_tol: f64,
    pub max_halvings: usize,
    pub fd_step: f64,
    pub variant: SandwichVariant,
    /// Retry from weighted least squares fixed points when Newton-Raphson
    /// from least squares fails, instead of returning least squares.
    /// Off by default: the estimator is the Newton limit from least squares.
    pub restarts: bool,
}

impl RrConfig {
    pub fn new(weight: WeightSpec) -> Self {
        RrConfig {
            weight,
            max_iter: 100,
            score_tol: 1e-8,
            step_tol: 1e-10,
            max_halvings: 10,
            fd_step: 1e-6,
            variant: SandwichVariant::default(),
            restarts: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SandwichCov {
    pub a_matrix: DMatrix<f64>,
    pub v_matrix: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    /// Ratio of largest to smallest singular value of `A`.
    pub condition: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrDiagnostics {
    pub iterations: usize,
    pub score_norm: f64,
    pub converged: bool,
    pub singular: bool,
    pub message: Option<String>,
    /// Shape parameters held at an edge of the search box.
    #[serde(default)]
    pub pinned: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RrFit {
    pub fit: FitResult,
    pub cov: Option<SandwichCov>,
    pub diagnostics: RrDiagnostics,
}

struct Solver<'a> {
    sf: &'a ScoreFunction,
    totals: &'a Totals,
    bounds: &'a GridBounds,
    config: &'a RrConfig,
    tol: f64,
}

type Solved = (Theta, DVector<f64>, usize, Vec<TraceEntry>);

/// Estimated coordinates whose value sits on an edge of the search box.
fn on_bounds(kind: ModelKind, bounds: &GridBounds, theta: &Theta) -> Vec<bool> {
    let mut pinned = vec![false; kind.n_free()];
    for (j, &(lo, hi)) in bounds.ranges.iter().enumerate() {
        let tol = 1e-9 * (hi - lo);
        let g = theta.gamma[j];
        pinned[2 + j] = g <= lo + tol || g >= hi - tol;
    }
    pinned
}

impl Solver<'_> {
    fn admissible(&self, theta: &Theta) -> Option<DVector<f64>> {
        if !self.bounds.contains(&theta.gamma[..self.sf.kind.free_arity()]) {
            return None;
        }
        self.sf.med(theta).ok()?;
        total_score(self.sf, self.totals, theta).ok()
    }

    /// Damped Newton-Raphson from `theta`. Failures carry the iteration
    /// count, the last score norm and a reason.
    fn newton(&self, mut theta: Theta, pinned: &[bool]) -> std::result::Result<Solved, (usize, f64, String)> {
        let (sf, config, kind) = (self.sf, self.config, self.sf.kind);
        let free_idx: Vec<usize> = (0..kind.n_free()).filter(|&i| !pinned[i]).collect();
        let reduce = |v: DVector<f64>| v.select_rows(&free_idx);
        let Some(mut score) = self.admissible(&theta).map(reduce) else {
            return Err((0, f64::NAN, "MED not estimable at the starting point".into()));
        };
        let mut trace = vec![TraceEntry { theta: theta.clone(), med: sf.med(&theta).ok() }];
        let mut converged = score.amax() <= self.tol;
        let mut iterations = 0;
        while !converged && iterations < config.max_iter {
            iterations += 1;
            let jac = fd_jacobian(sf, self.totals, &theta, config.fd_step)
                .map_err(|e| (iterations, score.amax(), e.to_string()))?;
            let jac = jac.select_rows(&free_idx).select_columns(&free_idx);
            let Some(reduced) = jac.lu().solve(&(-&score)) else {
                return Err((iterations, score.amax(), "singular Jacobian".into()));
            };
            let mut step = DVector::zeros(kind.n_free());
            for (k, &i) in free_idx.iter().enumerate() {
                step[i] = reduced[k];
            }
            let free = DVector::from_vec(theta.free_params(kind));
            let norm0 = score.norm();
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=config.max_halvings {
                let cand = theta.with_free(kind, (&free + &step * t).as_slice());
                if let Some(s) = self.admissible(&cand).map(reduce) {
                    if s.norm() < norm0 {
                        accepted = Some((cand, s));
                        break;
                    }
                }
                t *= 0.5;
            }
            let Some((next, s)) = accepted else {
                return Err((iterations, score.amax(), "damping exhausted".into()));
            };
            let moved = (&step * t).norm();
            theta = next;
            score = s;
            trace.push(TraceEntry { theta: theta.clone(), med: sf.med(&theta).ok() });
            converged = score.amax() <= self.tol || moved <= config.step_tol;
        }
        if converged {
            Ok((theta, score, iterations, trace))
        } else {
            Err((iterations, score.amax(), "iteration limit reached".into()))
        }
    }
}

/// Weighted least squares with the weights frozen at the current MED,
/// repeated until the MED settles. A root of the summed score is a fixed
/// point of this map, so it gives Newton a start close to the root.
fn fixed_point_start(sf: &ScoreFunction, data: &Dataset, bounds: &GridBounds, start: &Theta, max_iter: usize) -> Option<Theta> {
    let mut theta = start.clone();
    let mut med = sf.med(&theta).ok()?;
    for _ in 0..max_iter {
        let w = design_weights(&sf.weight, med, &sf.design).ok()?;
        theta = fit_dose_weighted(sf.kind, data, bounds, &w).ok()?.theta;
        let next = sf.med(&theta).ok()?;
        if ((next - med) / med).abs() <= 1e-10 {
            return Some(theta);
        }
        med = next;
    }
    None
}

/// Brackets the fixed points of `m -> MED(weighted fit at weights w(m))`
/// on a dose grid and bisects each one, nearest to the least squares MED
/// first. Catches roots that plain iteration cycles around.
fn fixed_point_scan<'a>(
    sf: &'a ScoreFunction,
    data: &'a Dataset,
    bounds: &'a GridBounds,
    start: &Theta,
) -> impl Iterator<Item = Theta> + 'a {
    let gap = move |m: f64| -> Option<(f64, Theta)> {
        let w = design_weights(&sf.weight, m, &sf.design).ok()?;
        let theta = fit_dose_weighted(sf.kind, data, bounds, &w).ok()?.theta;
        Some((sf.med(&theta).ok()? - m, theta))
    };
    let dmax = sf.design.max_dose();
    let grid: Vec<f64> = (1..=SCAN_POINTS).map(|i| dmax * i as f64 / SCAN_POINTS as f64).collect();
    let values: Vec<Option<f64>> = grid.iter().map(|&m| gap(m).map(|g| g.0)).collect();
    let anchor = sf.med(start).unwrap_or(dmax / 2.0);
    let mut brackets: Vec<(f64, f64)> = (1..grid.len())
        .filter(|&i| matches!((values[i - 1], values[i]), (Some(a), Some(b)) if a.signum() != b.signum()))
        .map(|i| (grid[i - 1], grid[i]))
        .collect();
    brackets.sort_by(|a, b| (a.0 - anchor).abs().total_cmp(&(b.0 - anchor).abs()));
    brackets.into_iter().filter_map(move |(mut lo, mut hi)| {
        let mut g_lo = gap(lo)?.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let g_mid = gap(mid)?.0;
            if g_mid.signum() == g_lo.signum() {
                lo = mid;
                g_lo = g_mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-12 * dmax {
                break;
            }
        }
        gap(0.5 * (lo + hi)).map(|g| g.1)
    })
}

const SCAN_POINTS: usize = 40;

pub fn rr_fit(
    kind: ModelKind,
    data: &Dataset,
    bounds: &GridBounds,
    request: &MedRequest,
    config: &RrConfig,
) -> Result<RrFit> {
    request.validate()?;
    let ols = fit_ols(kind, data, bounds)?;
    let sf = ScoreFunction::new(kind, config.weight, *request, data.design().clone())?;
    let totals = Totals::new(data);
    let n = data.len() as f64;

    let fallback = |iterations: usize, score_norm: f64, message: String| {
        let mut fit = ols.clone();
        fit.converged = false;
        fit.iterations = iterations.max(1);
        RrFit {
            fit,
            cov: None,
            diagnostics: RrDiagnostics {
                iterations,
                score_norm,
                converged: false,
                singular: false,
                message: Some(message),
                pinned: vec![],
            },
        }
    };
    let solver = Solver { sf: &sf, totals: &totals, bounds, config, tol: config.score_tol * n };
    let mut pinned = on_bounds(kind, bounds, &ols.theta);
    let mut attempt = solver.newton(ols.theta.clone(), &pinned);
    if attempt.is_err() && config.restarts {
        let iterated = fixed_point_start(&sf, data, bounds, &ols.theta, config.max_iter);
        let mut starts = iterated.into_iter().chain(fixed_point_scan(&sf, data, bounds, &ols.theta));
        while let Some(start) = attempt.is_err().then(|| starts.next()).flatten() {
            let at = on_bounds(kind, bounds, &start);
            if let Ok(ok) = solver.newton(start, &at) {
                attempt = Ok(ok);
                pinned = at;
            }
        }
    }
    let (theta, score, iterations, trace) = match attempt {
        Ok(found) => found,
        Err((iterations, score_norm, message)) => return Ok(fallback(iterations, score_norm, message)),
    };

    let w = sf.dose_weights(&theta)?;
    let weights_used: Vec<f64> = data.observations().iter().map(|o| w[o.dose_index]).collect();
    let wsse = crate::fitting::weighted_sse(kind, data, &theta, &weights_used)?;
    let p = kind.n_free();
    let fit = FitResult {
        kind,
        theta: theta.clone(),
        sigma: (wsse / (data.len() - p) as f64).sqrt(),
        sse: wsse,
        weights_used,
        converged: true,
        iterations: iterations.max(1),
        trace,
    };
    let (cov, singular, message) = match sandwich_with(&sf, &totals, data, &theta, config, &pinned) {
        Ok(c) => (Some(c), false, None),
        Err(e) => (None, true, Some(e.to_string())),
    };
    Ok(RrFit {
        fit,
        cov,
        diagnostics: RrDiagnostics {
            iterations,
            score_norm: score.amax(),
            converged: true,
            singular,
            message,
            pinned: pinned_names(kind, &pinned),
        },
    })
}

fn pinned_names(kind: ModelKind, pinned: &[bool]) -> Vec<String> {
    kind.gamma_names()
        .iter()
        .enumerate()
        .filter(|&(j, _)| pinned.get(2 + j).copied().unwrap_or(false))
        .map(|(_, name)| name.to_string())
        .collect()
}

/// Sandwich covariance of the M-estimator at `theta_hat`.
pub fn sandwich_cov(
    kind: ModelKind,
    data: &Dataset,
    theta_hat: &Theta,
    weight: &WeightSpec,
    request: &MedRequest,
    variant: SandwichVariant,
) -> Result<SandwichCov> {
    let sf = ScoreFunction::new(kind, *weight, *request, data.design().clone())?;
    let mut config = RrConfig::new(*weight);
    config.variant = variant;
    sandwich_with(&sf, &Totals::new(data), data, theta_hat, &config, &vec![false; kind.n_free()])
}

fn sandwich_with(
    sf: &ScoreFunction,
    totals: &Totals,
    data: &Dataset,
    theta: &Theta,
    config: &RrConfig,
    pinned: &[bool],
) -> Result<SandwichCov> {
    let kind = sf.kind;
    let p = kind.n_free();
    let n = data.len() as f64;
    let w = sf.dose_weights(theta)?;
    let mut g = vec![0.0; 2 + kind.arity()];

    let mut v = DMatrix::zeros(p, p);
    for (i, &d) in data.design().doses().iter().enumerate() {
        full_gradient(kind, theta, d, &mut g);
        let mu = models::mean(kind, theta, d);
        let ss: f64 = data
            .observations()
            .iter()
            .filter(|o| o.dose_index == i)
            .map(|o| (o.response - mu).powi(2))
            .sum();
        let c = ss * w[i] * w[i] / n;
        for a in 0..p {
            for b in 0..p {
                v[(a, b)] += c * g[a] * g[b];
            }
        }
    }

    let a = match config.variant {
        SandwichVariant::Full => fd_jacobian(sf, totals, theta, config.fd_step)? / n,
        SandwichVariant::ModelBased => {
            let mut a = DMatrix::zeros(p, p);
            for (i, &d) in totals.doses.iter().enumerate() {
                full_gradient(kind, theta, d, &mut g);
                let c = -totals.n[i] * w[i] / n;
                for r in 0..p {
                    for s in 0..p {
                        a[(r, s)] += c * g[r] * g[s];
                    }
                }
            }
            a
        }
    };
    // Pinned coordinates are constants: zero rows and columns.
    let idx: Vec<usize> = (0..p).filter(|&i| !pinned[i]).collect();
    let a_free = a.select_rows(&idx).select_columns(&idx);
    let v_free = v.select_rows(&idx).select_columns(&idx);
    let sv = a_free.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition < 1e12) {
        return Err(Error::SingularInformation(format!("score Jacobian condition number {condition:.3e}")));
    }
    let a_inv = a_free
        .try_inverse()
        .ok_or_else(|| Error::SingularInformation("score Jacobian is not invertible".into()))?;
    let cov = &a_inv * &v_free * a_inv.transpose();
    let mut covariance = DMatrix::zeros(p, p);
    for (r, &i) in idx.iter().enumerate() {
        for (c, &j) in idx.iter().enumerate() {
            covariance[(i, j)] = 0.5 * (cov[(r, c)] + cov[(c, r)]);
        }
    }
    if covariance.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularInformation("non-finite sandwich".into()));
    }
    Ok(SandwichCov { a_matrix: a, v_matrix: v, covariance, condition })
}

/// `MED +- u sqrt(b' C b / n)`.
pub fn rr_med_ci(
    kind: ModelKind,
    theta_hat: &Theta,
    cov: &SandwichCov,
    request: &MedRequest,
    design: &DoseDesign,
) -> Result<MedEstimate> {
    let d0 = design.placebo();
    let value = med_from_theta_at(kind, theta_hat, request.delta, d0)?;
    let b = DVector::from_vec(med_gradient_free(kind, theta_hat, request.delta, d0)?);
    let var = b.dot(&(&cov.covariance * &b)).max(0.0) / design.total() as f64;
    let half = z_quantile(0.5 + request.ci_level / 2.0) * var.sqrt();
    Ok(MedEstimate {
        value: Some(value),
        method: MedMethod::Rr,
        lower: Some((value - half).max(0.0)),
        upper: Some(value + half),
        se: Some(var.sqrt()),
    })
}

/// Interval around the estimate returned by [`rr_fit`]. When Newton-Raphson
/// failed the estimate is least squares, and the sandwich is evaluated there.
pub fn rr_fit_ci(data: &Dataset, rr: &RrFit, request: &MedRequest, config: &RrConfig) -> Result<MedEstimate> {
    let kind = rr.fit.kind;
    let fallback;
    let cov = match &rr.cov {
        Some(c) => c,
        None => {
            fallback = sandwich_cov(kind, data, &rr.fit.theta, &config.weight, request, config.variant)?;
            &fallback
        }
    };
    rr_med_ci(kind, &rr.fit.theta, cov, request, data.design())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::med::med_from_theta;
    use crate::weights::WeightTag;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn bretz(n: usize) -> DoseDesign {
        DoseDesign::balanced(vec![0.0, 0.05, 0.2, 0.6, 1.0], n).unwrap()
    }

    fn simulate(kind: ModelKind, truth: &Theta, design: &DoseDesign, sigma: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let groups: Vec<Vec<f64>> = design
            .doses()
            .iter()
            .zip(design.allocations())
            .map(|(&d, &n)| (0..n).map(|_| models::mean(kind, truth, d) + noise.sample(&mut rng)).collect())
            .collect();
        Dataset::from_groups(design.clone(), &groups).unwrap()
    }

    #[test]
    fn score_examples() {
        let design = bretz(25);
        let req = MedRequest::new(0.4);
        let sf = ScoreFunction::new(ModelKind::Emax, WeightTag::W5.into(), req, design.clone()).unwrap();
        let theta = Theta::new(0.2, 0.7, vec![0.2]);
        let phi = score_eval(&sf, 0.6, 0.2, &theta).unwrap();
        let w = compute_weight(&WeightTag::W5.into(), 0.2, 0.8 / 3.0, &design).unwrap();
        let expect = [0.05 * w, 0.05 * w * 0.5, -0.05 * w * 0.875];
        for (a, b) in phi.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{phi:?}");
        }
        assert!(score_eval(&sf, 0.55, 0.2, &theta).unwrap().iter().all(|v| v.abs() < 1e-15));

        let lin = ScoreFunction::new(ModelKind::Linear, WeightSpec::uniform(), req, design).unwrap();
        let phi = score_eval(&lin, 1.0, 0.6, &Theta::new(0.2, 0.6, vec![])).unwrap();
        let r = 1.0 - 0.56;
        assert!((phi[0] - r).abs() < 1e-15 && (phi[1] - r * 0.6).abs() < 1e-15);
    }

    #[test]
    fn unit_weight_reproduces_ols() {
        let design = bretz(20);
        let truth = Theta::new(0.2, 0.7, vec![0.2]);
        let req = MedRequest::new(0.4);
        let mut agree = 0;
        for seed in 0..10 {
            let data = simulate(ModelKind::Emax, &truth, &design, 0.65, seed);
            let b = GridBounds::default_for(ModelKind::Emax, &design);
            let ols = fit_ols(ModelKind::Emax, &data, &b).unwrap();
            let rr = rr_fit(ModelKind::Emax, &data, &b, &req, &RrConfig::new(WeightSpec::uniform())).unwrap();
            let a = ols.theta.free_params(ModelKind::Emax);
            let c = rr.fit.theta.free_params(ModelKind::Emax);
            if a.iter().zip(&c).all(|(x, y)| (x - y).abs() <= 1e-6) {
                agree += 1;
            }
        }
        assert_eq!(agree, 10);
    }

    #[test]
    fn linear_unit_weight_sandwich_matches_closed_form() {
        let design = bretz(12);
        let data = simulate(ModelKind::Linear, &Theta::new(0.2, 0.6, vec![]), &design, 0.5, 4);
        let b = GridBounds::default_for(ModelKind::Linear, &design);
        let ols = fit_ols(ModelKind::Linear, &data, &b).unwrap();
        let req = MedRequest::new(0.4);
        let cov = sandwich_cov(ModelKind::Linear, &data, &ols.theta, &WeightSpec::uniform(), &req, SandwichVariant::Full).unwrap();
        // HC0 sandwich: n (X'X)^-1 X' diag(r^2) X (X'X)^-1
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        let (mut m00, mut m01, mut m11) = (0.0, 0.0, 0.0);
        for o in data.observations() {
            let d = data.dose_of(o);
            let r = o.response - ols.theta.alpha - ols.theta.beta * d;
            s0 += 1.0;
            s1 += d;
            s2 += d * d;
            m00 += r * r;
            m01 += r * r * d;
            m11 += r * r * d * d;
        }
        let bread = DMatrix::from_row_slice(2, 2, &[s0, s1, s1, s2]).try_inverse().unwrap();
        let meat = DMatrix::from_row_slice(2, 2, &[m00, m01, m01, m11]);
        let oracle = &bread * meat * &bread * s0;
        for (a, b) in cov.covariance.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-6 * b.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn zero_residuals_give_zero_covariance() {
        let design = bretz(5);
        let truth = Theta::new(0.2, 0.7, vec![0.2]);
        let data = simulate(ModelKind::Emax, &truth, &design, 1e-300, 0);
        let req = MedRequest::new(0.4);
        let cov = sandwich_cov(ModelKind::Emax, &data, &truth, &WeightTag::W5.into(), &req, SandwichVariant::ModelBased).unwrap();
        assert!(cov.covariance.iter().all(|v| v.abs() < 1e-200));
        let ci = rr_med_ci(ModelKind::Emax, &truth, &cov, &req, &design).unwrap();
        assert_eq!(ci.lower, ci.value);
    }

    #[test]
    fn converged_fit_solves_the_equations() {
        let design = bretz(25);
        let truth = Theta::new(0.2, 0.7, vec![0.2]);
        let req = MedRequest::new(0.4);
        for seed in 0..10 {
            let data = simulate(ModelKind::Emax, &truth, &design, 0.65, 50 + seed);
            let b = GridBounds::default_for(ModelKind::Emax, &design);
            let rr = rr_fit(ModelKind::Emax, &data, &b, &req, &RrConfig::new(WeightTag::W5.into())).unwrap();
            if !rr.fit.converged {
                continue;
            }
            let sf = ScoreFunction::new(ModelKind::Emax, WeightTag::W5.into(), req, design.clone()).unwrap();
            let s = total_score(&sf, &Totals::new(&data), &rr.fit.theta).unwrap();
            assert!(s.amax() <= 1e-8 * data.len() as f64, "seed {seed}: {}", s.amax());
            if let Some(cov) = rr.cov {
                let c = &cov.covariance;
                assert!((c - c.transpose()).amax() <= 1e-12);
                let ev = cov.v_matrix.clone().symmetric_eigen().eigenvalues;
                assert!(ev.iter().all(|&e| e >= -1e-10));
            }
        }
    }

    #[test]
    fn fallback_interval_is_centred_on_least_squares() {
        let design = bretz(100);
        let truth = Theta::new(0.32, 0.74, vec![0.14]);
        let req = MedRequest::new(0.3);
        let cfg = RrConfig::new(WeightTag::W5.into());
        let b = GridBounds::default_for(ModelKind::Emax, &design);
        let mut seen = 0;
        for seed in 0..40 {
            let data = simulate(ModelKind::Emax, &truth, &design, 0.65, 4_000 + seed);
            let rr = rr_fit(ModelKind::Emax, &data, &b, &req, &cfg).unwrap();
            if rr.diagnostics.converged {
                continue;
            }
            seen += 1;
            assert!(rr.cov.is_none());
            let ols = fit_ols(ModelKind::Emax, &data, &b).unwrap();
            assert_eq!(rr.fit.theta, ols.theta);
            let est = rr_fit_ci(&data, &rr, &req, &cfg).unwrap();
            let m = med_from_theta(ModelKind::Emax, &ols.theta, req.delta).unwrap();
            assert_eq!(est.value, Some(m));
            assert!(est.lower.unwrap() <= m && m <= est.upper.unwrap());
            assert!(est.se.unwrap() > 0.0);
        }
        assert!(seen > 0);
    }

    #[test]
    fn boundary_shape_parameters_are_pinned() {
        let design = bretz(50);
        let truth = Theta::new(0.32, 0.66, vec![0.3, 4.0]);
        let req = MedRequest::new(0.3);
        let b = GridBounds::default_for(ModelKind::SigEmax, &design);
        let mut pinned = 0;
        for seed in 0..60 {
            let data = simulate(ModelKind::SigEmax, &truth, &design, 0.65, 700 + seed);
            let rr = rr_fit(ModelKind::SigEmax, &data, &b, &req, &RrConfig::new(WeightTag::W5.into())).unwrap();
            if !rr.diagnostics.converged || rr.diagnostics.pinned.is_empty() {
                continue;
            }
            pinned += 1;
            let ols = fit_ols(ModelKind::SigEmax, &data, &b).unwrap();
            let cov = rr.cov.unwrap().covariance;
            for (j, name) in ["ed50", "hill"].iter().enumerate() {
                if rr.diagnostics.pinned.iter().any(|p| p == name) {
                    assert_eq!(rr.fit.theta.gamma[j], ols.theta.gamma[j]);
                    assert!(cov.row(2 + j).iter().all(|&c| c == 0.0));
                }
            }
        }
        assert!(pinned > 0);
    }

    #[test]
    fn restarts_only_add_solutions() {
        let design = bretz(100);
        let truth = Theta::new(0.32, 0.74, vec![0.14]);
        let req = MedRequest::new(0.3);
        let b = GridBounds::default_for(ModelKind::Emax, &design);
        let plain = RrConfig::new(WeightTag::W5.into());
        let retry = RrConfig { restarts: true, ..plain };
        let sf = ScoreFunction::new(ModelKind::Emax, WeightTag::W5.into(), req, design.clone()).unwrap();
        let (mut a, mut c) = (0, 0);
        for seed in 0..20 {
            let data = simulate(ModelKind::Emax, &truth, &design, 0.65, 4_000 + seed);
            let p = rr_fit(ModelKind::Emax, &data, &b, &req, &plain).unwrap();
            let r = rr_fit(ModelKind::Emax, &data, &b, &req, &retry).unwrap();
            if p.diagnostics.converged {
                assert_eq!(p.fit.theta, r.fit.theta);
            }
            if r.diagnostics.converged {
                let s = total_score(&sf, &Totals::new(&data), &r.fit.theta).unwrap();
                assert!(s.amax() <= 1e-8 * data.len() as f64);
            }
            a += p.diagnostics.converged as usize;
            c += r.diagnostics.converged as usize;
        }
        assert!(c >= a);
    }

    #[test]
    fn consistency_under_true_model() {
        let truth = Theta::new(0.2, 0.7, vec![0.2]);
        let req = MedRequest::new(0.4);
        let median_err = |n: usize| {
            let design = bretz(n);
            let b = GridBounds::default_for(ModelKind::Emax, &design);
            let mut errs: Vec<f64> = (0..200)
                .map(|seed| {
                    let data = simulate(ModelKind::Emax, &truth, &design, 0.65, 900 + seed);
                    let fit = rr_fit(ModelKind::Emax, &data, &b, &req, &RrConfig::new(WeightTag::W5.into())).unwrap().fit;
                    let t = fit.theta.free_params(ModelKind::Emax);
                    let e = truth.free_params(ModelKind::Emax);
                    t.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            errs[100]
        };
        assert!(median_err(100) < median_err(25));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn score_is_bounded_and_continuous_near_fit(seed in 0u64..1000, dir in proptest::collection::vec(-1.0f64..1.0, 3)) {
            let design = bretz(25);
            let truth = Theta::new(0.2, 0.7, vec![0.2]);
            let req = MedRequest::new(0.4);
            let data = simulate(ModelKind::Emax, &truth, &design, 0.65, seed);
            let sf = ScoreFunction::new(ModelKind::Emax, WeightTag::W6.into(), req, design.clone()).unwrap();
            let totals = Totals::new(&data);
            let base = truth.free_params(ModelKind::Emax);
            let at = |eps: f64| {
                let v: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + eps * d * 0.05).collect();
                total_score(&sf, &totals, &truth.with_free(ModelKind::Emax, &v))
            };
            if let (Ok(a), Ok(b)) = (at(1.0), at(1.0 + 1e-7)) {
                prop_assert!(a.iter().all(|v| v.is_finite()));
                prop_assert!((a - b).amax() < 1e-3 * data.len() as f64);
            }
            for o in data.observations().iter().take(20) {
                if let Ok(med) = sf.med(&truth) {
                    let w = compute_weight(&sf.weight, data.dose_of(o), med, &design).unwrap();
                    prop_assert!(w > 0.0 && w <= 1.0);
                }
            }
        }
    }
}
