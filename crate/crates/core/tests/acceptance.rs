//! Acceptance criteria. Each criterion prints one `[PASS]`/`[FAIL]` line;
//! the test fails if any criterion does.
//!
//! Run with `cargo test -p dosefind --test acceptance -- --nocapture`.

use std::path::PathBuf;

use dosefind::fitting::{fit_ols, Dataset, GridBounds};
use dosefind::irwls::{irwls_fit, IrwlsConfig};
use dosefind::mcpmod::{poc_test, CandidateSet, PocConfig};
use dosefind::med::{med_from_theta, med_gradient, MedRequest};
use dosefind::models::{self, DoseDesign, ModelKind, Theta};
use dosefind::robust::{rr_fit, rr_fit_ci, RrConfig, SandwichVariant};
use dosefind::simlab::{generate_dataset, run_study, write_outputs, Manifest, SimScenario, SimSummary};
use dosefind::weights::{WeightSpec, WeightTag};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn record(&mut self, n: usize, pass: bool, detail: String) {
        println!("[{}] criterion {n} {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(n);
        }
    }
}

fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load(name: &str) -> SimScenario {
    let text = std::fs::read_to_string(scenario_dir().join(format!("{name}.json"))).unwrap();
    SimScenario::from_json(&text).unwrap()
}

/// Keeps only the listed group sizes and method labels.
fn trim(mut s: SimScenario, ns: &[usize], methods: &[&str]) -> SimScenario {
    s.n_per_group.retain(|n| ns.contains(n));
    s.methods.retain(|m| methods.contains(&m.label().as_str()));
    s
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol + 1e-12
}

fn coverage(s: &SimSummary, n: usize, method: &str) -> f64 {
    s.get(n, method).and_then(|m| m.coverage).unwrap_or(f64::NAN)
}

fn mean_r(s: &SimSummary, n: usize, method: &str) -> f64 {
    s.get(n, method).and_then(|m| m.mean_r).unwrap_or(f64::NAN)
}

fn criterion_1(rep: &mut Report) {
    let a = med_from_theta(ModelKind::Emax, &Theta::new(0.2, 0.7, vec![0.2]), 0.4).unwrap();
    let b = med_from_theta(ModelKind::Emax, &Theta::new(0.32, 0.74, vec![0.14]), 0.2).unwrap();
    let pass = within(a, 0.266667, 1e-6) && within(b, 0.051852, 1e-6);
    rep.record(1, pass, format!("MED inversion: {a:.7} (0.266667), {b:.7} (0.051852)"));
}

fn random_theta(kind: ModelKind, rng: &mut ChaCha8Rng) -> Theta {
    let alpha = rng.random_range(-1.0..1.0);
    let beta = rng.random_range(0.2..2.0);
    let gamma = match kind {
        ModelKind::Linear => vec![],
        ModelKind::LinLog => vec![rng.random_range(0.05..0.5)],
        ModelKind::Emax => vec![rng.random_range(0.05..1.0)],
        ModelKind::Exponential => vec![rng.random_range(0.3..2.0)],
        ModelKind::Quadratic => vec![rng.random_range(-0.45..-0.05)],
        ModelKind::SigEmax => vec![rng.random_range(0.1..0.8), rng.random_range(1.0..6.0)],
        ModelKind::Power => vec![rng.random_range(0.3..2.0)],
        ModelKind::TruncLogistic => vec![rng.random_range(3.0..12.0), rng.random_range(0.2..0.8)],
    };
    Theta::new(alpha, beta, gamma)
}

fn fd_gradient(theta: &Theta, f: impl Fn(&Theta) -> Option<f64>) -> Option<Vec<f64>> {
    let mut flat = vec![theta.alpha, theta.beta];
    flat.extend(&theta.gamma);
    let rebuild = |v: &[f64]| Theta::new(v[0], v[1], v[2..].to_vec());
    (0..flat.len())
        .map(|i| {
            let h = 1e-6 * flat[i].abs().max(1e-2);
            let mut up = flat.clone();
            let mut dn = flat.clone();
            up[i] += h;
            dn[i] -= h;
            Some((f(&rebuild(&up))? - f(&rebuild(&dn))?) / (2.0 * h))
        })
        .collect()
}

fn close(analytic: &[f64], numeric: &[f64]) -> bool {
    let scale = analytic.iter().chain(numeric).fold(1e-3f64, |m, v| m.max(v.abs()));
    analytic.len() == numeric.len() && analytic.iter().zip(numeric).all(|(a, b)| (a - b).abs() <= 1e-5 * scale)
}

fn criterion_2(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = Vec::new();
    let mut checked = 0;
    for kind in ModelKind::ALL {
        for _ in 0..100 {
            let theta = random_theta(kind, &mut rng);
            let d = rng.random_range(0.0..1.0);
            let g = models::mean_gradient(kind, &theta, d).unwrap();
            let fd = fd_gradient(&theta, |t| models::eval_mean(kind, t, d).ok()).unwrap();
            checked += 1;
            if !close(&g, &fd) {
                worst.push(format!("{kind} mean at {theta:?}"));
            }
            let top = models::eval_mean(kind, &theta, 1.0).unwrap() - models::eval_mean(kind, &theta, 0.0).unwrap();
            let delta = rng.random_range(0.1..0.9) * top;
            if let Ok(b) = med_gradient(kind, &theta, delta) {
                let fd = fd_gradient(&theta, |t| med_from_theta(kind, t, delta).ok());
                checked += 1;
                if !fd.is_some_and(|fd| close(&b, &fd)) {
                    worst.push(format!("{kind} med at {theta:?}"));
                }
            }
        }
    }
    rep.record(2, worst.is_empty(), format!("gradients: {} of {checked} checks disagree {:?}", worst.len(), worst.first()));
}

fn emax_data(seed: u64, n: usize) -> Dataset {
    let design = DoseDesign::balanced(vec![0.0, 0.05, 0.2, 0.6, 1.0], n).unwrap();
    let truth = Theta::new(0.2, 0.7, vec![0.2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.65).unwrap();
    let groups: Vec<Vec<f64>> = design
        .doses()
        .iter()
        .map(|&d| (0..n).map(|_| models::eval_mean(ModelKind::Emax, &truth, d).unwrap() + noise.sample(&mut rng)).collect())
        .collect();
    Dataset::from_groups(design, &groups).unwrap()
}

fn criterion_3(rep: &mut Report) {
    let req = MedRequest::new(0.4);
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let ds = emax_data(seed, 25);
        let bounds = GridBounds::default_for(ModelKind::Emax, ds.design());
        let ols = fit_ols(ModelKind::Emax, &ds, &bounds).unwrap();
        let irwls = irwls_fit(ModelKind::Emax, &ds, &bounds, &req, &IrwlsConfig::new(WeightSpec::uniform())).unwrap().0;
        let rr = rr_fit(ModelKind::Emax, &ds, &bounds, &req, &RrConfig::new(WeightSpec::uniform())).unwrap().fit;
        for fit in [&irwls, &rr] {
            let diffs = [
                fit.theta.alpha - ols.theta.alpha,
                fit.theta.beta - ols.theta.beta,
                fit.theta.gamma[0] - ols.theta.gamma[0],
            ];
            worst = diffs.iter().fold(worst, |m, d| m.max(d.abs()));
        }
    }
    rep.record(3, worst <= 1e-6, format!("unit weights: max |theta - theta_ols| = {worst:.2e} over 50 datasets"));
}

fn sd(xs: &[f64]) -> f64 {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
}

fn criterion_4(rep: &mut Report) {
    // Emax (0.32, 0.74, 0.14) at the coverage margin, RR with weight w5.
    let truth = Theta::new(0.32, 0.74, vec![0.14]);
    let design = DoseDesign::balanced(vec![0.0, 0.05, 0.2, 0.6, 1.0], 100).unwrap();
    let bounds = GridBounds::default_for(ModelKind::Emax, &design);
    let req = MedRequest::new(0.3);
    let cfg = RrConfig::new(WeightTag::W5.into());
    let full = RrConfig { variant: SandwichVariant::Full, ..cfg };
    let noise = Normal::new(0.0, 0.65).unwrap();
    let (mut meds, mut ses, mut full_ses) = (Vec::new(), Vec::new(), Vec::new());
    let (mut conv_meds, mut conv_ses) = (Vec::new(), Vec::new());
    for r in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4_000 + r);
        let groups: Vec<Vec<f64>> = design
            .doses()
            .iter()
            .map(|&d| (0..100).map(|_| models::eval_mean(ModelKind::Emax, &truth, d).unwrap() + noise.sample(&mut rng)).collect())
            .collect();
        let ds = Dataset::from_groups(design.clone(), &groups).unwrap();
        let Ok(fit) = rr_fit(ModelKind::Emax, &ds, &bounds, &req, &cfg) else { continue };
        let Ok(est) = rr_fit_ci(&ds, &fit, &req, &cfg) else { continue };
        meds.push(est.value.unwrap());
        ses.push(est.se.unwrap());
        if let Ok(e) = rr_fit_ci(&ds, &fit, &req, &full) {
            full_ses.push(e.se.unwrap());
        }
        if fit.diagnostics.converged {
            conv_meds.push(est.value.unwrap());
            conv_ses.push(est.se.unwrap());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let empirical = sd(&meds);
    let ratio = mean(&ses) / empirical;
    rep.record(
        4,
        (ratio - 1.0).abs() <= 0.15,
        format!(
            "sandwich SD: mean asymptotic {:.4} vs empirical {empirical:.4} (ratio {ratio:.3}) over {} replicates; \
             full bread ratio {:.3}; converged subset ({}) ratio {:.3}",
            mean(&ses),
            meds.len(),
            mean(&full_ses) / empirical,
            conv_meds.len(),
            mean(&conv_ses) / sd(&conv_meds),
        ),
    );
}

fn criterion_5(rep: &mut Report) {
    let s = run_study(&trim(load("table6_emax"), &[25, 50], &["classical", "irwls-w6", "pboot", "proflik"])).unwrap();
    let classical = coverage(&s, 25, "classical");
    let pboot = coverage(&s, 50, "pboot");
    let prof = coverage(&s, 25, "proflik");
    let irwls = coverage(&s, 25, "irwls-w6");
    let pass = within(classical, 0.83, 0.04)
        && classical < 0.90
        && within(pboot, 0.95, 0.03)
        && within(prof, 0.94, 0.04)
        && within(irwls, 0.67, 0.05);
    rep.record(
        5,
        pass,
        format!(
            "Emax coverage: classical n=25 {classical:.3} (0.83), pboot n=50 {pboot:.3} (0.95), proflik n=25 {prof:.3} (0.94), irwls-w6 n=25 {irwls:.3} (0.67)"
        ),
    );
}

fn criterion_6(rep: &mut Report) {
    let s = run_study(&trim(load("table8_sigemax_improved"), &[50], &["classical", "rr-w5", "proflik"])).unwrap();
    let classical = coverage(&s, 50, "classical");
    let rr = coverage(&s, 50, "rr-w5");
    let prof = coverage(&s, 50, "proflik");
    let pass = within(classical, 0.96, 0.03) && within(rr, 0.95, 0.03) && prof < 0.95;
    rep.record(
        6,
        pass,
        format!("improved design n=50: classical {classical:.3} (0.96), rr-w5 {rr:.3} (0.95), proflik {prof:.3} (< 0.95)"),
    );
}

fn criterion_7(rep: &mut Report) {
    let lin = run_study(&trim(load("fig5_sigemax_linear"), &[50], &["classical", "rr-w6"])).unwrap();
    let emax = run_study(&trim(load("fig6_sigemax_emax"), &[25, 50], &["classical", "rr-w5"])).unwrap();
    let (lc, lr) = (mean_r(&lin, 50, "classical"), mean_r(&lin, 50, "rr-w6"));
    let (e25c, e25r) = (mean_r(&emax, 25, "classical"), mean_r(&emax, 25, "rr-w5"));
    let (e50c, e50r) = (mean_r(&emax, 50, "classical"), mean_r(&emax, 50, "rr-w5"));
    let pass = lr.abs() < lc.abs() && e25r.abs() < e25c.abs() && e50r.abs() < e50c.abs();
    rep.record(
        7,
        pass,
        format!(
            "misspecified mean R_i: linear n=50 rr-w6 {lr:.2} vs classical {lc:.2}; emax n=25 rr-w5 {e25r:.2} vs {e25c:.2}; emax n=50 {e50r:.2} vs {e50c:.2}"
        ),
    );
}

fn criterion_8(rep: &mut Report) {
    let s = run_study(&trim(load("table4_sigemax"), &[50], &["mcpmod", "mcpmod-rr-w6"])).unwrap();
    let med = |m: &str| s.get(50, m).and_then(|x| x.median_r).unwrap_or(f64::NAN);
    let (mm, rr) = (med("mcpmod"), med("mcpmod-rr-w6"));
    let a: Vec<_> = s.records_for(50, "mcpmod").map(|r| (r.replicate, r.selected)).collect();
    let b: Vec<_> = s.records_for(50, "mcpmod-rr-w6").map(|r| (r.replicate, r.selected)).collect();
    let same = a == b;
    rep.record(
        8,
        rr.abs() < mm.abs() && same,
        format!("MCPMod median R_i n=50: rr-w6 {rr:.2} vs classical {mm:.2}; identical selections {same}"),
    );
}

fn criterion_9(rep: &mut Report) {
    let s = load("fwer_null");
    let n = s.n_per_group[0];
    let config = s.poc.unwrap_or_default();
    let candidates = s.candidates.clone().unwrap_or_else(CandidateSet::default);
    let reps = s.replicates;
    let rejections = (0..reps)
        .filter(|&r| {
            let g = generate_dataset(&s, n, r).unwrap();
            poc_test(&candidates, &g.data, &PocConfig { alpha: 0.025, ..config }).unwrap().rejected()
        })
        .count();
    let rate = rejections as f64 / reps as f64;
    let bound = 0.025 + 2.0 * (0.025 * 0.975 / reps as f64).sqrt();
    rep.record(9, rate <= bound, format!("FWER under the flat null: {rate:.4} over {reps} replicates (bound {bound:.4})"));
}

fn run_in_pool(threads: usize, scenario: &SimScenario, dir: &std::path::Path) -> Manifest {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| write_outputs(&run_study(scenario).unwrap(), dir).unwrap())
}

fn criterion_10(rep: &mut Report) {
    let mut names: Vec<String> = std::fs::read_dir(scenario_dir())
        .unwrap()
        .filter_map(|e| e.ok()?.path().file_stem()?.to_str().map(String::from))
        .collect();
    names.sort();
    let tmp = tempfile::tempdir().unwrap();
    let mut mismatched = Vec::new();
    for name in &names {
        // Every bundled scenario at reduced size; resampling methods are the slow part.
        let mut s = load(name);
        s.replicates = s.replicates.min(12);
        s.n_per_group.truncate(1);
        s.bootstrap.b_samples = s.bootstrap.b_samples.min(100);
        let first = tmp.path().join(format!("{name}-1"));
        let manifest = run_in_pool(1, &s, &first);
        let rerun: Manifest =
            serde_json::from_str(&std::fs::read_to_string(first.join(dosefind::simlab::MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(rerun, manifest);
        let second = tmp.path().join(format!("{name}-8"));
        run_in_pool(8, &rerun.scenario, &second);
        for f in &manifest.files {
            if std::fs::read(first.join(f)).unwrap() != std::fs::read(second.join(f)).unwrap() {
                mismatched.push(format!("{name}/{f}"));
            }
        }
    }
    rep.record(
        10,
        mismatched.is_empty(),
        format!("determinism: {} bundled scenarios rerun from manifest at 1 and 8 threads, mismatches {mismatched:?}", names.len()),
    );
}

#[test]
fn acceptance_criteria() {
    let mut rep = Report { failed: Vec::new() };
    criterion_1(&mut rep);
    criterion_2(&mut rep);
    criterion_3(&mut rep);
    criterion_4(&mut rep);
    criterion_5(&mut rep);
    criterion_6(&mut rep);
    criterion_7(&mut rep);
    criterion_8(&mut rep);
    criterion_9(&mut rep);
    criterion_10(&mut rep);
    assert!(rep.failed.is_empty(), "failed criteria: {:?}", rep.failed);
}
