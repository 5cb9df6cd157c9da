use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use dosefind::fitting::{fit_ols, Dataset, FitResult, GridBounds};
use dosefind::intervals::{
    band_grid, invert_band_for_med, percentile_bootstrap_band, profile_likelihood_band, profile_med_ci, BootstrapConfig,
    EffectCurveBand,
};
use dosefind::irwls::{irwls_fit, irwls_med_ci, Criterion, IrwlsConfig};
use dosefind::mcpmod::{mcpmod_med, CandidateSet, CritMethod, McpEstimator, PocConfig, Selection};
use dosefind::med::{classical_med_ci, med_estimator_with_screen, screen_grid, MedRequest};
use dosefind::models::ModelKind;
use dosefind::robust::{rr_fit, rr_fit_ci, RrConfig, SandwichVariant};
use dosefind::simlab::{illustrate, run_study, write_outputs, IllustrationConfig, Manifest, SimScenario};
use dosefind::weights::{WeightSpec, WeightTag};

const OUT_ENV: &str = "DOSEFIND_OUT";

/// Minimum effective dose estimation for dose-response studies.
#[derive(Parser)]
#[command(name = "dosefind", version)]
struct Cli {
    /// Worker threads [default: available cores]
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Least squares fit of one model; prints a JSON report.
    Fit(FitArgs),
    /// Screened MED estimate with the classical delta-method interval.
    Med(MedArgs),
    /// Iterated re-weighted least squares MED estimate.
    Irwls(IrwlsArgs),
    /// Robust-regression M-estimate with sandwich covariance.
    Rr(RrArgs),
    /// MED confidence interval by one of five methods.
    Ci(CiArgs),
    /// Multiple-contrast test, model selection and MED estimation.
    Mcpmod(McpArgs),
    /// Run a simulation scenario (or rerun a manifest) and write CSV outputs.
    Simulate(SimArgs),
    /// Simulate one illustration dataset and write fitted curves with bands.
    Illustrate(IllArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CSV file with `dose` and `response` columns
    #[arg(long)]
    data: PathBuf,
    /// Model family (linear, linlog, emax, exponential, quadratic, sigemax, power, trunclogistic)
    #[arg(long, default_value = "emax")]
    model: ModelKind,
    /// Grid points per nonlinear parameter for the starting search
    #[arg(long)]
    fit_grid: Option<usize>,
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, GridBounds), CliError> {
        let data = Dataset::from_csv_path(&self.data)?;
        let mut bounds = GridBounds::default_for(self.model, data.design());
        if let Some(g) = self.fit_grid {
            bounds.grid_points = g;
        }
        Ok((data, bounds))
    }
}

#[derive(Args)]
struct MedOpts {
    /// Clinically relevant effect over placebo
    #[arg(long, default_value_t = 0.4)]
    delta: f64,
    /// One-sided level of the screen's lower bound
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Two-sided interval level
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Dose grid size of the screened estimator
    #[arg(long, default_value_t = 1001)]
    grid_points: usize,
}

impl MedOpts {
    fn request(&self) -> Result<MedRequest, CliError> {
        let req = MedRequest { delta: self.delta, alpha_level: self.alpha, ci_level: self.level, grid_points: self.grid_points };
        req.validate()?;
        Ok(req)
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct MedArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    med: MedOpts,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    /// Relative change of the MED
    Med,
    /// Relative change of the mean response at the MED
    Response,
}

#[derive(Args)]
struct IrwlsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    med: MedOpts,
    /// Target-dose weight (w1..w7, uniform)
    #[arg(long, default_value = "w6")]
    weight: WeightTag,
    /// Convergence tolerance on the squared relative change
    #[arg(long, default_value_t = 0.001)]
    tol: f64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, value_enum, default_value = "med")]
    criterion: CriterionArg,
}

#[derive(Args)]
struct RrArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    med: MedOpts,
    /// Target-dose weight (w1..w6, uniform)
    #[arg(long, default_value = "w5")]
    weight: WeightTag,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Retry from weighted least squares fixed points when Newton-Raphson fails
    #[arg(long)]
    restarts: bool,
    /// Keep the residual term in the sandwich bread
    #[arg(long)]
    full_bread: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum CiMethod {
    Classical,
    Irwls,
    Rr,
    Pboot,
    Proflik,
}

#[derive(Args)]
struct CiArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    med: MedOpts,
    #[arg(long, value_enum, default_value = "classical")]
    method: CiMethod,
    /// Weight for irwls and rr
    #[arg(long, default_value = "w5")]
    weight: WeightTag,
    /// Bootstrap resamples
    #[arg(long, default_value_t = 1000)]
    b: usize,
    /// Bootstrap seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dose grid size of effect bands
    #[arg(long, default_value_t = 201)]
    band_points: usize,
    /// Write the effect band (pboot, proflik) to this CSV
    #[arg(long)]
    band: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Classical,
    Rr,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    MaxT,
    Aic,
}

#[derive(Args)]
struct McpArgs {
    /// CSV file with `dose` and `response` columns
    #[arg(long)]
    data: PathBuf,
    /// JSON candidate set [default: linear, emax(0.2), sigemax(0.4, 4)]
    #[arg(long)]
    candidates: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "classical")]
    estimator: EstimatorArg,
    /// Weight for the rr estimator
    #[arg(long, default_value = "w6")]
    weight: WeightTag,
    /// One-sided family-wise level of the contrast test
    #[arg(long = "test-alpha", default_value_t = 0.025)]
    test_alpha: f64,
    /// Multivariate t draws for the critical value (0 for Bonferroni)
    #[arg(long, default_value_t = 50_000)]
    draws: usize,
    #[arg(long, default_value_t = 20_130_101)]
    crit_seed: u64,
    #[arg(long, value_enum, default_value = "max-t")]
    selection: SelectionArg,
    #[command(flatten)]
    med: MedOpts,
}

#[derive(Args)]
struct SimArgs {
    /// Scenario JSON, or a manifest.json from an earlier run
    scenario: PathBuf,
    /// Output directory [default: $DOSEFIND_OUT/<name>, else ./out/<name>]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the replicate count
    #[arg(long)]
    replicates: Option<usize>,
    /// Override the master seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct IllArgs {
    /// Output directory [default: $DOSEFIND_OUT/illustration, else ./out/illustration]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    seed: u64,
    /// Patients per dose group
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0.2)]
    delta: f64,
    #[arg(long, default_value = "w5")]
    weight: WeightTag,
    #[arg(long, default_value_t = 0.65)]
    sigma: f64,
}

enum CliError {
    Input(String),
    Fit(String),
}

impl From<dosefind::Error> for CliError {
    fn from(e: dosefind::Error) -> Self {
        if e.is_fit_failure() {
            CliError::Fit(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn print(v: &Value) {
    let text = serde_json::to_string_pretty(v).expect("JSON values serialize");
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn fit_json(fit: &FitResult) -> Value {
    json!({
        "model": fit.kind,
        "theta": fit.theta,
        "sigma": fit.sigma,
        "sse": fit.sse,
        "converged": fit.converged,
        "iterations": fit.iterations,
    })
}

fn cmd_fit(a: &FitArgs) -> Result<(), CliError> {
    let (data, bounds) = a.data.load()?;
    let fit = fit_ols(a.data.model, &data, &bounds)?;
    print(&json!({ "n": data.len(), "fit": fit_json(&fit) }));
    Ok(())
}

fn cmd_med(a: &MedArgs) -> Result<(), CliError> {
    let (data, bounds) = a.data.load()?;
    let req = a.med.request()?;
    let fit = fit_ols(a.data.model, &data, &bounds)?;
    let screened = med_estimator_with_screen(&fit, &req, data.design(), &screen_grid(data.design(), req.grid_points));
    let classical = classical_med_ci(&fit, &req, data.design()).ok();
    print(&json!({ "fit": fit_json(&fit), "screened": screened, "classical": classical }));
    Ok(())
}

fn irwls_config(weight: WeightTag, tol: f64, max_iter: usize, criterion: CriterionArg) -> IrwlsConfig {
    let mut cfg = IrwlsConfig::new(WeightSpec::new(weight));
    cfg.tol = tol;
    cfg.max_iter = max_iter;
    cfg.criterion = match criterion {
        CriterionArg::Med => Criterion::MedRelative,
        CriterionArg::Response => Criterion::ResponseAtMed,
    };
    cfg
}

fn cmd_irwls(a: &IrwlsArgs) -> Result<(), CliError> {
    let (data, bounds) = a.data.load()?;
    let req = a.med.request()?;
    let cfg = irwls_config(a.weight, a.tol, a.max_iter, a.criterion);
    let (fit, est) = irwls_fit(a.data.model, &data, &bounds, &req, &cfg)?;
    let ci = irwls_med_ci(&fit, &req, data.design(), &cfg.weight).ok();
    print(&json!({ "fit": fit_json(&fit), "trace": fit.trace, "estimate": est, "interval": ci }));
    Ok(())
}

fn rr_config(weight: WeightTag, max_iter: usize, restarts: bool, full_bread: bool) -> RrConfig {
    let mut cfg = RrConfig::new(WeightSpec::new(weight));
    cfg.max_iter = max_iter;
    cfg.restarts = restarts;
    if full_bread {
        cfg.variant = SandwichVariant::Full;
    }
    cfg
}

fn cmd_rr(a: &RrArgs) -> Result<(), CliError> {
    let (data, bounds) = a.data.load()?;
    let req = a.med.request()?;
    let cfg = rr_config(a.weight, a.max_iter, a.restarts, a.full_bread);
    let rr = rr_fit(a.data.model, &data, &bounds, &req, &cfg)?;
    let ci = rr_fit_ci(&data, &rr, &req, &cfg).ok();
    let cov = rr.cov.as_ref().map(|c| {
        let m = &c.covariance;
        (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<f64>>()).collect::<Vec<_>>()
    });
    print(&json!({
        "fit": fit_json(&rr.fit),
        "diagnostics": rr.diagnostics,
        "covariance": cov,
        "estimate": ci,
    }));
    Ok(())
}

fn write_band(band: &EffectCurveBand, path: &Path) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    band.to_csv_writer(file)?;
    Ok(())
}

fn cmd_ci(a: &CiArgs) -> Result<(), CliError> {
    let (data, bounds) = a.data.load()?;
    let req = a.med.request()?;
    let kind = a.data.model;
    let design = data.design();
    let est = match a.method {
        CiMethod::Classical => classical_med_ci(&fit_ols(kind, &data, &bounds)?, &req, design)?,
        CiMethod::Irwls => {
            let cfg = irwls_config(a.weight, 0.001, 100, CriterionArg::Med);
            let (fit, _) = irwls_fit(kind, &data, &bounds, &req, &cfg)?;
            irwls_med_ci(&fit, &req, design, &cfg.weight)?
        }
        CiMethod::Rr => {
            let cfg = rr_config(a.weight, 100, false, false);
            rr_fit_ci(&data, &rr_fit(kind, &data, &bounds, &req, &cfg)?, &req, &cfg)?
        }
        CiMethod::Pboot => {
            let cfg = BootstrapConfig { b_samples: a.b, grid_points: a.band_points, seed: a.seed, level: req.ci_level };
            let band = percentile_bootstrap_band(kind, &data, &bounds, &cfg)?;
            if let Some(p) = &a.band {
                write_band(&band, p)?;
            }
            invert_band_for_med(&band, req.delta)
        }
        CiMethod::Proflik => {
            if let Some(p) = &a.band {
                let grid = band_grid(design, a.band_points)?;
                write_band(&profile_likelihood_band(kind, &data, &bounds, req.ci_level, &grid)?, p)?;
            }
            profile_med_ci(kind, &data, &bounds, &req, a.band_points)?
        }
    };
    print(&json!({ "estimate": est }));
    Ok(())
}

fn cmd_mcpmod(a: &McpArgs) -> Result<(), CliError> {
    let data = Dataset::from_csv_path(&a.data)?;
    let candidates = match &a.candidates {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let c: CandidateSet = serde_json::from_str(&text).map_err(|e| io_err(p, e))?;
            c.validate()?;
            c
        }
        None => CandidateSet::default(),
    };
    let estimator = match a.estimator {
        EstimatorArg::Classical => McpEstimator::Classical,
        EstimatorArg::Rr => McpEstimator::Rr { weight: WeightSpec::new(a.weight) },
    };
    let config = PocConfig {
        alpha: a.test_alpha,
        crit: if a.draws == 0 { CritMethod::Bonferroni } else { CritMethod::Simulated { draws: a.draws, seed: a.crit_seed } },
        selection: match a.selection {
            SelectionArg::MaxT => Selection::MaxT,
            SelectionArg::Aic => Selection::Aic,
        },
    };
    let res = mcpmod_med(&data, &candidates, &a.med.request()?, estimator, &config)?;
    print(&json!({
        "poc": res.poc,
        "rejected": res.poc.rejected(),
        "selected": res.poc.selected_kind(),
        "estimate": res.estimate,
    }));
    Ok(())
}

fn default_out(name: &str) -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out")).join(name)
}

fn load_scenario(path: &Path) -> Result<SimScenario, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
    let scenario = if value.get("scenario").is_some() {
        serde_json::from_value::<Manifest>(value).map_err(|e| io_err(path, e))?.scenario
    } else {
        serde_json::from_value::<SimScenario>(value).map_err(|e| io_err(path, e))?
    };
    Ok(scenario)
}

fn cmd_simulate(a: &SimArgs) -> Result<(), CliError> {
    let mut scenario = load_scenario(&a.scenario)?;
    if let Some(r) = a.replicates {
        scenario.replicates = r;
    }
    if let Some(s) = a.seed {
        scenario.seed = s;
    }
    scenario.validate().map_err(|e| io_err(&a.scenario, e))?;
    let out = a.out.clone().unwrap_or_else(|| default_out(&scenario.name));
    let summary = run_study(&scenario)?;
    write_outputs(&summary, &out).map_err(|e| io_err(&out, e))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_illustrate(a: &IllArgs) -> Result<(), CliError> {
    let cfg = IllustrationConfig {
        seed: a.seed,
        n_per_group: a.n,
        delta: a.delta,
        weight: a.weight,
        sigma: a.sigma,
        ..IllustrationConfig::default()
    };
    let ill = illustrate(&cfg)?;
    let out = a.out.clone().unwrap_or_else(|| default_out("illustration"));
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let curves = out.join("curves.csv");
    ill.to_csv_writer(fs::File::create(&curves).map_err(|e| io_err(&curves, e))?)?;
    let data = out.join("data.csv");
    ill.data.to_csv_writer(fs::File::create(&data).map_err(|e| io_err(&data, e))?)?;
    print(&json!({
        "true_med": ill.true_med,
        "classical_med": ill.classical_med,
        "rr_med": ill.rr_med,
        "curves": curves,
        "data": data,
    }));
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Input(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Med(a) => cmd_med(a),
        Command::Irwls(a) => cmd_irwls(a),
        Command::Rr(a) => cmd_rr(a),
        Command::Ci(a) => cmd_ci(a),
        Command::Mcpmod(a) => cmd_mcpmod(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Illustrate(a) => cmd_illustrate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Fit(msg)) => {
            eprintln!("fit failed: {msg}");
            ExitCode::from(2)
        }
    }
}
