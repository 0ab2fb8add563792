use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use gkdr_emulation::baselines::SliceSpec;
use gkdr_emulation::benchmarks::{build_elliptic, ridge_batch, EllipticSpec, KlAmplitude, RidgeLink};
use gkdr_emulation::design::gaussian_sample;
use gkdr_emulation::gp::{FitOptions, NuggetPolicy, TrendKind};
use gkdr_emulation::linalg::orthonormality_error;
use gkdr_emulation::pipeline::{
    cross_validate, estimate_reduction, fit_reduced_emulator, nprmse, reduced_fit_options, run_study1,
    train_on_projection, CvOutcome, CvPlan, EmulatorPlan, ReducedEmulator, Reducer, ReductionSettings, Simulator,
    Study1Spec, StudyMethod,
};
use gkdr_emulation::{Dataset, ProjectionResult};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{ProblemConfig, RidgeSpec, RunConfig};
use crate::error::{CliError, CliResult};
use crate::io::{read_dataset, read_json, read_matrix, read_table, write_columns, write_dataset, write_json, write_text};
use crate::plot::nprmse_chart;

/// Settings shared by every command.
pub struct Context {
    pub seed: u64,
    pub config: RunConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Gkdr,
    Sir,
    Sir2,
    Save,
    As,
}

impl MethodArg {
    fn reducer(self) -> Reducer {
        match self {
            MethodArg::Gkdr => Reducer::Gkdr,
            MethodArg::Sir => Reducer::Sir,
            MethodArg::Sir2 => Reducer::Sir2,
            MethodArg::Save => Reducer::Save,
            MethodArg::As => Reducer::ActiveSubspace,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrendArg {
    Constant,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LinkArg {
    Identity,
    Square,
    SinSquare,
    Sin,
}

impl From<LinkArg> for RidgeLink {
    fn from(l: LinkArg) -> Self {
        match l {
            LinkArg::Identity => RidgeLink::Identity,
            LinkArg::Square => RidgeLink::Square,
            LinkArg::SinSquare => RidgeLink::SinSquare,
            LinkArg::Sin => RidgeLink::Sin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AmplitudeArg {
    Sqrt,
    Linear,
}

impl From<AmplitudeArg> for KlAmplitude {
    fn from(a: AmplitudeArg) -> Self {
        match a {
            AmplitudeArg::Sqrt => KlAmplitude::Sqrt,
            AmplitudeArg::Linear => KlAmplitude::Linear,
        }
    }
}

/// Gaussian-process options shared by `fit` and `cv`.
#[derive(Debug, Args)]
pub struct GpArgs {
    /// Regression trend.
    #[arg(long, value_enum)]
    trend: Option<TrendArg>,
    /// Fixed nugget ν in [0, 0.5].
    #[arg(long, conflicts_with = "optimize_nugget")]
    nugget: Option<f64>,
    /// Estimate the nugget with this lower bound.
    #[arg(long, value_name = "FLOOR")]
    optimize_nugget: Option<f64>,
    /// Optimizer starts.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    starts: Option<u64>,
    /// Optimizer iterations per start.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    max_iters: Option<u64>,
}

impl GpArgs {
    fn apply(&self, mut fit: FitOptions) -> FitOptions {
        if let Some(t) = self.trend {
            fit.trend = match t {
                TrendArg::Constant => TrendKind::Constant,
                TrendArg::Linear => TrendKind::Linear,
            };
        }
        if let Some(v) = self.nugget {
            fit.nugget = NuggetPolicy::Fixed(v);
        }
        if let Some(v) = self.optimize_nugget {
            fit.nugget = NuggetPolicy::Optimized(v);
        }
        if let Some(s) = self.starts {
            fit.starts = s as usize;
        }
        if let Some(i) = self.max_iters {
            fit.max_iters = i;
        }
        fit
    }
}

// ---------------------------------------------------------------- reduce

#[derive(Debug, Args)]
pub struct ReduceArgs {
    /// Training data (CSV with header x1..xm,y).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "gkdr")]
    method: MethodArg,
    /// Structural dimension.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    d: u64,
    /// gKDR input bandwidth multiplier.
    #[arg(long)]
    c1: Option<f64>,
    /// gKDR response bandwidth multiplier.
    #[arg(long)]
    c2: Option<f64>,
    /// gKDR regularization.
    #[arg(long)]
    eps: Option<f64>,
    /// Number of slices for SIR, SIR-II and SAVE.
    #[arg(long)]
    slices: Option<usize>,
    /// Per-sample gradients (CSV, one column per input) for the active subspace.
    #[arg(long)]
    gradients: Option<PathBuf>,
    /// Inputs kept as they are (0-based, comma separated).
    #[arg(long, value_delimiter = ',')]
    retain: Vec<usize>,
    /// Output projection JSON.
    #[arg(long)]
    out: PathBuf,
}

/// The projection file written by `reduce` and read by `fit` and `verify`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionFile {
    pub method: Reducer,
    pub d: usize,
    /// Rows of the `m × d` basis, where `m` counts the non-retained inputs.
    pub basis: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub retained_inputs: Vec<usize>,
    pub settings: ReductionSettings,
    pub seed: u64,
    /// Every estimated direction (the basis is its leading `d` columns).
    pub projection: ProjectionResult,
}

fn reduction_settings(ctx: &Context, method: Reducer, d: usize) -> ReductionSettings {
    let mut settings = ctx.config.reduction.unwrap_or_default();
    settings.method = method;
    settings.d = d;
    settings
}

pub fn reduce(ctx: &Context, args: &ReduceArgs) -> CliResult<()> {
    let data = read_dataset(&args.data)?;
    let mut settings = reduction_settings(ctx, args.method.reducer(), args.d as usize);
    if let Some(v) = args.c1 {
        settings.gkdr.c1 = v;
    }
    if let Some(v) = args.c2 {
        settings.gkdr.c2 = v;
    }
    if let Some(v) = args.eps {
        settings.gkdr.eps = v;
    }
    if let Some(h) = args.slices {
        settings.slices = SliceSpec::new(h).map_err(|e| CliError::usage(format!("--slices: {e}")))?;
    }
    let gradients = match &args.gradients {
        Some(p) => Some(read_matrix(p)?),
        None => None,
    };
    let simulator = match (&gradients, settings.method, &ctx.config.problem) {
        (None, Reducer::ActiveSubspace, Some(problem)) => Some(problem.simulator()?),
        (None, Reducer::ActiveSubspace, None) => {
            return Err(CliError::usage(
                "--method as needs --gradients FILE or a built-in problem in --config",
            ))
        }
        _ => None,
    };
    let projection = estimate_reduction(&data, &settings, &args.retain, gradients.as_ref(), simulator.as_deref())?;
    let projection = projection.with_dim(settings.d)?;
    let basis = projection.basis();
    let file = ProjectionFile {
        method: settings.method,
        d: settings.d,
        basis: basis.row_iter().map(|r| r.iter().copied().collect()).collect(),
        eigenvalues: projection.eigenvalues().iter().copied().collect(),
        retained_inputs: args.retain.clone(),
        settings,
        seed: ctx.seed,
        projection,
    };
    write_json(&args.out, &file)?;
    println!("{}: d={} on {} inputs -> {}", file.method.name(), file.d, basis.nrows(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------- fit / predict

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Training data (CSV with header x1..xm,y).
    #[arg(long)]
    data: PathBuf,
    /// Projection from `reduce`; without it the GP uses every input.
    #[arg(long)]
    projection: Option<PathBuf>,
    #[command(flatten)]
    gp: GpArgs,
    /// Output model JSON.
    #[arg(long)]
    out: PathBuf,
}

fn fit_options(ctx: &Context, base: FitOptions, gp: &GpArgs) -> FitOptions {
    let mut fit = ctx.config.fit.unwrap_or(base);
    fit.seed = ctx.seed;
    gp.apply(fit)
}

pub fn fit(ctx: &Context, args: &FitArgs) -> CliResult<()> {
    let data = read_dataset(&args.data)?;
    let model = match &args.projection {
        Some(path) => {
            // projected data are not an exact function of the reduced coordinates, so the
            // nugget is estimated by default
            let fit = fit_options(ctx, reduced_fit_options(ctx.seed), &args.gp);
            let file: ProjectionFile = read_json(path)?;
            let mut reduction = file.settings;
            reduction.d = file.d;
            let plan = EmulatorPlan { retained_inputs: &file.retained_inputs, ..EmulatorPlan::new(reduction, fit) };
            train_on_projection(&data, file.projection, &plan)?
        }
        None => {
            let fit = fit_options(ctx, FitOptions::default(), &args.gp);
            let reduction = ReductionSettings { method: Reducer::Identity, d: data.input_dim(), ..Default::default() };
            fit_reduced_emulator(&data, &EmulatorPlan::new(reduction, fit))?
        }
    };
    write_text(&args.out, &(model.to_json()? + "\n"))?;
    let h = model.gp.hyperparameters();
    println!(
        "fitted GP on {} coordinates: sigma2={} nugget={} -> {}",
        model.gp.input_dim(),
        h.variance(),
        h.nugget,
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model JSON from `fit`.
    #[arg(long)]
    model: PathBuf,
    /// Inputs (CSV with header x1..xm; response columns, if present, are scored).
    #[arg(long)]
    data: PathBuf,
    /// Output CSV with columns mean,variance.
    #[arg(long)]
    out: PathBuf,
}

pub fn predict(_ctx: &Context, args: &PredictArgs) -> CliResult<()> {
    let model = ReducedEmulator::from_json(&crate::io::read_text(&args.model)?)?;
    let table = read_table(&args.data)?;
    let (mean, var) = model.predict(&table.inputs)?;
    let mean = DMatrix::from_column_slice(mean.len(), 1, mean.as_slice());
    let var = DMatrix::from_column_slice(var.len(), 1, var.as_slice());
    write_columns(&args.out, &["mean".into(), "variance".into()], &[&mean, &var])?;
    match table.responses {
        Some(y) if y.nrows() >= 2 => match nprmse(&y.column(0).into_owned(), &mean.column(0).into_owned()) {
            Ok(score) => println!("{} predictions, nprmse={score}", mean.nrows()),
            Err(_) => println!("{} predictions", mean.nrows()),
        },
        _ => println!("{} predictions", mean.nrows()),
    }
    Ok(())
}

// ---------------------------------------------------------------- cv

#[derive(Debug, Args)]
pub struct CvArgs {
    /// Training data (CSV with header x1..xm,y).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "gkdr")]
    method: MethodArg,
    #[arg(long)]
    folds: Option<usize>,
    /// Candidate input bandwidth multipliers.
    #[arg(long, value_delimiter = ',')]
    c1: Vec<f64>,
    /// Candidate response bandwidth multipliers.
    #[arg(long, value_delimiter = ',')]
    c2: Vec<f64>,
    /// Candidate structural dimensions.
    #[arg(long, value_delimiter = ',')]
    d: Vec<usize>,
    /// Inputs kept as they are (0-based, comma separated).
    #[arg(long, value_delimiter = ',')]
    retain: Vec<usize>,
    #[command(flatten)]
    gp: GpArgs,
    /// Output JSON with the selected configuration and the full table.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct CvReport<'a> {
    method: Reducer,
    plan: &'a CvPlan,
    fit: FitOptions,
    outcome: &'a CvOutcome,
}

pub fn cv(ctx: &Context, args: &CvArgs) -> CliResult<()> {
    let data = read_dataset(&args.data)?;
    let mut plan = ctx.config.cv.clone().unwrap_or_default();
    plan.seed = ctx.seed;
    if let Some(f) = args.folds {
        plan.folds = f;
    }
    if !args.c1.is_empty() {
        plan.c1 = args.c1.clone();
    }
    if !args.c2.is_empty() {
        plan.c2 = args.c2.clone();
    }
    if !args.d.is_empty() {
        plan.d = args.d.clone();
    }
    let reduction = reduction_settings(ctx, args.method.reducer(), 1);
    if reduction.method == Reducer::ActiveSubspace {
        return Err(CliError::usage("cv does not support --method as (it needs gradients per fold)"));
    }
    let fit = fit_options(ctx, reduced_fit_options(ctx.seed), &args.gp);
    let base = EmulatorPlan { retained_inputs: &args.retain, ..EmulatorPlan::new(reduction, fit) };
    let outcome = cross_validate(&data, &plan, &base)?;
    write_json(&args.out, &CvReport { method: reduction.method, plan: &plan, fit, outcome: &outcome })?;
    let b = &outcome.best;
    println!("selected d={} c1={} c2={} mean_nprmse={}", b.d, b.c1, b.c2, b.mean_nprmse);
    Ok(())
}

// ---------------------------------------------------------------- bench-study1

fn parse_study_method(s: &str) -> Result<StudyMethod, String> {
    StudyMethod::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Correlation length of the log-coefficient field.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Runs used to estimate the projection.
    #[arg(long = "M", default_value_t = 300)]
    train_size: usize,
    /// Cells per side of the grid.
    #[arg(long, default_value_t = 32)]
    grid: usize,
    /// Number of KL modes (input dimension).
    #[arg(long, default_value_t = 100)]
    modes: usize,
    #[arg(long, value_enum, default_value = "sqrt")]
    amplitude: AmplitudeArg,
    /// Methods to compare.
    #[arg(long, value_delimiter = ',', value_parser = parse_study_method, default_value = "full,gkdr,sir,sir2,save,as")]
    methods: Vec<StudyMethod>,
    /// Structural dimensions.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    d: Vec<usize>,
    /// Test-set size.
    #[arg(long)]
    n_test: Option<usize>,
    /// Output prefix: writes PREFIX.csv, PREFIX.json and PREFIX.scores.csv.
    #[arg(long)]
    out: PathBuf,
    /// Also write an SVG chart of NPRMSE against d.
    #[arg(long)]
    plot: Option<PathBuf>,
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn bench_study1(ctx: &Context, args: &BenchArgs) -> CliResult<()> {
    let problem = EllipticSpec {
        amplitude: args.amplitude.into(),
        ..EllipticSpec::new(args.grid, args.beta, args.modes, ctx.seed)
    };
    let mut methods = args.methods.clone();
    methods.sort();
    methods.dedup();
    let mut spec = Study1Spec::new(problem, args.train_size, args.d.clone(), methods, ctx.seed);
    if let Some(study) = &ctx.config.study {
        if let Some(n) = study.n_test {
            spec.n_test = n;
        }
        if let Some(g) = study.gkdr {
            spec.gkdr = g;
        }
        if let Some(s) = study.slices {
            spec.slices = s;
        }
        if let Some(f) = study.reduced_fit {
            spec.reduced_fit = FitOptions { seed: ctx.seed, ..f };
        }
        if let Some(f) = study.full_fit {
            spec.full_fit = FitOptions { seed: ctx.seed, ..f };
        }
    }
    if let Some(n) = args.n_test {
        spec.n_test = n;
    }
    let report = run_study1(&spec)?;
    write_text(&with_suffix(&args.out, ".csv"), &report.to_csv()?)?;
    write_text(&with_suffix(&args.out, ".json"), &(report.to_json()? + "\n"))?;
    write_text(&with_suffix(&args.out, ".scores.csv"), &report.scores_csv()?)?;
    if let Some(path) = &args.plot {
        write_text(path, &nprmse_chart(&report))?;
    }
    println!("method,d,nprmse,t1_seconds,t2_seconds,t3_seconds");
    for r in &report.rows {
        println!("{},{},{:.4},{:.3},{:.3},{:.3}", r.method.name(), r.d, r.nprmse, r.t1_seconds, r.t2_seconds, r.t3_seconds);
    }
    Ok(())
}

// ---------------------------------------------------------------- make-data

#[derive(Debug, Subcommand)]
pub enum MakeData {
    /// Ridge function f(x) = link(Bᵀx) + noise with standard-normal inputs.
    Ridge(RidgeArgs),
    /// Elliptic benchmark runs at standard-normal KL coefficients.
    Elliptic(EllipticArgs),
}

#[derive(Debug, Args)]
pub struct RidgeArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long, value_enum)]
    link: Option<LinkArg>,
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Output dataset CSV.
    #[arg(long)]
    out: PathBuf,
    /// Also write the true basis (JSON rows).
    #[arg(long)]
    basis_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EllipticArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_enum)]
    amplitude: Option<AmplitudeArg>,
    /// Output dataset CSV.
    #[arg(long)]
    out: PathBuf,
    /// Also write finite-difference gradients at every input (CSV).
    #[arg(long)]
    gradients_out: Option<PathBuf>,
}

/// Basis seed derived from the run seed, so that the basis and the inputs use
/// unrelated random streams.
fn basis_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15).rotate_left(17)
}

pub fn make_data(ctx: &Context, which: &MakeData) -> CliResult<()> {
    match which {
        MakeData::Ridge(a) => {
            let base = match &ctx.config.problem {
                Some(ProblemConfig::Ridge(spec)) => *spec,
                _ => RidgeSpec { m: 20, d: 2, link: RidgeLink::SinSquare, noise_sd: 0.0, basis_seed: basis_seed(ctx.seed) },
            };
            let spec = RidgeSpec {
                m: a.m.unwrap_or(base.m),
                d: a.d.unwrap_or(base.d),
                link: a.link.map(Into::into).unwrap_or(base.link),
                noise_sd: a.noise_sd.unwrap_or(base.noise_sd),
                basis_seed: base.basis_seed,
            };
            let f = spec.build()?;
            let data = ridge_batch(&f, a.n, ctx.seed)?;
            write_dataset(&a.out, data.inputs(), data.responses())?;
            if let Some(path) = &a.basis_out {
                let rows: Vec<Vec<f64>> = f.true_basis().row_iter().map(|r| r.iter().copied().collect()).collect();
                write_json(path, &rows)?;
            }
            println!("{} ridge samples in {} inputs (d={}) -> {}", a.n, spec.m, spec.d, a.out.display());
        }
        MakeData::Elliptic(a) => {
            let base = match &ctx.config.problem {
                Some(ProblemConfig::Elliptic(spec)) => *spec,
                _ => EllipticSpec::new(32, 1.0, 100, ctx.seed),
            };
            let spec = EllipticSpec {
                grid_resolution: a.grid.unwrap_or(base.grid_resolution),
                num_modes: a.modes.unwrap_or(base.num_modes),
                correlation_length: a.beta.unwrap_or(base.correlation_length),
                amplitude: a.amplitude.map(Into::into).unwrap_or(base.amplitude),
                seed: ctx.seed,
            };
            let problem = build_elliptic(spec)?;
            let x = gaussian_sample(a.n, spec.num_modes, ctx.seed)?;
            let y = problem.evaluate_batch(&x)?;
            let data = Dataset::scalar(x, y)?;
            write_dataset(&a.out, data.inputs(), data.responses())?;
            if let Some(path) = &a.gradients_out {
                let g = problem.gradient_batch(data.inputs())?;
                let header: Vec<String> = (1..=g.ncols()).map(|j| format!("g{j}")).collect();
                write_columns(path, &header, &[&g])?;
            }
            println!("{} elliptic runs with {} modes -> {}", a.n, spec.num_modes, a.out.display());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- verify

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Projection JSON from `reduce`.
    #[arg(long, required_unless_present = "model")]
    projection: Option<PathBuf>,
    /// Model JSON from `fit`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Tolerance on ‖BᵀB − I‖.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

pub fn verify(_ctx: &Context, args: &VerifyArgs) -> CliResult<()> {
    if let Some(path) = &args.projection {
        let file: ProjectionFile = read_json(path)?;
        let m = file.basis.len();
        if m == 0 || file.basis.iter().any(|r| r.len() != file.d) {
            return Err(CliError::parse(path, format!("basis must have d = {} columns in every row", file.d)));
        }
        let basis = DMatrix::from_fn(m, file.d, |i, j| file.basis[i][j]);
        let err = orthonormality_error(&basis);
        if !(err <= args.tol) {
            return Err(CliError::parse(path, format!("basis is not orthonormal: max |BᵀB - I| = {err:e}")));
        }
        if (basis - file.projection.basis()).amax() > 0.0 {
            return Err(CliError::parse(path, "basis differs from the stored projection"));
        }
        if file.eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(CliError::parse(path, "eigenvalues are not in descending order"));
        }
        println!("ok: {} projection, {m}x{} orthonormal basis (error {err:.1e})", file.method.name(), file.d);
    }
    if let Some(path) = &args.model {
        let model = ReducedEmulator::from_json(&crate::io::read_text(path)?)?;
        let train = model.gp.training_inputs().clone();
        let mean = model.gp.predict_mean(&train)?;
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(CliError::parse(path, "model predicts non-finite values at its training inputs"));
        }
        println!("ok: model on {} inputs ({} GP coordinates, {} training runs)", model.input_dim(), model.gp.input_dim(), train.nrows());
    }
    Ok(())
}
