//! The joint framework: estimate a projection, emulate on the projected inputs, select
//! the structural dimension and bandwidths by cross-validation, and benchmark against
//! full-space emulation.

use std::time::Instant;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, central_difference, SliceSpec, FD_STEP};
use crate::benchmarks::{
    build_elliptic, elliptic_gradient, ridge_eval, solve_elliptic, EllipticProblem, EllipticSpec, RidgeFunction,
};
use crate::data::Dataset;
use crate::design::{gaussian_sample, latin_hypercube, preimage_design, reduced_box, BoxDesignSpec, NormalComplement};
use crate::error::{EmulationError, Result};
use crate::gkdr::{self, GkdrConfig};
use crate::gp::{self, FitOptions, GpModel, NuggetPolicy, DEFAULT_NUGGET};
use crate::linalg::{check_orthonormal, symmetric_spectral_norm};
use crate::projection::ProjectionResult;

/// A deterministic simulator `ℝ^m → ℝ`.
pub trait Simulator: Sync {
    fn input_dim(&self) -> usize;

    fn evaluate(&self, x: &DVector<f64>) -> Result<f64>;

    /// Central differences unless the simulator knows better.
    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        central_difference(&|v: &DVector<f64>| self.evaluate(v), x, FD_STEP)
    }

    /// Outputs at every row, computed in parallel.
    fn evaluate_batch(&self, inputs: &DMatrix<f64>) -> Result<DVector<f64>> {
        let values: Result<Vec<f64>> =
            (0..inputs.nrows()).into_par_iter().map(|i| self.evaluate(&inputs.row(i).transpose())).collect();
        Ok(DVector::from_vec(values?))
    }

    /// Gradients at every row (one row per sample), computed in parallel.
    fn gradient_batch(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let rows: Result<Vec<DVector<f64>>> =
            (0..inputs.nrows()).into_par_iter().map(|i| self.gradient(&inputs.row(i).transpose())).collect();
        let rows = rows?;
        Ok(DMatrix::from_fn(inputs.nrows(), inputs.ncols(), |i, j| rows[i][j]))
    }
}

impl Simulator for EllipticProblem {
    fn input_dim(&self) -> usize {
        EllipticProblem::input_dim(self)
    }

    fn evaluate(&self, x: &DVector<f64>) -> Result<f64> {
        solve_elliptic(self, x)
    }

    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        // the per-component solves are already parallel inside
        elliptic_gradient(self, x)
    }
}

impl Simulator for RidgeFunction {
    fn input_dim(&self) -> usize {
        RidgeFunction::input_dim(self)
    }

    fn evaluate(&self, x: &DVector<f64>) -> Result<f64> {
        ridge_eval(self, x)
    }
}

/// Subspace estimators available to the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reducer {
    Gkdr,
    Sir,
    Sir2,
    Save,
    #[serde(rename = "as")]
    ActiveSubspace,
    /// No reduction (`d` must equal the number of reduced inputs).
    Identity,
}

impl Reducer {
    pub fn name(&self) -> &'static str {
        match self {
            Reducer::Gkdr => "gkdr",
            Reducer::Sir => "sir",
            Reducer::Sir2 => "sir2",
            Reducer::Save => "save",
            Reducer::ActiveSubspace => "as",
            Reducer::Identity => "identity",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "gkdr" => Reducer::Gkdr,
            "sir" => Reducer::Sir,
            "sir2" => Reducer::Sir2,
            "save" => Reducer::Save,
            "as" => Reducer::ActiveSubspace,
            "identity" => Reducer::Identity,
            other => {
                return Err(EmulationError::InvalidConfig(format!(
                    "unknown method '{other}' (expected gkdr, sir, sir2, save, as or identity)"
                )))
            }
        })
    }
}

/// How to estimate the projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReductionSettings {
    pub method: Reducer,
    /// Structural dimension.
    pub d: usize,
    /// Bandwidth multipliers and regularization for gKDR (its `d` is overridden).
    pub gkdr: GkdrConfig,
    pub slices: SliceSpec,
}

impl Default for ReductionSettings {
    fn default() -> Self {
        Self { method: Reducer::Gkdr, d: 1, gkdr: GkdrConfig::default(), slices: SliceSpec::default() }
    }
}

/// Fit options used for emulators on reduced inputs: the nugget is estimated (floor
/// 1e-8) so it can absorb the variation of the discarded directions.
pub fn reduced_fit_options(seed: u64) -> FitOptions {
    FitOptions { nugget: NuggetPolicy::Optimized(DEFAULT_NUGGET), seed, ..FitOptions::default() }
}

/// Input columns not in `retained`, in order.
fn complement_columns(m: usize, retained: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; m];
    for &r in retained {
        if r >= m {
            return Err(EmulationError::InvalidInput(format!("retained input {r} out of range for {m} inputs")));
        }
        if seen[r] {
            return Err(EmulationError::InvalidInput(format!("retained input {r} listed twice")));
        }
        seen[r] = true;
    }
    let rest: Vec<usize> = (0..m).filter(|&j| !seen[j]).collect();
    if rest.is_empty() {
        return Err(EmulationError::InvalidInput("every input is retained; nothing to reduce".into()));
    }
    Ok(rest)
}

/// Estimate the full set of directions on the non-retained block of `train`.
///
/// With retained inputs, the response is augmented with the retained columns (treated
/// as additional outputs) for gKDR; the sliced methods slice on the scalar response.
/// `gradients` (one row per sample, all `m` inputs) are required for the active
/// subspace unless a simulator is supplied.
pub fn estimate_reduction(
    train: &Dataset,
    settings: &ReductionSettings,
    retained: &[usize],
    gradients: Option<&DMatrix<f64>>,
    simulator: Option<&dyn Simulator>,
) -> Result<ProjectionResult> {
    let m = train.input_dim();
    let block = complement_columns(m, retained)?;
    let w = train.inputs().select_columns(&block);
    let d = settings.d;
    if d == 0 || d > block.len() {
        return Err(EmulationError::InvalidConfig(format!("d = {d} must lie in [1, {}]", block.len())));
    }
    let block_data = || -> Result<Dataset> {
        let responses = if retained.is_empty() {
            train.responses().clone()
        } else {
            train.with_inputs_as_responses(retained)?.responses().clone()
        };
        Dataset::new(w.clone(), responses)
    };
    match settings.method {
        Reducer::Gkdr => {
            let config = GkdrConfig { d, ..settings.gkdr };
            gkdr::estimate_projection(&block_data()?, &config)
        }
        Reducer::Sir | Reducer::Sir2 | Reducer::Save => {
            let data = Dataset::scalar(w, train.scalar_response()?)?;
            match settings.method {
                Reducer::Sir => baselines::sir(&data, &settings.slices, d),
                Reducer::Sir2 => baselines::sir2(&data, &settings.slices, d),
                _ => baselines::save(&data, &settings.slices, d),
            }
        }
        Reducer::ActiveSubspace => {
            let grads = match (gradients, simulator) {
                (Some(g), _) => {
                    if g.shape() != train.inputs().shape() {
                        return Err(EmulationError::InvalidInput(format!(
                            "gradients are {:?} but inputs are {:?}",
                            g.shape(),
                            train.inputs().shape()
                        )));
                    }
                    g.clone()
                }
                (None, Some(sim)) => sim.gradient_batch(train.inputs())?,
                (None, None) => {
                    return Err(EmulationError::InvalidInput(
                        "the active subspace needs gradients or a simulator".into(),
                    ))
                }
            };
            baselines::active_subspace(&w, &grads.select_columns(&block), d)
        }
        Reducer::Identity => {
            if d != block.len() {
                return Err(EmulationError::InvalidConfig(format!(
                    "identity reduction needs d = {}, got {d}",
                    block.len()
                )));
            }
            Ok(ProjectionResult::identity(block.len()))
        }
    }
}

/// Where the emulator's training runs came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum TrainingSource {
    /// The projected training pairs were reused.
    ProjectedData,
    /// Fresh simulator runs on a Latin hypercube in the reduced box, lifted to the full space.
    LiftedDesign { budget: usize, seed: u64 },
}

/// Configuration and seeds that produced a [`ReducedEmulator`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub reduction: ReductionSettings,
    pub fit: FitOptions,
    pub training: TrainingSource,
}

/// A GP on `[retained inputs, Wᵀ(other inputs)]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReducedEmulator {
    pub projection: ProjectionResult,
    pub gp: GpModel,
    pub retained_inputs: Vec<usize>,
    reduced_inputs: Vec<usize>,
    pub provenance: Provenance,
}

impl ReducedEmulator {
    /// Full input dimension `m`.
    pub fn input_dim(&self) -> usize {
        self.retained_inputs.len() + self.reduced_inputs.len()
    }

    /// Emulator coordinates of full inputs.
    pub fn reduce_inputs(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if inputs.ncols() != self.input_dim() {
            return Err(EmulationError::InvalidInput(format!(
                "inputs have {} columns, the emulator expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        compose_coordinates(inputs, &self.retained_inputs, &self.reduced_inputs, &self.projection)
    }

    pub fn predict(&self, inputs: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        self.gp.predict_marginal(&self.reduce_inputs(inputs)?)
    }

    pub fn predict_mean(&self, inputs: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.gp.predict_mean(&self.reduce_inputs(inputs)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: ReducedEmulator = serde_json::from_str(text)?;
        let m = model.projection.input_dim();
        if model.reduced_inputs.len() != m
            || model.gp.input_dim() != model.projection.dim() + model.retained_inputs.len()
        {
            return Err(EmulationError::InvalidInput("emulator document is inconsistent".into()));
        }
        Ok(model)
    }
}

fn compose_coordinates(
    inputs: &DMatrix<f64>,
    retained: &[usize],
    reduced: &[usize],
    projection: &ProjectionResult,
) -> Result<DMatrix<f64>> {
    let projected = projection.project(&inputs.select_columns(reduced))?;
    if retained.is_empty() {
        return Ok(projected);
    }
    let kept = inputs.select_columns(retained);
    let r = retained.len();
    let mut out = DMatrix::zeros(inputs.nrows(), r + projected.ncols());
    out.columns_mut(0, r).copy_from(&kept);
    out.columns_mut(r, projected.ncols()).copy_from(&projected);
    Ok(out)
}

/// Everything [`fit_reduced_emulator`] needs besides the data.
#[derive(Clone, Copy)]
pub struct EmulatorPlan<'a> {
    pub reduction: ReductionSettings,
    pub fit: FitOptions,
    pub retained_inputs: &'a [usize],
    /// Per-sample gradients (active subspace only).
    pub gradients: Option<&'a DMatrix<f64>>,
    /// When present, the GP is trained on fresh lifted-design runs instead of the data.
    pub simulator: Option<&'a dyn Simulator>,
    /// Lifted-design size; defaults to ten points per emulator input.
    pub design_budget: Option<usize>,
    pub design_seed: u64,
}

impl<'a> EmulatorPlan<'a> {
    pub fn new(reduction: ReductionSettings, fit: FitOptions) -> Self {
        Self {
            reduction,
            fit,
            retained_inputs: &[],
            gradients: None,
            simulator: None,
            design_budget: None,
            design_seed: 0,
        }
    }
}

/// Reduce, then train the emulator (on the projected data, or on a lifted design when
/// a simulator is available).
pub fn fit_reduced_emulator(train: &Dataset, plan: &EmulatorPlan<'_>) -> Result<ReducedEmulator> {
    let projection = estimate_reduction(train, &plan.reduction, plan.retained_inputs, plan.gradients, plan.simulator)?;
    train_on_projection(train, projection, plan)
}

/// Train the emulator for an already estimated projection (its working dimension is
/// `plan.reduction.d`).
pub fn train_on_projection(train: &Dataset, projection: ProjectionResult, plan: &EmulatorPlan<'_>) -> Result<ReducedEmulator> {
    let m = train.input_dim();
    let retained = plan.retained_inputs.to_vec();
    let reduced = complement_columns(m, &retained)?;
    let projection = projection.with_dim(plan.reduction.d)?;
    if projection.input_dim() != reduced.len() {
        return Err(EmulationError::InvalidInput(format!(
            "projection acts on {} inputs, {} are being reduced",
            projection.input_dim(),
            reduced.len()
        )));
    }
    let coords = compose_coordinates(train.inputs(), &retained, &reduced, &projection)?;
    let (gp_data, training) = match plan.simulator {
        None => (Dataset::scalar(coords, train.scalar_response()?)?, TrainingSource::ProjectedData),
        Some(sim) => {
            if sim.input_dim() != m {
                return Err(EmulationError::InvalidInput(format!(
                    "simulator takes {} inputs, the data has {m}",
                    sim.input_dim()
                )));
            }
            let budget = plan.design_budget.unwrap_or(10 * coords.ncols());
            let (design, full) = lifted_design(&coords, &retained, &reduced, &projection, budget, plan.design_seed)?;
            let y = sim.evaluate_batch(&full)?;
            (Dataset::scalar(design, y)?, TrainingSource::LiftedDesign { budget, seed: plan.design_seed })
        }
    };
    let gp = gp::fit(&gp_data, &plan.fit)?;
    Ok(ReducedEmulator {
        projection,
        gp,
        retained_inputs: retained,
        reduced_inputs: reduced,
        provenance: Provenance { reduction: plan.reduction, fit: plan.fit, training },
    })
}

/// Latin hypercube in the box spanned by the emulator coordinates of the training data
/// (widened by 10%), and its lift to full inputs.
fn lifted_design(
    coords: &DMatrix<f64>,
    retained: &[usize],
    reduced: &[usize],
    projection: &ProjectionResult,
    budget: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let bounds = reduced_box(coords)?;
    let design = latin_hypercube(&BoxDesignSpec::new(bounds, budget, seed)?)?;
    let r = retained.len();
    let basis = projection.basis();
    let lifted = preimage_design(
        &design.columns(r, basis.ncols()).into_owned(),
        &basis,
        &mut NormalComplement::new(seed.wrapping_add(1)),
    )?;
    let m = r + reduced.len();
    let mut full = DMatrix::zeros(budget, m);
    for (k, &c) in retained.iter().enumerate() {
        full.set_column(c, &design.column(k));
    }
    for (k, &c) in reduced.iter().enumerate() {
        full.set_column(c, &lifted.column(k));
    }
    Ok((design, full))
}

/// Root-mean-square error divided by the range of the truth.
pub fn nprmse(truth: &DVector<f64>, predictions: &DVector<f64>) -> Result<f64> {
    let n = truth.len();
    if n != predictions.len() {
        return Err(EmulationError::InvalidInput(format!(
            "{n} truths but {} predictions",
            predictions.len()
        )));
    }
    if n < 2 {
        return Err(EmulationError::InvalidInput("need at least two test points".into()));
    }
    let range = truth.max() - truth.min();
    if !(range > 0.0) {
        return Err(EmulationError::Degenerate("truth is constant; normalized error undefined".into()));
    }
    let mse = (truth - predictions).norm_squared() / n as f64;
    Ok(mse.sqrt() / range)
}

/// Spectral norm of the difference of orthogonal projectors onto `span(a)` and `span(b)`.
pub fn subspace_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(EmulationError::InvalidInput(format!(
            "bases live in different spaces ({} vs {} rows)",
            a.nrows(),
            b.nrows()
        )));
    }
    check_orthonormal(a, 1e-8, "first basis").map_err(|e| EmulationError::InvalidInput(e.to_string()))?;
    check_orthonormal(b, 1e-8, "second basis").map_err(|e| EmulationError::InvalidInput(e.to_string()))?;
    let diff = a * a.transpose() - b * b.transpose();
    Ok(symmetric_spectral_norm(&diff))
}

/// Cross-validation grid and fold layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvPlan {
    pub folds: usize,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    pub d: Vec<usize>,
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        let c = vec![0.5, 1.0, 5.0, 10.0, 15.0, 20.0];
        Self { folds: 10, c1: c.clone(), c2: c, d: (1..=5).collect(), seed: 0 }
    }
}

impl CvPlan {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.folds < 2 {
            return Err(EmulationError::InvalidConfig(format!("need at least 2 folds, got {}", self.folds)));
        }
        if self.c1.is_empty() || self.c2.is_empty() || self.d.is_empty() {
            return Err(EmulationError::InvalidConfig("candidate grids must be nonempty".into()));
        }
        if self.c1.iter().chain(&self.c2).any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(EmulationError::InvalidConfig("bandwidth multipliers must be positive".into()));
        }
        if self.d.contains(&0) {
            return Err(EmulationError::InvalidConfig("candidate d must be at least 1".into()));
        }
        if n < 2 * self.folds {
            return Err(EmulationError::InvalidInput(format!(
                "{n} samples are too few for {} folds (need {})",
                self.folds,
                2 * self.folds
            )));
        }
        Ok(())
    }

    /// Test fold of every sample: a seeded shuffle dealt round-robin.
    pub fn fold_assignment(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let mut fold = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            fold[i] = pos % self.folds;
        }
        fold
    }
}

/// One row of the CV table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub d: usize,
    pub c1: f64,
    pub c2: f64,
    /// Mean over the folds that produced a score.
    pub mean_nprmse: f64,
    /// Per-fold scores; `None` where a fold was skipped.
    pub fold_nprmse: Vec<Option<f64>>,
}

/// Selected configuration and the full table (rows ordered by d, c1, c2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub best: CvRow,
    pub table: Vec<CvRow>,
}

/// Grid search by k-fold cross-validation of the reduced emulator's NPRMSE. The best
/// configuration minimizes the mean score; ties go to smaller d, then c1, then c2.
/// Bandwidth grids only apply to gKDR; other reducers are scored at c1 = c2 = 1.
pub fn cross_validate(data: &Dataset, plan: &CvPlan, base: &EmulatorPlan<'_>) -> Result<CvOutcome> {
    let n = data.len();
    plan.validate(n)?;
    let folds = plan.fold_assignment(n);
    let (c1s, c2s) = if base.reduction.method == Reducer::Gkdr {
        (plan.c1.clone(), plan.c2.clone())
    } else {
        (vec![1.0], vec![1.0])
    };
    let mut ds = plan.d.clone();
    ds.sort_unstable();
    ds.dedup();

    // one projection per (c1, c2, fold); every d reuses its leading directions
    let mut tasks = Vec::new();
    for &c1 in &c1s {
        for &c2 in &c2s {
            for k in 0..plan.folds {
                tasks.push((c1, c2, k));
            }
        }
    }
    let d_max = *ds.last().expect("nonempty");
    let scores: Vec<Vec<Option<f64>>> = tasks
        .par_iter()
        .map(|&(c1, c2, k)| {
            let train_idx: Vec<usize> = (0..n).filter(|&i| folds[i] != k).collect();
            let test_idx: Vec<usize> = (0..n).filter(|&i| folds[i] == k).collect();
            let train = data.subset(&train_idx);
            let test = data.subset(&test_idx);
            let truth = test.scalar_response()?;
            let grads_train = base.gradients.map(|g| g.select_rows(&train_idx));
            let reduction = ReductionSettings {
                d: d_max.min(data.input_dim() - base.retained_inputs.len()),
                gkdr: GkdrConfig { c1, c2, ..base.reduction.gkdr },
                ..base.reduction
            };
            let projection =
                estimate_reduction(&train, &reduction, base.retained_inputs, grads_train.as_ref(), base.simulator)?;
            ds.iter()
                .map(|&d| {
                    if d > projection.directions().ncols() {
                        return Err(EmulationError::InvalidConfig(format!(
                            "candidate d = {d} exceeds the number of reducible inputs"
                        )));
                    }
                    let plan_d = EmulatorPlan {
                        reduction: ReductionSettings { d, ..reduction },
                        gradients: None,
                        ..*base
                    };
                    let emulator = train_on_projection(&train, projection.clone(), &plan_d)?;
                    let pred = emulator.predict_mean(test.inputs())?;
                    match nprmse(&truth, &pred) {
                        Ok(v) => Ok(Some(v)),
                        Err(EmulationError::Degenerate(_)) => {
                            warn!("fold {k}: constant test responses, fold skipped");
                            Ok(None)
                        }
                        Err(e) => Err(e),
                    }
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut table = Vec::new();
    for (ci, &c1) in c1s.iter().enumerate() {
        for (cj, &c2) in c2s.iter().enumerate() {
            let cell = (ci * c2s.len() + cj) * plan.folds;
            for (di, &d) in ds.iter().enumerate() {
                let mut fold_scores = Vec::with_capacity(plan.folds);
                for k in 0..plan.folds {
                    fold_scores.push(scores[cell + k][di]);
                }
                let valid: Vec<f64> = fold_scores.iter().flatten().copied().collect();
                if valid.is_empty() {
                    return Err(EmulationError::Degenerate("every fold was skipped".into()));
                }
                let mean = valid.iter().sum::<f64>() / valid.len() as f64;
                table.push(CvRow { d, c1, c2, mean_nprmse: mean, fold_nprmse: fold_scores });
            }
        }
    }
    table.sort_by(|a, b| a.d.cmp(&b.d).then(a.c1.total_cmp(&b.c1)).then(a.c2.total_cmp(&b.c2)));
    let best = table
        .iter()
        .min_by(|a, b| {
            a.mean_nprmse
                .total_cmp(&b.mean_nprmse)
                .then(a.d.cmp(&b.d))
                .then(a.c1.total_cmp(&b.c1))
                .then(a.c2.total_cmp(&b.c2))
        })
        .expect("nonempty table")
        .clone();
    Ok(CvOutcome { best, table })
}

/// Methods compared in the elliptic study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyMethod {
    /// Full-space emulation on `M + 10d` direct runs.
    Full,
    Gkdr,
    Sir,
    Sir2,
    Save,
    #[serde(rename = "as")]
    ActiveSubspace,
}

impl StudyMethod {
    pub fn name(&self) -> &'static str {
        match self {
            StudyMethod::Full => "full",
            StudyMethod::Gkdr => "gkdr",
            StudyMethod::Sir => "sir",
            StudyMethod::Sir2 => "sir2",
            StudyMethod::Save => "save",
            StudyMethod::ActiveSubspace => "as",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "full" => StudyMethod::Full,
            "gkdr" => StudyMethod::Gkdr,
            "sir" => StudyMethod::Sir,
            "sir2" => StudyMethod::Sir2,
            "save" => StudyMethod::Save,
            "as" => StudyMethod::ActiveSubspace,
            other => {
                return Err(EmulationError::InvalidConfig(format!(
                    "unknown method '{other}' (expected full, gkdr, sir, sir2, save or as)"
                )))
            }
        })
    }

    fn reducer(&self) -> Option<Reducer> {
        match self {
            StudyMethod::Full => None,
            StudyMethod::Gkdr => Some(Reducer::Gkdr),
            StudyMethod::Sir => Some(Reducer::Sir),
            StudyMethod::Sir2 => Some(Reducer::Sir2),
            StudyMethod::Save => Some(Reducer::Save),
            StudyMethod::ActiveSubspace => Some(Reducer::ActiveSubspace),
        }
    }
}

/// Protocol of the elliptic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Study1Spec {
    pub problem: EllipticSpec,
    /// Runs used to estimate the projection (`M`).
    pub train_size: usize,
    pub d_list: Vec<usize>,
    pub methods: Vec<StudyMethod>,
    pub n_test: usize,
    pub seed: u64,
    pub gkdr: GkdrConfig,
    pub slices: SliceSpec,
    /// Options for the reduced emulators (nugget estimated).
    pub reduced_fit: FitOptions,
    /// Options for the full-space emulator (fixed nugget).
    pub full_fit: FitOptions,
}

impl Study1Spec {
    pub fn new(problem: EllipticSpec, train_size: usize, d_list: Vec<usize>, methods: Vec<StudyMethod>, seed: u64) -> Self {
        Self {
            problem,
            train_size,
            d_list,
            methods,
            n_test: 500,
            seed,
            gkdr: GkdrConfig::default(),
            slices: SliceSpec::default(),
            reduced_fit: reduced_fit_options(seed),
            full_fit: FitOptions { seed, ..FitOptions::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_list.is_empty() || self.methods.is_empty() {
            return Err(EmulationError::InvalidConfig("d list and method list must be nonempty".into()));
        }
        if self.d_list.iter().any(|&d| d == 0 || d > self.problem.num_modes) {
            return Err(EmulationError::InvalidConfig(format!(
                "every d must lie in [1, {}]",
                self.problem.num_modes
            )));
        }
        if self.train_size < 2 || self.n_test < 2 {
            return Err(EmulationError::InvalidConfig("need at least two training and two test runs".into()));
        }
        Ok(())
    }
}

/// One method at one structural dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: StudyMethod,
    pub d: usize,
    pub nprmse: f64,
    /// Simulator time (seconds).
    pub t1_seconds: f64,
    /// Dimension-reduction time; zero for full emulation.
    pub t2_seconds: f64,
    /// Emulator training time.
    pub t3_seconds: f64,
}

/// Self-describing header of a benchmark report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub study: Study1Spec,
    pub discretization: String,
    pub kl_normalization: String,
    pub kl_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<ReportRow>,
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    method: &'a str,
    d: usize,
    nprmse: f64,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    method: &'a str,
    d: usize,
    nprmse: f64,
    t1_seconds: f64,
    t2_seconds: f64,
    t3_seconds: f64,
}

fn csv_error(e: impl std::fmt::Display) -> EmulationError {
    EmulationError::InvalidInput(format!("csv: {e}"))
}

impl BenchmarkReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per method and d, with timings.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRow {
                method: r.method.name(),
                d: r.d,
                nprmse: r.nprmse,
                t1_seconds: r.t1_seconds,
                t2_seconds: r.t2_seconds,
                t3_seconds: r.t3_seconds,
            })
            .map_err(csv_error)?;
        }
        String::from_utf8(w.into_inner().map_err(csv_error)?).map_err(csv_error)
    }

    /// Scores only (no timings), so identical seeds give identical bytes.
    pub fn scores_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(ScoreRow { method: r.method.name(), d: r.d, nprmse: r.nprmse }).map_err(csv_error)?;
        }
        String::from_utf8(w.into_inner().map_err(csv_error)?).map_err(csv_error)
    }

    pub fn row(&self, method: StudyMethod, d: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.d == d)
    }
}

/// Independent sub-seed for a named stream.
fn sub_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sums of measured times, kept at millisecond resolution.
fn millis(seconds: f64) -> f64 {
    (seconds * 1000.0).round() / 1000.0
}

/// Elapsed seconds rounded up to whole milliseconds (so any measured work is nonzero).
fn seconds(start: Instant) -> f64 {
    (start.elapsed().as_secs_f64() * 1000.0).ceil() / 1000.0
}

/// The elliptic benchmark: for every method and d, reduce on `M` Gaussian runs, train
/// the emulator on `10d` lifted Latin-hypercube runs, and score it on a common test set
/// (full emulation trains directly on `M + 10d` Gaussian runs).
///
/// T1 counts the simulator runs a method consumes (including the gradient pass of the
/// active subspace); T2 the subspace estimation; T3 the GP fit.
pub fn run_study1(spec: &Study1Spec) -> Result<BenchmarkReport> {
    spec.validate()?;
    let problem = build_elliptic(spec.problem)?;
    let m = problem.spec.num_modes;

    let start = Instant::now();
    let x_train = gaussian_sample(spec.train_size, m, sub_seed(spec.seed, 1))?;
    let y_train = problem.evaluate_batch(&x_train)?;
    let t_train = seconds(start);
    let x_test = gaussian_sample(spec.n_test, m, sub_seed(spec.seed, 2))?;
    let y_test = problem.evaluate_batch(&x_test)?;
    let train = Dataset::scalar(x_train.clone(), y_train.clone())?;

    let mut methods = spec.methods.clone();
    methods.sort();
    methods.dedup();
    let mut d_list = spec.d_list.clone();
    d_list.sort_unstable();
    d_list.dedup();

    let mut gradient_cache: Option<(DMatrix<f64>, f64)> = None;
    let mut rows = Vec::new();
    for &method in &methods {
        for &d in &d_list {
            let row = match method.reducer() {
                None => {
                    let start = Instant::now();
                    let extra = gaussian_sample(10 * d, m, sub_seed(spec.seed, 100 + d as u64))?;
                    let y_extra = problem.evaluate_batch(&extra)?;
                    let t1 = t_train + seconds(start);
                    let mut x = DMatrix::zeros(spec.train_size + 10 * d, m);
                    x.rows_mut(0, spec.train_size).copy_from(&x_train);
                    x.rows_mut(spec.train_size, 10 * d).copy_from(&extra);
                    let mut y = DVector::zeros(spec.train_size + 10 * d);
                    y.rows_mut(0, spec.train_size).copy_from(&y_train);
                    y.rows_mut(spec.train_size, 10 * d).copy_from(&y_extra);
                    let start = Instant::now();
                    let model = gp::fit(&Dataset::scalar(x, y)?, &spec.full_fit)?;
                    let t3 = seconds(start);
                    let pred = model.predict_mean(&x_test)?;
                    ReportRow { method, d, nprmse: nprmse(&y_test, &pred)?, t1_seconds: millis(t1), t2_seconds: 0.0, t3_seconds: t3 }
                }
                Some(reducer) => {
                    let mut t1 = t_train;
                    let gradients = if reducer == Reducer::ActiveSubspace {
                        if gradient_cache.is_none() {
                            let start = Instant::now();
                            let g = problem.gradient_batch(&x_train)?;
                            gradient_cache = Some((g, seconds(start)));
                        }
                        let (g, t) = gradient_cache.as_ref().expect("filled above");
                        t1 += t;
                        Some(g)
                    } else {
                        None
                    };
                    let reduction = ReductionSettings { method: reducer, d, gkdr: GkdrConfig { d, ..spec.gkdr }, slices: spec.slices };
                    let start = Instant::now();
                    let projection = estimate_reduction(&train, &reduction, &[], gradients, None)?;
                    let t2 = seconds(start);

                    let coords = projection.with_dim(d)?.project(&x_train)?;
                    let design_seed = sub_seed(spec.seed, 200 + d as u64);
                    let start = Instant::now();
                    let (design, full) = lifted_design(&coords, &[], &(0..m).collect::<Vec<_>>(), &projection.with_dim(d)?, 10 * d, design_seed)?;
                    let y_design = problem.evaluate_batch(&full)?;
                    t1 += seconds(start);

                    let start = Instant::now();
                    let model = gp::fit(&Dataset::scalar(design, y_design)?, &spec.reduced_fit)?;
                    let t3 = seconds(start);
                    let pred = model.predict_mean(&projection.with_dim(d)?.project(&x_test)?)?;
                    ReportRow { method, d, nprmse: nprmse(&y_test, &pred)?, t1_seconds: millis(t1), t2_seconds: t2, t3_seconds: t3 }
                }
            };
            log::info!("{} d={} nprmse={:.4}", row.method.name(), row.d, row.nprmse);
            rows.push(row);
        }
    }
    Ok(BenchmarkReport {
        metadata: ReportMetadata {
            study: spec.clone(),
            discretization: format!(
                "cell-centred finite volumes on a {0}x{0} grid, harmonic face coefficients",
                spec.problem.grid_resolution
            ),
            kl_normalization: "gamma_i = eigenvalues of h^2 C at cell centres (sum over all modes = 1); \
                               phi_i orthonormal under h^2-weighted sums; log a = sum x_i gamma_i phi_i"
                .into(),
            kl_values: problem.kl_values.iter().copied().collect(),
        },
        rows,
    })
}
