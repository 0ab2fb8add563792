//! Gaussian process emulator with a regression trend, ARD squared-exponential correlation
//! and optional nugget.
//!
//! The trend coefficients get a vague prior (`V⁻¹ → 0`). In that limit the marginal
//! likelihood becomes the restricted likelihood
//!
//! ```text
//! L(σ², θ) = -S/(2σ²) - (n-q)/2 log σ² - ½ log|R| - ½ log|Hᵀ R⁻¹ H| - (n-q)/2 log 2π
//! ```
//!
//! with `R` the correlation matrix and `S = (y - Hβ̂)ᵀ R⁻¹ (y - Hβ̂)`. The process variance
//! is profiled out (`σ̂² = S/(n-q)`) and the correlation parameters are fitted by
//! multi-start L-BFGS on the profiled value using its analytic gradient.
//!
//! Here `H` is stored `n x q` (one row `h(x)ᵀ` per point).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{EmulationError, Result};
use crate::kernels::{as_columns, ArdSqExpCorrelation, Kernel};
use crate::linalg::{cholesky_with_jitter, symmetrize, SpdFactor};
use crate::optim;

/// Relative floor on the profiled process variance (times the mean squared output).
const SIGMA2_REL_FLOOR: f64 = 1e-14;
/// Upper bound on an optimized nugget.
pub const NUGGET_MAX: f64 = 0.5;
/// Default fixed nugget for deterministic simulators.
pub const DEFAULT_NUGGET: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrendKind {
    Constant,
    Linear,
}

/// Regression functions `h(x)`: `[1]` or `[1, x₁, …, x_d]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrendBasis {
    pub kind: TrendKind,
    pub input_dim: usize,
}

impl TrendBasis {
    pub fn new(kind: TrendKind, input_dim: usize) -> Self {
        Self { kind, input_dim }
    }

    pub fn len(&self) -> usize {
        match self.kind {
            TrendKind::Constant => 1,
            TrendKind::Linear => self.input_dim + 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eval(&self, x: &[f64]) -> DVector<f64> {
        let mut h = DVector::zeros(self.len());
        h[0] = 1.0;
        if self.kind == TrendKind::Linear {
            for (i, v) in x.iter().enumerate() {
                h[i + 1] = *v;
            }
        }
        h
    }

    /// Design matrix with one row `h(xᵢ)ᵀ` per input row.
    pub fn design(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let n = inputs.nrows();
        let mut h = DMatrix::zeros(n, self.len());
        h.column_mut(0).fill(1.0);
        if self.kind == TrendKind::Linear {
            h.columns_mut(1, self.input_dim).copy_from(inputs);
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparameters {
    pub log_lengthscales: DVector<f64>,
    pub log_variance: f64,
    pub nugget: f64,
}

impl GpHyperparameters {
    pub fn validate(&self) -> Result<()> {
        if self.log_lengthscales.is_empty()
            || self.log_lengthscales.iter().any(|v| !v.is_finite())
            || !self.log_variance.is_finite()
        {
            return Err(EmulationError::InvalidConfig("hyperparameters must be finite".into()));
        }
        if !(0.0..=NUGGET_MAX).contains(&self.nugget) {
            return Err(EmulationError::InvalidConfig(format!(
                "nugget must lie in [0, {NUGGET_MAX}], got {}",
                self.nugget
            )));
        }
        Ok(())
    }

    pub fn lengthscales(&self) -> DVector<f64> {
        self.log_lengthscales.map(f64::exp)
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy", content = "value")]
pub enum NuggetPolicy {
    /// Nugget held at the given value.
    Fixed(f64),
    /// Nugget estimated in `[floor, NUGGET_MAX]`.
    Optimized(f64),
}

impl Default for NuggetPolicy {
    fn default() -> Self {
        NuggetPolicy::Fixed(DEFAULT_NUGGET)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub trend: TrendKind,
    pub nugget: NuggetPolicy,
    /// Number of optimizer starts.
    pub starts: usize,
    pub max_iters: u64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { trend: TrendKind::Linear, nugget: NuggetPolicy::default(), starts: 8, max_iters: 200, seed: 0 }
    }
}

/// Pairwise squared differences per input dimension, shared across likelihood evaluations.
struct Workspace {
    inputs: DMatrix<f64>,
    outputs: DVector<f64>,
    design: DMatrix<f64>,
    sq_diffs: Vec<DMatrix<f64>>,
    sigma2_floor: f64,
}

impl Workspace {
    fn new(inputs: &DMatrix<f64>, outputs: &DVector<f64>, trend: &TrendBasis) -> Self {
        let n = inputs.nrows();
        let sq_diffs = (0..inputs.ncols())
            .map(|k| {
                let col = inputs.column(k);
                DMatrix::from_fn(n, n, |i, j| (col[i] - col[j]).powi(2))
            })
            .collect();
        Self {
            inputs: inputs.clone(),
            outputs: outputs.clone(),
            design: trend.design(inputs),
            sq_diffs,
            sigma2_floor: sigma2_floor(outputs),
        }
    }

    fn correlation(&self, log_lengthscales: &[f64], nugget: f64) -> DMatrix<f64> {
        let n = self.inputs.nrows();
        let mut expo = DMatrix::<f64>::zeros(n, n);
        for (k, ll) in log_lengthscales.iter().enumerate() {
            let w = (-2.0 * ll).exp();
            expo.zip_apply(&self.sq_diffs[k], |e, s| *e -= w * s);
        }
        let mut r = expo.map(|v| (1.0 - nugget) * v.exp());
        for i in 0..n {
            r[(i, i)] += nugget;
        }
        r
    }
}

fn sigma2_floor(outputs: &DVector<f64>) -> f64 {
    (SIGMA2_REL_FLOOR * outputs.norm_squared() / outputs.len().max(1) as f64).max(1e-300)
}

/// Everything derived from one factorization of the correlation matrix.
#[derive(Debug, Clone)]
struct Factorized {
    chol: SpdFactor,
    jitter: f64,
    rinv_h: DMatrix<f64>,
    trend_chol: Cholesky<f64, Dyn>,
    beta: DVector<f64>,
    alpha: DVector<f64>,
    quad: f64,
    log_det_r: f64,
    log_det_trend: f64,
}

fn factorize(r: &DMatrix<f64>, h: &DMatrix<f64>, y: &DVector<f64>) -> Result<Factorized> {
    let (chol, jitter) = cholesky_with_jitter(r)?;
    let rinv_h = chol.solve(h);
    let trend_mat = symmetrize(&(h.transpose() * &rinv_h));
    let trend_chol = trend_mat.cholesky().ok_or_else(|| {
        EmulationError::Numerical("trend normal matrix Hᵀ R⁻¹ H is singular; inputs may be collinear".into())
    })?;
    let rinv_y = chol.solve_vec(y);
    let beta = trend_chol.solve(&(h.transpose() * &rinv_y));
    let alpha = &rinv_y - &rinv_h * &beta;
    let resid = y - h * &beta;
    let quad = resid.dot(&alpha).max(0.0);
    let log_det_r = chol.log_det();
    let log_det_trend = 2.0 * trend_chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(Factorized { chol, jitter, rinv_h, trend_chol, beta, alpha, quad, log_det_r, log_det_trend })
}

/// Restricted log-likelihood at a given process variance.
fn restricted_log_likelihood(f: &Factorized, n: usize, q: usize, sigma2: f64) -> f64 {
    let dof = (n - q) as f64;
    -f.quad / (2.0 * sigma2)
        - 0.5 * dof * sigma2.ln()
        - 0.5 * f.log_det_r
        - 0.5 * f.log_det_trend
        - 0.5 * dof * (2.0 * std::f64::consts::PI).ln()
}

fn profiled_sigma2(f: &Factorized, n: usize, q: usize, floor: f64) -> f64 {
    (f.quad / (n - q) as f64).max(floor)
}

fn check_sizes(data: &Dataset, trend: &TrendBasis) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let y = data.scalar_response()?;
    if trend.input_dim != data.input_dim() {
        return Err(EmulationError::InvalidInput(format!(
            "trend expects {} inputs, data has {}",
            trend.input_dim,
            data.input_dim()
        )));
    }
    if data.len() <= trend.len() {
        return Err(EmulationError::InvalidInput(format!(
            "need more than {} samples for a trend with {} terms",
            trend.len(),
            trend.len()
        )));
    }
    Ok((data.inputs().clone(), y))
}

/// Log marginal likelihood (vague-prior trend, i.e. the restricted likelihood) at the
/// given hyperparameters, including the stated process variance.
pub fn log_marginal_likelihood(hyper: &GpHyperparameters, trend: &TrendBasis, data: &Dataset) -> Result<f64> {
    hyper.validate()?;
    let (x, y) = check_sizes(data, trend)?;
    if hyper.log_lengthscales.len() != x.ncols() {
        return Err(EmulationError::InvalidInput("lengthscale count differs from input dimension".into()));
    }
    let ws = Workspace::new(&x, &y, trend);
    let r = ws.correlation(hyper.log_lengthscales.as_slice(), hyper.nugget);
    let f = factorize(&r, &ws.design, &y)?;
    Ok(restricted_log_likelihood(&f, x.nrows(), trend.len(), hyper.variance()))
}

/// Profile log-likelihood with `β` and `σ²` maximized out; returns the value and `σ̂²`.
pub fn profile_log_likelihood(
    log_lengthscales: &DVector<f64>,
    nugget: f64,
    trend: &TrendBasis,
    data: &Dataset,
) -> Result<(f64, f64)> {
    let (x, y) = check_sizes(data, trend)?;
    if log_lengthscales.len() != x.ncols() {
        return Err(EmulationError::InvalidInput("lengthscale count differs from input dimension".into()));
    }
    let ws = Workspace::new(&x, &y, trend);
    let (value, sigma2, _) = profile_with_gradient(&ws, log_lengthscales.as_slice(), nugget, false, false)?;
    Ok((value, sigma2))
}

/// Profiled value, `σ̂²`, and (optionally) the gradient with respect to the log-lengthscales
/// followed by the nugget.
fn profile_with_gradient(
    ws: &Workspace,
    log_lengthscales: &[f64],
    nugget: f64,
    want_grad: bool,
    nugget_grad: bool,
) -> Result<(f64, f64, Vec<f64>)> {
    let n = ws.inputs.nrows();
    let q = ws.design.ncols();
    let r = ws.correlation(log_lengthscales, nugget);
    let f = factorize(&r, &ws.design, &ws.outputs)?;
    let sigma2 = profiled_sigma2(&f, n, q, ws.sigma2_floor);
    let value = restricted_log_likelihood(&f, n, q, sigma2);
    if !want_grad {
        return Ok((value, sigma2, Vec::new()));
    }
    // dL/dθ = ½ tr(W ∂R/∂θ) with W = ααᵀ/σ² - P and P = R⁻¹ - R⁻¹H (HᵀR⁻¹H)⁻¹ HᵀR⁻¹
    let rinv = f.chol.inverse();
    let tinv_ht = f.trend_chol.solve(&f.rinv_h.transpose());
    let mut w = -rinv + &f.rinv_h * tinv_ht;
    w.ger(1.0 / sigma2, &f.alpha, &f.alpha, 1.0);
    // correlation without nugget: C = (R - νI) / (1 - ν), jitter excluded
    let mut c = r;
    for i in 0..n {
        c[(i, i)] -= nugget;
    }
    c /= 1.0 - nugget;
    let wc = w.component_mul(&c);
    let mut grad = Vec::with_capacity(log_lengthscales.len() + 1);
    for (k, ll) in log_lengthscales.iter().enumerate() {
        // ∂R/∂log δₖ = (1 - ν) C ∘ 2Dₖ² / δₖ²
        let s = wc.dot(&ws.sq_diffs[k]);
        grad.push((1.0 - nugget) * s * (-2.0 * ll).exp());
    }
    if nugget_grad {
        // ∂R/∂ν = I - C
        grad.push(0.5 * (w.trace() - wc.sum()));
    }
    Ok((value, sigma2, grad))
}

/// Box bounds on the log-lengthscales and the map from unconstrained optimizer
/// coordinates into them.
#[derive(Debug, Clone)]
struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
    log_nugget_lo: f64,
    free_nugget: bool,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

impl Bounds {
    fn decode(&self, z: &[f64]) -> (Vec<f64>, f64, Vec<f64>) {
        let d = self.lo.len();
        let mut ll = Vec::with_capacity(d);
        let mut jac = Vec::with_capacity(z.len());
        for k in 0..d {
            let s = sigmoid(z[k]);
            let width = self.hi[k] - self.lo[k];
            ll.push(self.lo[k] + width * s);
            jac.push(width * s * (1.0 - s));
        }
        let nugget = if self.free_nugget {
            let s = sigmoid(z[d]);
            let width = NUGGET_MAX.ln() - self.log_nugget_lo;
            // exp(ln 0.5) can round above the bound
            let nu = (self.log_nugget_lo + width * s).exp().min(NUGGET_MAX);
            jac.push(nu * width * s * (1.0 - s));
            nu
        } else {
            0.0
        };
        (ll, nugget, jac)
    }

    fn encode(&self, ll: &[f64], nugget: f64) -> Vec<f64> {
        let mut z: Vec<f64> = ll
            .iter()
            .enumerate()
            .map(|(k, v)| logit((v - self.lo[k]) / (self.hi[k] - self.lo[k])))
            .collect();
        if self.free_nugget {
            let width = NUGGET_MAX.ln() - self.log_nugget_lo;
            z.push(logit((nugget.ln() - self.log_nugget_lo) / width));
        }
        z
    }
}

/// Trained emulator. Immutable after fitting; prediction only reads the cached
/// factorization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GpModelDocument", into = "GpModelDocument")]
pub struct GpModel {
    hyper: GpHyperparameters,
    trend: TrendBasis,
    inputs: DMatrix<f64>,
    outputs: DVector<f64>,
    cache: Factorized,
}

/// Serialized form of a [`GpModel`]; the factorization is rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpModelDocument {
    pub hyperparameters: GpHyperparameters,
    pub trend: TrendBasis,
    pub trend_coefficients: Vec<f64>,
    pub training_inputs: Vec<Vec<f64>>,
    pub training_outputs: Vec<f64>,
}

impl From<GpModel> for GpModelDocument {
    fn from(model: GpModel) -> Self {
        GpModelDocument {
            trend_coefficients: model.cache.beta.iter().copied().collect(),
            training_inputs: model.inputs.row_iter().map(|r| r.iter().copied().collect()).collect(),
            training_outputs: model.outputs.iter().copied().collect(),
            hyperparameters: model.hyper,
            trend: model.trend,
        }
    }
}

impl TryFrom<GpModelDocument> for GpModel {
    type Error = EmulationError;

    fn try_from(doc: GpModelDocument) -> Result<Self> {
        let n = doc.training_inputs.len();
        let d = doc.training_inputs.first().map_or(0, Vec::len);
        if n == 0 || doc.training_inputs.iter().any(|r| r.len() != d) || doc.training_outputs.len() != n {
            return Err(EmulationError::InvalidInput("malformed training data in model document".into()));
        }
        let inputs = DMatrix::from_fn(n, d, |i, j| doc.training_inputs[i][j]);
        let outputs = DVector::from_vec(doc.training_outputs);
        GpModel::assemble(doc.hyperparameters, doc.trend, inputs, outputs)
    }
}

impl GpModel {
    /// Builds a model at fixed correlation hyperparameters; `β̂` is recomputed from the data.
    pub fn assemble(
        hyper: GpHyperparameters,
        trend: TrendBasis,
        inputs: DMatrix<f64>,
        outputs: DVector<f64>,
    ) -> Result<Self> {
        hyper.validate()?;
        if hyper.log_lengthscales.len() != inputs.ncols() || trend.input_dim != inputs.ncols() {
            return Err(EmulationError::InvalidInput("hyperparameter/input dimension mismatch".into()));
        }
        let ws = Workspace::new(&inputs, &outputs, &trend);
        let r = ws.correlation(hyper.log_lengthscales.as_slice(), hyper.nugget);
        let cache = factorize(&r, &ws.design, &outputs)?;
        Ok(Self { hyper, trend, inputs, outputs, cache })
    }

    pub fn hyperparameters(&self) -> &GpHyperparameters {
        &self.hyper
    }

    pub fn trend(&self) -> &TrendBasis {
        &self.trend
    }

    pub fn trend_coefficients(&self) -> &DVector<f64> {
        &self.cache.beta
    }

    pub fn training_inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn training_outputs(&self) -> &DVector<f64> {
        &self.outputs
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Diagonal jitter that had to be added to factorize the correlation matrix.
    pub fn jitter(&self) -> f64 {
        self.cache.jitter
    }

    /// Lower Cholesky factor of the training covariance `σ²[(1 - ν)C + νI]` (plus jitter).
    pub fn covariance_factor(&self) -> DMatrix<f64> {
        self.cache.chol.l() * self.hyper.variance().sqrt()
    }

    fn correlation_parts(&self, new_inputs: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if new_inputs.ncols() != self.input_dim() {
            return Err(EmulationError::InvalidInput(format!(
                "new inputs have {} columns, model expects {}",
                new_inputs.ncols(),
                self.input_dim()
            )));
        }
        if new_inputs.iter().any(|v| !v.is_finite()) {
            return Err(EmulationError::InvalidInput("new inputs are not finite".into()));
        }
        let corr = ArdSqExpCorrelation::new(self.hyper.lengthscales())?;
        let scale = 1.0 - self.hyper.nugget;
        let train = as_columns(&self.inputs);
        let test = as_columns(new_inputs);
        let cross = DMatrix::from_fn(new_inputs.nrows(), self.inputs.nrows(), |i, j| {
            scale * corr.eval(test.column(i).as_slice(), train.column(j).as_slice())
        });
        let h_new = self.trend.design(new_inputs);
        Ok((cross, h_new))
    }

    /// Predictive mean and full covariance at `new_inputs`:
    ///
    /// `m* = H*β̂ + K* K⁻¹ (y - Hβ̂)`,
    /// `Σ* = K** - K* K⁻¹ K*ᵀ + Pᵀ (Hᵀ K⁻¹ H)⁻¹ P` with `P = H*ᵀ - Hᵀ K⁻¹ K*ᵀ`.
    pub fn predict(&self, new_inputs: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (cross, h_new) = self.correlation_parts(new_inputs)?;
        let mean = &h_new * &self.cache.beta + &cross * &self.cache.alpha;
        let corr = ArdSqExpCorrelation::new(self.hyper.lengthscales())?;
        let mut k_new = crate::kernels::gram_matrix(&corr, new_inputs)?;
        k_new *= 1.0 - self.hyper.nugget;
        for i in 0..k_new.nrows() {
            k_new[(i, i)] += self.hyper.nugget;
        }
        let mut v = cross.transpose();
        self.cache.chol.solve_lower_in_place(&mut v);
        let p = h_new.transpose() - self.cache.rinv_h.transpose() * cross.transpose();
        let tp = self.cache.trend_chol.solve(&p);
        let cov = (k_new - v.transpose() * &v + p.transpose() * tp) * self.hyper.variance();
        Ok((mean, symmetrize(&cov)))
    }

    /// Predictive means and marginal variances, without forming the full covariance.
    pub fn predict_marginal(&self, new_inputs: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let (cross, h_new) = self.correlation_parts(new_inputs)?;
        let mean = &h_new * &self.cache.beta + &cross * &self.cache.alpha;
        let mut v = cross.transpose();
        self.cache.chol.solve_lower_in_place(&mut v);
        let p = h_new.transpose() - self.cache.rinv_h.transpose() * cross.transpose();
        let tp = self.cache.trend_chol.solve(&p);
        let sigma2 = self.hyper.variance();
        let var = DVector::from_fn(new_inputs.nrows(), |i, _| {
            let prior = 1.0;
            let explained = v.column(i).norm_squared();
            let trend = p.column(i).dot(&tp.column(i));
            // exact zero at ν = 0 training points comes out as ±roundoff
            ((prior - explained + trend) * sigma2).max(0.0)
        });
        Ok((mean, var))
    }

    pub fn predict_mean(&self, new_inputs: &DMatrix<f64>) -> Result<DVector<f64>> {
        let (cross, h_new) = self.correlation_parts(new_inputs)?;
        Ok(&h_new * &self.cache.beta + &cross * &self.cache.alpha)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Fits the emulator by maximizing the profile likelihood over log-lengthscales
/// (and the nugget when [`NuggetPolicy::Optimized`]).
///
/// Each lengthscale is searched in `[1e-3·range, 10·range]` for that input's range.
/// Starts are deterministic given `options.seed`; the first start sits at
/// `0.5·range·√d`.
pub fn fit(data: &Dataset, options: &FitOptions) -> Result<GpModel> {
    let trend = TrendBasis::new(options.trend, data.input_dim());
    let (x, y) = check_sizes(data, &trend)?;
    let n = x.nrows();
    let d = x.ncols();
    if n < trend.len() + 2 {
        return Err(EmulationError::InvalidInput(format!(
            "need at least {} samples for a trend with {} terms",
            trend.len() + 2,
            trend.len()
        )));
    }
    let (free_nugget, fixed_nugget, floor) = match options.nugget {
        NuggetPolicy::Fixed(v) => {
            if !(0.0..=NUGGET_MAX).contains(&v) {
                return Err(EmulationError::InvalidConfig(format!("fixed nugget {v} outside [0, {NUGGET_MAX}]")));
            }
            (false, v, v)
        }
        NuggetPolicy::Optimized(floor) => {
            if !(floor > 0.0 && floor < NUGGET_MAX) {
                return Err(EmulationError::InvalidConfig(format!(
                    "nugget floor must lie in (0, {NUGGET_MAX}), got {floor}"
                )));
            }
            (true, floor, floor)
        }
    };
    if options.starts == 0 {
        return Err(EmulationError::InvalidConfig("at least one optimizer start is required".into()));
    }

    let mut ranges = Vec::with_capacity(d);
    for j in 0..d {
        let col = x.column(j);
        let range = col.max() - col.min();
        if !(range > 0.0) {
            return Err(EmulationError::InvalidInput(format!("input {j} has zero spread")));
        }
        ranges.push(range);
    }
    if !free_nugget && fixed_nugget == 0.0 {
        check_conflicting_duplicates(&x, &y)?;
    }

    let ws = Workspace::new(&x, &y, &trend);
    let bounds = Bounds {
        lo: ranges.iter().map(|r| (1e-3 * r).ln()).collect(),
        hi: ranges.iter().map(|r| (10.0 * r).ln()).collect(),
        log_nugget_lo: floor.ln(),
        free_nugget,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let spread = (d as f64).sqrt();
    let starts: Vec<Vec<f64>> = (0..options.starts)
        .map(|s| {
            let ll: Vec<f64> = ranges
                .iter()
                .enumerate()
                .map(|(k, r)| {
                    let centre = (0.5 * r * spread).ln();
                    let jitter = if s == 0 { 0.0 } else { rng.random_range(-1.5..1.5) };
                    (centre + jitter).clamp(bounds.lo[k] + 1e-3, bounds.hi[k] - 1e-3)
                })
                .collect();
            let nugget = if free_nugget {
                let lo = floor.ln();
                let hi = NUGGET_MAX.ln();
                if s == 0 { (lo + 0.25 * (hi - lo)).exp() } else { rng.random_range(lo..hi).exp() }
            } else {
                fixed_nugget
            };
            bounds.encode(&ll, nugget)
        })
        .collect();

    let objective = |z: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (ll, nu, jac) = bounds.decode(z);
        let nugget = if free_nugget { nu } else { fixed_nugget };
        let (value, _, grad) = profile_with_gradient(&ws, &ll, nugget, true, free_nugget)?;
        let g: Vec<f64> = grad.iter().zip(&jac).map(|(g, j)| -g * j).collect();
        Ok((-value, g))
    };

    let results: Vec<Result<optim::Minimum>> = starts
        .into_par_iter()
        .map(|z0| optim::minimize(&objective, z0, options.max_iters))
        .collect();
    let mut best: Option<optim::Minimum> = None;
    let mut last_err = None;
    for r in results {
        match r {
            Ok(min) => {
                if best.as_ref().is_none_or(|b| min.value < b.value) {
                    best = Some(min);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let best = best.ok_or_else(|| {
        EmulationError::Fit(format!(
            "every optimizer start failed; last error: {}",
            last_err.map_or_else(|| "none".to_string(), |e| e.to_string())
        ))
    })?;

    let (ll, nu, _) = bounds.decode(&best.point);
    let nugget = if free_nugget { nu } else { fixed_nugget };
    let (_, sigma2, _) = profile_with_gradient(&ws, &ll, nugget, false, false)?;
    let hyper = GpHyperparameters {
        log_lengthscales: DVector::from_vec(ll),
        log_variance: sigma2.ln(),
        nugget,
    };
    GpModel::assemble(hyper, trend, x, y)
}

fn check_conflicting_duplicates(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    let rows = as_columns(x);
    for j in 1..x.nrows() {
        for i in 0..j {
            if rows.column(i) == rows.column(j) && y[i] != y[j] {
                return Err(EmulationError::Fit(format!(
                    "rows {i} and {j} share inputs but differ in output; an interpolating \
                     emulator cannot fit them, use a positive nugget"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn hand_dataset() -> Dataset {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 1.3]);
        let y = DVector::from_vec(vec![1.0, 0.2, -0.7]);
        Dataset::scalar(x, y).unwrap()
    }

    /// Restricted likelihood evaluated with explicit inverses and determinants.
    fn dense_restricted(x: &DMatrix<f64>, y: &DVector<f64>, delta: &[f64], nugget: f64, sigma2: f64, linear: bool) -> f64 {
        let n = x.nrows();
        let corr = ArdSqExpCorrelation::new(DVector::from_column_slice(delta)).unwrap();
        let c = crate::kernels::gram_matrix(&corr, x).unwrap();
        let k = (c * (1.0 - nugget) + DMatrix::identity(n, n) * nugget) * sigma2;
        let h = if linear {
            let mut h = DMatrix::from_element(n, 1 + x.ncols(), 1.0);
            h.columns_mut(1, x.ncols()).copy_from(x);
            h
        } else {
            DMatrix::from_element(n, 1, 1.0)
        };
        let q = h.ncols();
        let kinv = k.clone().try_inverse().unwrap();
        let a = h.transpose() * &kinv * &h;
        let beta = a.clone().try_inverse().unwrap() * h.transpose() * &kinv * y;
        let r = y - &h * beta;
        let quad = (r.transpose() * &kinv * &r)[(0, 0)];
        -0.5 * quad - 0.5 * k.determinant().ln() - 0.5 * a.determinant().ln()
            - 0.5 * (n - q) as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn likelihood_matches_dense_oracle() {
        let data = hand_dataset();
        let trend = TrendBasis::new(TrendKind::Constant, 1);
        let hyper = GpHyperparameters { log_lengthscales: DVector::from_element(1, 0.8f64.ln()), log_variance: 1.7f64.ln(), nugget: 0.0 };
        let ours = log_marginal_likelihood(&hyper, &trend, &data).unwrap();
        let oracle = dense_restricted(data.inputs(), &data.response(), &[0.8], 0.0, 1.7, false);
        assert!((ours - oracle).abs() < 1e-10, "{ours} vs {oracle}");

        let lin = TrendBasis::new(TrendKind::Linear, 1);
        let hyper = GpHyperparameters { nugget: 0.1, ..hyper };
        let ours = log_marginal_likelihood(&hyper, &lin, &data).unwrap();
        let oracle = dense_restricted(data.inputs(), &data.response(), &[0.8], 0.1, 1.7, true);
        assert!((ours - oracle).abs() < 1e-10);
    }

    #[test]
    fn profile_is_likelihood_at_profiled_variance() {
        let data = hand_dataset();
        let trend = TrendBasis::new(TrendKind::Constant, 1);
        let ll = DVector::from_element(1, 0.3);
        let (value, sigma2) = profile_log_likelihood(&ll, 0.0, &trend, &data).unwrap();
        let hyper = GpHyperparameters { log_lengthscales: ll, log_variance: sigma2.ln(), nugget: 0.0 };
        assert!((log_marginal_likelihood(&hyper, &trend, &data).unwrap() - value).abs() < 1e-12);
        for factor in [0.5, 2.0] {
            let other = GpHyperparameters { log_variance: (sigma2 * factor).ln(), ..hyper.clone() };
            assert!(log_marginal_likelihood(&other, &trend, &data).unwrap() < value);
        }
    }

    #[test]
    fn profiled_variance_scales_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(12, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(12, |i, _| x[(i, 0)].sin() + x[(i, 1)]);
        let trend = TrendBasis::new(TrendKind::Linear, 2);
        let ll = DVector::from_vec(vec![0.2, 0.5]);
        let base = profile_log_likelihood(&ll, 1e-8, &trend, &Dataset::scalar(x.clone(), y.clone()).unwrap()).unwrap().1;
        let c = 3.5;
        let scaled = profile_log_likelihood(&ll, 1e-8, &trend, &Dataset::scalar(x, y * c).unwrap()).unwrap().1;
        assert!((scaled / base - c * c).abs() < 1e-9 * c * c);
    }

    #[test]
    fn nugget_continuity() {
        let data = hand_dataset();
        let trend = TrendBasis::new(TrendKind::Constant, 1);
        let mk = |nugget| GpHyperparameters { log_lengthscales: DVector::from_element(1, 0.0), log_variance: 0.0, nugget };
        let a = log_marginal_likelihood(&mk(0.0), &trend, &data).unwrap();
        let b = log_marginal_likelihood(&mk(1e-12), &trend, &data).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn likelihood_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(15, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(15, |i, _| x[(i, 0)] * x[(i, 2)]);
        let data = Dataset::scalar(x, y).unwrap();
        let hyper = GpHyperparameters { log_lengthscales: DVector::from_vec(vec![0.1, 0.4, -0.2]), log_variance: 0.3, nugget: 1e-6 };
        let trend = TrendBasis::new(TrendKind::Linear, 3);
        let a = log_marginal_likelihood(&hyper, &trend, &data).unwrap();
        let idx: Vec<usize> = (0..15).rev().collect();
        let b = log_marginal_likelihood(&hyper, &trend, &data.subset(&idx)).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..10 {
            let d = 1 + trial % 3;
            let x = DMatrix::from_fn(18, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = DVector::from_fn(18, |i, _| (x[(i, 0)] * 1.3).sin() + 0.1 * rng.sample::<f64, _>(StandardNormal));
            let trend = TrendBasis::new(if trial % 2 == 0 { TrendKind::Linear } else { TrendKind::Constant }, d);
            let ws = Workspace::new(&x, &y, &trend);
            let ll: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..1.0)).collect();
            let nugget = rng.random_range(0.01..0.2);
            let (_, _, grad) = profile_with_gradient(&ws, &ll, nugget, true, true).unwrap();
            let h = 1e-5;
            for k in 0..=d {
                let eval = |delta: f64| {
                    let mut p = ll.clone();
                    let mut nu = nugget;
                    if k < d { p[k] += delta } else { nu += delta }
                    profile_with_gradient(&ws, &p, nu, false, false).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = (fd - grad[k]).abs() / fd.abs().max(1.0);
                assert!(rel < 1e-5, "trial {trial} param {k}: fd {fd} analytic {}", grad[k]);
            }
        }
    }

    /// Weak-prior predictive mean and covariance with explicit inverses.
    fn dense_predict(x: &DMatrix<f64>, y: &DVector<f64>, xs: &DMatrix<f64>, delta: &[f64], sigma2: f64) -> (DVector<f64>, DMatrix<f64>) {
        let corr = ArdSqExpCorrelation::new(DVector::from_column_slice(delta)).unwrap();
        let k = crate::kernels::gram_matrix(&corr, x).unwrap() * sigma2;
        let ks = crate::kernels::cross_gram_matrix(&corr, xs, x).unwrap() * sigma2;
        let kss = crate::kernels::gram_matrix(&corr, xs).unwrap() * sigma2;
        // textbook layout: H is q x n
        let h = DMatrix::from_fn(2, x.nrows(), |i, j| if i == 0 { 1.0 } else { x[(j, 0)] });
        let hs = DMatrix::from_fn(2, xs.nrows(), |i, j| if i == 0 { 1.0 } else { xs[(j, 0)] });
        let kinv = k.try_inverse().unwrap();
        let a_inv = (&h * &kinv * h.transpose()).try_inverse().unwrap();
        let beta = &a_inv * &h * &kinv * y;
        let mean = hs.transpose() * &beta + &ks * &kinv * (y - h.transpose() * &beta);
        let p = &hs - &h * &kinv * ks.transpose();
        let cov = kss - &ks * &kinv * ks.transpose() + p.transpose() * a_inv * p;
        (mean, cov)
    }

    #[test]
    fn prediction_matches_dense_oracle() {
        let data = hand_dataset();
        let hyper = GpHyperparameters { log_lengthscales: DVector::from_element(1, 0.9f64.ln()), log_variance: 2.5f64.ln(), nugget: 0.0 };
        let model = GpModel::assemble(hyper, TrendBasis::new(TrendKind::Linear, 1), data.inputs().clone(), data.response()).unwrap();
        let xs = DMatrix::from_row_slice(1, 1, &[0.8]);
        let (mean, cov) = model.predict(&xs).unwrap();
        let (om, oc) = dense_predict(data.inputs(), &data.response(), &xs, &[0.9], 2.5);
        assert!((mean[0] - om[0]).abs() < 1e-10);
        assert!((cov[(0, 0)] - oc[(0, 0)]).abs() < 1e-10);
        let (mm, var) = model.predict_marginal(&xs).unwrap();
        assert!((mm[0] - om[0]).abs() < 1e-10 && (var[0] - oc[(0, 0)]).abs() < 1e-10);
    }

    #[test]
    fn interpolates_without_nugget() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(30, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(30, |i, _| (x[(i, 0)] + 0.5 * x[(i, 1)]).sin() + 2.0);
        let data = Dataset::scalar(x.clone(), y.clone()).unwrap();
        let model = fit(&data, &FitOptions { nugget: NuggetPolicy::Fixed(0.0), ..Default::default() }).unwrap();
        let (mean, cov) = model.predict(&x).unwrap();
        let sigma2 = model.hyperparameters().variance();
        for i in 0..30 {
            assert!((mean[i] - y[i]).abs() <= 1e-6 * y[i].abs().max(1e-12));
            assert!(cov[(i, i)] <= 1e-8 * sigma2);
        }
    }

    #[test]
    fn nugget_breaks_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = DMatrix::from_fn(25, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(25, |i, _| x[(i, 0)].cos() + 0.2 * rng.sample::<f64, _>(StandardNormal));
        let data = Dataset::scalar(x.clone(), y).unwrap();
        let model = fit(&data, &FitOptions { nugget: NuggetPolicy::Optimized(1e-8), ..Default::default() }).unwrap();
        assert!(model.hyperparameters().nugget > 1e-6);
        let (_, var) = model.predict_marginal(&x).unwrap();
        assert!(var.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn constant_outputs() {
        let x = DMatrix::from_fn(8, 1, |i, _| i as f64 * 0.3);
        let data = Dataset::scalar(x, DVector::from_element(8, 4.25)).unwrap();
        let model = fit(&data, &FitOptions { trend: TrendKind::Constant, ..Default::default() }).unwrap();
        assert!((model.trend_coefficients()[0] - 4.25).abs() < 1e-9);
        let floor = sigma2_floor(&DVector::from_element(8, 4.25));
        assert!((model.hyperparameters().variance() - floor).abs() <= 1e-12 * floor.max(1e-300) + floor * 1e-9);
    }

    #[test]
    fn far_field_reverts_to_trend() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = DMatrix::from_fn(20, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(20, |i, _| 1.0 + x[(i, 0)] - 2.0 * x[(i, 1)] + (2.0 * x[(i, 0)]).sin());
        let model = fit(&Dataset::scalar(x, y).unwrap(), &FitOptions::default()).unwrap();
        let far = DMatrix::from_row_slice(1, 2, &[500.0, -300.0]);
        let mean = model.predict_mean(&far).unwrap()[0];
        let trend = model.trend().eval(&[500.0, -300.0]).dot(model.trend_coefficients());
        assert!((mean - trend).abs() <= 1e-3 * model.hyperparameters().variance().sqrt());
    }

    #[test]
    fn recovers_known_lengthscales() {
        let truth = [1.0f64, 2.0];
        let mut errors = Vec::new();
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = DMatrix::from_fn(60, 2, |_, _| rng.random_range(-3.0..3.0));
            let corr = ArdSqExpCorrelation::new(DVector::from_column_slice(&truth)).unwrap();
            let c = crate::kernels::gram_matrix(&corr, &x).unwrap() + DMatrix::identity(60, 60) * 1e-8;
            let l = c.cholesky().unwrap().l();
            let z = DVector::from_fn(60, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = l * z;
            let model = fit(&Dataset::scalar(x, y).unwrap(), &FitOptions { trend: TrendKind::Constant, seed, ..Default::default() }).unwrap();
            let ll = &model.hyperparameters().log_lengthscales;
            errors.push((ll[0] - truth[0].ln()).abs().max((ll[1] - truth[1].ln()).abs()));
        }
        let med = crate::kernels::median_in_place(&mut errors);
        assert!(med <= 0.7, "median log error {med}");
    }

    #[test]
    fn duplicate_rows_need_nugget() {
        let x = DMatrix::from_row_slice(5, 1, &[0.0, 1.0, 1.0, 2.0, 3.0]);
        let y = DVector::from_vec(vec![0.0, 1.0, 1.5, 0.3, 2.0]);
        let data = Dataset::scalar(x, y).unwrap();
        let err = fit(&data, &FitOptions { trend: TrendKind::Constant, nugget: NuggetPolicy::Fixed(0.0), ..Default::default() });
        assert!(matches!(err, Err(EmulationError::Fit(_))));
        assert!(fit(&data, &FitOptions { trend: TrendKind::Constant, nugget: NuggetPolicy::Optimized(1e-8), ..Default::default() }).is_ok());
    }

    #[test]
    fn fit_is_deterministic_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = DMatrix::from_fn(20, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(20, |i, _| x[(i, 0)].exp() - x[(i, 1)]);
        let data = Dataset::scalar(x, y).unwrap();
        let a = fit(&data, &FitOptions { seed: 3, ..Default::default() }).unwrap();
        let b = fit(&data, &FitOptions { seed: 3, ..Default::default() }).unwrap();
        assert_eq!(a.hyperparameters(), b.hyperparameters());
        let restored = GpModel::from_json(&a.to_json().unwrap()).unwrap();
        let xs = DMatrix::from_fn(7, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (m1, c1) = a.predict(&xs).unwrap();
        let (m2, c2) = restored.predict(&xs).unwrap();
        assert!((m1 - m2).abs().max() <= 1e-12);
        assert!((c1 - c2).abs().max() <= 1e-12);
    }

    #[test]
    fn covariance_factor_reproduces_covariance() {
        let data = hand_dataset();
        let hyper = GpHyperparameters { log_lengthscales: DVector::from_element(1, 0.0), log_variance: 0.7, nugget: 0.05 };
        let model = GpModel::assemble(hyper.clone(), TrendBasis::new(TrendKind::Constant, 1), data.inputs().clone(), data.response()).unwrap();
        let l = model.covariance_factor();
        let corr = ArdSqExpCorrelation::new(hyper.lengthscales()).unwrap();
        let c = crate::kernels::gram_matrix(&corr, data.inputs()).unwrap();
        let k = (c * 0.95 + DMatrix::identity(3, 3) * 0.05) * hyper.variance();
        assert!((&l * l.transpose() - &k).abs().max() <= 1e-8 * k.abs().max());
    }

    #[test]
    fn predictive_covariance_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let d = rng.random_range(1..4);
            let n = rng.random_range(6..20);
            let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let hyper = GpHyperparameters {
                log_lengthscales: DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
                log_variance: rng.random_range(-1.0..1.0),
                nugget: if rng.random_bool(0.5) { DEFAULT_NUGGET } else { 0.01 },
            };
            let trend = TrendBasis::new(TrendKind::Linear, d);
            let model = GpModel::assemble(hyper, trend, x, y).unwrap();
            let xs = DMatrix::from_fn(8, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (_, cov) = model.predict(&xs).unwrap();
            assert!((&cov - cov.transpose()).abs().max() <= 1e-12);
            let min = cov.symmetric_eigenvalues().min();
            assert!(min >= -1e-8 * cov.trace().max(1e-300), "min {min} trace {} jitter {} n {n} d {d} hyper {:?}", cov.trace(), model.jitter(), model.hyperparameters());
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let data = hand_dataset();
        let model = fit(&data, &FitOptions { trend: TrendKind::Constant, ..Default::default() }).unwrap();
        assert!(matches!(model.predict(&DMatrix::zeros(1, 2)), Err(EmulationError::InvalidInput(_))));
    }
}
