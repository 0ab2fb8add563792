//! Gradient-based kernel dimension reduction.
//!
//! The estimator averages, over the samples, the outer products of the kernel estimates of
//! `∂/∂x E[g(Y) | X = x]`:
//!
//! ```text
//! M = (1/n) Σᵢ ∇k(Xᵢ)ᵀ (G_X + nεI)⁻¹ G_Y (G_X + nεI)⁻¹ ∇k(Xᵢ)
//! ```
//!
//! and returns its leading eigenvectors. Bandwidths follow the median heuristic
//! `σ_X = c1·med(X)`, `σ_Y = c2·med(Y)`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{EmulationError, Result};
use crate::kernels::{gram_matrix, median_pairwise_distance, RbfKernel};
use crate::linalg::{orthonormalize_columns, sorted_symmetric_eigen, symmetrize};
use crate::projection::ProjectionResult;

pub use crate::projection::eigenvalue_ratio;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GkdrConfig {
    /// Input bandwidth multiplier.
    pub c1: f64,
    /// Response bandwidth multiplier.
    pub c2: f64,
    /// Regularization εₙ.
    pub eps: f64,
    /// Target dimension.
    pub d: usize,
    /// Center and scale each input column before estimation.
    pub standardize: bool,
}

impl Default for GkdrConfig {
    fn default() -> Self {
        Self { c1: 1.0, c2: 1.0, eps: 1e-5, d: 1, standardize: false }
    }
}

impl GkdrConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        for (name, v) in [("c1", self.c1), ("c2", self.c2), ("eps", self.eps)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(EmulationError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.d == 0 || self.d > m {
            return Err(EmulationError::InvalidConfig(format!(
                "d = {} must lie in [1, {m}]",
                self.d
            )));
        }
        Ok(())
    }
}

/// Bandwidths resolved from the data by the median heuristic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidths {
    pub input: f64,
    pub response: f64,
}

/// `σ_X = c1·med(X)`, `σ_Y = c2·med(Y)`. Constant responses fall back to `σ_Y = c2`
/// with a warning (the response Gram matrix is all ones either way).
pub fn resolve_bandwidths(inputs: &DMatrix<f64>, responses: &DMatrix<f64>, config: &GkdrConfig) -> Result<Bandwidths> {
    let input = config.c1 * median_pairwise_distance(inputs)?;
    let response = match median_pairwise_distance(responses) {
        Ok(med) => config.c2 * med,
        Err(EmulationError::Degenerate(_)) => {
            warn!("all responses are identical; the gKDR matrix carries no information");
            config.c2
        }
        Err(e) => return Err(e),
    };
    Ok(Bandwidths { input, response })
}

/// The gKDR matrix for explicit bandwidths.
///
/// Uses a closed form of the per-sample sum. Writing `A = S⁻¹ G_Y S⁻¹` with
/// `S = G_X + nεI`, the sum equals
/// `(1/(nσ⁴)) [Xᵀ diag(c) X - XᵀV - VᵀX + Xᵀ (A ∘ G_X²) X]`
/// where `c = diag(G_X A G_X)` and `V = (G_X ∘ G_X A) X`. Cost is O(n³ + n²m).
pub fn gkdr_matrix_with_bandwidths(
    inputs: &DMatrix<f64>,
    responses: &DMatrix<f64>,
    bandwidths: Bandwidths,
    eps: f64,
) -> Result<DMatrix<f64>> {
    let n = inputs.nrows();
    if n < 2 {
        return Err(EmulationError::InvalidInput("gKDR needs at least two samples".into()));
    }
    if responses.nrows() != n {
        return Err(EmulationError::InvalidInput("inputs and responses differ in length".into()));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(EmulationError::InvalidConfig(format!("eps must be positive, got {eps}")));
    }
    let kx = RbfKernel::new(bandwidths.input)?;
    let ky = RbfKernel::new(bandwidths.response)?;
    let gx = gram_matrix(&kx, inputs)?;
    let gy = gram_matrix(&ky, responses)?;

    let mut reg = gx.clone();
    for i in 0..n {
        reg[(i, i)] += n as f64 * eps;
    }
    let chol = reg.cholesky().ok_or_else(|| {
        EmulationError::Numerical("regularized input Gram matrix is not positive definite".into())
    })?;
    // A = S⁻¹ G_Y S⁻¹ = S⁻¹ (S⁻¹ G_Y)ᵀ
    let left = chol.solve(&gy);
    let a = symmetrize(&chol.solve(&left.transpose()));

    // translation invariant; centering limits cancellation
    let mean = inputs.row_mean();
    let mut x = inputs.clone();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }

    let ga = &gx * &a;
    let gag = &ga * &gx;
    let weights = DVector::from_fn(n, |i, _| gag[(i, i)]);
    let v = gx.component_mul(&ga) * &x;
    let g2 = &gx * &gx;
    let inner = a.component_mul(&g2);

    let mut xw = x.clone();
    for (i, mut row) in xw.row_iter_mut().enumerate() {
        row *= weights[i];
    }
    let xtv = x.transpose() * &v;
    let total = x.transpose() * xw - &xtv - xtv.transpose() + x.transpose() * (inner * &x);
    let s2 = bandwidths.input * bandwidths.input;
    Ok(symmetrize(&(total / (n as f64 * s2 * s2))))
}

/// The `m x m` gKDR matrix with bandwidths from the median heuristic.
pub fn gkdr_matrix(data: &Dataset, config: &GkdrConfig) -> Result<DMatrix<f64>> {
    let inputs = prepared_inputs(data, config)?.0;
    let bw = resolve_bandwidths(&inputs, data.responses(), config)?;
    gkdr_matrix_with_bandwidths(&inputs, data.responses(), bw, config.eps)
}

/// Inputs as used by the estimator, plus the per-column scales applied (all ones unless
/// standardizing).
fn prepared_inputs(data: &Dataset, config: &GkdrConfig) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let m = data.input_dim();
    config.validate(m)?;
    if data.len() < 2 {
        return Err(EmulationError::InvalidInput("gKDR needs at least two samples".into()));
    }
    if !config.standardize {
        return Ok((data.inputs().clone(), DVector::from_element(m, 1.0)));
    }
    let x = data.inputs();
    let n = x.nrows() as f64;
    let mut out = x.clone();
    let mut scales = DVector::zeros(m);
    for j in 0..m {
        let col = x.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        scales[j] = sd;
        for i in 0..x.nrows() {
            out[(i, j)] = (x[(i, j)] - mean) / sd;
        }
    }
    Ok((out, scales))
}

/// Leading eigenvectors of the gKDR matrix.
pub fn estimate_projection(data: &Dataset, config: &GkdrConfig) -> Result<ProjectionResult> {
    let (inputs, scales) = prepared_inputs(data, config)?;
    let bw = resolve_bandwidths(&inputs, data.responses(), config)?;
    let matrix = gkdr_matrix_with_bandwidths(&inputs, data.responses(), bw, config.eps)?;
    if !config.standardize {
        return ProjectionResult::from_symmetric("gkdr", &matrix, config.d);
    }
    // directions estimated on z = D⁻¹(x - μ) act on x through D⁻¹
    let (values, vectors) = sorted_symmetric_eigen(&matrix);
    let mut back = vectors;
    for (j, s) in scales.iter().enumerate() {
        back.row_mut(j).scale_mut(1.0 / s);
    }
    let mut directions = orthonormalize_columns(&back);
    for mut col in directions.column_iter_mut() {
        let pivot = col.iter().cloned().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
    let mut out = ProjectionResult::new("gkdr", directions, values, config.d)?;
    debug_assert!(out.matrix_trace().is_finite());
    out.method = "gkdr".into();
    Ok(out)
}
