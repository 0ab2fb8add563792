//! Classical subspace estimators used as comparison points: sliced inverse regression
//! (SIR), its second-moment variant SIR-II, sliced average variance estimation (SAVE),
//! and active subspaces from supplied or finite-difference gradients.
//!
//! The sliced methods work on standardized inputs `Z = (X - x̄) Σ̂^{-1/2}`; their
//! eigenvectors are mapped back through `Σ̂^{-1/2}` and orthonormalized in order.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{EmulationError, Result};
use crate::linalg::{orthonormalize_columns, sorted_symmetric_eigen, symmetrize};
use crate::projection::ProjectionResult;

/// Equal-frequency slicing of the sorted responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub num_slices: usize,
}

impl Default for SliceSpec {
    fn default() -> Self {
        Self { num_slices: 10 }
    }
}

impl SliceSpec {
    pub fn new(num_slices: usize) -> Result<Self> {
        if num_slices < 2 {
            return Err(EmulationError::InvalidConfig(format!(
                "need at least two slices, got {num_slices}"
            )));
        }
        Ok(Self { num_slices })
    }

    /// Index sets of the slices: responses sorted stably, then cut into `H` runs whose
    /// sizes differ by at most one.
    pub fn assign(&self, y: &DVector<f64>) -> Result<Vec<Vec<usize>>> {
        let n = y.len();
        let h = self.num_slices;
        if h < 2 {
            return Err(EmulationError::InvalidConfig("need at least two slices".into()));
        }
        if n < 2 * h {
            return Err(EmulationError::InvalidInput(format!(
                "{n} samples are too few for {h} slices (need {})",
                2 * h
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
        let base = n / h;
        let extra = n % h;
        let mut slices = Vec::with_capacity(h);
        let mut start = 0;
        for s in 0..h {
            let len = base + usize::from(s < extra);
            slices.push(order[start..start + len].to_vec());
            start += len;
        }
        Ok(slices)
    }
}

/// Centered inputs, the standardized copy, and `Σ̂^{-1/2}`.
struct Standardized {
    z: DMatrix<f64>,
    inv_sqrt: DMatrix<f64>,
}

fn standardize(x: &DMatrix<f64>) -> Result<Standardized> {
    let n = x.nrows();
    let m = x.ncols();
    if n < 2 {
        return Err(EmulationError::InvalidInput("need at least two samples".into()));
    }
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let (vals, vecs) = sorted_symmetric_eigen(&cov);
    let trace = cov.trace();
    if !(trace > 0.0) {
        return Err(EmulationError::Degenerate("inputs have zero variance".into()));
    }
    if vals[m - 1] <= 1e-10 * trace / m as f64 {
        warn!("input covariance is (near) singular; adding a ridge of 1e-8·trace/m");
        for i in 0..m {
            cov[(i, i)] += 1e-8 * trace / m as f64;
        }
        return standardize_with(centered, &cov);
    }
    let inv_sqrt = &vecs * DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.sqrt())) * vecs.transpose();
    let inv_sqrt = symmetrize(&inv_sqrt);
    Ok(Standardized { z: &centered * &inv_sqrt, inv_sqrt })
}

fn standardize_with(centered: DMatrix<f64>, cov: &DMatrix<f64>) -> Result<Standardized> {
    let (vals, vecs) = sorted_symmetric_eigen(cov);
    let inv_sqrt = symmetrize(&(&vecs * DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.sqrt())) * vecs.transpose()));
    Ok(Standardized { z: &centered * &inv_sqrt, inv_sqrt })
}

/// Slice means and population covariances of `z`.
fn slice_moments(z: &DMatrix<f64>, slices: &[Vec<usize>]) -> Vec<(f64, DVector<f64>, DMatrix<f64>)> {
    let n = z.nrows() as f64;
    slices
        .iter()
        .map(|idx| {
            let zs = z.select_rows(idx);
            let nh = idx.len() as f64;
            let mean = zs.row_mean().transpose();
            let mut c = zs.clone();
            for mut row in c.row_iter_mut() {
                row -= &mean.transpose();
            }
            let cov = c.transpose() * &c / nh;
            (nh / n, mean, cov)
        })
        .collect()
}

fn finish(method: &str, kernel: DMatrix<f64>, inv_sqrt: &DMatrix<f64>, d: usize) -> Result<ProjectionResult> {
    let m = kernel.nrows();
    if d == 0 || d > m {
        return Err(EmulationError::InvalidConfig(format!("d = {d} must lie in [1, {m}]")));
    }
    let (values, vectors) = sorted_symmetric_eigen(&kernel);
    let mut directions = orthonormalize_columns(&(inv_sqrt * vectors));
    for mut col in directions.column_iter_mut() {
        let pivot = col.iter().cloned().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
    ProjectionResult::new(method, directions, values, d)
}

fn sliced_setup(data: &Dataset, slices: &SliceSpec, d: usize) -> Result<(Standardized, Vec<(f64, DVector<f64>, DMatrix<f64>)>)> {
    let y = data.scalar_response()?;
    let m = data.input_dim();
    if d == 0 || d > m {
        return Err(EmulationError::InvalidConfig(format!("d = {d} must lie in [1, {m}]")));
    }
    let parts = slices.assign(&y)?;
    let st = standardize(data.inputs())?;
    let moments = slice_moments(&st.z, &parts);
    Ok((st, moments))
}

/// Sliced inverse regression: top eigenvectors of `Σ_h p_h z̄_h z̄_hᵀ`.
pub fn sir(data: &Dataset, slices: &SliceSpec, d: usize) -> Result<ProjectionResult> {
    let (st, moments) = sliced_setup(data, slices, d)?;
    let m = data.input_dim();
    let mut kernel = DMatrix::zeros(m, m);
    for (p, mean, _) in &moments {
        kernel.ger(*p, mean, mean, 1.0);
    }
    finish("sir", kernel, &st.inv_sqrt, d)
}

/// SIR-II: top eigenvectors of `Σ_h p_h (V_h - V̄)²` with `V̄ = Σ_h p_h V_h`.
pub fn sir2(data: &Dataset, slices: &SliceSpec, d: usize) -> Result<ProjectionResult> {
    let (st, moments) = sliced_setup(data, slices, d)?;
    let m = data.input_dim();
    let mut avg = DMatrix::zeros(m, m);
    for (p, _, cov) in &moments {
        avg += cov * *p;
    }
    let mut kernel = DMatrix::zeros(m, m);
    for (p, _, cov) in &moments {
        let dev = cov - &avg;
        kernel += &dev * &dev * *p;
    }
    finish("sir2", kernel, &st.inv_sqrt, d)
}

/// Sliced average variance estimation: top eigenvectors of `Σ_h p_h (I - V_h)²`.
pub fn save(data: &Dataset, slices: &SliceSpec, d: usize) -> Result<ProjectionResult> {
    let (st, moments) = sliced_setup(data, slices, d)?;
    let m = data.input_dim();
    let mut kernel = DMatrix::zeros(m, m);
    for (p, _, cov) in &moments {
        let dev = DMatrix::identity(m, m) - cov;
        kernel += &dev * &dev * *p;
    }
    finish("save", kernel, &st.inv_sqrt, d)
}

/// Active subspace from gradient samples: eigenvectors of `(1/n) Σ ∇fᵢ ∇fᵢᵀ`.
pub fn active_subspace(inputs: &DMatrix<f64>, gradients: &DMatrix<f64>, d: usize) -> Result<ProjectionResult> {
    if inputs.shape() != gradients.shape() {
        return Err(EmulationError::InvalidInput(format!(
            "gradients are {:?} but inputs are {:?}",
            gradients.shape(),
            inputs.shape()
        )));
    }
    if gradients.nrows() == 0 {
        return Err(EmulationError::InvalidInput("no gradient samples".into()));
    }
    if gradients.iter().any(|v| !v.is_finite()) {
        return Err(EmulationError::InvalidInput("gradients contain non-finite values".into()));
    }
    let m = gradients.ncols();
    if d == 0 || d > m {
        return Err(EmulationError::InvalidConfig(format!("d = {d} must lie in [1, {m}]")));
    }
    let c = gradients.transpose() * gradients / gradients.nrows() as f64;
    ProjectionResult::from_symmetric("as", &c, d)
}

/// Where gradients for the active subspace come from.
pub enum GradientSource<'a> {
    /// Exact gradient callback.
    Analytic(&'a (dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync)),
    /// Central differences with step `scale·(1 + |xᵢ|)` per component.
    CentralDifference { scale: f64 },
}

/// Default relative step for central-difference gradients.
pub const FD_STEP: f64 = 1e-4;

impl GradientSource<'_> {
    pub fn central(scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(EmulationError::InvalidConfig(format!("finite-difference step must be positive, got {scale}")));
        }
        Ok(GradientSource::CentralDifference { scale })
    }
}

/// Central-difference gradient of `f` at `x` (2m evaluations).
pub fn central_difference<F>(f: &F, x: &DVector<f64>, scale: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64> + ?Sized,
{
    let m = x.len();
    let mut g = DVector::zeros(m);
    let mut probe = x.clone();
    for i in 0..m {
        let h = scale * (1.0 + x[i].abs());
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        // the realized step can differ from h in floating point
        g[i] = (up - down) / ((x[i] + h) - (x[i] - h));
    }
    Ok(g)
}

/// Gradients at every row of `inputs`, computed in parallel; row order is preserved.
pub fn gradients_at<F>(f: &F, inputs: &DMatrix<f64>, source: &GradientSource<'_>) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64> + Sync + ?Sized,
{
    let rows: Vec<Result<DVector<f64>>> = (0..inputs.nrows())
        .into_par_iter()
        .map(|i| {
            let x = inputs.row(i).transpose();
            match source {
                GradientSource::Analytic(grad) => grad(&x),
                GradientSource::CentralDifference { scale } => central_difference(f, &x, *scale),
            }
        })
        .collect();
    let mut out = DMatrix::zeros(inputs.nrows(), inputs.ncols());
    for (i, r) in rows.into_iter().enumerate() {
        let g = r?;
        if g.len() != inputs.ncols() {
            return Err(EmulationError::InvalidInput("gradient has the wrong length".into()));
        }
        out.set_row(i, &g.transpose());
    }
    Ok(out)
}
