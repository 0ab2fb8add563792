use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EmulationError, Result};
use crate::linalg::{check_orthonormal, sorted_symmetric_eigen};

/// Output of every subspace estimator: an ordered orthonormal set of directions with the
/// spectrum of the estimator's kernel matrix.
///
/// `directions` holds at least `dim` columns (all `m` when freshly estimated); the working
/// basis is the first `dim` columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub method: String,
    directions: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    matrix_trace: f64,
    dim: usize,
}

impl ProjectionResult {
    pub fn new(
        method: impl Into<String>,
        directions: DMatrix<f64>,
        eigenvalues: DVector<f64>,
        dim: usize,
    ) -> Result<Self> {
        let (m, k) = directions.shape();
        if dim == 0 || dim > k || k > m {
            return Err(EmulationError::InvalidConfig(format!(
                "target dimension {dim} must lie in [1, {k}] for {m} inputs"
            )));
        }
        check_orthonormal(&directions, 1e-8, "projection directions")?;
        let matrix_trace = eigenvalues.sum();
        Ok(Self { method: method.into(), directions, eigenvalues, matrix_trace, dim })
    }

    /// Directions from the eigendecomposition of a symmetric `m x m` kernel matrix.
    pub fn from_symmetric(method: impl Into<String>, matrix: &DMatrix<f64>, dim: usize) -> Result<Self> {
        let (values, vectors) = sorted_symmetric_eigen(matrix);
        let mut out = Self::new(method, vectors, values, dim)?;
        out.matrix_trace = matrix.trace();
        Ok(out)
    }

    /// Identity projection (no reduction) on `m` inputs.
    pub fn identity(m: usize) -> Self {
        Self {
            method: "identity".into(),
            directions: DMatrix::identity(m, m),
            eigenvalues: DVector::from_element(m, 1.0),
            matrix_trace: m as f64,
            dim: m,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.directions.nrows()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The `m x d` orthonormal basis of the estimated subspace.
    pub fn basis(&self) -> DMatrix<f64> {
        self.directions.columns(0, self.dim).into_owned()
    }

    pub fn directions(&self) -> &DMatrix<f64> {
        &self.directions
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn matrix_trace(&self) -> f64 {
        self.matrix_trace
    }

    /// Same estimate truncated (or extended) to `dim` directions.
    pub fn with_dim(&self, dim: usize) -> Result<Self> {
        if dim == 0 || dim > self.directions.ncols() {
            return Err(EmulationError::InvalidConfig(format!(
                "target dimension {dim} must lie in [1, {}]",
                self.directions.ncols()
            )));
        }
        Ok(Self { dim, ..self.clone() })
    }

    /// Rows of `inputs` projected onto the basis: `X W₁`.
    pub fn project(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if inputs.ncols() != self.input_dim() {
            return Err(EmulationError::InvalidInput(format!(
                "inputs have {} columns, projection expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        Ok(inputs * self.directions.columns(0, self.dim))
    }

    /// Share of the spectrum captured by the leading `d` eigenvalues.
    pub fn eigenvalue_ratio(&self, d: usize) -> Result<f64> {
        eigenvalue_ratio(self.eigenvalues.as_slice(), d)
    }

    /// `λ_d - λ_{d+1}` for each `d` in `1..m` (the eigen-gap diagnostic).
    pub fn eigen_gaps(&self) -> Vec<f64> {
        self.eigenvalues.as_slice().windows(2).map(|w| w[0] - w[1]).collect()
    }
}

/// `Σ_{i≤d} λᵢ / Σᵢ λᵢ` for a descending spectrum, clamped to `[0, 1]`.
pub fn eigenvalue_ratio(eigenvalues: &[f64], d: usize) -> Result<f64> {
    let m = eigenvalues.len();
    if d == 0 || d > m {
        return Err(EmulationError::InvalidConfig(format!("d = {d} outside [1, {m}]")));
    }
    let total: f64 = eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(EmulationError::Degenerate(
            "eigenvalue ratio undefined: spectrum sums to zero".into(),
        ));
    }
    if d == m {
        return Ok(1.0);
    }
    let head: f64 = eigenvalues[..d].iter().sum();
    Ok((head / total).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_examples() {
        assert_eq!(eigenvalue_ratio(&[3.0, 2.0, 1.0], 3).unwrap(), 1.0);
        assert_eq!(eigenvalue_ratio(&[1.0, 0.0, 0.0], 1).unwrap(), 1.0);
        assert!((eigenvalue_ratio(&[3.0, 2.0, 1.0], 2).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!(matches!(eigenvalue_ratio(&[0.0, 0.0], 1), Err(EmulationError::Degenerate(_))));
        assert!(eigenvalue_ratio(&[1.0], 2).is_err());
    }

    #[test]
    fn ratio_is_monotone() {
        let spec = [4.0, 2.5, 2.5, 0.3, 0.0];
        let mut prev = 0.0;
        for d in 1..=5 {
            let r = eigenvalue_ratio(&spec, d).unwrap();
            assert!(r >= prev);
            prev = r;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn truncation_and_projection() {
        let p = ProjectionResult::identity(3).with_dim(2).unwrap();
        let x = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        assert_eq!(p.project(&x).unwrap(), DMatrix::from_row_slice(1, 2, &[1.0, 2.0]));
        assert!(p.with_dim(4).is_err());
        assert!(p.project(&DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn non_orthonormal_directions_rejected() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(ProjectionResult::new("x", bad, DVector::from_vec(vec![1.0, 0.0]), 1).is_err());
    }
}
