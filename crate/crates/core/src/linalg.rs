//! Dense linear-algebra helpers shared by the estimators.

use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::{MatMut, MatRef, Par, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{EmulationError, Result};

/// First jitter tried when a covariance factorization fails; escalated by 10x.
pub const JITTER_START: f64 = 1e-10;
/// Largest jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-6;

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
///
/// Each eigenvector is flipped so that its entry of largest magnitude is positive
/// (the first such entry on ties).
pub fn sorted_symmetric_eigen(matrix: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(matrix);
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    // stable sort keeps the solver's order among ties
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = eig.eigenvectors.select_columns(&order);
    for mut col in vectors.column_iter_mut() {
        let mut pivot = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
    }
    (values, vectors)
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(matrix: &DMatrix<f64>) -> DMatrix<f64> {
    (matrix + matrix.transpose()) * 0.5
}

/// Lower Cholesky factor `L` (with `LLᵀ = A`) of a symmetric positive-definite matrix.
///
/// Factorization, triangular solves and the inverse run through faer, which is several
/// times faster than the unblocked nalgebra routines at the sizes the GP fits see.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    l: DMatrix<f64>,
}

fn faer_view(m: &DMatrix<f64>) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(m.as_slice(), m.nrows(), m.ncols())
}

fn faer_view_mut(m: &mut DMatrix<f64>) -> MatMut<'_, f64> {
    let (r, c) = m.shape();
    MatMut::from_column_major_slice_mut(m.as_mut_slice(), r, c)
}

/// Clears the upper halves of the vector registers after a faer kernel.
///
/// Some of faer's wide-vector kernels return with the upper register state dirty. Until
/// that state is cleared, every SSE-encoded libm call (`exp`, `ln`) pays a transition
/// penalty: `exp` becomes ~35× slower, which made building the next correlation matrix
/// the dominant cost of a likelihood evaluation.
#[inline]
fn clear_upper_vector_state() {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx")]
        unsafe fn zeroupper() {
            std::arch::x86_64::_mm256_zeroupper();
        }
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: the CPU supports AVX (checked above), and vzeroupper only zeroes
            // register bits that no live Rust value occupies across this call.
            unsafe { zeroupper() }
        }
    }
}

fn flush_subnormal(v: f64) -> f64 {
    if v.is_subnormal() { 0.0 } else { v }
}

impl SpdFactor {
    /// `None` when the matrix is not numerically positive definite.
    pub fn new(matrix: &DMatrix<f64>) -> Option<Self> {
        let n = matrix.nrows();
        let llt = faer_view(matrix).llt(Side::Lower);
        clear_upper_vector_state();
        let llt = llt.ok()?;
        let lf = llt.L();
        // subnormal entries (they appear for near-singular correlation matrices) are
        // numerically irrelevant but make every later solve several times slower
        let l = DMatrix::from_fn(n, n, |i, j| if i >= j { flush_subnormal(lf[(i, j)]) } else { 0.0 });
        Some(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// The lower-triangular factor.
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Overwrites `b` with `L⁻¹ b`.
    pub fn solve_lower_in_place(&self, b: &mut DMatrix<f64>) {
        solve_lower_triangular_in_place(faer_view(&self.l), faer_view_mut(b), Par::Seq);
        clear_upper_vector_state();
    }

    /// `A⁻¹ b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.solve_lower_in_place(&mut x);
        solve_upper_triangular_in_place(faer_view(&self.l).transpose(), faer_view_mut(&mut x), Par::Seq);
        clear_upper_vector_state();
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let x = self.solve(&DMatrix::from_column_slice(b.len(), 1, b.as_slice()));
        DVector::from_column_slice(x.as_slice())
    }

    /// `ln det A`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// `A⁻¹ = L⁻ᵀ L⁻¹`, symmetrized.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut l_inv = DMatrix::<f64>::identity(n, n);
        self.solve_lower_in_place(&mut l_inv);
        l_inv.apply(|v| *v = flush_subnormal(*v));
        let li = faer_view(&l_inv);
        let prod = li.transpose() * li;
        clear_upper_vector_state();
        DMatrix::from_fn(n, n, |i, j| 0.5 * (prod[(i, j)] + prod[(j, i)]))
    }
}

/// Cholesky factor of a symmetric positive-definite matrix, escalating diagonal jitter
/// from [`JITTER_START`] to [`JITTER_MAX`] (relative to the mean diagonal) on failure.
///
/// Returns the factor and the jitter that was actually added (zero when none was needed).
pub fn cholesky_with_jitter(matrix: &DMatrix<f64>) -> Result<(SpdFactor, f64)> {
    if let Some(chol) = SpdFactor::new(matrix) {
        return Ok((chol, 0.0));
    }
    let n = matrix.nrows();
    let scale = (matrix.trace() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-12) {
        let mut shifted = matrix.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter * scale;
        }
        if let Some(chol) = SpdFactor::new(&shifted) {
            return Ok((chol, jitter * scale));
        }
        jitter *= 10.0;
    }
    Err(EmulationError::Numerical(format!(
        "Cholesky factorization of a {n}x{n} matrix failed even with jitter {JITTER_MAX:e} \
         (mean diagonal {scale:e})"
    )))
}

/// Largest deviation of `BᵀB` from the identity.
pub fn orthonormality_error(basis: &DMatrix<f64>) -> f64 {
    let gram = basis.transpose() * basis;
    let d = gram.nrows();
    let mut worst = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

/// Errors when the columns of `basis` are not orthonormal to `tol`.
pub fn check_orthonormal(basis: &DMatrix<f64>, tol: f64, what: &str) -> Result<()> {
    if basis.iter().any(|v| !v.is_finite()) {
        return Err(EmulationError::InvalidInput(format!("{what} has non-finite entries")));
    }
    let err = orthonormality_error(basis);
    if err > tol {
        return Err(EmulationError::InvalidInput(format!(
            "{what} is not orthonormal (max |BᵀB - I| = {err:e})"
        )));
    }
    Ok(())
}

/// Orthonormalizes columns in order (modified Gram-Schmidt, two passes), so the span of
/// every leading block of columns is preserved.
///
/// Columns that are numerically dependent on their predecessors are replaced with unit
/// vectors completing the basis.
pub fn orthonormalize_columns(matrix: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, k) = matrix.shape();
    let mut q = DMatrix::<f64>::zeros(m, k);
    let scale = matrix.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let mut filled = 0;
    let mut fallback = 0;
    for j in 0..k {
        let mut v = matrix.column(j).into_owned();
        let mut accepted = false;
        for attempt in 0..=m {
            if attempt > 0 {
                if fallback >= m {
                    break;
                }
                v = DVector::zeros(m);
                v[fallback] = 1.0;
                fallback += 1;
            }
            for _ in 0..2 {
                for i in 0..filled {
                    let qi = q.column(i);
                    let proj = qi.dot(&v);
                    v.axpy(-proj, &qi, 1.0);
                }
            }
            let norm = v.norm();
            let threshold = if attempt == 0 { 1e-12 * scale } else { 1e-8 };
            if norm > threshold {
                q.set_column(filled, &(v / norm));
                filled += 1;
                accepted = true;
                break;
            }
        }
        if !accepted {
            break;
        }
    }
    q
}

/// Spectral norm of a symmetric matrix (largest absolute eigenvalue).
pub fn symmetric_spectral_norm(matrix: &DMatrix<f64>) -> f64 {
    symmetrize(matrix)
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_descending_with_positive_pivots() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 5.0]);
        let (vals, vecs) = sorted_symmetric_eigen(&m);
        assert!((vals[0] - 5.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
        assert!((vals[2] - 1.0).abs() < 1e-12);
        for col in vecs.column_iter() {
            let pivot = col.iter().cloned().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn jitter_rescues_singular_matrix() {
        let ones = DMatrix::from_element(4, 4, 1.0);
        let (_, jitter) = cholesky_with_jitter(&ones).unwrap();
        assert!(jitter > 0.0 && jitter <= JITTER_MAX);
    }

    #[test]
    fn jitter_gives_up_on_indefinite_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky_with_jitter(&m), Err(EmulationError::Numerical(_))));
    }

    #[test]
    fn gram_schmidt_preserves_leading_spans() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let q = orthonormalize_columns(&a);
        assert!(orthonormality_error(&q) < 1e-14);
        assert!((q[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((q[(1, 1)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn dependent_columns_are_completed() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 0.0]);
        let q = orthonormalize_columns(&a);
        assert!(orthonormality_error(&q) < 1e-14);
    }

    #[test]
    fn cholesky_inverse_matches_direct() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let chol = SpdFactor::new(&a).unwrap();
        let direct = a.clone().try_inverse().unwrap();
        assert!((chol.inverse() - &direct).abs().max() < 1e-13);
        assert!((chol.l() * chol.l().transpose() - &a).abs().max() < 1e-13);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, -1.0, 0.5, 3.0]);
        assert!((chol.solve(&b) - &direct * &b).abs().max() < 1e-13);
        assert!((chol.log_det() - a.determinant().ln()).abs() < 1e-13);
        assert!(SpdFactor::new(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_none());
    }
}
