//! Positive-definite kernels, Gram matrices and analytic RBF gradients.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EmulationError, Result};

/// Point count above which [`median_pairwise_distance`] works on a subsample.
pub const MEDIAN_EXACT_LIMIT: usize = 2000;
const MEDIAN_SUBSAMPLE_SEED: u64 = 0x6b64_725f_6d65_6469;

/// A stationary kernel evaluated on pairs of points given as slices.
pub trait Kernel {
    fn eval(&self, a: &[f64], b: &[f64]) -> f64;
}

/// Gaussian RBF kernel `exp(-‖x - y‖² / (2σ²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfKernel {
    bandwidth: f64,
}

impl RbfKernel {
    pub fn new(bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(EmulationError::InvalidConfig(format!(
                "RBF bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(Self { bandwidth })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    #[inline]
    pub fn eval_sq_dist(&self, sq_dist: f64) -> f64 {
        (-sq_dist / (2.0 * self.bandwidth * self.bandwidth)).exp()
    }
}

impl Kernel for RbfKernel {
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        self.eval_sq_dist(sq_dist(a, b))
    }
}

/// Squared-exponential correlation with one lengthscale per input dimension,
/// `∏ exp(-(xᵢ - x'ᵢ)² / δᵢ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArdSqExpCorrelation {
    lengthscales: DVector<f64>,
}

impl ArdSqExpCorrelation {
    pub fn new(lengthscales: DVector<f64>) -> Result<Self> {
        if lengthscales.is_empty() || lengthscales.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(EmulationError::InvalidConfig(
                "lengthscales must be positive and finite".into(),
            ));
        }
        Ok(Self { lengthscales })
    }

    pub fn lengthscales(&self) -> &DVector<f64> {
        &self.lengthscales
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }
}

impl Kernel for ArdSqExpCorrelation {
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let s: f64 = a
            .iter()
            .zip(b)
            .zip(self.lengthscales.iter())
            .map(|((x, y), d)| {
                let r = (x - y) / d;
                r * r
            })
            .sum();
        (-s).exp()
    }
}

/// ARD correlation with a nugget: `ν·1[x = x'] + (1 - ν)·c(x, x')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuggetCorrelation {
    pub base: ArdSqExpCorrelation,
    nugget: f64,
}

impl NuggetCorrelation {
    pub fn new(base: ArdSqExpCorrelation, nugget: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&nugget) {
            return Err(EmulationError::InvalidConfig(format!(
                "nugget must lie in [0, 1), got {nugget}"
            )));
        }
        Ok(Self { base, nugget })
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    /// `(1 - ν)K + νI` on the given point set.
    pub fn correlation_matrix(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut k = gram_matrix(&self.base, points)?;
        k *= 1.0 - self.nugget;
        for i in 0..k.nrows() {
            k[(i, i)] += self.nugget;
        }
        Ok(k)
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_finite(points: &DMatrix<f64>, what: &str) -> Result<()> {
    if points.iter().any(|v| !v.is_finite()) {
        return Err(EmulationError::InvalidInput(format!("{what} has non-finite coordinates")));
    }
    Ok(())
}

/// Points as contiguous rows (the transpose of the row-per-point matrix).
pub(crate) fn as_columns(points: &DMatrix<f64>) -> DMatrix<f64> {
    points.transpose()
}

/// Symmetric Gram matrix `K[i][j] = k(xᵢ, xⱼ)` over the rows of `points`.
pub fn gram_matrix<K: Kernel>(kernel: &K, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_finite(points, "points")?;
    let cols = as_columns(points);
    let n = points.nrows();
    let mut g = DMatrix::zeros(n, n);
    for j in 0..n {
        let pj = cols.column(j);
        for i in 0..=j {
            let v = kernel.eval(cols.column(i).as_slice(), pj.as_slice());
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Cross Gram matrix `K[i][j] = k(aᵢ, bⱼ)`.
pub fn cross_gram_matrix<K: Kernel>(
    kernel: &K,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(EmulationError::InvalidInput(format!(
            "dimension mismatch: {} vs {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    check_finite(a, "points")?;
    check_finite(b, "points")?;
    let ca = as_columns(a);
    let cb = as_columns(b);
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        kernel.eval(ca.column(i).as_slice(), cb.column(j).as_slice())
    }))
}

/// Gradients of `k(Xᵢ, ·)` evaluated at `at`, one row per center:
/// row `i` is `-(at - Xᵢ) / σ² · k(Xᵢ, at)`.
pub fn rbf_gradient_rows(
    kernel: &RbfKernel,
    centers: &DMatrix<f64>,
    at: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if centers.ncols() != at.len() {
        return Err(EmulationError::InvalidInput(format!(
            "point has dimension {} but centers have {}",
            at.len(),
            centers.ncols()
        )));
    }
    check_finite(centers, "centers")?;
    if at.iter().any(|v| !v.is_finite()) {
        return Err(EmulationError::InvalidInput("evaluation point is not finite".into()));
    }
    let s2 = kernel.bandwidth() * kernel.bandwidth();
    let mut out = DMatrix::zeros(centers.nrows(), centers.ncols());
    for i in 0..centers.nrows() {
        let diff = at - centers.row(i).transpose();
        let k = kernel.eval_sq_dist(diff.norm_squared());
        out.set_row(i, &(diff.transpose() * (-k / s2)));
    }
    Ok(out)
}

/// Median of all pairwise Euclidean distances between rows of `points`.
///
/// Exact for up to [`MEDIAN_EXACT_LIMIT`] points; larger inputs use a fixed-seed subsample
/// of that many rows.
pub fn median_pairwise_distance(points: &DMatrix<f64>) -> Result<f64> {
    check_finite(points, "points")?;
    let n = points.nrows();
    if n < 2 {
        return Err(EmulationError::Degenerate(
            "median pairwise distance needs at least two points".into(),
        ));
    }
    let cols = if n > MEDIAN_EXACT_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(MEDIAN_SUBSAMPLE_SEED);
        let mut idx = sample(&mut rng, n, MEDIAN_EXACT_LIMIT).into_vec();
        idx.sort_unstable();
        as_columns(&points.select_rows(&idx))
    } else {
        as_columns(points)
    };
    let k = cols.ncols();
    let mut dists = Vec::with_capacity(k * (k - 1) / 2);
    for j in 1..k {
        for i in 0..j {
            dists.push(sq_dist(cols.column(i).as_slice(), cols.column(j).as_slice()).sqrt());
        }
    }
    let med = median_in_place(&mut dists);
    if !(med > 0.0) {
        if dists.iter().all(|d| *d == 0.0) {
            return Err(EmulationError::Degenerate("all points are identical".into()));
        }
        // more than half of the pairs coincide; fall back to the smallest positive distance
        let positive = dists.iter().cloned().filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min);
        return Ok(positive);
    }
    Ok(med)
}

/// Median of a slice (mean of the two middle values for even lengths). Reorders the slice.
pub(crate) fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    values.sort_by(f64::total_cmp);
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn single_point_gram_is_one() {
        let k = RbfKernel::new(0.7).unwrap();
        let g = gram_matrix(&k, &DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 3.0])).unwrap();
        assert_eq!(g, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn identical_points_give_all_ones() {
        let k = RbfKernel::new(2.0).unwrap();
        let g = gram_matrix(&k, &DMatrix::from_row_slice(2, 2, &[0.3, 0.4, 0.3, 0.4])).unwrap();
        assert_eq!(g, DMatrix::from_element(2, 2, 1.0));
    }

    #[test]
    fn rbf_off_diagonal_value() {
        let k = RbfKernel::new(1.0).unwrap();
        let pts = DMatrix::from_row_slice(2, 1, &[0.0, 2f64.sqrt()]);
        let g = gram_matrix(&k, &pts).unwrap();
        // exp(-(√2)² / 2) = exp(-1)
        assert!((g[(0, 1)] - 0.36787944117144233).abs() < 1e-15);
    }

    #[test]
    fn non_finite_points_rejected() {
        let k = RbfKernel::new(1.0).unwrap();
        let pts = DMatrix::from_row_slice(2, 1, &[0.0, f64::NAN]);
        assert!(matches!(gram_matrix(&k, &pts), Err(EmulationError::InvalidInput(_))));
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(RbfKernel::new(0.0).is_err());
        assert!(RbfKernel::new(f64::INFINITY).is_err());
        assert!(ArdSqExpCorrelation::new(DVector::from_vec(vec![1.0, -1.0])).is_err());
        let base = ArdSqExpCorrelation::new(DVector::from_element(2, 1.0)).unwrap();
        assert!(NuggetCorrelation::new(base.clone(), -0.1).is_err());
        assert!(NuggetCorrelation::new(base, 1.0).is_err());
    }

    #[test]
    fn gradient_zero_at_center() {
        let k = RbfKernel::new(0.8).unwrap();
        let centers = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, -1.0]);
        let g = rbf_gradient_rows(&k, &centers, &DVector::from_vec(vec![2.0, -1.0])).unwrap();
        assert_eq!(g[(1, 0)], 0.0);
        assert_eq!(g[(1, 1)], 0.0);
    }

    #[test]
    fn gradient_scalar_hand_value() {
        let k = RbfKernel::new(1.0).unwrap();
        let g = rbf_gradient_rows(&k, &DMatrix::from_element(1, 1, 0.0), &DVector::from_element(1, 1.0))
            .unwrap();
        assert!((g[(0, 0)] + (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let m = rng.random_range(1..6);
            let sigma = rng.random_range(0.3..3.0);
            let k = RbfKernel::new(sigma).unwrap();
            let centers = DMatrix::from_fn(3, m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let g = rbf_gradient_rows(&k, &centers, &x).unwrap();
            let h = 1e-5;
            for i in 0..3 {
                let c = centers.row(i).transpose();
                for a in 0..m {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[a] += h;
                    xm[a] -= h;
                    let fd = (k.eval(c.as_slice(), xp.as_slice()) - k.eval(c.as_slice(), xm.as_slice()))
                        / (2.0 * h);
                    assert!((fd - g[(i, a)]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn median_small_cases() {
        let two = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 3.0, 0.0]);
        assert_eq!(median_pairwise_distance(&two).unwrap(), 3.0);
        let three = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 3.0]);
        assert_eq!(median_pairwise_distance(&three).unwrap(), 2.0);
    }

    #[test]
    fn median_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = DMatrix::from_fn(100, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut all = Vec::new();
        for i in 0..100 {
            for j in (i + 1)..100 {
                all.push((pts.row(i) - pts.row(j)).norm());
            }
        }
        all.sort_by(f64::total_cmp);
        let oracle = 0.5 * (all[all.len() / 2 - 1] + all[all.len() / 2]);
        assert_eq!(median_pairwise_distance(&pts).unwrap(), oracle);
    }

    #[test]
    fn median_degenerate_cases() {
        let same = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(median_pairwise_distance(&same), Err(EmulationError::Degenerate(_))));
        assert!(median_pairwise_distance(&DMatrix::from_element(1, 2, 0.0)).is_err());
    }

    #[test]
    fn median_large_input_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = DMatrix::from_fn(2100, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = median_pairwise_distance(&pts).unwrap();
        let b = median_pairwise_distance(&pts).unwrap();
        assert_eq!(a, b);
        // two-dimensional standard normal: distance is Rayleigh(√2), median ≈ 1.665
        assert!((a - 1.665).abs() < 0.05);
    }

    #[test]
    fn ard_with_equal_lengthscales_is_rbf() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = DMatrix::from_fn(12, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let delta = 1.7;
        let ard = ArdSqExpCorrelation::new(DVector::from_element(3, delta)).unwrap();
        let rbf = RbfKernel::new((delta * delta / 2.0).sqrt()).unwrap();
        let a = gram_matrix(&ard, &pts).unwrap();
        let b = gram_matrix(&rbf, &pts).unwrap();
        assert!((a - b).abs().max() < 1e-12);
    }

    #[test]
    fn nugget_matrix_is_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = DMatrix::from_fn(6, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let base = ArdSqExpCorrelation::new(DVector::from_vec(vec![0.5, 2.0])).unwrap();
        let k = gram_matrix(&base, &pts).unwrap();
        let nug = NuggetCorrelation::new(base, 0.2).unwrap();
        let expected = &k * 0.8 + DMatrix::identity(6, 6) * 0.2;
        assert!((nug.correlation_matrix(&pts).unwrap() - expected).abs().max() < 1e-15);
    }

    proptest! {
        #[test]
        fn gram_is_symmetric_psd(
            seed in 0u64..1000,
            n in 1usize..15,
            m in 1usize..5,
            sigma in 0.1f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let g = gram_matrix(&RbfKernel::new(sigma).unwrap(), &pts).unwrap();
            prop_assert!((&g - g.transpose()).abs().max() <= 1e-12);
            // entries are positive in exact arithmetic but may underflow for tiny bandwidths
            prop_assert!(g.iter().all(|v| *v >= 0.0 && *v <= 1.0));
            prop_assert!((0..n).all(|i| g[(i, i)] == 1.0));
            let min_eig = crate::linalg::symmetrize(&g).symmetric_eigenvalues().min();
            prop_assert!(min_eig >= -1e-9);

            let lens = DVector::from_fn(m, |_, _| rng.random_range(0.2..3.0));
            let c = gram_matrix(&ArdSqExpCorrelation::new(lens).unwrap(), &pts).unwrap();
            prop_assert!((&c - c.transpose()).abs().max() <= 1e-12);
            prop_assert!(crate::linalg::symmetrize(&c).symmetric_eigenvalues().min() >= -1e-9);
        }
    }
}
