use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::design::gaussian_sample;
use crate::error::{EmulationError, Result};
use crate::linalg::{check_orthonormal, orthonormalize_columns};

/// Smooth maps `ℝ^d → ℝ` applied to the reduced coordinates `z = Bᵀx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RidgeLink {
    /// `Σ zₖ`
    Identity,
    /// `Σ zₖ²`
    Square,
    /// `sin z₁ + z₂² + Σ_{k>2} zₖ` (needs d ≥ 2)
    SinSquare,
    /// `Σ sin zₖ`
    Sin,
}

impl RidgeLink {
    pub fn eval(&self, z: &[f64]) -> f64 {
        match self {
            RidgeLink::Identity => z.iter().sum(),
            RidgeLink::Square => z.iter().map(|v| v * v).sum(),
            RidgeLink::SinSquare => z[0].sin() + z[1] * z[1] + z[2..].iter().sum::<f64>(),
            RidgeLink::Sin => z.iter().map(|v| v.sin()).sum(),
        }
    }

    fn min_dim(&self) -> usize {
        match self {
            RidgeLink::SinSquare => 2,
            _ => 1,
        }
    }
}

/// `f(x) = link(Bᵀx) + noise` with a known orthonormal `B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeFunction {
    true_basis: DMatrix<f64>,
    pub link: RidgeLink,
    pub noise_sd: f64,
}

impl RidgeFunction {
    pub fn new(true_basis: DMatrix<f64>, link: RidgeLink, noise_sd: f64) -> Result<Self> {
        check_orthonormal(&true_basis, 1e-8, "ridge basis")?;
        if true_basis.ncols() < link.min_dim() {
            return Err(EmulationError::InvalidConfig(format!(
                "link {link:?} needs at least {} directions",
                link.min_dim()
            )));
        }
        if !(noise_sd.is_finite() && noise_sd >= 0.0) {
            return Err(EmulationError::InvalidConfig(format!("noise sd must be nonnegative, got {noise_sd}")));
        }
        Ok(Self { true_basis, link, noise_sd })
    }

    /// Random orthonormal `m × d` basis (orthonormalized Gaussian matrix).
    pub fn random(m: usize, d: usize, link: RidgeLink, noise_sd: f64, seed: u64) -> Result<Self> {
        if d == 0 || d > m {
            return Err(EmulationError::InvalidConfig(format!("d = {d} must lie in [1, {m}]")));
        }
        let g = gaussian_sample(m, d, seed)?;
        Self::new(orthonormalize_columns(&g), link, noise_sd)
    }

    pub fn true_basis(&self) -> &DMatrix<f64> {
        &self.true_basis
    }

    pub fn input_dim(&self) -> usize {
        self.true_basis.nrows()
    }
}

/// Noise-free value `link(Bᵀx)`.
pub fn ridge_eval(f: &RidgeFunction, x: &DVector<f64>) -> Result<f64> {
    if x.len() != f.input_dim() {
        return Err(EmulationError::InvalidInput(format!(
            "input has {} components, expected {}",
            x.len(),
            f.input_dim()
        )));
    }
    let z = f.true_basis.tr_mul(x);
    Ok(f.link.eval(z.as_slice()))
}

/// `n` standard-normal inputs and their (noisy) responses.
pub fn ridge_batch(f: &RidgeFunction, n: usize, seed: u64) -> Result<Dataset> {
    let x = gaussian_sample(n, f.input_dim(), seed)?;
    let z = &x * &f.true_basis;
    // noise has its own stream so the inputs do not depend on the noise level
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let y = DVector::from_fn(n, |i, _| {
        let clean = f.link.eval(z.row(i).transpose().as_slice());
        if f.noise_sd > 0.0 {
            clean + f.noise_sd * rng.sample::<f64, _>(StandardNormal)
        } else {
            clean
        }
    });
    Dataset::scalar(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_on_first_axis() {
        let mut b = DMatrix::zeros(4, 1);
        b[(0, 0)] = 1.0;
        let f = RidgeFunction::new(b, RidgeLink::Identity, 0.0).unwrap();
        let x = DVector::from_vec(vec![0.7, -3.0, 2.0, 1.0]);
        assert_eq!(ridge_eval(&f, &x).unwrap(), 0.7);
    }

    #[test]
    fn invariant_to_orthogonal_perturbations() {
        let f = RidgeFunction::random(10, 2, RidgeLink::SinSquare, 0.0, 3).unwrap();
        let x = gaussian_sample(1, 10, 4).unwrap().row(0).transpose();
        let g = gaussian_sample(1, 10, 5).unwrap().row(0).transpose();
        let b = f.true_basis();
        let perp = &g - b * b.tr_mul(&g);
        let delta = (ridge_eval(&f, &(&x + perp)).unwrap() - ridge_eval(&f, &x).unwrap()).abs();
        assert!(delta <= 1e-12);
    }

    #[test]
    fn batch_reproducible_and_consistent() {
        let f = RidgeFunction::random(6, 2, RidgeLink::Square, 0.0, 1).unwrap();
        let a = ridge_batch(&f, 30, 9).unwrap();
        assert_eq!(a, ridge_batch(&f, 30, 9).unwrap());
        for i in 0..30 {
            let v = ridge_eval(&f, &a.inputs().row(i).transpose()).unwrap();
            assert_eq!(v, a.responses()[(i, 0)]);
        }
        let noisy = RidgeFunction { noise_sd: 0.1, ..f.clone() };
        let b = ridge_batch(&noisy, 30, 9).unwrap();
        assert_eq!(a.inputs(), b.inputs());
        assert_ne!(a.responses(), b.responses());
    }

    #[test]
    fn invalid_ridges() {
        assert!(RidgeFunction::random(5, 1, RidgeLink::SinSquare, 0.0, 0).is_err());
        assert!(RidgeFunction::random(5, 6, RidgeLink::Sin, 0.0, 0).is_err());
        assert!(RidgeFunction::new(DMatrix::from_element(3, 1, 1.0), RidgeLink::Sin, 0.0).is_err());
        assert!(RidgeFunction::random(5, 2, RidgeLink::Sin, -1.0, 0).is_err());
    }
}
