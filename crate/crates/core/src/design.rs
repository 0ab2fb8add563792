//! Experimental designs: Latin hypercubes on boxes, i.i.d. standard-normal samples,
//! and lifting of reduced-space designs back to the full input space.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EmulationError, Result};
use crate::linalg::check_orthonormal;

/// A box `[lo, hi]^d`, a design size and a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDesignSpec {
    pub bounds: Vec<(f64, f64)>,
    pub size: usize,
    pub seed: u64,
}

impl BoxDesignSpec {
    pub fn new(bounds: Vec<(f64, f64)>, size: usize, seed: u64) -> Result<Self> {
        let spec = Self { bounds, size, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(EmulationError::InvalidConfig("design size must be at least 1".into()));
        }
        if self.bounds.is_empty() {
            return Err(EmulationError::InvalidConfig("design box has no dimensions".into()));
        }
        for (i, &(lo, hi)) in self.bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(EmulationError::InvalidConfig(format!(
                    "dimension {i}: bounds ({lo}, {hi}) need lo < hi"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }
}

/// Fraction by which [`reduced_box`] widens the data range on each side (in total).
pub const BOX_EXPANSION: f64 = 0.1;

/// Per-column range of `points` widened by 10% (5% on each side). Columns with no
/// spread get a unit-width box around their value.
pub fn reduced_box(points: &DMatrix<f64>) -> Result<Vec<(f64, f64)>> {
    if points.nrows() == 0 {
        return Err(EmulationError::InvalidInput("cannot build a box from no points".into()));
    }
    Ok(points
        .column_iter()
        .map(|col| {
            let lo = col.min();
            let hi = col.max();
            let width = hi - lo;
            if width > 0.0 {
                let pad = 0.5 * BOX_EXPANSION * width;
                (lo - pad, hi + pad)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        })
        .collect())
}

/// Latin hypercube: every dimension has exactly one point in each of the `n`
/// equal-width strata, placed uniformly at random within its stratum.
pub fn latin_hypercube(spec: &BoxDesignSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = DMatrix::zeros(n, spec.dim());
    let mut perm: Vec<usize> = (0..n).collect();
    for (j, &(lo, hi)) in spec.bounds.iter().enumerate() {
        perm.shuffle(&mut rng);
        let width = (hi - lo) / n as f64;
        for (i, &stratum) in perm.iter().enumerate() {
            let u: f64 = rng.random();
            // keep the point strictly inside its stratum even after rounding
            let v = lo + (stratum as f64 + u) * width;
            let upper = lo + (stratum + 1) as f64 * width;
            out[(i, j)] = if v >= upper { lo + (stratum as f64 + 0.5) * width } else { v };
        }
    }
    Ok(out)
}

/// `n × m` matrix of i.i.d. standard normals.
pub fn gaussian_sample(n: usize, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 || m == 0 {
        return Err(EmulationError::InvalidInput(format!("sample shape {n}×{m} is empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // fill row by row so that the first rows do not depend on n
    let mut out = DMatrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            out[(i, j)] = rng.sample(StandardNormal);
        }
    }
    Ok(out)
}

/// How the coordinates orthogonal to the reduced basis are chosen when lifting.
pub trait ComplementSampler {
    /// A full-space vector `g`; only its component orthogonal to the basis is used.
    fn draw(&mut self, dim: usize) -> DVector<f64>;
}

/// Standard-normal draws, projected onto the orthogonal complement.
pub struct NormalComplement {
    rng: ChaCha8Rng,
}

impl NormalComplement {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl ComplementSampler for NormalComplement {
    fn draw(&mut self, dim: usize) -> DVector<f64> {
        DVector::from_fn(dim, |_, _| self.rng.sample(StandardNormal))
    }
}

/// Complement coordinates fixed at zero (points lie in the span of the basis).
pub struct ZeroComplement;

impl ComplementSampler for ZeroComplement {
    fn draw(&mut self, dim: usize) -> DVector<f64> {
        DVector::zeros(dim)
    }
}

/// Lift reduced points `z` to `x = W z + (I − W Wᵀ) g` so that `Wᵀ x = z`.
pub fn preimage_design(
    reduced_points: &DMatrix<f64>,
    basis: &DMatrix<f64>,
    sampler: &mut dyn ComplementSampler,
) -> Result<DMatrix<f64>> {
    check_orthonormal(basis, 1e-8, "lifting basis").map_err(|e| EmulationError::InvalidInput(e.to_string()))?;
    if reduced_points.ncols() != basis.ncols() {
        return Err(EmulationError::InvalidInput(format!(
            "reduced points have {} columns but the basis has {}",
            reduced_points.ncols(),
            basis.ncols()
        )));
    }
    let m = basis.nrows();
    let mut out = reduced_points * basis.transpose();
    for i in 0..out.nrows() {
        let g = sampler.draw(m);
        let perp = &g - basis * (basis.transpose() * &g);
        let mut row = out.row_mut(i);
        row += perp.transpose();
    }
    Ok(out)
}
