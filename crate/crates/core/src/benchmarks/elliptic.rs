use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::FD_STEP;
use crate::error::{EmulationError, Result};
use crate::linalg::symmetrize;

/// Parameters that determine an [`EllipticProblem`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipticSpec {
    /// Cells per side of the unit square.
    pub grid_resolution: usize,
    /// Correlation length β of `exp(-‖s - t‖₁ / β)`.
    pub correlation_length: f64,
    /// Number of retained KL modes (the input dimension).
    pub num_modes: usize,
    /// Recorded for provenance; the problem itself is deterministic.
    pub seed: u64,
    /// How the KL eigenvalues weight the modes.
    #[serde(default)]
    pub amplitude: KlAmplitude,
}

impl EllipticSpec {
    pub fn new(grid_resolution: usize, correlation_length: f64, num_modes: usize, seed: u64) -> Self {
        Self { grid_resolution, correlation_length, num_modes, seed, amplitude: KlAmplitude::default() }
    }
}

/// Weight of mode `i` in the log-coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlAmplitude {
    /// `√γᵢ`: the Karhunen–Loève expansion of a unit-variance Gaussian field, so the
    /// pointwise variance of `log a` sums to the covariance trace.
    #[default]
    Sqrt,
    /// `γᵢ`: the eigenvalue itself (a much smoother, nearly linear problem).
    Linear,
}

/// `-∇·(a∇u) = 1` on the unit square with `log a(s, x) = Σ xᵢ wᵢ φᵢ(s)`, `wᵢ = √γᵢ` by
/// default (see [`KlAmplitude`]), `u = 0` on the
/// left, top and bottom edges and zero flux on the right edge; the output is the
/// average of `u` over the right edge.
///
/// The KL pairs are those of the covariance matrix sampled at cell centres and weighted
/// by the cell area `h²`: `γᵢ` are the eigenvalues of `h² C` (they sum to one) and
/// `φᵢ = vᵢ / h` is orthonormal under `⟨f, g⟩ = h² Σ f g`.
#[derive(Debug, Clone)]
pub struct EllipticProblem {
    pub spec: EllipticSpec,
    pub kl_values: DVector<f64>,
    /// Mode weights `wᵢ` derived from `kl_values`.
    pub kl_weights: DVector<f64>,
    /// `N² × m`, row index `j·N + i` for the cell in column `i` (left to right) and row `j`
    /// (bottom to top).
    pub kl_modes: DMatrix<f64>,
    /// Constant added to the log-coefficient (zero in the benchmark).
    pub log_mean: f64,
    /// Strength of the uniform source (one in the benchmark).
    pub source: f64,
}

/// Boundary condition on the right edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RightBoundary {
    Neumann,
    Dirichlet,
}

/// 1-d eigenpairs of `exp(-|sᵢ - sⱼ| / β)` at the cell centres, descending, each vector
/// signed so that its first non-negligible entry is positive (stable across resolutions,
/// unlike a largest-entry rule, which is ambiguous for antisymmetric modes).
fn correlation_eigen_1d(n: usize, beta: f64) -> (Vec<f64>, DMatrix<f64>) {
    let h = 1.0 / n as f64;
    let c = DMatrix::from_fn(n, n, |i, j| (-(h * (i as f64 - j as f64).abs()) / beta).exp());
    let eig = symmetrize(&c).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut vectors = DMatrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (k, &src) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(src).into_owned();
        let big = v.amax();
        if let Some(first) = v.iter().find(|e| e.abs() > 1e-6 * big) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        vectors.set_column(k, &v);
        values.push(eig.eigenvalues[src].max(0.0));
    }
    (values, vectors)
}

/// Build the KL basis. The `ℓ¹` correlation on a tensor grid is the Kronecker square of the
/// 1-d correlation, so its eigenpairs are products of 1-d pairs; exact ties (the pairs
/// `(a, b)` and `(b, a)`) are ordered by `(a, b)`.
pub fn build_elliptic(spec: EllipticSpec) -> Result<EllipticProblem> {
    let n = spec.grid_resolution;
    if n < 8 {
        return Err(EmulationError::InvalidConfig(format!("grid resolution must be at least 8, got {n}")));
    }
    if !(spec.correlation_length.is_finite() && spec.correlation_length > 0.0) {
        return Err(EmulationError::InvalidConfig(format!(
            "correlation length must be positive, got {}",
            spec.correlation_length
        )));
    }
    let m = spec.num_modes;
    if m == 0 || m > n * n {
        return Err(EmulationError::InvalidConfig(format!("number of modes must lie in [1, {}], got {m}", n * n)));
    }
    let h = 1.0 / n as f64;
    let (lam, vecs) = correlation_eigen_1d(n, spec.correlation_length);
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            pairs.push((h * h * lam[a] * lam[b], a, b));
        }
    }
    pairs.sort_by(|p, q| q.0.total_cmp(&p.0).then((p.1, p.2).cmp(&(q.1, q.2))));
    let mut values = DVector::zeros(m);
    let mut modes = DMatrix::zeros(n * n, m);
    for (k, &(g, a, b)) in pairs.iter().take(m).enumerate() {
        values[k] = g;
        for j in 0..n {
            for i in 0..n {
                modes[(j * n + i, k)] = vecs[(i, a)] * vecs[(j, b)] / h;
            }
        }
    }
    let weights = match spec.amplitude {
        KlAmplitude::Sqrt => values.map(f64::sqrt),
        KlAmplitude::Linear => values.clone(),
    };
    Ok(EllipticProblem { spec, kl_values: values, kl_weights: weights, kl_modes: modes, log_mean: 0.0, source: 1.0 })
}

impl EllipticProblem {
    pub fn input_dim(&self) -> usize {
        self.spec.num_modes
    }

    pub fn grid_resolution(&self) -> usize {
        self.spec.grid_resolution
    }

    /// Cell values of `log a(·, x)`.
    pub fn log_coefficient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(EmulationError::InvalidInput(format!(
                "input has {} components, the problem has {} modes",
                x.len(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(EmulationError::InvalidInput("input contains non-finite values".into()));
        }
        let weights = x.component_mul(&self.kl_weights);
        Ok((&self.kl_modes * weights).add_scalar(self.log_mean))
    }

    /// The same coefficient field on a grid refined by `factor` (each cell split into
    /// `factor²` cells carrying the parent's value).
    pub fn refined_coefficient(&self, x: &DVector<f64>, factor: usize) -> Result<(usize, Vec<f64>)> {
        let n = self.grid_resolution();
        let log_a = self.log_coefficient(x)?;
        let fine = n * factor;
        let mut a = vec![0.0; fine * fine];
        for j in 0..fine {
            for i in 0..fine {
                a[j * fine + i] = log_a[(j / factor) * n + i / factor].exp();
            }
        }
        Ok((fine, a))
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Symmetric positive definite banded matrix stored by rows: row `i` holds columns
/// `i - bandwidth ..= i` contiguously (entries left of column 0 stay zero), so the inner
/// products of the factorization run over contiguous slices.
struct Banded {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl Banded {
    fn zeros(n: usize, bw: usize) -> Self {
        Self { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + self.bw - (i - j)
    }

    fn at(&mut self, i: usize, j: usize) -> &mut f64 {
        let k = self.index(i, j);
        &mut self.data[k]
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.index(i, j)]
    }

    /// In-place Cholesky, then solve `A u = rhs`.
    fn solve(mut self, mut rhs: Vec<f64>) -> Result<Vec<f64>> {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let start = lo.max(j.saturating_sub(bw));
                let (ri, rj) = (self.index(i, start), self.index(j, start));
                let len = j - start;
                let dot: f64 = self.data[ri..ri + len].iter().zip(&self.data[rj..rj + len]).map(|(a, b)| a * b).sum();
                let s = self.get(i, j) - dot;
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(EmulationError::Numerical(format!(
                            "diffusion matrix is not positive definite (pivot {s:e} at row {i})"
                        )));
                    }
                    *self.at(i, i) = s.sqrt();
                } else {
                    *self.at(i, j) = s / self.get(j, j);
                }
            }
        }
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let ri = self.index(i, lo);
            let dot: f64 = self.data[ri..ri + (i - lo)].iter().zip(&rhs[lo..i]).map(|(a, b)| a * b).sum();
            rhs[i] = (rhs[i] - dot) / self.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = rhs[i];
            for q in i + 1..(i + bw + 1).min(n) {
                s -= self.get(q, i) * rhs[q];
            }
            rhs[i] = s / self.get(i, i);
        }
        Ok(rhs)
    }
}

/// Cell-centred finite-volume solve of `-∇·(a∇u) = q` on an `n × n` grid of the unit
/// square: harmonic face averages, `u = 0` on the left, top and bottom edges (imposed
/// half a cell from the centre), and the given condition on the right edge.
/// Returns cell values indexed `j·n + i`.
pub fn solve_diffusion<Q>(n: usize, coefficient: &[f64], source: Q, right: RightBoundary) -> Result<Vec<f64>>
where
    Q: Fn(f64, f64) -> f64,
{
    if coefficient.len() != n * n {
        return Err(EmulationError::InvalidInput(format!(
            "coefficient has {} cells, expected {}",
            coefficient.len(),
            n * n
        )));
    }
    if coefficient.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(EmulationError::Numerical("coefficient must be finite and positive".into()));
    }
    let h = 1.0 / n as f64;
    let mut mat = Banded::zeros(n * n, n);
    let mut rhs = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            let r = j * n + i;
            let a = coefficient[r];
            let mut diag = 0.0;
            // west
            if i == 0 {
                diag += 2.0 * a;
            } else {
                let t = harmonic(a, coefficient[r - 1]);
                diag += t;
                *mat.at(r, r - 1) = -t;
            }
            // east (coupling stored from the other side)
            if i + 1 < n {
                diag += harmonic(a, coefficient[r + 1]);
            } else if right == RightBoundary::Dirichlet {
                diag += 2.0 * a;
            }
            // south
            if j == 0 {
                diag += 2.0 * a;
            } else {
                let t = harmonic(a, coefficient[r - n]);
                diag += t;
                *mat.at(r, r - n) = -t;
            }
            // north
            if j + 1 < n {
                diag += harmonic(a, coefficient[r + n]);
            } else {
                diag += 2.0 * a;
            }
            *mat.at(r, r) = diag;
            rhs[r] = h * h * source((i as f64 + 0.5) * h, (j as f64 + 0.5) * h);
        }
    }
    mat.solve(rhs)
}

fn right_edge_mean(n: usize, u: &[f64]) -> f64 {
    (0..n).map(|j| u[j * n + n - 1]).sum::<f64>() / n as f64
}

/// Output functional `f(x)`: mean of the solution over the right edge.
pub fn solve_elliptic(problem: &EllipticProblem, x: &DVector<f64>) -> Result<f64> {
    let n = problem.grid_resolution();
    let a: Vec<f64> = problem.log_coefficient(x)?.iter().map(|v| v.exp()).collect();
    let q = problem.source;
    let u = solve_diffusion(n, &a, |_, _| q, RightBoundary::Neumann)?;
    Ok(right_edge_mean(n, &u))
}

/// [`solve_elliptic`] on a grid refined by `factor`, with the coefficient held
/// piecewise constant on the original cells.
pub fn solve_elliptic_refined(problem: &EllipticProblem, x: &DVector<f64>, factor: usize) -> Result<f64> {
    if factor == 0 {
        return Err(EmulationError::InvalidConfig("refinement factor must be positive".into()));
    }
    let (n, a) = problem.refined_coefficient(x, factor)?;
    let q = problem.source;
    let u = solve_diffusion(n, &a, |_, _| q, RightBoundary::Neumann)?;
    Ok(right_edge_mean(n, &u))
}

/// Outputs at every row of `inputs` (computed in parallel, order preserved).
pub fn solve_elliptic_batch(problem: &EllipticProblem, inputs: &DMatrix<f64>) -> Result<DVector<f64>> {
    let values: Result<Vec<f64>> = (0..inputs.nrows())
        .into_par_iter()
        .map(|i| solve_elliptic(problem, &inputs.row(i).transpose()))
        .collect();
    Ok(DVector::from_vec(values?))
}

/// Gradient of `f` by central differences, step `1e-4·(1 + |xᵢ|)`.
pub fn elliptic_gradient(problem: &EllipticProblem, x: &DVector<f64>) -> Result<DVector<f64>> {
    problem.log_coefficient(x)?;
    let parts: Result<Vec<f64>> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let h = FD_STEP * (1.0 + x[i].abs());
            let mut probe = x.clone();
            probe[i] = x[i] + h;
            let up = solve_elliptic(problem, &probe)?;
            let hi = probe[i];
            probe[i] = x[i] - h;
            let down = solve_elliptic(problem, &probe)?;
            Ok((up - down) / (hi - probe[i]))
        })
        .collect();
    Ok(DVector::from_vec(parts?))
}
