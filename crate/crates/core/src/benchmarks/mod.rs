//! Test simulators with known structure: an elliptic PDE whose log-coefficient is a
//! truncated Karhunen–Loève expansion, and ridge functions with a planted subspace.

mod elliptic;
mod ridge;

pub use elliptic::{
    build_elliptic, elliptic_gradient, solve_diffusion, solve_elliptic, solve_elliptic_batch, solve_elliptic_refined,
    EllipticProblem, EllipticSpec, KlAmplitude, RightBoundary,
};
pub use ridge::{ridge_batch, ridge_eval, RidgeFunction, RidgeLink};
