//! Thin wrapper around argmin's L-BFGS for smooth objectives that return their value
//! and gradient together.

use std::cell::{Cell, RefCell};

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;

use crate::error::{EmulationError, Result};

/// Consecutive evaluations without a relative improvement above [`STALL_RTOL`] after
/// which the search stops. Near a flat optimum the objective only changes at roundoff
/// level and the line search would otherwise keep probing until `max_iters`.
const STALL_EVALS: usize = 10;
const STALL_RTOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Minimum {
    pub point: Vec<f64>,
    pub value: f64,
}

struct Objective<'a, F> {
    f: &'a F,
    last: RefCell<Option<(Vec<f64>, f64, Vec<f64>)>>,
    best: RefCell<Option<(Vec<f64>, f64)>>,
    stalled: Cell<usize>,
}

impl<F> Objective<'_, F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn evaluate(&self, p: &[f64]) -> std::result::Result<(f64, Vec<f64>), argmin::core::Error> {
        if let Some((x, v, g)) = self.last.borrow().as_ref() {
            if x.as_slice() == p {
                return Ok((*v, g.clone()));
            }
        }
        let (v, g) = (self.f)(p).map_err(|e| argmin::core::Error::msg(e.to_string()))?;
        if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(argmin::core::Error::msg("objective is not finite"));
        }
        let mut best = self.best.borrow_mut();
        let significant = best.as_ref().is_none_or(|(_, b)| v < b - STALL_RTOL * (1.0 + b.abs()));
        if best.as_ref().is_none_or(|(_, b)| v < *b) {
            *best = Some((p.to_vec(), v));
        }
        self.stalled.set(if significant { 0 } else { self.stalled.get() + 1 });
        if self.stalled.get() >= STALL_EVALS {
            return Err(argmin::core::Error::msg("no further progress"));
        }
        *self.last.borrow_mut() = Some((p.to_vec(), v, g.clone()));
        Ok((v, g))
    }
}

impl<F> CostFunction for Objective<'_, F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.evaluate(p)?.0)
    }
}

impl<F> Gradient for Objective<'_, F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, p: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok(self.evaluate(p)?.1)
    }
}

/// Minimizes `f` from `start` with L-BFGS (memory 7, More-Thuente line search).
///
/// Line-search breakdowns and stalls are not fatal: the best point evaluated so far is
/// returned.
pub fn minimize<F>(f: &F, start: Vec<f64>, max_iters: u64) -> Result<Minimum>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let objective = Objective { f, last: RefCell::new(None), best: RefCell::new(None), stalled: Cell::new(0) };
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), 7)
        .with_tolerance_grad(1e-7)
        .and_then(|s| s.with_tolerance_cost(1e-10))
        .map_err(|e| EmulationError::Numerical(e.to_string()))?;
    let outcome = Executor::new(&objective, solver)
        .configure(|state| state.param(start).max_iters(max_iters))
        .run();
    if let Ok(res) = &outcome {
        if let Some(p) = res.state().get_best_param() {
            let v = res.state().get_best_cost();
            if v.is_finite() {
                let best = objective.best.borrow();
                // the solver's notion of best can lag behind the line search's trial points
                if let Some((bp, bv)) = best.as_ref() {
                    if *bv < v {
                        return Ok(Minimum { point: bp.clone(), value: *bv });
                    }
                }
                return Ok(Minimum { point: p.clone(), value: v });
            }
        }
    }
    let best = objective.best.borrow();
    match best.as_ref() {
        Some((p, v)) => Ok(Minimum { point: p.clone(), value: *v }),
        None => Err(EmulationError::Numerical(match outcome {
            Err(e) => format!("optimizer failed before any successful evaluation: {e}"),
            Ok(_) => "optimizer produced no finite evaluation".into(),
        })),
    }
}

impl<F> CostFunction for &Objective<'_, F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        (*self).cost(p)
    }
}

impl<F> Gradient for &Objective<'_, F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, p: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        (*self).gradient(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (x, y) = (p[0], p[1]);
            let v = (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2);
            let g = vec![-2.0 * (1.0 - x) - 400.0 * x * (y - x * x), 200.0 * (y - x * x)];
            Ok((v, g))
        };
        let min = minimize(&f, vec![-1.2, 1.0], 500).unwrap();
        assert!((min.point[0] - 1.0).abs() < 1e-4 && (min.point[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn stops_on_a_roundoff_plateau() {
        // a flat objective whose value and gradient only carry roundoff-sized noise
        let calls = Cell::new(0u64);
        let f = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            calls.set(calls.get() + 1);
            let noise = ((calls.get() * 7919) % 13) as f64 * 1e-14;
            Ok((-80.0 + noise - 1e-12 * p[0], vec![-1e-5 + noise]))
        };
        let min = minimize(&f, vec![0.0], 1000).unwrap();
        assert!(min.value.is_finite());
        assert!(calls.get() <= 30, "{} evaluations", calls.get());
    }

    #[test]
    fn failing_objective_reports_error() {
        let f = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Err(EmulationError::Numerical("boom".into())) };
        assert!(minimize(&f, vec![0.0], 10).is_err());
    }
}
