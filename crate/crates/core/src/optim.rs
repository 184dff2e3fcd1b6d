//! L-BFGS minimization of a smooth objective.

use std::sync::Mutex;

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub max_iters: u64,
    pub grad_tolerance: f64,
    pub memory: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tolerance: 1e-5,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: u64,
}

type Eval = (Vec<f64>, f64, Vec<f64>);

/// Value and gradient at a point.
pub type ObjectiveFn<'a> = dyn Fn(&[f64]) -> (f64, Vec<f64>) + Sync + 'a;

struct Objective<'a> {
    f: &'a ObjectiveFn<'a>,
    last: Mutex<Option<Eval>>,
}

impl Objective<'_> {
    fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut last = self.last.lock().expect("objective cache");
        if let Some((px, v, g)) = last.as_ref() {
            if px.as_slice() == x {
                return (*v, g.clone());
            }
        }
        let (v, g) = (self.f)(x);
        *last = Some((x.to_vec(), v, g.clone()));
        (v, g)
    }
}

impl CostFunction for Objective<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.eval(p).0)
    }
}

impl Gradient for Objective<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, p: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok(self.eval(p).1)
    }
}

/// Minimizes `f` (value and gradient) from `x0`. A non-finite value is an
/// error.
pub fn minimize(f: &ObjectiveFn<'_>, x0: Vec<f64>, cfg: OptimConfig) -> Result<Minimum> {
    let (v0, g0) = f(&x0);
    if !v0.is_finite() || g0.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence(v0));
    }
    if x0.is_empty() || g0.iter().map(|g| g * g).sum::<f64>().sqrt() <= cfg.grad_tolerance {
        return Ok(Minimum {
            x: x0,
            value: v0,
            iterations: 0,
        });
    }
    let problem = Objective {
        f,
        last: Mutex::new(None),
    };
    let linesearch = MoreThuenteLineSearch::new();
    let solver = LBFGS::new(linesearch, cfg.memory)
        .with_tolerance_grad(cfg.grad_tolerance)
        .map_err(|e| Error::Optimizer(e.to_string()))?
        .with_tolerance_cost(0.0)
        .map_err(|e| Error::Optimizer(e.to_string()))?;
    let run = Executor::new(problem, solver)
        .configure(|s| s.param(x0).max_iters(cfg.max_iters))
        .run();
    match run {
        Ok(res) => {
            let state = res.state();
            let x = state
                .get_best_param()
                .cloned()
                .ok_or_else(|| Error::Optimizer("no parameters returned".into()))?;
            let value = state.get_best_cost();
            if !value.is_finite() {
                return Err(Error::Divergence(value));
            }
            Ok(Minimum {
                x,
                value,
                iterations: state.get_iter(),
            })
        }
        Err(e) => {
            log::debug!("line search stopped early: {e}");
            Err(Error::Optimizer(e.to_string()))
        }
    }
}

/// As [`minimize`], but recovers from a failed line search by returning the
/// best finite point seen.
pub fn minimize_robust(
    f: &ObjectiveFn<'_>,
    x0: Vec<f64>,
    cfg: OptimConfig,
) -> Result<Minimum> {
    let best = Mutex::new(None::<(Vec<f64>, f64)>);
    let tracked = |x: &[f64]| {
        let (v, g) = f(x);
        if v.is_finite() {
            let mut b = best.lock().expect("best point");
            if b.as_ref().is_none_or(|(_, bv)| v < *bv) {
                *b = Some((x.to_vec(), v));
            }
        }
        (v, g)
    };
    match minimize(&tracked, x0, cfg) {
        Err(Error::Optimizer(msg)) => {
            let (x, value) = best
                .into_inner()
                .expect("best point")
                .ok_or(Error::Optimizer(msg))?;
            Ok(Minimum {
                x,
                value,
                iterations: cfg.max_iters,
            })
        }
        other => other,
    }
}
