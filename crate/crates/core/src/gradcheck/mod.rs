//! Finite-difference validation of analytic gradients.

mod suite;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;

pub use suite::{
    run_check, run_suite, summarize, toy_encoder_config, Check, CheckSummary, SuiteReport,
};

/// Floor on the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Pass threshold on the maximum relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-5,
        }
    }

    /// Central-difference step.
    pub fn step(self) -> f64 {
        match self {
            Precision::F32 => 1e-2,
            Precision::F64 => 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckResult {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the recorded gradient of `f` at `x` with central differences.
///
/// `f` receives a fresh graph and the leaf holding `x`, and must return a
/// single-element node. The result is the maximum over elements of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<T, F>(f: F, x: &[T], shape: &[usize], h: T) -> Result<GradCheckResult>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut graph = Graph::new();
    let xv = graph.param(x.to_vec(), shape.to_vec())?;
    let out = f(&mut graph, xv)?;
    let f0 = graph.scalar(out);
    if graph.value(out).len() != 1 {
        return Err(Error::shape(format!(
            "grad_check needs a scalar function, got shape {:?}",
            graph.shape(out)
        )));
    }
    if !f0.is_finite() {
        return Err(Error::Numeric(format!("f(x) = {f0:?} is not finite")));
    }
    graph.backward(out)?;
    let analytic: Vec<f64> = match graph.grad(xv) {
        Some(g) => g.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; x.len()],
    };

    let eval = |point: Vec<T>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point, shape.to_vec())?;
        let o = f(&mut g, v)?;
        let y = g.scalar(o);
        if !y.is_finite() {
            return Err(Error::Numeric(format!("f is not finite near x: {y:?}")));
        }
        Ok(y.as_f64())
    };

    let mut worst = GradCheckResult {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut point = x.to_vec();
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus_step = point[i];
        let fp = eval(point.clone())?;
        point[i] = orig - h;
        let minus_step = point[i];
        let fm = eval(point.clone())?;
        point[i] = orig;
        // The realized step, which differs from 2h once x ± h is rounded.
        let span = (plus_step - minus_step).as_f64();
        let numeric = (fp - fm) / span;
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > worst.max_rel_error || i == 0 {
            worst = GradCheckResult {
                max_rel_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(worst)
}
