//! Central finite-difference audit of reverse-mode gradients.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so gradients that are
/// numerically zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Element with the largest relative error, as `(tensor name, flat index)`.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    fn new(tolerance: f64) -> Self {
        Self {
            checked: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: None,
            tolerance,
            pass: true,
        }
    }

    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((name.to_string(), idx));
        }
        self.pass = self.max_rel_error < self.tolerance;
    }

    /// Combine two audits into the worst case of both.
    pub fn merge(mut self, other: GradCheckReport) -> Self {
        self.checked += other.checked;
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.tolerance = self.tolerance.min(other.tolerance);
        self.pass = self.max_rel_error < self.tolerance;
        self
    }
}

fn validate(eps: f64, tol: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference eps {eps} must be > 0")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {tol} must be > 0")));
    }
    Ok(())
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Compare the reverse-mode gradient of scalar `f` at `x` against
/// `(f(x+εe) − f(x−εe)) / 2ε` for every element.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    validate(eps, tol)?;
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let out = f(&mut g, xv)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let zeros = vec![0.0; x.len()];
    let analytic = grads.get(xv).unwrap_or(&zeros).to_vec();

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };
    let mut report = GradCheckReport::new(tol);
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        report.record("x", i, analytic[i], numeric);
    }
    Ok(report)
}

/// Same audit over named parameters of a store. `f` builds the scalar loss
/// from the store; every listed parameter is treated as differentiable.
pub fn finite_diff_check_params<F>(
    f: F,
    store: &ParamStore,
    names: &[String],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    validate(eps, tol)?;
    let mut g = Graph::with_grad_all_params();
    let out = f(&mut g, store)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        scalar_of(&g, out)
    };
    let mut report = GradCheckReport::new(tol);
    let mut work = store.clone();
    for name in names {
        let base = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?
            .clone();
        let analytic = grads
            .params()
            .get(name)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; base.len()]);
        for i in 0..base.len() {
            let orig = base.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            report.record(name, i, analytic[i], (fp - fm) / (2.0 * eps));
        }
    }
    Ok(report)
}
