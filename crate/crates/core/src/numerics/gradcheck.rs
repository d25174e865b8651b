//! Central-difference gradient verification.
//!
//! `grad_check` evaluates a scalar loss twice at the same parameters (to
//! catch nondeterministic loss functions), takes analytic gradients from
//! the autodiff graph, and compares every parameter element against a
//! central finite difference. Relative error uses
//! `|a - n| / max(|a|, |n|, 1e-8)` so tiny gradients do not explode the
//! ratio.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{real, to_f64, Graph, Parameters, Real, Tensor, Var};
use crate::{Error, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Worst relative error over all parameter elements.
    pub max_rel_err: f64,
    /// Parameter name and flat element index of the worst error.
    pub worst: (String, usize),
    /// Worst relative error per parameter tensor, in parameter order.
    pub per_param: Vec<(String, f64)>,
    pub pass: bool,
}

impl GradReport {
    /// One line per parameter plus a verdict, for test logs.
    pub fn summary(&self) -> String {
        use core::fmt::Write;
        let mut s = String::new();
        for (name, err) in &self.per_param {
            let _ = writeln!(s, "{name:<40} max rel err {err:.3e}");
        }
        let _ = writeln!(
            s,
            "overall max rel err {:.3e} at {}[{}] (tolerance {:.1e}): {}",
            self.max_rel_err,
            self.worst.0,
            self.worst.1,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        );
        s
    }
}

fn eval_loss<F: Real>(
    params: &Parameters<F>,
    build: &mut impl FnMut(&mut Graph<F>, &[Var]) -> Result<Var>,
) -> Result<(Graph<F>, Var, F)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let loss = build(&mut g, &vars)?;
    let t = g.value(loss);
    if t.len() != 1 {
        return Err(Error::ShapeMismatch("grad_check loss must be scalar".to_string()));
    }
    if !t.all_finite() {
        return Err(Error::NonFinite("grad_check loss is not finite".to_string()));
    }
    let v = t.item();
    Ok((g, loss, v))
}

/// Verifies analytic gradients of `build` against central differences.
///
/// `build` must be a pure function of the bound parameters; two forward
/// evaluations at the same point must agree bitwise or the check aborts
/// with an error (stochastic losses must be given a fixed stream).
pub fn grad_check<F: Real>(
    params: &Parameters<F>,
    epsilon: f64,
    tolerance: f64,
    mut build: impl FnMut(&mut Graph<F>, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let (graph, loss, v1) = eval_loss(params, &mut build)?;
    let (_, _, v2) = eval_loss(params, &mut build)?;
    if v1 != v2 {
        return Err(Error::InvalidInput(
            "loss function is nondeterministic: two evaluations at the same parameters disagree"
                .to_string(),
        ));
    }

    let vars: Vec<Var> = {
        // Bind order is insertion order, identical to the graph built above.
        let mut g = Graph::new();
        params.bind(&mut g)
    };
    let grads = graph.backward(loss)?;

    let mut work = params.clone();
    let eps = real::<F>(epsilon);
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;
    let mut worst = (String::new(), 0usize);

    for (p, &var) in vars.iter().enumerate() {
        let name = params.name(p).to_string();
        let analytic: Option<Tensor<F>> = grads.get(var).cloned();
        let n_elems = params.tensor(p).len();
        let mut param_max = 0.0f64;
        for e in 0..n_elems {
            let orig = params.tensor(p).data()[e];
            work.tensor_mut(p).data_mut()[e] = orig + eps;
            let (_, _, up) = eval_loss(&work, &mut build)?;
            work.tensor_mut(p).data_mut()[e] = orig - eps;
            let (_, _, down) = eval_loss(&work, &mut build)?;
            work.tensor_mut(p).data_mut()[e] = orig;

            let numeric = (to_f64(up) - to_f64(down)) / (2.0 * epsilon);
            let a = analytic.as_ref().map(|t| to_f64(t.data()[e])).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > param_max {
                param_max = rel;
            }
            if rel > max_rel {
                max_rel = rel;
                worst = (name.clone(), e);
            }
        }
        per_param.push((name, param_max));
    }

    Ok(GradReport {
        epsilon,
        tolerance,
        max_rel_err: max_rel,
        worst,
        per_param,
        pass: max_rel < tolerance,
    })
}
