//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, ParamStore, Var};
use crate::numerics::tensor::Tensor;

/// Derivatives below this magnitude are compared absolutely: a central
/// difference cannot resolve them beyond rounding noise.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Relative error of an analytic derivative against a central difference,
/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Maximum relative error between the analytic gradient returned by `f` and
/// central differences of its value, over every coordinate of `x`.
///
/// `f` returns `(value, d value / d x)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let (v0, analytic) = f(x)?;
    if !v0.is_finite() {
        return Err(Error::Evaluation(format!("f(x) = {v0}")));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::dim("grad_check", "analytic gradient shape"));
    }
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?.0;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?.0;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Evaluation(format!("non-finite value near coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Grad-checks a scalar graph function of one input tensor.
pub fn graph_grad_check<B>(build: B, x: &Tensor, eps: f64) -> Result<f64>
where
    B: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check(
        |x| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let out = build(&mut g, xv)?;
            let value = g.value(out).item();
            let grads = g.backward(out)?;
            let dx = grads
                .get(xv)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape()));
            Ok((value, dx))
        },
        x,
        eps,
    )
}

/// Per-parameter maximum relative error of a scalar graph function of a
/// parameter store. `only` restricts the check to the named parameters.
pub fn param_grad_check<B>(
    build: B,
    store: &ParamStore,
    eps: f64,
    only: Option<&[&str]>,
) -> Result<Vec<(String, f64)>>
where
    B: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    let grads = g.backward(out)?.for_params(store);
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, s)?;
        let v = g.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation(format!("loss = {v}")))
        }
    };
    let mut probe = store.clone();
    let mut report = Vec::new();
    for (name, value) in store {
        if only.is_some_and(|names| !names.contains(&name.as_str())) {
            continue;
        }
        let mut worst: f64 = 0.0;
        for i in 0..value.len() {
            let orig = value.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(grads[name].data()[i], numeric));
        }
        report.push((name.clone(), worst));
    }
    Ok(report)
}
