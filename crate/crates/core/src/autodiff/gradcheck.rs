//! Central finite-difference check of reverse-mode gradients.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over all coordinates.
    pub max_rel_error: f64,
    /// `(parameter, flat coordinate)` where the maximum was attained.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

fn evaluate<T, F>(f: &F, params: &[Tensor<T>]) -> Result<(T, Graph<T>, Var, Vec<Var>)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out).item()?;
    Ok((value, g, out, vars))
}

/// Compares the gradients of `f` at `params` against central differences
/// with step `eps`.
///
/// `f` receives a fresh graph and one tracked leaf per parameter and must
/// return a scalar node.
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], eps: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let (value, graph, out, vars) = evaluate(&f, params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("gradient check: f = {value} at the base point")));
    }
    let grads = graph.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("tracked leaf has a gradient"))
        .collect();

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let two = T::lit(2.0);
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let base = work[p].data()[i];
            work[p].data_mut()[i] = base + eps;
            let plus = evaluate(&f, &work)?.0;
            work[p].data_mut()[i] = base - eps;
            let minus = evaluate(&f, &work)?.0;
            work[p].data_mut()[i] = base;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient check: f is not finite when perturbing parameter {p}, coordinate {i}"
                )));
            }
            let numeric = ((plus - minus) / (two * eps)).as_f64();
            let exact = grad.data()[i].as_f64();
            let err = (exact - numeric).abs() / exact.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((p, i));
            }
        }
    }
    Ok(report)
}
