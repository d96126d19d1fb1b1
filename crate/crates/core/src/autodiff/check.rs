//! Central-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

fn eval_scalar<F>(f: &F, points: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::invalid("grad_check", format!("function returned shape {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)` for a
/// scalar function of several inputs.
pub fn grad_check_many<F>(f: F, points: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid("grad_check", format!("eps {eps} outside (0, 1e-2]")));
    }
    if points.iter().any(|p| !p.all_finite()) {
        return Err(Error::NonFinite("grad_check point".into()));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).all_finite() {
        return Err(Error::NonFinite("grad_check value".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| g.grad_or_zeros(v))
        .collect::<Result<_>>()?;

    let mut worst = 0.0f64;
    let mut probe = points.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let x0 = points[pi].data()[i];
            probe[pi].data_mut()[i] = x0 + eps;
            let up = eval_scalar(&f, &probe)?;
            probe[pi].data_mut()[i] = x0 - eps;
            let down = eval_scalar(&f, &probe)?;
            probe[pi].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("grad_check coordinate {i} of input {pi}")));
            }
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// [`grad_check_many`] for a single input.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(point), eps)
}
