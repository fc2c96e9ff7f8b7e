//! Central-difference gradient oracle.

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheck<S> {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over checked elements.
    pub max_rel_error: S,
    pub checked: usize,
    /// Elements whose one-sided slopes disagree, i.e. the probe straddles a kink.
    pub skipped: Vec<usize>,
}

fn evaluate<S: Scalar, F>(f: &F, x: Tensor<S>) -> Result<S>
where
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = f(&mut g, v)?;
    let y = g.value(out);
    if !y.is_scalar() {
        return Err(Error::Contract(format!("checked function returned shape {:?}", y.shape())));
    }
    let y = y.item();
    if !y.is_finite() {
        return Err(Error::Numeric(format!("checked function evaluated to {y}")));
    }
    Ok(y)
}

/// Compares the autodiff gradient of `f` at `point` against central differences.
///
/// `f` receives the graph and the node standing for the checked tensor and
/// must return a scalar node.
pub fn finite_diff_check<S: Scalar, F>(f: F, point: &Tensor<S>, eps: S) -> Result<GradCheck<S>>
where
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    if eps <= S::zero() {
        return Err(Error::Contract("eps must be positive".into()));
    }
    let mut g = Graph::new();
    let x = g.param(point.detached());
    let loss = f(&mut g, x)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::Numeric("loss is not finite at the check point".into()));
    }
    g.backward(loss)?;
    let analytic = g
        .grad(x)
        .map(<[S]>::to_vec)
        .unwrap_or_else(|| vec![S::zero(); point.numel()]);

    let centre = g.value(loss).item();
    let floor = S::of(1e-8);
    let kink_tol = eps.sqrt();
    let two = S::of(2.0);
    let mut report = GradCheck { max_rel_error: S::zero(), checked: 0, skipped: Vec::new() };
    for i in 0..point.numel() {
        let mut plus = point.detached();
        plus.data_mut()[i] += eps;
        let mut minus = point.detached();
        minus.data_mut()[i] -= eps;
        let (fp, fm) = (evaluate(&f, plus)?, evaluate(&f, minus)?);
        let right = (fp - centre) / eps;
        let left = (centre - fm) / eps;
        if (right - left).abs() > kink_tol * S::one().max(right.abs()).max(left.abs()) {
            report.skipped.push(i);
            continue;
        }
        let numeric = (fp - fm) / (two * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
