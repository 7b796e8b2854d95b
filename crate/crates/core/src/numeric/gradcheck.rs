use crate::error::{precondition, Error, Result};
use crate::numeric::{Graph, Tensor, Var};

/// Compares the tape gradient of a scalar function against central
/// differences. Returns the largest
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)` over coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return precondition(format!("eps {eps} outside [1e-6, 1e-3]"));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(&mut g, xv)?;
    if !g.value(out).is_finite() {
        return Err(Error::NonFinite {
            coordinate: 0,
            detail: "function value at x".into(),
        });
    }
    g.backward(out)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::without_grad();
        let v = g.constant(probe);
        let out = f(&mut g, v)?;
        Ok(g.scalar(out))
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                coordinate: i,
                detail: format!("f(x+eps)={fp}, f(x-eps)={fm}"),
            });
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
