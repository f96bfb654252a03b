use super::{Graph, Tensor, Var};
use crate::error::Result;

/// `|analytic − numeric| / (|numeric| + 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`, returning the worst relative error over all
/// coordinates of `x`.
///
/// `f` receives a fresh graph and the leaf holding `x` and must return a
/// scalar variable.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.constant(t.clone());
        let out = f(&mut g, leaf)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    let analytic = g.backward(out)?.wrt(leaf);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
