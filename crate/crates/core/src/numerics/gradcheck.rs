//! Central finite-difference gradient oracle.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Default step on the 32-bit engine.
#[cfg(not(feature = "f64"))]
pub const DEFAULT_STEP: Real = 1e-3;
/// Default step on the 64-bit verification build.
#[cfg(feature = "f64")]
pub const DEFAULT_STEP: Real = 1e-6;

/// Denominator floor for relative errors.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|autodiff - numeric|` over all elements.
    pub max_abs_err: f64,
    /// Largest per-element `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
    pub max_elementwise_rel_err: f64,
    /// Largest `|a_i - n_i|` divided by `max(||a||_inf, ||n||_inf, ABS_FLOOR)`.
    ///
    /// This is the figure the acceptance thresholds apply to: at 32-bit
    /// precision the round-off in a central difference scales with `|f| / h`,
    /// so elements whose true derivative is tiny cannot be resolved to a small
    /// relative error no matter how correct the autodiff is.
    pub max_rel_err: f64,
    pub autodiff: Tensor,
    pub numeric: Tensor,
}

/// Compare the autodiff gradient of scalar `f` at `x` against central differences.
///
/// `f` receives a fresh graph and the leaf holding `x` (or a perturbed copy)
/// and must return a single-element node.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: Real) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point.clone());
        let out = f(&mut g, v)?;
        scalar_out(&g, out)
    };

    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    scalar_out(&g, out)?;
    g.backward(out)?;
    let autodiff = g
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut numeric = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        // use the realised step, which may differ from h after rounding
        let step = (orig + h) as f64 - (orig - h) as f64;
        numeric.data_mut()[i] = ((fp - fm) / step) as Real;
    }
    Ok(compare(autodiff, numeric))
}

fn scalar_out(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, output shape is {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0] as f64)
}

/// Error figures between an analytic and a numeric gradient of equal shape.
pub fn compare(autodiff: Tensor, numeric: Tensor) -> GradCheckReport {
    let a = autodiff.data();
    let n = numeric.data();
    let inf = |v: &[Real]| v.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs()));
    let scale = inf(a).max(inf(n)).max(ABS_FLOOR);
    let mut max_abs = 0.0f64;
    let mut max_el = 0.0f64;
    for (&ai, &ni) in a.iter().zip(n) {
        let (ai, ni) = (ai as f64, ni as f64);
        let d = (ai - ni).abs();
        max_abs = max_abs.max(d);
        max_el = max_el.max(d / ai.abs().max(ni.abs()).max(ABS_FLOOR));
    }
    GradCheckReport {
        max_abs_err: max_abs,
        max_elementwise_rel_err: max_el,
        max_rel_err: max_abs / scale,
        autodiff,
        numeric,
    }
}
