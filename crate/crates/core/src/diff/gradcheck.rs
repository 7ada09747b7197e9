//! Central finite-difference check of tape gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
    pub max_rel_error: f64,
    /// Coordinate where `max_rel_error` occurs.
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error with the `1e-8` denominator floor used throughout.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` at `x` with central differences of width `step`.
///
/// `f` must be deterministic: any randomness it uses has to be fixed outside it.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    if step <= 0.0 {
        return Err(Error::Domain(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let analytic = {
        let g = Graph::new();
        let leaf = g.param(x.clone());
        let root = f(&g, leaf)?;
        // a root that does not depend on `x` has a zero gradient
        if root.requires_grad() {
            g.backward(root)?;
        }
        leaf.grad()
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; x.numel()])
    };
    let eval = |t: Tensor| -> Result<f64> {
        let g = Graph::new();
        let leaf = g.constant(t);
        Ok(f(&g, leaf)?.item())
    };
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * step));
    }
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        worst_index,
        tol,
        passed: max_rel_error <= tol,
    })
}
