//! Central finite-difference gradient checking (f64 only).

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Relative error with a small absolute floor so near-zero gradients are
/// compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `h`, for every element of every input. Returns the
/// maximum relative error.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for j in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[j];
            work[k].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[k].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[k].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}
