//! Central finite-difference verification of analytic gradients (64-bit).

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative error between an analytic and a numeric derivative, floored at 1e-8.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against `(loss(θ+h) − loss(θ−h)) / 2h` on the given
/// coordinates (all coordinates when `coords` is `None`) and returns the
/// maximum relative error.
pub fn finite_difference_check(
    theta: &Tensor<f64>,
    analytic: &Tensor<f64>,
    h: f64,
    coords: Option<&[usize]>,
    mut loss: impl FnMut(&Tensor<f64>) -> f64,
) -> f64 {
    assert_eq!(theta.shape(), analytic.shape(), "gradient shape must match parameter");
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..theta.len()).collect();
            &all
        }
    };
    let mut probe = theta.clone();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = loss(&probe);
        probe.data_mut()[i] = orig - h;
        let down = loss(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    worst
}

/// Builds `f` on a fresh graph with `theta` as the only trainable leaf and
/// checks its gradient against central differences.
pub fn check_graph_gradient(
    theta: &Tensor<f64>,
    h: f64,
    coords: Option<&[usize]>,
    f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.param(theta.clone());
    let loss = f(&mut g, p)?;
    let grads = g.backward(loss)?;
    let analytic = grads.get(p).cloned().unwrap_or_else(|| Tensor::zeros(theta.shape()));
    let eval = |t: &Tensor<f64>| {
        let mut g = Graph::new();
        let p = g.param(t.clone());
        let l = f(&mut g, p).expect("loss evaluates at perturbed point");
        g.value(l).data()[0]
    };
    Ok(finite_difference_check(theta, &analytic, h, coords, eval))
}
