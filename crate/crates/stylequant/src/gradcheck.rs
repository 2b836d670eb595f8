//! Central finite-difference gradient checking. Test support; the checks
//! here are independent of the backward rules they verify.

use crate::autodiff::{Graph, NodeId};

/// Analytic gradient of a scalar-valued graph function at `x0`.
///
/// `build` must construct the graph from scratch, returning the leaf holding
/// `x` and the scalar output node.
pub fn analytic_grad(
    x0: &[f64],
    build: &mut dyn FnMut(&mut Graph, &[f64]) -> (NodeId, NodeId),
) -> Vec<f64> {
    let mut g = Graph::new();
    let (leaf, out) = build(&mut g, x0);
    let grads = g.backward(out).expect("backward failed");
    grads[leaf.index()]
        .as_ref()
        .map(|t| t.data.clone())
        .unwrap_or_else(|| vec![0.0; x0.len()])
}

/// Central finite differences of the same scalar function.
pub fn numeric_grad(
    x0: &[f64],
    build: &mut dyn FnMut(&mut Graph, &[f64]) -> (NodeId, NodeId),
    h: f64,
) -> Vec<f64> {
    let eval = |x: &[f64], build: &mut dyn FnMut(&mut Graph, &[f64]) -> (NodeId, NodeId)| {
        let mut g = Graph::new();
        let (_, out) = build(&mut g, x);
        g.value(out).item()
    };
    let mut grad = vec![0.0; x0.len()];
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = eval(&x, build);
        x[i] = x0[i] - h;
        let fm = eval(&x, build);
        x[i] = x0[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative discrepancy between analytic and finite-difference gradients.
pub fn grad_discrepancy(
    x0: &[f64],
    mut build: impl FnMut(&mut Graph, &[f64]) -> (NodeId, NodeId),
    h: f64,
) -> f64 {
    let analytic = analytic_grad(x0, &mut build);
    let numeric = numeric_grad(x0, &mut build, h);
    let mut worst = 0.0_f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        let scale = a.abs().max(n.abs()).max(1.0);
        worst = worst.max((a - n).abs() / scale);
    }
    worst
}

/// Panics when the analytic gradient disagrees with central differences.
pub fn grad_check(
    x0: &[f64],
    build: impl FnMut(&mut Graph, &[f64]) -> (NodeId, NodeId),
    h: f64,
    tol: f64,
) {
    let worst = grad_discrepancy(x0, build, h);
    assert!(
        worst <= tol,
        "gradient check failed: worst relative error {worst:.3e} > {tol:.1e}"
    );
}
