//! Entropically regularized optimal transport: an exact small-instance
//! solver (transportation simplex), the Sinkhorn-Knopp iteration in plain
//! and log-domain form, and the transport-weighted alignment loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};

#[derive(Debug, Error)]
pub enum SinkhornError {
    #[error("marginal {which} is off the simplex: sum {sum}")]
    InvalidMarginal { which: &'static str, sum: f64 },
    #[error("marginal {which} has negative entry at index {index}")]
    NegativeMarginal { which: &'static str, index: usize },
    #[error("cost matrix is {n}x{m}; the exact oracle handles n*m <= 64")]
    OracleTooLarge { n: usize, m: usize },
    #[error("gibbs kernel row {row} underflowed to zero; eta too small, use the log-domain solver")]
    EtaTooSmall { row: usize },
    #[error("marginal length {got} does not match cost dimension {expected}")]
    MarginalLength { got: usize, expected: usize },
    #[error("transportation simplex failed to terminate")]
    PivotLimit,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, SinkhornError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    CosineDistance,
}

/// Nonnegative n × m transport cost matrix.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub values: Tensor,
    pub metric: Metric,
}

impl CostMatrix {
    pub fn new(values: Tensor, metric: Metric) -> Self {
        assert_eq!(values.shape.len(), 2, "cost matrix must be rank 2");
        CostMatrix { values, metric }
    }

    /// Pairwise distances between the rows of two token matrices.
    pub fn between(a: &Tensor, b: &Tensor, metric: Metric) -> Self {
        let (n, d) = a.dims2().expect("rank-2 tokens");
        let (m, d2) = b.dims2().expect("rank-2 tokens");
        assert_eq!(d, d2, "token dimension mismatch: {d} vs {d2}");
        let mut values = vec![0.0; n * m];
        for i in 0..n {
            let ai = &a.data[i * d..(i + 1) * d];
            for j in 0..m {
                let bj = &b.data[j * d..(j + 1) * d];
                values[i * m + j] = match metric {
                    Metric::Euclidean => ai
                        .iter()
                        .zip(bj)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt(),
                    Metric::CosineDistance => {
                        let dot: f64 = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
                        let na: f64 = ai.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nb: f64 = bj.iter().map(|x| x * x).sum::<f64>().sqrt();
                        1.0 - dot / (na * nb)
                    }
                };
            }
        }
        CostMatrix { values: Tensor::matrix(n, m, values), metric }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.values.shape[0], self.values.shape[1])
    }

    /// Scale so the maximum entry is 1 (no-op for an all-zero matrix).
    pub fn normalized(&self) -> CostMatrix {
        let max = self.values.data.iter().cloned().fold(0.0_f64, f64::max);
        if max <= 0.0 {
            return self.clone();
        }
        let data = self.values.data.iter().map(|v| v / max).collect();
        CostMatrix {
            values: Tensor::new(self.values.shape.clone(), data),
            metric: self.metric,
        }
    }
}

/// Converged coupling with its prescribed marginals.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub coupling: Tensor,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SinkhornState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Gibbs kernel K = exp(-C / eta).
    pub gibbs: Tensor,
    pub eta: f64,
    pub iterations: usize,
    pub marginal_error: f64,
    pub converged: bool,
    plan: Tensor,
}

impl SinkhornState {
    pub fn plan(&self) -> &Tensor {
        &self.plan
    }

    /// Frobenius inner product of the plan with a cost matrix.
    pub fn transport_cost(&self, cost: &CostMatrix) -> f64 {
        frobenius(&self.plan, &cost.values)
    }

    /// <gamma, C> - eta * h(gamma) with h the plan entropy.
    pub fn entropic_objective(&self, cost: &CostMatrix) -> f64 {
        frobenius(&self.plan, &cost.values) - self.eta * entropy(&self.plan)
    }
}

pub fn frobenius(a: &Tensor, b: &Tensor) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// Plan entropy -sum gamma ln gamma, with 0 ln 0 = 0.
pub fn entropy(plan: &Tensor) -> f64 {
    plan.data
        .iter()
        .filter(|&&g| g > 0.0)
        .map(|&g| -g * g.ln())
        .sum()
}

fn validate_marginals(cost: &CostMatrix, p: &[f64], q: &[f64]) -> Result<()> {
    let (n, m) = cost.dims();
    if p.len() != n {
        return Err(SinkhornError::MarginalLength { got: p.len(), expected: n });
    }
    if q.len() != m {
        return Err(SinkhornError::MarginalLength { got: q.len(), expected: m });
    }
    for (which, v) in [("p", p), ("q", q)] {
        for (i, &x) in v.iter().enumerate() {
            if x < -1e-12 {
                return Err(SinkhornError::NegativeMarginal { which, index: i });
            }
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SinkhornError::InvalidMarginal { which, sum });
        }
    }
    Ok(())
}

fn marginal_violation(plan: &Tensor, p: &[f64], q: &[f64]) -> f64 {
    let (n, m) = plan.dims2().unwrap();
    let mut worst = 0.0_f64;
    for i in 0..n {
        let row: f64 = plan.data[i * m..(i + 1) * m].iter().sum();
        worst = worst.max((row - p[i]).abs());
    }
    for j in 0..m {
        let col: f64 = (0..n).map(|i| plan.data[i * m + j]).sum();
        worst = worst.max((col - q[j]).abs());
    }
    worst
}

/// Exact optimal transport by the transportation simplex. Oracle-scale only.
pub fn exact_ot(cost: &CostMatrix, p: &[f64], q: &[f64]) -> Result<(f64, TransportPlan)> {
    let (n, m) = cost.dims();
    if n * m > 64 {
        return Err(SinkhornError::OracleTooLarge { n, m });
    }
    validate_marginals(cost, p, q)?;
    let c = &cost.values.data;

    // northwest-corner initial basis: exactly n + m - 1 cells
    let mut flow = vec![0.0_f64; n * m];
    let mut basic = vec![false; n * m];
    let mut rem_p = p.to_vec();
    let mut rem_q = q.to_vec();
    let (mut i, mut j) = (0usize, 0usize);
    loop {
        let f = rem_p[i].min(rem_q[j]);
        flow[i * m + j] = f;
        basic[i * m + j] = true;
        rem_p[i] -= f;
        rem_q[j] -= f;
        if i == n - 1 && j == m - 1 {
            break;
        }
        if (rem_p[i] <= rem_q[j] && i < n - 1) || j == m - 1 {
            i += 1;
        } else {
            j += 1;
        }
    }

    let max_pivots = 100_000;
    for _ in 0..max_pivots {
        // potentials from the basis tree: u_i + v_j = c_ij on basic cells
        let mut u = vec![f64::NAN; n];
        let mut v = vec![f64::NAN; m];
        u[0] = 0.0;
        let mut stack = vec![(true, 0usize)]; // (is_row, index)
        while let Some((is_row, ix)) = stack.pop() {
            if is_row {
                for jj in 0..m {
                    if basic[ix * m + jj] && v[jj].is_nan() {
                        v[jj] = c[ix * m + jj] - u[ix];
                        stack.push((false, jj));
                    }
                }
            } else {
                for ii in 0..n {
                    if basic[ii * m + ix] && u[ii].is_nan() {
                        u[ii] = c[ii * m + ix] - v[ix];
                        stack.push((true, ii));
                    }
                }
            }
        }

        // entering cell: most negative reduced cost
        let mut enter = None;
        let mut best = -1e-10;
        for ii in 0..n {
            for jj in 0..m {
                if !basic[ii * m + jj] {
                    let red = c[ii * m + jj] - u[ii] - v[jj];
                    if red < best {
                        best = red;
                        enter = Some((ii, jj));
                    }
                }
            }
        }
        let (ei, ej) = match enter {
            Some(cell) => cell,
            None => {
                let value = frobenius(&Tensor::matrix(n, m, flow.clone()), &cost.values);
                let plan = TransportPlan {
                    coupling: Tensor::matrix(n, m, flow),
                    p: p.to_vec(),
                    q: q.to_vec(),
                };
                return Ok((value, plan));
            }
        };

        // unique tree path from column ej back to row ei
        let path = tree_path(&basic, n, m, ej, ei).expect("basis must be connected");
        // cycle: entering edge (+), then path edges alternating (-, +, ...)
        let mut theta = f64::INFINITY;
        for (step, &(pi, pj)) in path.iter().enumerate() {
            if step % 2 == 0 {
                theta = theta.min(flow[pi * m + pj]);
            }
        }
        flow[ei * m + ej] += theta;
        let mut removed = false;
        for (step, &(pi, pj)) in path.iter().enumerate() {
            if step % 2 == 0 {
                flow[pi * m + pj] -= theta;
                if !removed && flow[pi * m + pj] <= 1e-15 {
                    flow[pi * m + pj] = 0.0;
                    basic[pi * m + pj] = false;
                    removed = true;
                }
            } else {
                flow[pi * m + pj] += theta;
            }
        }
        basic[ei * m + ej] = true;
    }
    Err(SinkhornError::PivotLimit)
}

/// Edges of the unique tree path from column node `start_col` to row node
/// `target_row`, in traversal order.
fn tree_path(
    basic: &[bool],
    n: usize,
    m: usize,
    start_col: usize,
    target_row: usize,
) -> Option<Vec<(usize, usize)>> {
    // DFS over the bipartite basis graph
    fn dfs(
        basic: &[bool],
        n: usize,
        m: usize,
        at_row: bool,
        ix: usize,
        target_row: usize,
        visited_rows: &mut Vec<bool>,
        visited_cols: &mut Vec<bool>,
        path: &mut Vec<(usize, usize)>,
    ) -> bool {
        if at_row {
            if ix == target_row {
                return true;
            }
            visited_rows[ix] = true;
            for jj in 0..m {
                if basic[ix * m + jj] && !visited_cols[jj] {
                    path.push((ix, jj));
                    if dfs(basic, n, m, false, jj, target_row, visited_rows, visited_cols, path) {
                        return true;
                    }
                    path.pop();
                }
            }
        } else {
            visited_cols[ix] = true;
            for ii in 0..n {
                if basic[ii * m + ix] && !visited_rows[ii] {
                    path.push((ii, ix));
                    if dfs(basic, n, m, true, ii, target_row, visited_rows, visited_cols, path) {
                        return true;
                    }
                    path.pop();
                }
            }
        }
        false
    }
    let mut visited_rows = vec![false; n];
    let mut visited_cols = vec![false; m];
    let mut path = Vec::new();
    if dfs(basic, n, m, false, start_col, target_row, &mut visited_rows, &mut visited_cols, &mut path)
    {
        Some(path)
    } else {
        None
    }
}

/// Plain Sinkhorn-Knopp: u <- p ./ (K v), v <- q ./ (K' u), from v = 1.
pub fn sinkhorn(
    cost: &CostMatrix,
    p: &[f64],
    q: &[f64],
    eta: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SinkhornState> {
    assert!(eta > 0.0 && tol > 0.0);
    validate_marginals(cost, p, q)?;
    let (n, m) = cost.dims();
    let k: Vec<f64> = cost.values.data.iter().map(|c| (-c / eta).exp()).collect();
    for i in 0..n {
        if k[i * m..(i + 1) * m].iter().all(|&x| x == 0.0) {
            return Err(SinkhornError::EtaTooSmall { row: i });
        }
    }
    let gibbs = Tensor::matrix(n, m, k.clone());
    let mut u = vec![1.0_f64; n];
    let mut v = vec![1.0_f64; m];
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    let mut converged = false;
    while iterations < max_iter {
        for i in 0..n {
            let kv: f64 = (0..m).map(|j| k[i * m + j] * v[j]).sum();
            u[i] = p[i] / kv;
        }
        for j in 0..m {
            let ku: f64 = (0..n).map(|i| k[i * m + j] * u[i]).sum();
            v[j] = q[j] / ku;
        }
        iterations += 1;
        let plan = plan_from_scalings(&k, &u, &v, n, m);
        err = marginal_violation(&plan, p, q);
        if err <= tol {
            converged = true;
            break;
        }
    }
    let plan = plan_from_scalings(&k, &u, &v, n, m);
    Ok(SinkhornState {
        u,
        v,
        gibbs,
        eta,
        iterations,
        marginal_error: err,
        converged,
        plan,
    })
}

fn plan_from_scalings(k: &[f64], u: &[f64], v: &[f64], n: usize, m: usize) -> Tensor {
    let mut plan = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            plan[i * m + j] = u[i] * k[i * m + j] * v[j];
        }
    }
    Tensor::matrix(n, m, plan)
}

/// Log-domain Sinkhorn on dual potentials; same fixed point as `sinkhorn`
/// but stable for small eta or large cost ranges.
pub fn log_domain_sinkhorn(
    cost: &CostMatrix,
    p: &[f64],
    q: &[f64],
    eta: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SinkhornState> {
    assert!(eta > 0.0 && tol > 0.0);
    validate_marginals(cost, p, q)?;
    let (n, m) = cost.dims();
    let c = &cost.values.data;
    let log_p: Vec<f64> = p.iter().map(|&x| x.ln()).collect();
    let log_q: Vec<f64> = q.iter().map(|&x| x.ln()).collect();
    let mut f = vec![0.0_f64; n];
    let mut h = vec![0.0_f64; m];
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    let mut converged = false;
    let plan_of = |f: &[f64], h: &[f64]| {
        let mut plan = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                plan[i * m + j] = ((f[i] + h[j] - c[i * m + j]) / eta).exp();
            }
        }
        Tensor::matrix(n, m, plan)
    };
    while iterations < max_iter {
        for i in 0..n {
            let lse = log_sum_exp((0..m).map(|j| (h[j] - c[i * m + j]) / eta));
            f[i] = eta * (log_p[i] - lse);
        }
        for j in 0..m {
            let lse = log_sum_exp((0..n).map(|i| (f[i] - c[i * m + j]) / eta));
            h[j] = eta * (log_q[j] - lse);
        }
        iterations += 1;
        err = marginal_violation(&plan_of(&f, &h), p, q);
        if err <= tol {
            converged = true;
            break;
        }
    }
    let plan = plan_of(&f, &h);
    let gibbs_data: Vec<f64> = c.iter().map(|ci| (-ci / eta).exp()).collect();
    Ok(SinkhornState {
        u: f.iter().map(|&fi| (fi / eta).exp()).collect(),
        v: h.iter().map(|&hj| (hj / eta).exp()).collect(),
        gibbs: Tensor::matrix(n, m, gibbs_data),
        eta,
        iterations,
        marginal_error: err,
        converged,
        plan,
    })
}

fn log_sum_exp(vals: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = vals.collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Transport-weighted alignment loss sum_ij plan_ij * d(t_i, f_j), built in
/// the graph so gradients reach the `t` tokens. The plan is a constant:
/// no gradient flows through the Sinkhorn iteration, and `f` is frozen.
pub fn ot_loss(
    g: &mut Graph,
    t_tokens: NodeId,
    f_tokens: &Tensor,
    plan: &Tensor,
    metric: Metric,
) -> Result<NodeId> {
    let (s, d) = g.value(t_tokens).dims2().ok_or(AutodiffError::NotAMatrix {
        op: "ot_loss",
        shape: g.value(t_tokens).shape.clone(),
    })?;
    let (l, d2) = f_tokens.dims2().expect("rank-2 features");
    if d != d2 || plan.shape != vec![s, l] {
        return Err(SinkhornError::Autodiff(AutodiffError::ShapeMismatch {
            op: "ot_loss",
            left: vec![s, d],
            right: f_tokens.shape.clone(),
        }));
    }
    let dist = match metric {
        Metric::Euclidean => {
            let tsq0 = g.square(t_tokens);
            let tsq = g.sum_axis(tsq0, 1)?; // s
            let fsq: Vec<f64> = (0..l)
                .map(|j| f_tokens.data[j * d..(j + 1) * d].iter().map(|x| x * x).sum())
                .collect();
            let ft = transpose_tensor(f_tokens);
            let ftn = g.constant(ft);
            let cross = g.matmul(t_tokens, ftn)?; // s × l
            let neg2 = g.mul_scalar(cross, -2.0);
            let fsqn = g.constant(Tensor::vector(fsq));
            let plus_f = g.add_row(neg2, fsqn)?;
            let tr = g.transpose(plus_f)?;
            let plus_t = g.add_row(tr, tsq)?;
            let d2m = g.transpose(plus_t)?;
            let clamped = g.leaky_relu(d2m, 0.0); // guard tiny negative rounding
            let shifted = g.add_scalar(clamped, 1e-30);
            g.sqrt(shifted)?
        }
        Metric::CosineDistance => {
            let tsq0 = g.square(t_tokens);
            let tsq = g.sum_axis(tsq0, 1)?;
            let tnorm = g.sqrt(tsq)?;
            let mut fnorm = transpose_tensor(f_tokens); // d × l
            for j in 0..l {
                let norm: f64 =
                    f_tokens.data[j * d..(j + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt();
                for r in 0..d {
                    fnorm.data[r * l + j] /= norm;
                }
            }
            let fn_node = g.constant(fnorm);
            let cross = g.matmul(t_tokens, fn_node)?; // s × l
            let cos = g.div_rows(cross, tnorm)?;
            let neg = g.neg(cos);
            g.add_scalar(neg, 1.0)
        }
    };
    let plan_node = g.constant(plan.clone());
    let weighted = g.mul(dist, plan_node)?;
    Ok(g.sum(weighted))
}

fn transpose_tensor(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2().unwrap();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data[i * c + j];
        }
    }
    Tensor::matrix(c, r, out)
}
