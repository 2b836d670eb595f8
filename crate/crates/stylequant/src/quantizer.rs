//! Style-space quantization: sub-vector split, nearest-code lookup against a
//! learnable codebook, straight-through proxy construction, and the
//! commitment / uniformity losses that keep the codebook alive.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};

#[derive(Debug, Error)]
pub enum QuantizerError {
    #[error("style dimension {d_w} is not divisible by sub-vector count {s}")]
    NonDivisible { d_w: usize, s: usize },
    #[error("sub-vector dimension {sub} does not match code dimension {code}")]
    DimMismatch { sub: usize, code: usize },
    #[error("codebook is empty")]
    EmptyCodebook,
    #[error("projection of codebook row {row} has norm below 1e-12")]
    DegenerateProjection { row: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, QuantizerError>;

/// Learnable codebook of `k` codes of dimension `d_c`, plus the projection
/// used by the hyperspherical uniformity term.
#[derive(Debug, Clone)]
pub struct Codebook {
    /// k × d_c code matrix.
    pub codes: Tensor,
    /// d_p × d_c projection applied before unit-normalizing.
    pub projection: Tensor,
    /// RBF kernel scale of the uniformity loss.
    pub rbf_scale: f64,
}

impl Codebook {
    /// Random init: codes i.i.d. normal with std 1/sqrt(d_c), projection
    /// identity plus small noise (square, d_p = d_c).
    pub fn random(k: usize, d_c: usize, rbf_scale: f64, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (d_c as f64).sqrt();
        let codes: Vec<f64> = (0..k * d_c)
            .map(|_| {
                let u: f64 = rng.sample(rand_distr::StandardNormal);
                u * std
            })
            .collect();
        let mut proj = vec![0.0; d_c * d_c];
        for i in 0..d_c {
            for j in 0..d_c {
                let noise: f64 = rng.sample(rand_distr::StandardNormal);
                proj[i * d_c + j] = if i == j { 1.0 } else { 0.0 } + 0.01 * noise;
            }
        }
        Codebook {
            codes: Tensor::matrix(k, d_c, codes),
            projection: Tensor::matrix(d_c, d_c, proj),
            rbf_scale,
        }
    }

    pub fn k(&self) -> usize {
        self.codes.shape[0]
    }

    pub fn code_dim(&self) -> usize {
        self.codes.shape[1]
    }

    pub fn code(&self, j: usize) -> &[f64] {
        let d = self.code_dim();
        &self.codes.data[j * d..(j + 1) * d]
    }
}

/// One style vector's journey through the quantizer.
#[derive(Debug, Clone)]
pub struct QuantizedStyle {
    pub pre: Vec<f64>,
    pub sub_vectors: Vec<Vec<f64>>,
    pub indices: Vec<usize>,
    pub quantized_subs: Vec<Vec<f64>>,
    /// Concatenation of the quantized sub-vectors, length d_w.
    pub proxy: Vec<f64>,
}

/// Contiguous order-preserving partition of `w` into `s` sub-vectors.
pub fn split(w: &[f64], s: usize) -> Result<Vec<Vec<f64>>> {
    if s == 0 || w.len() % s != 0 {
        return Err(QuantizerError::NonDivisible { d_w: w.len(), s });
    }
    let d_c = w.len() / s;
    Ok(w.chunks(d_c).map(|c| c.to_vec()).collect())
}

/// Nearest codebook row by Euclidean distance; ties break to lowest index.
pub fn quantize(sub: &[f64], codebook: &Codebook) -> Result<(usize, Vec<f64>)> {
    if codebook.k() == 0 {
        return Err(QuantizerError::EmptyCodebook);
    }
    if sub.len() != codebook.code_dim() {
        return Err(QuantizerError::DimMismatch {
            sub: sub.len(),
            code: codebook.code_dim(),
        });
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for j in 0..codebook.k() {
        let d: f64 = codebook
            .code(j)
            .iter()
            .zip(sub)
            .map(|(c, x)| (c - x) * (c - x))
            .sum();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    Ok((best, codebook.code(best).to_vec()))
}

/// Full split / quantize / concatenate record for one style vector.
pub fn quantize_style(w: &[f64], codebook: &Codebook) -> Result<QuantizedStyle> {
    let d_c = codebook.code_dim();
    if w.len() % d_c != 0 {
        return Err(QuantizerError::NonDivisible { d_w: w.len(), s: d_c });
    }
    let s = w.len() / d_c;
    let sub_vectors = split(w, s)?;
    let mut indices = Vec::with_capacity(s);
    let mut quantized_subs = Vec::with_capacity(s);
    let mut proxy = Vec::with_capacity(w.len());
    for sub in &sub_vectors {
        let (ix, code) = quantize(sub, codebook)?;
        indices.push(ix);
        proxy.extend_from_slice(&code);
        quantized_subs.push(code);
    }
    Ok(QuantizedStyle { pre: w.to_vec(), sub_vectors, indices, quantized_subs, proxy })
}

/// Fraction of codebook entries selected at least once in `history`.
pub fn usage(history: &[QuantizedStyle], k: usize) -> f64 {
    let mut seen = vec![false; k];
    for q in history {
        for &ix in &q.indices {
            seen[ix] = true;
        }
    }
    seen.iter().filter(|&&b| b).count() as f64 / k as f64
}

pub fn usage_of_indices(indices: impl IntoIterator<Item = usize>, k: usize) -> f64 {
    let mut seen = vec![false; k];
    for ix in indices {
        seen[ix] = true;
    }
    seen.iter().filter(|&&b| b).count() as f64 / k as f64
}

/// A batch of style vectors quantized inside a graph. The proxy tensor is
/// wired through straight_through so gradients reach the mapping network.
pub struct QuantizedBatch {
    /// Per-sample code indices, n × s.
    pub indices: Vec<Vec<usize>>,
    /// n × d_w proxy batch.
    pub proxy: NodeId,
    /// Per-slot pre-quantization sub-vector batches (n × d_c).
    pub subs: Vec<NodeId>,
    /// Per-slot gathered code batches (n × d_c), differentiable into codes.
    pub gathered: Vec<NodeId>,
}

/// Quantize a batched style tensor (n × d_w) against `codes` (a graph leaf
/// holding the codebook matrix).
pub fn quantize_batch(
    g: &mut Graph,
    w: NodeId,
    codes: NodeId,
    codebook: &Codebook,
    s: usize,
) -> Result<QuantizedBatch> {
    let (n, d_w) = g.value(w).dims2().ok_or(AutodiffError::NotAMatrix {
        op: "quantize_batch",
        shape: g.value(w).shape.clone(),
    })?;
    if d_w % s != 0 {
        return Err(QuantizerError::NonDivisible { d_w, s });
    }
    let d_c = d_w / s;
    if d_c != codebook.code_dim() {
        return Err(QuantizerError::DimMismatch { sub: d_c, code: codebook.code_dim() });
    }
    let mut indices = vec![Vec::with_capacity(s); n];
    let mut subs = Vec::with_capacity(s);
    let mut gathered = Vec::with_capacity(s);
    let mut proxy_slots = Vec::with_capacity(s);
    for slot in 0..s {
        let sub = g.slice_cols(w, slot * d_c, d_c)?;
        let mut slot_idx = Vec::with_capacity(n);
        for i in 0..n {
            let row = &g.value(sub).data[i * d_c..(i + 1) * d_c];
            let (ix, _) = quantize(row, codebook)?;
            slot_idx.push(ix);
            indices[i].push(ix);
        }
        let q = g.gather_rows(codes, &slot_idx)?;
        let st = g.straight_through(sub, q)?;
        subs.push(sub);
        gathered.push(q);
        proxy_slots.push(st);
    }
    let proxy = g.concat_cols(&proxy_slots)?;
    Ok(QuantizedBatch { indices, proxy, subs, gathered })
}

/// Style quantization loss: ||sg(w_hat) - c||^2 + beta * ||w_hat - sg(c)||^2,
/// summed over sub-vectors and their elements, mean over the batch. Gradients
/// reach the codes through the first term only and the mapping network
/// through the second only.
pub fn sq_loss(g: &mut Graph, batch: &QuantizedBatch, beta: f64) -> Result<NodeId> {
    let n = g.value(batch.proxy).dims2().unwrap().0;
    let mut total: Option<NodeId> = None;
    for (sub, q) in batch.subs.iter().zip(&batch.gathered) {
        let sg_sub = g.stop_gradient(*sub);
        let d1 = g.sub(sg_sub, *q)?;
        let t1 = g.l2_norm_sq(d1);
        let sg_q = g.stop_gradient(*q);
        let d2 = g.sub(*sub, sg_q)?;
        let t2 = g.l2_norm_sq(d2);
        let t2b = g.mul_scalar(t2, beta);
        let slot = g.add(t1, t2b)?;
        total = Some(match total {
            Some(t) => g.add(t, slot)?,
            None => slot,
        });
    }
    let t = total.expect("at least one slot");
    Ok(g.mul_scalar(t, 1.0 / n as f64))
}

/// Uniformity loss (log-mean RBF potential) over projected, unit-normalized
/// codes; expectation over ordered pairs i != j.
pub fn uniformity_loss(
    g: &mut Graph,
    codes: NodeId,
    projection: NodeId,
    rbf_scale: f64,
) -> Result<NodeId> {
    let (k, _) = g.value(codes).dims2().ok_or(AutodiffError::NotAMatrix {
        op: "uniformity_loss",
        shape: g.value(codes).shape.clone(),
    })?;
    assert!(k >= 2, "uniformity_loss needs at least two codes");
    let proj_t = g.transpose(projection)?;
    let pc = g.matmul(codes, proj_t)?; // k × d_p
    let pc_sq = g.square(pc);
    let row_sq = g.sum_axis(pc_sq, 1)?;
    for (row, &v) in g.value(row_sq).data.iter().enumerate() {
        if v.sqrt() < 1e-12 {
            return Err(QuantizerError::DegenerateProjection { row });
        }
    }
    let norms = g.sqrt(row_sq)?;
    let cbar = g.div_rows(pc, norms)?;
    // pairwise squared distances via ||ci||^2 + ||cj||^2 - 2 ci·cj
    let cbar_sq = g.square(cbar);
    let unit = g.sum_axis(cbar_sq, 1)?; // all ~1 after normalization
    let cbar_t = g.transpose(cbar)?;
    let gram = g.matmul(cbar, cbar_t)?;
    let neg2 = g.mul_scalar(gram, -2.0);
    let plus_cols = g.add_row(neg2, unit)?;
    let t = g.transpose(plus_cols)?;
    let t2 = g.add_row(t, unit)?;
    let dist_sq = g.transpose(t2)?;
    let kernel = g.mul_scalar(dist_sq, -rbf_scale);
    let pot = g.exp(kernel);
    let mut mask = vec![1.0; k * k];
    for i in 0..k {
        mask[i * k + i] = 0.0;
    }
    let mask = g.constant(Tensor::matrix(k, k, mask));
    let off_diag = g.mul(pot, mask)?;
    let s = g.sum(off_diag);
    let mean = g.mul_scalar(s, 1.0 / (k * (k - 1)) as f64);
    Ok(g.log(mean)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(rows: &[&[f64]]) -> Codebook {
        let d = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let mut proj = vec![0.0; d * d];
        for i in 0..d {
            proj[i * d + i] = 1.0;
        }
        Codebook {
            codes: Tensor::matrix(rows.len(), d, data),
            projection: Tensor::matrix(d, d, proj),
            rbf_scale: 2.0,
        }
    }

    #[test]
    fn split_is_contiguous() {
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let parts = split(&w, 2).unwrap();
        assert_eq!(parts, vec![vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]);
    }

    #[test]
    fn split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let w: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let parts = split(&w, 4).unwrap();
            let rejoined: Vec<f64> = parts.into_iter().flatten().collect();
            assert_eq!(rejoined, w);
        }
    }

    #[test]
    fn split_rejects_non_divisible() {
        assert!(matches!(
            split(&[1.0, 2.0, 3.0], 2),
            Err(QuantizerError::NonDivisible { d_w: 3, s: 2 })
        ));
    }

    #[test]
    fn quantize_picks_nearest() {
        let cb = book(&[&[1.0, 0.0], &[0.0, 3.0]]);
        let (ix, code) = quantize(&[0.0, 0.0], &cb).unwrap();
        assert_eq!(ix, 0);
        assert_eq!(code, vec![1.0, 0.0]);
    }

    #[test]
    fn quantize_exact_match_is_zero_distance() {
        let cb = book(&[&[1.0, 0.0], &[0.0, 3.0]]);
        let (ix, code) = quantize(&[0.0, 3.0], &cb).unwrap();
        assert_eq!(ix, 1);
        assert_eq!(code, vec![0.0, 3.0]);
    }

    #[test]
    fn quantize_tie_breaks_to_lowest_index() {
        let cb = book(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let (ix, _) = quantize(&[0.0, 0.0], &cb).unwrap();
        assert_eq!(ix, 0);
    }

    #[test]
    fn quantize_matches_linear_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let k = rng.gen_range(1..20);
            let d = rng.gen_range(1..6);
            let cb = Codebook::random(k, d, 2.0, &mut rng);
            let sub: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (ix, _) = quantize(&sub, &cb).unwrap();
            // independent exhaustive scan
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for j in 0..k {
                let dd: f64 = cb.code(j).iter().zip(&sub).map(|(c, x)| (c - x).powi(2)).sum();
                if dd < best_d {
                    best_d = dd;
                    best = j;
                }
            }
            assert_eq!(ix, best);
        }
    }

    #[test]
    fn degenerate_single_code_book() {
        let cb = book(&[&[0.5, -0.5]]);
        let q = quantize_style(&[9.0, 9.0, -9.0, -9.0], &cb).unwrap();
        assert_eq!(q.proxy, vec![0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn on_grid_style_is_fixed_point() {
        let cb = book(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let w = [1.0, 0.0, 0.0, 1.0];
        let q = quantize_style(&w, &cb).unwrap();
        assert_eq!(q.proxy, w.to_vec());
    }

    #[test]
    fn proxy_lies_in_codebook_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cb = Codebook::random(16, 4, 2.0, &mut rng);
        for _ in 0..50 {
            let w: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let q = quantize_style(&w, &cb).unwrap();
            for sub in &q.quantized_subs {
                assert!((0..cb.k()).any(|j| cb.code(j) == sub.as_slice()));
            }
        }
    }

    #[test]
    fn quantization_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cb = Codebook::random(16, 4, 2.0, &mut rng);
        for _ in 0..100 {
            let w: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let q = quantize_style(&w, &cb).unwrap();
            let q2 = quantize_style(&q.proxy, &cb).unwrap();
            assert_eq!(q2.proxy, q.proxy);
            assert_eq!(q2.indices, q.indices);
        }
    }

    #[test]
    fn usage_extremes() {
        let cb = book(&[&[0.0, 0.0], &[5.0, 5.0]]);
        let qs: Vec<_> = (0..10)
            .map(|_| quantize_style(&[0.1, 0.1, -0.1, 0.0], &cb).unwrap())
            .collect();
        assert_eq!(usage(&qs, cb.k()), 0.5);
        let both = vec![
            quantize_style(&[0.0, 0.0, 5.0, 5.0], &cb).unwrap(),
        ];
        assert_eq!(usage(&both, cb.k()), 1.0);
    }

    fn sq_loss_on_batch(w: &[f64], cb: &Codebook, beta: f64) -> f64 {
        let mut g = Graph::new();
        let wid = g.leaf(Tensor::matrix(1, w.len(), w.to_vec()), true);
        let codes = g.leaf(cb.codes.clone(), true);
        let s = w.len() / cb.code_dim();
        let qb = quantize_batch(&mut g, wid, codes, cb, s).unwrap();
        let loss = sq_loss(&mut g, &qb, beta).unwrap();
        g.value(loss).item()
    }

    #[test]
    fn sq_loss_zero_at_codebook_point() {
        let cb = book(&[&[1.0, 0.0]]);
        assert_eq!(sq_loss_on_batch(&[1.0, 0.0], &cb, 0.25), 0.0);
    }

    #[test]
    fn sq_loss_hand_value() {
        // w_hat=[1,0], nearest code [0,0]: 1 + 0.25*1 = 1.25
        let cb = book(&[&[0.0, 0.0]]);
        let v = sq_loss_on_batch(&[1.0, 0.0], &cb, 0.25);
        assert!((v - 1.25).abs() < 1e-12, "{v}");
    }

    #[test]
    fn sq_loss_codes_gradient_zero_for_unselected_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cb = Codebook::random(6, 2, 2.0, &mut rng);
        let mut g = Graph::new();
        let w: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let wid = g.leaf(Tensor::matrix(1, 4, w), true);
        let codes = g.leaf(cb.codes.clone(), true);
        let qb = quantize_batch(&mut g, wid, codes, &cb, 2).unwrap();
        let loss = sq_loss(&mut g, &qb, 0.25).unwrap();
        let grads = g.backward(loss).unwrap();
        let dcodes = grads[codes.index()].as_ref().unwrap();
        let selected: Vec<usize> = qb.indices.iter().flatten().copied().collect();
        for j in 0..cb.k() {
            let row = &dcodes.data[j * 2..(j + 1) * 2];
            let touched = selected.contains(&j);
            let nonzero = row.iter().any(|v| *v != 0.0);
            assert_eq!(touched, nonzero, "row {j}");
        }
    }

    fn uniformity_of(rows: &[&[f64]], t: f64) -> f64 {
        let mut cb = book(rows);
        cb.rbf_scale = t;
        let mut g = Graph::new();
        let codes = g.leaf(cb.codes.clone(), true);
        let proj = g.leaf(cb.projection.clone(), true);
        let loss = uniformity_loss(&mut g, codes, proj, t).unwrap();
        g.value(loss).item()
    }

    #[test]
    fn uniformity_antipodal_pair() {
        let v = uniformity_of(&[&[1.0, 0.0], &[-1.0, 0.0]], 2.0);
        assert!((v - (-8.0)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn uniformity_identical_pair_is_maximal() {
        let v = uniformity_of(&[&[1.0, 0.0], &[1.0, 0.0]], 2.0);
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn uniformity_permutation_and_rotation_invariant() {
        let a = uniformity_of(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]], 2.0);
        let b = uniformity_of(&[&[0.0, 1.0], &[-1.0, 0.0], &[1.0, 0.0]], 2.0);
        assert!((a - b).abs() < 1e-12);
        // rotate all codes by 30 degrees
        let th = std::f64::consts::PI / 6.0;
        let rot = |x: f64, y: f64| [x * th.cos() - y * th.sin(), x * th.sin() + y * th.cos()];
        let r1 = rot(1.0, 0.0);
        let r2 = rot(0.0, 1.0);
        let r3 = rot(-1.0, 0.0);
        let c = uniformity_of(&[&r1, &r2, &r3], 2.0);
        assert!((a - c).abs() < 1e-9);
    }

    #[test]
    fn uniformity_decreases_when_coincident_codes_separate() {
        let base = uniformity_of(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]], 2.0);
        let eps = 1e-4;
        // separate the coincident pair away from the third code
        let nudged =
            uniformity_of(&[&[1.0, 0.0], &[1.0f64 - eps * eps / 2.0, -eps], &[0.0, 1.0]], 2.0);
        assert!(nudged < base);
    }

    #[test]
    fn uniformity_degenerate_projection_names_row() {
        let mut cb = book(&[&[1.0, 0.0], &[0.0, 1.0]]);
        cb.projection = Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 0.0]);
        let mut g = Graph::new();
        let codes = g.leaf(cb.codes.clone(), true);
        let proj = g.leaf(cb.projection.clone(), true);
        match uniformity_loss(&mut g, codes, proj, 2.0) {
            Err(QuantizerError::DegenerateProjection { row }) => assert_eq!(row, 0),
            other => panic!("expected degenerate projection, got {other:?}"),
        }
    }
}
