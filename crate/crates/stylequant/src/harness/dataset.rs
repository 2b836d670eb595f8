//! Synthetic datasets and evaluation metrics.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::autodiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussMixture,
    Rings,
    TinyRaster,
}

impl std::str::FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gauss_mixture" => Ok(DatasetKind::GaussMixture),
            "rings" => Ok(DatasetKind::Rings),
            "tiny_raster" => Ok(DatasetKind::TinyRaster),
            other => Err(format!("unknown dataset kind `{other}`")),
        }
    }
}

/// Dataset description; kind-specific fields fall back to defaults when the
/// kind does not use them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub size: usize,
    pub seed: u64,
    /// gauss_mixture: number of mixture components.
    pub modes: usize,
    /// gauss_mixture: radius of the circle the centers sit on.
    pub radius: f64,
    /// Per-coordinate (gauss_mixture) or radial (rings) noise std.
    pub std: f64,
    /// rings: number of concentric rings.
    pub rings: usize,
    /// rings: radial gap between consecutive rings.
    pub spacing: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::GaussMixture,
            size: 8000,
            seed: 7,
            modes: 8,
            radius: 2.0,
            std: 0.05,
            rings: 3,
            spacing: 1.0,
        }
    }
}

impl DatasetSpec {
    pub fn data_dim(&self) -> usize {
        match self.kind {
            DatasetKind::GaussMixture | DatasetKind::Rings => 2,
            DatasetKind::TinyRaster => 64,
        }
    }

    /// Mixture centers, equally spaced on the circle.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.modes)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / self.modes as f64;
                [self.radius * a.cos(), self.radius * a.sin()]
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// size × data_dim sample matrix.
    pub samples: Tensor,
}

/// Deterministic synthetic dataset from (kind, size, seed).
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.size == 0 {
        return Err(HarnessError::Config("dataset size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.data_dim();
    let mut data = Vec::with_capacity(spec.size * dim);
    match spec.kind {
        DatasetKind::GaussMixture => {
            if spec.modes == 0 {
                return Err(HarnessError::Config("gauss_mixture needs modes > 0".into()));
            }
            let centers = spec.centers();
            for _ in 0..spec.size {
                let c = centers[rng.gen_range(0..spec.modes)];
                let nx: f64 = rng.sample(rand_distr::StandardNormal);
                let ny: f64 = rng.sample(rand_distr::StandardNormal);
                data.push(c[0] + spec.std * nx);
                data.push(c[1] + spec.std * ny);
            }
        }
        DatasetKind::Rings => {
            if spec.rings == 0 {
                return Err(HarnessError::Config("rings needs rings > 0".into()));
            }
            for _ in 0..spec.size {
                let ring = rng.gen_range(0..spec.rings);
                let base = (ring + 1) as f64 * spec.spacing;
                let noise: f64 = rng.sample(rand_distr::StandardNormal);
                // clamp so every radius is within 6 std of its ring
                let r = base + spec.std * noise.clamp(-6.0, 6.0);
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                data.push(r * theta.cos());
                data.push(r * theta.sin());
            }
        }
        DatasetKind::TinyRaster => {
            let corpus = raster_corpus();
            for _ in 0..spec.size {
                let glyph = &corpus[rng.gen_range(0..corpus.len())];
                for &v in glyph {
                    let noise: f64 = rng.sample(rand_distr::StandardNormal);
                    data.push(v + 0.05 * noise);
                }
            }
        }
    }
    Ok(Dataset { spec: spec.clone(), samples: Tensor::matrix(spec.size, dim, data) })
}

/// Procedural 8×8 binary glyphs: squares, disks, crosses, and bars at a few
/// offsets.
fn raster_corpus() -> Vec<[f64; 64]> {
    let mut corpus = Vec::new();
    let mut push = |pred: &dyn Fn(usize, usize) -> bool| {
        let mut g = [0.0; 64];
        for r in 0..8 {
            for c in 0..8 {
                if pred(r, c) {
                    g[r * 8 + c] = 1.0;
                }
            }
        }
        corpus.push(g);
    };
    for off in 0..4 {
        push(&move |r, c| r >= off && r < off + 4 && c >= off && c < off + 4);
    }
    for (cy, cx) in [(3usize, 3usize), (3, 4), (4, 3), (4, 4)] {
        push(&move |r, c| {
            let dr = r as f64 - cy as f64;
            let dc = c as f64 - cx as f64;
            dr * dr + dc * dc <= 6.25
        });
    }
    for mid in 2..6 {
        push(&move |r, c| r == mid || c == mid);
    }
    for row in 0..8 {
        push(&move |r, _| r == row);
    }
    corpus
}

/// Fraction of mixture centers with at least 1% of `samples` within
/// 3·std.
pub fn mode_coverage(samples: &Tensor, spec: &DatasetSpec) -> Result<f64> {
    if spec.kind != DatasetKind::GaussMixture {
        return Err(HarnessError::WrongDatasetKind {
            expected: "gauss_mixture",
            found: format!("{:?}", spec.kind),
        });
    }
    let (n, dim) = samples.dims2().expect("rank-2 samples");
    assert_eq!(dim, 2, "gauss_mixture samples are 2-D");
    let centers = spec.centers();
    let thresh_sq = (3.0 * spec.std).powi(2);
    let min_count = 0.01 * n as f64;
    let mut covered = 0usize;
    for c in &centers {
        let mut count = 0usize;
        for i in 0..n {
            let dx = samples.data[2 * i] - c[0];
            let dy = samples.data[2 * i + 1] - c[1];
            if dx * dx + dy * dy <= thresh_sq {
                count += 1;
            }
        }
        if count as f64 >= min_count {
            covered += 1;
        }
    }
    Ok(covered as f64 / centers.len() as f64)
}

/// Unbiased squared maximum mean discrepancy with a Gaussian kernel of the
/// given bandwidth, directly in data space.
pub fn kernel_mmd(generated: &Tensor, real: &Tensor, bandwidth: f64) -> Result<f64> {
    let (n, dg) = generated.dims2().expect("rank-2 generated");
    let (m, dr) = real.dims2().expect("rank-2 real");
    if dg != dr {
        return Err(HarnessError::Config(format!(
            "mmd dimension mismatch: generated {dg}, real {dr}"
        )));
    }
    if n < 2 || m < 2 {
        return Err(HarnessError::Config(format!(
            "mmd needs at least 2 samples per side, got {n} and {m}"
        )));
    }
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-d2 / (2.0 * bandwidth * bandwidth)).exp()
    };
    fn slice(t: &Tensor, i: usize, d: usize) -> &[f64] {
        &t.data[i * d..(i + 1) * d]
    }
    let mut kxx = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kxx += k(slice(generated, i, dg), slice(generated, j, dg));
            }
        }
    }
    kxx /= (n * (n - 1)) as f64;
    let mut kyy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kyy += k(slice(real, i, dg), slice(real, j, dg));
            }
        }
    }
    kyy /= (m * (m - 1)) as f64;
    let mut kxy = 0.0;
    for i in 0..n {
        for j in 0..m {
            kxy += k(slice(generated, i, dg), slice(real, j, dg));
        }
    }
    kxy /= (n * m) as f64;
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Mean cosine similarity over unordered row pairs. Zero-norm rows are
/// excluded; the second return value counts them.
pub fn mean_cosine_similarity(features: &Tensor) -> Result<(f64, usize)> {
    let (n, d) = features.dims2().expect("rank-2 features");
    if n < 2 {
        return Err(HarnessError::Config(format!(
            "cosine similarity needs at least 2 rows, got {n}"
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut excluded = 0usize;
    for i in 0..n {
        let r = &features.data[i * d..(i + 1) * d];
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            excluded += 1;
        } else {
            rows.push(r.iter().map(|v| v / norm).collect());
        }
    }
    if rows.len() < 2 {
        return Err(HarnessError::Config(format!(
            "cosine similarity has {} usable rows after excluding {excluded} zero-norm rows",
            rows.len()
        )));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            sum += rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>();
            pairs += 1;
        }
    }
    Ok((sum / pairs as f64, excluded))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_mixture_mode_counts_are_balanced() {
        let spec = DatasetSpec { std: 0.02, ..Default::default() };
        let ds = make_dataset(&spec).unwrap();
        let centers = spec.centers();
        let mut counts = vec![0usize; spec.modes];
        for i in 0..spec.size {
            let x = ds.samples.data[2 * i];
            let y = ds.samples.data[2 * i + 1];
            let nearest = (0..spec.modes)
                .min_by(|&a, &b| {
                    let da = (x - centers[a][0]).powi(2) + (y - centers[a][1]).powi(2);
                    let db = (x - centers[b][0]).powi(2) + (y - centers[b][1]).powi(2);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            counts[nearest] += 1;
        }
        for &c in &counts {
            assert!((c as i64 - 1000).unsigned_abs() <= 80, "{counts:?}");
        }
    }

    #[test]
    fn regeneration_is_deterministic() {
        for kind in [DatasetKind::GaussMixture, DatasetKind::Rings, DatasetKind::TinyRaster] {
            let spec = DatasetSpec { kind, size: 200, seed: 11, ..Default::default() };
            let a = make_dataset(&spec).unwrap();
            let b = make_dataset(&spec).unwrap();
            assert_eq!(a.samples.data, b.samples.data);
            let other = make_dataset(&DatasetSpec { seed: 12, ..spec }).unwrap();
            assert_ne!(a.samples.data, other.samples.data);
        }
    }

    #[test]
    fn ring_radii_stay_within_six_sigma() {
        let spec = DatasetSpec {
            kind: DatasetKind::Rings,
            size: 5000,
            ..Default::default()
        };
        let ds = make_dataset(&spec).unwrap();
        for i in 0..spec.size {
            let x = ds.samples.data[2 * i];
            let y = ds.samples.data[2 * i + 1];
            let r = (x * x + y * y).sqrt();
            let nearest = (1..=spec.rings)
                .map(|k| (k as f64 * spec.spacing - r).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest <= 6.0 * spec.std + 1e-12, "radius {r}");
        }
    }

    #[test]
    fn coverage_full_and_collapsed() {
        let spec = DatasetSpec::default();
        let centers = spec.centers();
        let mut even = Vec::new();
        for _ in 0..100 {
            for c in &centers {
                even.extend_from_slice(c);
            }
        }
        let even = Tensor::matrix(800, 2, even);
        assert_eq!(mode_coverage(&even, &spec).unwrap(), 1.0);

        let collapsed = Tensor::matrix(
            800,
            2,
            (0..800).flat_map(|_| centers[0]).collect(),
        );
        assert!((mode_coverage(&collapsed, &spec).unwrap() - 1.0 / 8.0).abs() < 1e-12);

        let rings = DatasetSpec { kind: DatasetKind::Rings, ..Default::default() };
        assert!(matches!(
            mode_coverage(&even, &rings),
            Err(HarnessError::WrongDatasetKind { .. })
        ));
    }

    #[test]
    fn coverage_matches_nearest_center_oracle() {
        let spec = DatasetSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let centers = spec.centers();
        let n = 2000;
        let mut data = Vec::new();
        for _ in 0..n {
            let c = centers[rng.gen_range(0..4)]; // only half the modes
            data.push(c[0] + 0.03 * rng.sample::<f64, _>(rand_distr::StandardNormal));
            data.push(c[1] + 0.03 * rng.sample::<f64, _>(rand_distr::StandardNormal));
        }
        let samples = Tensor::matrix(n, 2, data);
        // oracle: per-sample nearest-center assignment, then threshold
        let mut counts = vec![0usize; spec.modes];
        for i in 0..n {
            let x = samples.data[2 * i];
            let y = samples.data[2 * i + 1];
            let (best, d2) = (0..spec.modes)
                .map(|m| (m, (x - centers[m][0]).powi(2) + (y - centers[m][1]).powi(2)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            if d2 <= (3.0 * spec.std).powi(2) {
                counts[best] += 1;
            }
        }
        let oracle = counts.iter().filter(|&&c| c as f64 >= 0.01 * n as f64).count() as f64
            / spec.modes as f64;
        assert_eq!(mode_coverage(&samples, &spec).unwrap(), oracle);
    }

    #[test]
    fn mmd_same_set_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 400;
        let data: Vec<f64> = (0..n * 2).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let x = Tensor::matrix(n, 2, data);
        let v = kernel_mmd(&x, &x, 1.0).unwrap();
        assert!(v.abs() < 3.0 / (n as f64).sqrt(), "{v}");
    }

    #[test]
    fn mmd_two_point_masses_matches_closed_form() {
        let n = 500;
        let h = 1.0;
        let d = 3.0f64;
        let a = Tensor::matrix(n, 1, vec![0.0; n]);
        let b = Tensor::matrix(n, 1, vec![d; n]);
        let v = kernel_mmd(&a, &b, h).unwrap();
        let expect = 2.0 * (1.0 - (-d * d / (2.0 * h * h)).exp());
        assert!((v - expect).abs() < 1e-9, "{v} vs {expect}");
    }

    #[test]
    fn mmd_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 50;
        let xd: Vec<f64> = (0..n * 2).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let yd: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::matrix(n, 2, xd.clone());
        let y = Tensor::matrix(n, 2, yd.clone());
        let mut xp: Vec<f64> = Vec::new();
        let mut yp: Vec<f64> = Vec::new();
        for i in (0..n).rev() {
            xp.extend_from_slice(&xd[2 * i..2 * i + 2]);
            yp.extend_from_slice(&yd[2 * i..2 * i + 2]);
        }
        let v1 = kernel_mmd(&x, &y, 0.7).unwrap();
        let v2 = kernel_mmd(
            &Tensor::matrix(n, 2, xp),
            &Tensor::matrix(n, 2, yp),
            0.7,
        )
        .unwrap();
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn cosine_similarity_identical_orthogonal_and_oracle() {
        let same = Tensor::matrix(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!((mean_cosine_similarity(&same).unwrap().0 - 1.0).abs() < 1e-12);

        let ortho = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 5.0]);
        assert!(mean_cosine_similarity(&ortho).unwrap().0.abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..10 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let feats = Tensor::matrix(10, 4, data.clone());
        let mut sum = 0.0;
        let mut pairs = 0;
        for i in 0..10 {
            for j in i + 1..10 {
                let a = &data[i * 4..i * 4 + 4];
                let b = &data[j * 4..j * 4 + 4];
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                sum += dot / (na * nb);
                pairs += 1;
            }
        }
        let oracle = sum / pairs as f64;
        assert!((mean_cosine_similarity(&feats).unwrap().0 - oracle).abs() < 1e-12);
    }

    #[test]
    fn cosine_similarity_excludes_zero_rows() {
        let feats = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let (mean, excluded) = mean_cosine_similarity(&feats).unwrap();
        assert_eq!(excluded, 1);
        assert!((mean - 1.0).abs() < 1e-12);
    }
}
