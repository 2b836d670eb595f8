//! Browser bindings: three interactive views of the laboratory — codebook
//! uniformity descent, entropic optimal transport, and live toy-GAN
//! training. All state lives in the exported structs; JS talks JSON.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use stylequant::harness::{DatasetSpec, Mode, TrainConfig, Trainer};
use stylequant::networks::Dims;
use stylequant::optim::{Adam, AdamConfig};
use stylequant::quantizer::{uniformity_loss, Codebook};
use stylequant::sinkhorn::{log_domain_sinkhorn, CostMatrix, Metric};
use stylequant::{Graph, Tensor};

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable")
}

/// Gradient descent of the hyperspherical uniformity loss on a small
/// codebook; the page animates the projected codes spreading out.
#[wasm_bindgen]
pub struct UniformityDemo {
    codes: Tensor,
    projection: Tensor,
    rbf_scale: f64,
    adam: Adam,
}

#[derive(Serialize)]
struct UniformityFrame {
    loss: f64,
    /// Unit-norm projected codes, k × d rows.
    positions: Vec<Vec<f64>>,
}

#[wasm_bindgen]
impl UniformityDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(k: usize, dim: usize, rbf_scale: f64, seed: u64) -> Result<UniformityDemo, JsError> {
        if k < 2 || dim == 0 {
            return Err(JsError::new("need at least 2 codes and a positive dimension"));
        }
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::random(k, dim, rbf_scale, &mut rng);
        Ok(UniformityDemo {
            codes: cb.codes,
            projection: cb.projection,
            rbf_scale,
            adam: Adam::new(AdamConfig { lr: 0.05, ..Default::default() }),
        })
    }

    /// Run `n` descent steps; returns the latest loss and positions as JSON.
    pub fn step(&mut self, n: usize) -> Result<String, JsError> {
        let mut loss = f64::NAN;
        for _ in 0..n.max(1) {
            let mut g = Graph::new();
            let codes = g.leaf(self.codes.clone(), true);
            let proj = g.constant(self.projection.clone());
            let uf = uniformity_loss(&mut g, codes, proj, self.rbf_scale)
                .map_err(|e| JsError::new(&e.to_string()))?;
            loss = g.value(uf).item();
            let grads = g.backward(uf).map_err(|e| JsError::new(&e.to_string()))?;
            if let Some(grad) = grads[codes.index()].as_ref() {
                self.adam.step("codes", &mut self.codes, grad);
            }
        }
        Ok(to_json(&UniformityFrame { loss, positions: self.positions() }))
    }

    fn positions(&self) -> Vec<Vec<f64>> {
        let (k, d) = self.codes.dims2().expect("rank-2 codes");
        let (dp, _) = self.projection.dims2().expect("rank-2 projection");
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let c = &self.codes.data[i * d..(i + 1) * d];
            let mut p = vec![0.0; dp];
            for (r, row) in p.iter_mut().enumerate() {
                *row = (0..d).map(|j| self.projection.data[r * d + j] * c[j]).sum();
            }
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            out.push(p.iter().map(|v| v / norm).collect());
        }
        out
    }
}

#[derive(Serialize)]
struct SinkhornResult {
    plan: Vec<Vec<f64>>,
    transport_cost: f64,
    iterations: usize,
    marginal_error: f64,
    converged: bool,
}

/// Solve one entropic OT problem between two 2-D point clouds given as flat
/// [x0, y0, x1, y1, ...] arrays; returns the plan as JSON.
#[wasm_bindgen]
pub fn sinkhorn_plan(
    source: Vec<f64>,
    target: Vec<f64>,
    eta: f64,
    tol: f64,
) -> Result<String, JsError> {
    if source.len() < 2 || source.len() % 2 != 0 || target.len() < 2 || target.len() % 2 != 0 {
        return Err(JsError::new("point clouds must be nonempty flat [x, y, ...] arrays"));
    }
    let n = source.len() / 2;
    let m = target.len() / 2;
    let a = Tensor::matrix(n, 2, source);
    let b = Tensor::matrix(m, 2, target);
    let cost = CostMatrix::between(&a, &b, Metric::Euclidean);
    let p = vec![1.0 / n as f64; n];
    let q = vec![1.0 / m as f64; m];
    let state = log_domain_sinkhorn(&cost, &p, &q, eta, tol, 10_000)
        .map_err(|e| JsError::new(&e.to_string()))?;
    let plan = (0..n)
        .map(|i| state.plan().data[i * m..(i + 1) * m].to_vec())
        .collect();
    Ok(to_json(&SinkhornResult {
        plan,
        transport_cost: state.transport_cost(&cost),
        iterations: state.iterations,
        marginal_error: state.marginal_error,
        converged: state.converged,
    }))
}

/// Live toy-GAN training on an 8-mode Gaussian mixture, with or without
/// style quantization.
#[wasm_bindgen]
pub struct GanDemo {
    trainer: Trainer,
}

#[derive(Serialize)]
struct GanFrame {
    step: usize,
    adv_g: f64,
    adv_d: f64,
    sq: f64,
    uniformity: f64,
    samples: Vec<Vec<f64>>,
    real: Vec<Vec<f64>>,
}

#[wasm_bindgen]
impl GanDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(quantized: bool, seed: u64) -> Result<GanDemo, JsError> {
        let config = TrainConfig {
            mode: if quantized { Mode::SqGan } else { Mode::PlainGan },
            seed,
            steps: 1_000_000, // the page decides when to stop
            batch_size: 32,
            eval_interval: 1000,
            eval_samples: 256,
            dims: Dims { d_z: 8, d_w: 8, s: 4, data_dim: 2 },
            mapper_hidden: vec![32],
            generator_hidden: vec![32, 32],
            discriminator_hidden: vec![32, 32],
            codebook_k: 16,
            dataset: DatasetSpec { size: 2000, ..Default::default() },
            ..Default::default()
        };
        let trainer = Trainer::new(config).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(GanDemo { trainer })
    }

    /// Advance `n` training steps and return a frame of generated and real
    /// samples for plotting.
    pub fn step(&mut self, n: usize) -> Result<String, JsError> {
        for _ in 0..n.max(1) {
            self.trainer.step().map_err(|e| JsError::new(&e.to_string()))?;
        }
        let samples = self.trainer.sample(256);
        let real = &self.trainer.dataset.samples;
        let take_rows = |t: &Tensor, n: usize| -> Vec<Vec<f64>> {
            (0..n.min(t.shape[0])).map(|i| t.data[i * 2..(i + 1) * 2].to_vec()).collect()
        };
        let last = self.trainer.last;
        Ok(to_json(&GanFrame {
            step: self.trainer.steps_done(),
            adv_g: last.adv_g,
            adv_d: last.adv_d,
            sq: last.sq,
            uniformity: last.uniformity,
            samples: take_rows(&samples, 256),
            real: take_rows(real, 256),
        }))
    }
}
