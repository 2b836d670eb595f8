//! Toy-scale mapping network, synthesis network, and discriminator. Plain
//! MLPs over batched row vectors; the style vector enters the generator once
//! as its input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Result, Tensor};
use crate::quantizer::Codebook;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Tanh,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Widths from input to output, inclusive: [in, h1, ..., out].
    pub layer_widths: Vec<usize>,
    /// One activation per affine layer (layer_widths.len() - 1 entries).
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let n_layers = widths.len() - 1;
        let mut acts = vec![Activation::LeakyRelu; n_layers];
        acts[n_layers - 1] = Activation::None;
        MlpSpec { layer_widths: widths, activations: acts }
    }

    pub fn layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

/// Graph handles for one forward pass of an MLP.
pub struct MlpBinding {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl Mlp {
    /// He-style init: per-layer normal with std sqrt(2 / fan_in), zero biases.
    pub fn init(spec: MlpSpec, rng: &mut impl Rng) -> Self {
        let mut weights = Vec::with_capacity(spec.layers());
        let mut biases = Vec::with_capacity(spec.layers());
        for w in spec.layer_widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| {
                    let u: f64 = rng.sample(rand_distr::StandardNormal);
                    u * std
                })
                .collect();
            weights.push(Tensor::matrix(fan_in, fan_out, data));
            biases.push(Tensor::vector(vec![0.0; fan_out]));
        }
        Mlp { spec, weights, biases }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum::<usize>()
            + self.biases.iter().map(Tensor::len).sum::<usize>()
    }

    /// Register this MLP's parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MlpBinding {
        let weights = self.weights.iter().map(|w| g.leaf(w.clone(), trainable)).collect();
        let biases = self.biases.iter().map(|b| g.leaf(b.clone(), trainable)).collect();
        MlpBinding { weights, biases }
    }

    /// Forward a batch (n × input_dim) through the bound parameters.
    pub fn forward(&self, g: &mut Graph, binding: &MlpBinding, x: NodeId) -> Result<NodeId> {
        Ok(self.forward_with_penultimate(g, binding, x)?.0)
    }

    /// Graph-free forward pass for frozen or inference-only use.
    pub fn eval(&self, x: &Tensor) -> Tensor {
        let (n, mut width) = x.dims2().expect("rank-2 input");
        assert_eq!(width, self.spec.input_dim(), "input width mismatch");
        let mut h = x.data.clone();
        for (i, act) in self.spec.activations.iter().enumerate() {
            let (fan_in, fan_out) = (self.spec.layer_widths[i], self.spec.layer_widths[i + 1]);
            let w = &self.weights[i].data;
            let b = &self.biases[i].data;
            let mut out = vec![0.0; n * fan_out];
            for r in 0..n {
                for p in 0..fan_in {
                    let hv = h[r * fan_in + p];
                    if hv == 0.0 {
                        continue;
                    }
                    let wrow = &w[p * fan_out..(p + 1) * fan_out];
                    let orow = &mut out[r * fan_out..(r + 1) * fan_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += hv * wv;
                    }
                }
                for c in 0..fan_out {
                    out[r * fan_out + c] += b[c];
                }
            }
            match act {
                Activation::LeakyRelu => {
                    for v in &mut out {
                        if *v < 0.0 {
                            *v *= 0.2;
                        }
                    }
                }
                Activation::Tanh => {
                    for v in &mut out {
                        *v = v.tanh();
                    }
                }
                Activation::None => {}
            }
            h = out;
            width = fan_out;
        }
        Tensor::matrix(n, width, h)
    }

    /// Forward pass that also returns the activation feeding the last layer.
    pub fn forward_with_penultimate(
        &self,
        g: &mut Graph,
        binding: &MlpBinding,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let mut h = x;
        let mut penultimate = x;
        for (i, act) in self.spec.activations.iter().enumerate() {
            if i == self.spec.layers() - 1 {
                penultimate = h;
            }
            let lin = g.matmul(h, binding.weights[i])?;
            let z = g.add_row(lin, binding.biases[i])?;
            h = match act {
                Activation::LeakyRelu => g.leaky_relu(z, 0.2),
                Activation::Tanh => g.tanh(z),
                Activation::None => z,
            };
        }
        Ok((h, penultimate))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_z: usize,
    pub d_w: usize,
    /// Number of sub-vectors each style vector splits into.
    pub s: usize,
    pub data_dim: usize,
}

impl Dims {
    pub fn code_dim(&self) -> usize {
        self.d_w / self.s
    }
}

/// The full model: mapping network, generator, discriminator, codebook.
#[derive(Debug, Clone)]
pub struct GanModel {
    pub mapper: Mlp,
    pub generator: Mlp,
    pub discriminator: Mlp,
    pub codebook: Codebook,
    pub dims: Dims,
}

impl GanModel {
    pub fn new(
        dims: Dims,
        mapper_hidden: &[usize],
        generator_hidden: &[usize],
        discriminator_hidden: &[usize],
        codebook_k: usize,
        rbf_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(dims.d_w % dims.s, 0, "d_w must divide evenly into s sub-vectors");
        let mapper = Mlp::init(MlpSpec::new(dims.d_z, mapper_hidden, dims.d_w), rng);
        let generator = Mlp::init(MlpSpec::new(dims.d_w, generator_hidden, dims.data_dim), rng);
        let discriminator =
            Mlp::init(MlpSpec::new(dims.data_dim, discriminator_hidden, 1), rng);
        let codebook = Codebook::random(codebook_k, dims.code_dim(), rbf_scale, rng);
        GanModel { mapper, generator, discriminator, codebook, dims }
    }

    /// Ordered (name, tensor) view of every learnable parameter.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, mlp) in [
            ("mapper", &self.mapper),
            ("generator", &self.generator),
            ("discriminator", &self.discriminator),
        ] {
            for (i, w) in mlp.weights.iter().enumerate() {
                out.push((format!("{prefix}.w{i}"), w));
            }
            for (i, b) in mlp.biases.iter().enumerate() {
                out.push((format!("{prefix}.b{i}"), b));
            }
        }
        out.push(("codebook.codes".to_string(), &self.codebook.codes));
        out.push(("codebook.projection".to_string(), &self.codebook.projection));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (prefix, mlp) in [
            ("mapper", &mut self.mapper),
            ("generator", &mut self.generator),
            ("discriminator", &mut self.discriminator),
        ] {
            for (i, w) in mlp.weights.iter_mut().enumerate() {
                out.push((format!("{prefix}.w{i}"), w));
            }
            for (i, b) in mlp.biases.iter_mut().enumerate() {
                out.push((format!("{prefix}.b{i}"), b));
            }
        }
        out.push(("codebook.codes".to_string(), &mut self.codebook.codes));
        out.push(("codebook.projection".to_string(), &mut self.codebook.projection));
        out
    }
}
