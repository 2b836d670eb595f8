//! Training losses: non-saturating adversarial objectives, the baseline
//! latent consistency regularizer, and the quantization-based variant.
//! Every expectation is a mean over the batch; squared norms are means over
//! non-batch elements so loss magnitudes stay comparable across dimensions.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Result};
use crate::networks::{Mlp, MlpBinding};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_sq: f64,
    pub lambda_qcr: f64,
    pub lambda_fd: f64,
    pub lambda_g: f64,
    pub sigma: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sq: 0.01,
            lambda_qcr: 0.01,
            lambda_fd: 10.0,
            lambda_g: 0.5,
            sigma: 0.1,
            beta: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let fields = [
            ("lambda_sq", self.lambda_sq),
            ("lambda_qcr", self.lambda_qcr),
            ("lambda_fd", self.lambda_fd),
            ("lambda_g", self.lambda_g),
            ("sigma", self.sigma),
            ("beta", self.beta),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) {
                return Err(format!("loss weight {name} must be nonnegative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Generator adversarial loss: mean of 1 - log sigmoid(logit), in
/// softplus form so large negative logits stay finite.
pub fn adv_g(g: &mut Graph, fake_logits: NodeId) -> NodeId {
    let neg = g.neg(fake_logits);
    let sp = g.softplus(neg); // -log sigmoid(x)
    let m = g.mean(sp);
    g.add_scalar(m, 1.0)
}

/// Discriminator adversarial loss:
/// -mean log sigmoid(real) - mean log(1 - sigmoid(fake)).
pub fn adv_d(g: &mut Graph, real_logits: NodeId, fake_logits: NodeId) -> Result<NodeId> {
    let neg_real = g.neg(real_logits);
    let sp_real = g.softplus(neg_real);
    let real_term = g.mean(sp_real);
    let sp_fake = g.softplus(fake_logits);
    let fake_term = g.mean(sp_fake);
    g.add(real_term, fake_term)
}

/// Baseline CR on the discriminator: lambda_fd * mean squared difference of
/// logits on g(z) and g(z + eps).
pub fn cr_d(g: &mut Graph, logits_a: NodeId, logits_b: NodeId, lambda_fd: f64) -> Result<NodeId> {
    let d = g.sub(logits_a, logits_b)?;
    let sq = g.square(d);
    let m = g.mean(sq);
    Ok(g.mul_scalar(m, lambda_fd))
}

/// Baseline CR on the generator: a diversity reward, -lambda_g * mean
/// squared sample-space difference.
pub fn cr_g(g: &mut Graph, x_a: NodeId, x_b: NodeId, lambda_g: f64) -> Result<NodeId> {
    let d = g.sub(x_a, x_b)?;
    let sq = g.square(d);
    let m = g.mean(sq);
    Ok(g.mul_scalar(m, -lambda_g))
}

/// Quantization-based CR: mean squared logit gap between samples generated
/// from the quantized styles of z and z + eps. The generated samples are
/// detached first, so only the discriminator receives gradients.
pub fn qcr_d(
    g: &mut Graph,
    disc: &Mlp,
    db: &MlpBinding,
    x_a: NodeId,
    x_b: NodeId,
) -> Result<NodeId> {
    let xa = g.stop_gradient(x_a);
    let xb = g.stop_gradient(x_b);
    let la = disc.forward(g, db, xa)?;
    let lb = disc.forward(g, db, xb)?;
    let d = g.sub(la, lb)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}
