//! Style-space quantization laboratory.
//!
//! Trains toy GANs whose intermediate "style" vectors are split into
//! sub-vectors and snapped to a learnable codebook, with hyperspherical
//! uniformity regularization, quantization-based consistency regularization,
//! and an optimal-transport codebook initialization phase. Everything runs
//! on synthetic datasets small enough for exact oracles.

pub mod autodiff;
pub mod cbi;
pub mod gradcheck;
pub mod harness;
pub mod networks;
pub mod objectives;
pub mod optim;
pub mod quantizer;
pub mod sinkhorn;

pub use autodiff::{Graph, NodeId, Tensor};
