//! Self-describing binary checkpoints: magic, version, shape descriptor,
//! named little-endian float64 parameter blocks, trailing CRC32.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::networks::{Dims, GanModel};

pub const MAGIC: &[u8; 8] = b"SQLABCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("checkpoint truncated while reading {reading}")]
    Truncated { reading: &'static str },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("shape descriptor hash mismatch")]
    DescriptorHashMismatch,
    #[error("unparseable shape descriptor: {0}")]
    BadDescriptor(String),
    #[error("parameter {name}: declared dims imply shape {expected:?}, block has {found:?}")]
    DimMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint contains unknown parameter {0}")]
    UnknownParam(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Everything needed to rebuild the model skeleton before loading weights.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub mapper_hidden: Vec<usize>,
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub codebook_k: usize,
    pub rbf_scale: f64,
    pub dims: Dims,
}

impl ModelShape {
    pub fn of(model: &GanModel) -> Self {
        let hidden = |widths: &[usize]| widths[1..widths.len() - 1].to_vec();
        ModelShape {
            dims: model.dims,
            mapper_hidden: hidden(&model.mapper.spec.layer_widths),
            generator_hidden: hidden(&model.generator.spec.layer_widths),
            discriminator_hidden: hidden(&model.discriminator.spec.layer_widths),
            codebook_k: model.codebook.k(),
            rbf_scale: model.codebook.rbf_scale,
        }
    }

    fn build(&self) -> GanModel {
        // parameters are overwritten after construction; the rng only fills
        // placeholder values
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        GanModel::new(
            self.dims,
            &self.mapper_hidden,
            &self.generator_hidden,
            &self.discriminator_hidden,
            self.codebook_k,
            self.rbf_scale,
            &mut rng,
        )
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn save_checkpoint(model: &GanModel, path: &Path) -> Result<()> {
    let shape = ModelShape::of(model);
    let descriptor = toml::to_string(&shape).expect("shape serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    push_u32(&mut buf, descriptor.len() as u32);
    buf.extend_from_slice(descriptor.as_bytes());
    push_u32(&mut buf, crc32fast::hash(descriptor.as_bytes()));
    let params = model.named_params();
    push_u32(&mut buf, params.len() as u32);
    for (name, tensor) in &params {
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, tensor.shape.len() as u32);
        for &d in &tensor.shape {
            push_u64(&mut buf, d as u64);
        }
        for &v in &tensor.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    push_u32(&mut buf, crc);
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, reading: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { reading });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, reading: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, reading)?.try_into().unwrap()))
    }

    fn u64(&mut self, reading: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, reading)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<GanModel> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 8 {
        return Err(CheckpointError::Truncated { reading: "file header" });
    }
    // integrity first: nothing is interpreted until the whole file checks out
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, supported: VERSION });
    }
    let dlen = r.u32("descriptor length")? as usize;
    let descriptor = std::str::from_utf8(r.take(dlen, "shape descriptor")?)
        .map_err(|_| CheckpointError::BadDescriptor("descriptor is not UTF-8".into()))?
        .to_string();
    let dhash = r.u32("descriptor hash")?;
    if dhash != crc32fast::hash(descriptor.as_bytes()) {
        return Err(CheckpointError::DescriptorHashMismatch);
    }
    let shape: ModelShape = toml::from_str(&descriptor)
        .map_err(|e| CheckpointError::BadDescriptor(e.to_string()))?;
    let count = r.u32("parameter count")? as usize;
    let mut blocks: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "parameter name")?)
            .map_err(|_| CheckpointError::BadDescriptor("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("shape rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("shape dim")? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let v = r.take(8, "parameter payload")?;
            data.push(f64::from_le_bytes(v.try_into().unwrap()));
        }
        blocks.insert(name, Tensor::new(dims, data));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::BadDescriptor("trailing bytes after parameters".into()));
    }

    let mut model = shape.build();
    let mut seen = std::collections::BTreeSet::new();
    for (name, param) in model.named_params_mut() {
        let block = blocks
            .get(&name)
            .ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
        if block.shape != param.shape {
            return Err(CheckpointError::DimMismatch {
                name,
                expected: param.shape.clone(),
                found: block.shape.clone(),
            });
        }
        *param = block.clone();
        seen.insert(name);
    }
    for name in blocks.keys() {
        if !seen.contains(name) {
            return Err(CheckpointError::UnknownParam(name.clone()));
        }
    }
    Ok(model)
}
