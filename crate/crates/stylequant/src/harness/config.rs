//! Training configuration: a single TOML file with nested sections; unknown
//! keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::DatasetSpec;
use super::{HarnessError, Result};
use crate::cbi::CbiConfig;
use crate::networks::Dims;
use crate::objectives::LossWeights;
use crate::optim::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    PlainGan,
    GanCr,
    SqGan,
    SqGanCbi,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub eval_samples: usize,
    /// 0 means: write only the final checkpoint.
    pub checkpoint_interval: usize,
    pub mmd_bandwidth: f64,
    pub mapper_hidden: Vec<usize>,
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub codebook_k: usize,
    /// RBF scale t of the uniformity loss.
    pub rbf_scale: f64,
    pub dims: Dims,
    pub weights: LossWeights,
    pub optimizer: AdamConfig,
    pub dataset: DatasetSpec,
    pub cbi: Option<CbiConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::SqGan,
            seed: 0,
            out_dir: PathBuf::from("out"),
            steps: 20_000,
            batch_size: 64,
            eval_interval: 500,
            eval_samples: 2000,
            checkpoint_interval: 0,
            mmd_bandwidth: 1.0,
            dims: Dims { d_z: 8, d_w: 8, s: 4, data_dim: 2 },
            mapper_hidden: vec![64],
            generator_hidden: vec![64, 64],
            discriminator_hidden: vec![64, 64],
            codebook_k: 16,
            rbf_scale: 2.0,
            weights: LossWeights::default(),
            optimizer: AdamConfig::default(),
            dataset: DatasetSpec::default(),
            cbi: None,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: TrainConfig = toml::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(HarnessError::Config(msg));
        if self.steps == 0 {
            return err("steps must be positive".into());
        }
        if self.batch_size < 2 {
            return err("batch_size must be at least 2".into());
        }
        if self.eval_interval == 0 {
            return err("eval_interval must be positive".into());
        }
        if self.eval_samples < 2 {
            return err("eval_samples must be at least 2".into());
        }
        if self.mmd_bandwidth <= 0.0 {
            return err("mmd_bandwidth must be positive".into());
        }
        if self.dims.s == 0 || self.dims.d_w % self.dims.s != 0 {
            return err(format!(
                "d_w = {} must divide into s = {} equal sub-vectors",
                self.dims.d_w, self.dims.s
            ));
        }
        if self.codebook_k == 0 {
            return err("codebook_k must be positive".into());
        }
        if self.rbf_scale <= 0.0 {
            return err("rbf_scale must be positive".into());
        }
        self.weights.validate().map_err(HarnessError::Config)?;
        if self.dataset.size == 0 {
            return err("dataset.size must be positive".into());
        }
        if self.dataset.data_dim() != self.dims.data_dim {
            return err(format!(
                "dataset {:?} produces {}-dimensional samples but dims.data_dim = {}",
                self.dataset.kind,
                self.dataset.data_dim(),
                self.dims.data_dim
            ));
        }
        match (self.mode, &self.cbi) {
            (Mode::SqGanCbi, None) => {
                return err("mode sq_gan_cbi requires a [cbi] section".into());
            }
            (Mode::SqGanCbi, Some(cbi)) => {
                if cbi.batch_n == 0 || cbi.batch_m == 0 {
                    return err("cbi batch sizes must be positive".into());
                }
                if cbi.d_e == 0 || cbi.tokens_l == 0 {
                    return err("cbi d_e and tokens_l must be positive".into());
                }
                if cbi.eta <= 0.0 {
                    return err("cbi eta must be positive".into());
                }
                if !(cbi.provider == "frozen_random_mlp" || cbi.provider.starts_with("file:")) {
                    return err(format!(
                        "cbi provider must be `frozen_random_mlp` or `file:<path>`, got `{}`",
                        cbi.provider
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// True when the style-quantization pipeline participates in training.
    /// With both quantization weights at zero the run degenerates to the
    /// plain-GAN dynamics exactly, including its random stream.
    pub fn quantization_active(&self) -> bool {
        matches!(self.mode, Mode::SqGan | Mode::SqGanCbi)
            && !(self.weights.lambda_sq == 0.0 && self.weights.lambda_qcr == 0.0)
    }
}
