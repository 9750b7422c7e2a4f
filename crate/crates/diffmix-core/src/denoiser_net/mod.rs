//! The conditional denoiser: configuration, inference API, training loop
//! and the single-file checkpoint container.
//!
//! The network is an encoder/decoder with timestep embeddings in every
//! residual block; the semantic label map conditions the decoder only,
//! through spatially adaptive scale/bias modulation. Weights are f32; the
//! public [`Denoiser::denoise`] boundary speaks f64 to match the diffusion
//! math.

pub mod nn;
mod train;
mod unet;

pub mod checkpoint;

pub use train::{TrainHyperparams, TrainPatch, Trainer};
pub use unet::{UNet, UNetShape};

use crate::diffusion_core::DenoiserOutput;
use ndarray::{Array3, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("denoiser weights are not initialized")]
    NotInitialized,
    #[error("step {t} out of range [1, {t_max}]")]
    StepOutOfRange { t: usize, t_max: usize },
    #[error("invalid denoiser config: {0}")]
    InvalidConfig(String),
    #[error("training data shape mismatch: {0}")]
    DataShapeMismatch(String),
    #[error("resume state corrupt: {0}")]
    ResumeStateCorrupt(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Structural configuration of the denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Image channels (3 for RGB).
    pub input_channels: usize,
    /// Conditioning channels = class count including background.
    pub condition_channels: usize,
    pub base_width: usize,
    /// Number of resolution levels.
    pub depth: usize,
    pub timestep_embedding_dim: usize,
    /// Training patch edge length. Inference accepts any spatial size
    /// divisible by 2^(depth-1); this records what the trainer crops.
    pub patch_size: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        // Desk-scale default: ~5M parameters at 64x64 patches.
        DenoiserConfig {
            input_channels: 3,
            condition_channels: 4,
            base_width: 64,
            depth: 3,
            timestep_embedding_dim: 256,
            patch_size: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<(), DenoiserError> {
        let positive = [
            ("input_channels", self.input_channels),
            ("condition_channels", self.condition_channels),
            ("base_width", self.base_width),
            ("depth", self.depth),
            ("timestep_embedding_dim", self.timestep_embedding_dim),
            ("patch_size", self.patch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DenoiserError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        let div = 1usize << (self.depth - 1);
        if !self.patch_size.is_multiple_of(div) {
            return Err(DenoiserError::InvalidConfig(format!(
                "patch_size {} must be divisible by 2^(depth-1) = {div}",
                self.patch_size
            )));
        }
        if !self.base_width.is_multiple_of(4) {
            return Err(DenoiserError::InvalidConfig(
                "base_width must be a multiple of 4 (group-norm groups)".into(),
            ));
        }
        if !self.timestep_embedding_dim.is_multiple_of(2) {
            return Err(DenoiserError::InvalidConfig(
                "timestep_embedding_dim must be even".into(),
            ));
        }
        Ok(())
    }

    fn shape(&self) -> UNetShape {
        UNetShape {
            input_channels: self.input_channels,
            condition_channels: self.condition_channels,
            base_width: self.base_width,
            depth: self.depth,
            timestep_embedding_dim: self.timestep_embedding_dim,
        }
    }
}

/// A loaded denoiser: network structure plus parameter store.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    net: UNet,
    params: nn::ParamStore,
    /// Largest admissible timestep (the schedule length it was built for).
    t_max: usize,
}

impl Denoiser {
    /// Fresh initialization with seeded weights.
    pub fn init(config: &DenoiserConfig, t_max: usize, seed: u64) -> Result<Self, DenoiserError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, params) = UNet::new(config.shape(), &mut rng);
        Ok(Denoiser { config: config.clone(), net, params, t_max })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn param_count(&self) -> usize {
        self.params.total_values()
    }

    pub(crate) fn net(&self) -> &UNet {
        &self.net
    }

    pub(crate) fn params(&self) -> &nn::ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut nn::ParamStore {
        &mut self.params
    }

    fn check_spatial(&self, h: usize, w: usize) -> Result<(), DenoiserError> {
        let div = 1usize << (self.config.depth - 1);
        if h == 0 || w == 0 || !h.is_multiple_of(div) || !w.is_multiple_of(div) {
            return Err(DenoiserError::ShapeMismatch(format!(
                "spatial size {h}x{w} must be divisible by 2^(depth-1) = {div}"
            )));
        }
        Ok(())
    }

    /// f32 fast path used by the trainer and sampler.
    pub(crate) fn forward_f32(
        &self,
        y_t: &nn::Feat,
        t: usize,
        cond: &nn::Feat,
    ) -> (nn::Feat, nn::Feat, unet::Tape) {
        self.net.forward(&self.params, y_t, t, cond)
    }

    /// Predicts noise and the variance-interpolation coefficient.
    /// `cond` is the C-channel one-hot map; `None` is the all-zero null map
    /// (the unconditional branch).
    pub fn denoise(
        &self,
        y_t: &ArrayD<f64>,
        t: usize,
        cond: Option<&Array3<f64>>,
    ) -> Result<DenoiserOutput, DenoiserError> {
        if self.params.is_empty() {
            return Err(DenoiserError::NotInitialized);
        }
        if t < 1 || t > self.t_max {
            return Err(DenoiserError::StepOutOfRange { t, t_max: self.t_max });
        }
        let shape = y_t.shape();
        if shape.len() != 3 || shape[0] != self.config.input_channels {
            return Err(DenoiserError::ShapeMismatch(format!(
                "expected ({}, h, w) input, got {shape:?}",
                self.config.input_channels
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        self.check_spatial(h, w)?;

        let y32 = Array3::from_shape_fn((shape[0], h, w), |(c, r, col)| {
            y_t[[c, r, col]] as f32
        });
        let cond32 = match cond {
            Some(x) => {
                let cs = x.dim();
                if cs != (self.config.condition_channels, h, w) {
                    return Err(DenoiserError::ShapeMismatch(format!(
                        "conditioning is {cs:?}, expected ({}, {h}, {w})",
                        self.config.condition_channels
                    )));
                }
                x.mapv(|v| v as f32)
            }
            None => Array3::zeros((self.config.condition_channels, h, w)),
        };
        let (eps, v, _) = self.forward_f32(&y32, t, &cond32);
        Ok(DenoiserOutput {
            eps_hat: eps.mapv(|x| x as f64).into_dyn(),
            v: v.mapv(|x| x as f64).into_dyn(),
        })
    }
}
