//! Image synthesis: partially noise a real patch, then denoise it with a
//! deterministic DDIM subsequence under classifier-free guidance from a
//! custom semantic label map. The output pairs the synthesized image with
//! the conditioning map itself, forming a new training sample.

use crate::dataset::{image_to_tensor, tensor_to_image};
use crate::denoiser_net::{Denoiser, DenoiserError};
use crate::diffusion_core::{
    guided_eps, q_sample, standard_normal, DiffusionError, NoiseSchedule,
};
use crate::label_space::{one_hot_encode, SemanticLabelMap};
use image::RgbImage;
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("step order violation: t={t} must exceed t_prev={t_prev}")]
    StepOrderViolation { t: usize, t_prev: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

/// Classifier-free guidance settings. The null conditioning is always the
/// all-zero map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Guidance scale s >= 0.
    pub s: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { s: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Length of the DDIM subsequence drawn from [1..T].
    pub ddim_steps: usize,
    /// Partial-noising depth in subsequence index units (1-based).
    pub t_noise: usize,
    pub guidance: GuidanceConfig,
    /// DDIM stochasticity; 0 is fully deterministic.
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            ddim_steps: 100,
            t_noise: 55,
            guidance: GuidanceConfig::default(),
            eta: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, t_count: usize) -> Result<(), SamplerError> {
        if self.ddim_steps < 1 || self.ddim_steps > t_count {
            return Err(SamplerError::InvalidConfig(format!(
                "ddim_steps {} must lie in [1, {t_count}]",
                self.ddim_steps
            )));
        }
        if self.t_noise < 1 || self.t_noise > self.ddim_steps {
            return Err(SamplerError::InvalidConfig(format!(
                "t_noise {} must lie in [1, ddim_steps = {}]",
                self.t_noise, self.ddim_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(SamplerError::InvalidConfig(format!(
                "eta {} must lie in [0, 1]",
                self.eta
            )));
        }
        if self.guidance.s < 0.0 {
            return Err(SamplerError::InvalidConfig(format!(
                "guidance scale {} must be non-negative",
                self.guidance.s
            )));
        }
        Ok(())
    }
}

/// Which map family conditioned a synthesized tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapMode {
    Balance,
    Enlarge,
    Original,
}

/// Provenance of one synthesized tile; together with the checkpoint this is
/// sufficient to reproduce the output exactly (eta = 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub source_tile_id: String,
    pub map_mode: MapMode,
    pub seed: u64,
    pub t_noise: usize,
    pub guidance_scale: f64,
    pub ddim_steps: usize,
    pub output_tile_id: String,
}

/// Evenly spaced ascending subsequence of [1..T] with `ddim_steps`
/// entries: step_i = ceil((i+1) T / n). Always ends at T.
pub fn ddim_subsequence(t_count: usize, ddim_steps: usize) -> Result<Vec<usize>, SamplerError> {
    if ddim_steps < 1 || ddim_steps > t_count {
        return Err(SamplerError::InvalidConfig(format!(
            "ddim_steps {ddim_steps} must lie in [1, {t_count}]"
        )));
    }
    Ok((0..ddim_steps)
        .map(|i| ((i + 1) * t_count).div_ceil(ddim_steps))
        .collect())
}

/// One DDIM update from step t to step t_prev (t_prev = 0 lands on the
/// final sample). With eta = 0 the update is fully deterministic.
pub fn ddim_step<R: Rng>(
    y_t: &ArrayD<f64>,
    step_pair: (usize, usize),
    eps_guided: &ArrayD<f64>,
    eta: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<ArrayD<f64>, SamplerError> {
    let (t, t_prev) = step_pair;
    if t <= t_prev {
        return Err(SamplerError::StepOrderViolation { t, t_prev });
    }
    if t > sched.t_count() {
        return Err(SamplerError::InvalidConfig(format!(
            "step {t} exceeds schedule length {}",
            sched.t_count()
        )));
    }
    if y_t.shape() != eps_guided.shape() {
        return Err(SamplerError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            y_t.shape(),
            eps_guided.shape()
        )));
    }
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let y0_hat = (y_t - &(eps_guided * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
    let sigma = eta
        * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
        * (1.0 - ab_t / ab_prev).sqrt();
    let dir_coef = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut y_prev = &y0_hat * ab_prev.sqrt() + eps_guided * dir_coef;
    if sigma > 0.0 {
        let z = standard_normal(y_t.shape(), rng);
        y_prev = y_prev + z * sigma;
    }
    Ok(y_prev)
}

/// Synthesized tile plus its provenance record. The label of the pair is
/// the conditioning map, unchanged.
#[derive(Debug, Clone)]
pub struct SynthesizedTile {
    pub image: RgbImage,
    pub record: SynthesisRecord,
}

/// Partially noises `y0` to the subsequence depth `config.t_noise`, then
/// applies guided DDIM denoising down to step 0 under the conditioning map
/// `x`. Per step the denoiser runs twice (conditional and null) and the
/// estimates combine through classifier-free guidance. `x = None`
/// degenerates to unconditional partial denoising (a smoke mode; the
/// returned tile then has no meaningful label and callers keep their own).
#[allow(clippy::too_many_arguments)]
pub fn synthesize(
    y0: &RgbImage,
    x: Option<&SemanticLabelMap>,
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
    config: &SamplerConfig,
    source_tile_id: &str,
    output_tile_id: &str,
    map_mode: MapMode,
) -> Result<SynthesizedTile, SamplerError> {
    config.validate(sched.t_count())?;
    if denoiser.t_max() != sched.t_count() {
        return Err(SamplerError::IncompatibleCheckpoint(format!(
            "checkpoint was trained for T = {}, schedule has T = {}",
            denoiser.t_max(),
            sched.t_count()
        )));
    }
    let (h, w) = (y0.height() as usize, y0.width() as usize);
    if let Some(map) = x {
        if map.height() != h || map.width() != w {
            return Err(SamplerError::ShapeMismatch(format!(
                "label map {}x{} vs image {h}x{w}",
                map.height(),
                map.width()
            )));
        }
        if map.vocab().len() != denoiser.config().condition_channels {
            return Err(SamplerError::IncompatibleCheckpoint(format!(
                "map has {} classes, checkpoint conditions on {}",
                map.vocab().len(),
                denoiser.config().condition_channels
            )));
        }
    }

    let cond = x.map(one_hot_encode);
    let subseq = ddim_subsequence(sched.t_count(), config.ddim_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let t_start = subseq[config.t_noise - 1];
    let y0_t = image_to_tensor(y0).into_dyn();
    let eps0 = standard_normal(y0_t.shape(), &mut rng);
    let mut y = q_sample(&y0_t, t_start, &eps0, sched)?;

    for i in (0..config.t_noise).rev() {
        let t = subseq[i];
        let t_prev = if i > 0 { subseq[i - 1] } else { 0 };
        let eps_g = match &cond {
            Some(c) => {
                let out_c = denoiser.denoise(&y, t, Some(c))?;
                let out_u = denoiser.denoise(&y, t, None)?;
                guided_eps(&out_c.eps_hat, &out_u.eps_hat, config.guidance.s)?
            }
            // Null conditioning: both branches coincide, one call suffices.
            None => denoiser.denoise(&y, t, None)?.eps_hat,
        };
        y = ddim_step(&y, (t, t_prev), &eps_g, config.eta, sched, &mut rng)?;
    }

    let clamped = y.mapv(|v| v.clamp(-1.0, 1.0));
    debug_assert!(clamped.iter().all(|v| v.is_finite()));
    let image = tensor_to_image(
        &clamped
            .into_dimensionality::<ndarray::Ix3>()
            .expect("3-channel image tensor"),
    );
    Ok(SynthesizedTile {
        image,
        record: SynthesisRecord {
            source_tile_id: source_tile_id.to_string(),
            map_mode,
            seed: config.seed,
            t_noise: config.t_noise,
            guidance_scale: config.guidance.s,
            ddim_steps: config.ddim_steps,
            output_tile_id: output_tile_id.to_string(),
        },
    })
}
