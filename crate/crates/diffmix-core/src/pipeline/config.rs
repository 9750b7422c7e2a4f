//! Pipeline configuration: one TOML file with a documented schema.
//! Unknown keys are rejected; every numeric field is range-checked at
//! load; the two dataset paths can be overridden by environment variables
//! (`DIFFMIX_TRAIN_DIR`, `DIFFMIX_OUT_DIR`); paths only, nothing else.

use super::PipelineError;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Global seed; every stage derives its own named stream from it.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub patches: PatchSection,
    pub schedule: ScheduleSection,
    pub denoiser: DenoiserSection,
    pub trainer: TrainerSection,
    pub sampler: SamplerSection,
    pub maps: MapsSection,
    pub synthesis: SynthesisSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Tile-layout training dataset.
    pub train: PathBuf,
    /// Artifact directory for `run`.
    pub out_dir: PathBuf,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { train: PathBuf::from("data/train"), out_dir: PathBuf::from("runs/exp") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSection {
    pub patch_size: usize,
    pub stride: usize,
    /// Drop patches with zero foreground pixels.
    pub filter_empty: bool,
}

impl Default for PatchSection {
    fn default() -> Self {
        // Desk-scale default; 256 with stride 128 is the full-scale setting.
        PatchSection { patch_size: 64, stride: 32, filter_empty: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSection {
    pub base_width: usize,
    pub depth: usize,
    pub timestep_embedding_dim: usize,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        DenoiserSection { base_width: 64, depth: 3, timestep_embedding_dim: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub p_uncond: f64,
    pub lambda_vlb: f64,
    pub checkpoint_every: u64,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            learning_rate: 1e-4,
            batch_size: 8,
            steps: 10_000,
            p_uncond: 0.2,
            lambda_vlb: 0.001,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub ddim_steps: usize,
    pub t_noise: usize,
    pub guidance_scale: f64,
    pub eta: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { ddim_steps: 100, t_noise: 55, guidance_scale: 1.5, eta: 0.0 }
    }
}

/// Which synthesized sets the composed training mix contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Composition {
    /// Half balancing maps, half enlarging maps.
    Full,
    /// Balancing maps only.
    Balance,
    /// Enlarging maps only.
    Enlarge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapsSection {
    pub composition: Composition,
    pub balance: BalanceSection,
    pub enlarge: EnlargeSection,
}

impl Default for MapsSection {
    fn default() -> Self {
        MapsSection {
            composition: Composition::Full,
            balance: BalanceSection::default(),
            enlarge: EnlargeSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalanceSection {
    pub size_tolerance: f64,
    /// Per-class nucleus fractions; omitted = uniform over nucleus classes.
    pub target_proportions: Option<Vec<f64>>,
}

impl Default for BalanceSection {
    fn default() -> Self {
        BalanceSection { size_tolerance: 0.5, target_proportions: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnlargeSection {
    pub max_shift: u32,
    pub max_retries: u32,
    pub shift_fraction: f64,
}

impl Default for EnlargeSection {
    fn default() -> Self {
        EnlargeSection { max_shift: 25, max_retries: 10, shift_fraction: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct SynthesisSection {
    /// Number of tiles to synthesize; 0 means "same as the original
    /// training set size".
    pub count: usize,
}


impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            dataset: DatasetSection::default(),
            patches: PatchSection::default(),
            schedule: ScheduleSection::default(),
            denoiser: DenoiserSection::default(),
            trainer: TrainerSection::default(),
            sampler: SamplerSection::default(),
            maps: MapsSection::default(),
            synthesis: SynthesisSection::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses TOML; unknown keys are rejected with the offending key name.
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        cfg.apply_env_overrides();
        cfg.validate_fields()?;
        Ok(cfg)
    }

    /// Loads a config file, applies environment path overrides and checks
    /// that referenced input paths exist.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::InvalidConfig(format!("cannot read {}: {e}", path.display()))
        })?;
        let cfg = Self::from_toml(&text)?;
        if !cfg.dataset.train.is_dir() {
            return Err(PipelineError::InvalidConfig(format!(
                "dataset.train does not exist: {}",
                cfg.dataset.train.display()
            )));
        }
        Ok(cfg)
    }

    fn apply_env_overrides(&mut self) {
        if let Ok(v) = std::env::var("DIFFMIX_TRAIN_DIR") {
            if !v.is_empty() {
                self.dataset.train = PathBuf::from(v);
            }
        }
        if let Ok(v) = std::env::var("DIFFMIX_OUT_DIR") {
            if !v.is_empty() {
                self.dataset.out_dir = PathBuf::from(v);
            }
        }
    }

    /// Field-level range validation with the offending field in the error.
    pub fn validate_fields(&self) -> Result<(), PipelineError> {
        let bad = |field: &str, msg: String| {
            Err(PipelineError::InvalidConfig(format!("{field}: {msg}")))
        };
        if self.patches.patch_size == 0 {
            return bad("patches.patch_size", "must be positive".into());
        }
        if self.patches.stride == 0 {
            return bad("patches.stride", "must be positive".into());
        }
        if self.schedule.steps == 0 {
            return bad("schedule.steps", "must be positive".into());
        }
        if !(self.schedule.beta_start > 0.0
            && self.schedule.beta_start <= self.schedule.beta_end
            && self.schedule.beta_end < 1.0)
        {
            return bad(
                "schedule.beta_start/beta_end",
                format!(
                    "need 0 < start <= end < 1, got [{}, {}]",
                    self.schedule.beta_start, self.schedule.beta_end
                ),
            );
        }
        if self.denoiser.base_width == 0 || !self.denoiser.base_width.is_multiple_of(4) {
            return bad("denoiser.base_width", "must be a positive multiple of 4".into());
        }
        if self.denoiser.depth == 0 {
            return bad("denoiser.depth", "must be positive".into());
        }
        let div = 1usize << (self.denoiser.depth - 1);
        if !self.patches.patch_size.is_multiple_of(div) {
            return bad(
                "patches.patch_size",
                format!("must be divisible by 2^(denoiser.depth-1) = {div}"),
            );
        }
        if self.denoiser.timestep_embedding_dim == 0
            || !self.denoiser.timestep_embedding_dim.is_multiple_of(2)
        {
            return bad("denoiser.timestep_embedding_dim", "must be positive and even".into());
        }
        if self.trainer.batch_size == 0 || self.trainer.steps == 0 {
            return bad("trainer.batch_size/steps", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.trainer.p_uncond) {
            return bad("trainer.p_uncond", format!("{} not in [0, 1]", self.trainer.p_uncond));
        }
        if self.trainer.learning_rate < 0.0 || self.trainer.lambda_vlb < 0.0 {
            return bad("trainer.learning_rate/lambda_vlb", "must be non-negative".into());
        }
        if self.sampler.ddim_steps < 1 || self.sampler.ddim_steps > self.schedule.steps {
            return bad(
                "sampler.ddim_steps",
                format!(
                    "{} not in [1, schedule.steps = {}]",
                    self.sampler.ddim_steps, self.schedule.steps
                ),
            );
        }
        if self.sampler.t_noise < 1 || self.sampler.t_noise > self.sampler.ddim_steps {
            return bad(
                "sampler.t_noise",
                format!(
                    "{} not in [1, sampler.ddim_steps = {}]",
                    self.sampler.t_noise, self.sampler.ddim_steps
                ),
            );
        }
        if self.sampler.guidance_scale < 0.0 {
            return bad("sampler.guidance_scale", "must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.sampler.eta) {
            return bad("sampler.eta", format!("{} not in [0, 1]", self.sampler.eta));
        }
        if !(self.maps.balance.size_tolerance > 0.0 && self.maps.balance.size_tolerance <= 1.0) {
            return bad(
                "maps.balance.size_tolerance",
                format!("{} not in (0, 1]", self.maps.balance.size_tolerance),
            );
        }
        if let Some(t) = &self.maps.balance.target_proportions {
            let sum: f64 = t.iter().sum();
            if t.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return bad(
                    "maps.balance.target_proportions",
                    "must be non-negative and sum to 1".into(),
                );
            }
        }
        if self.maps.enlarge.max_retries < 1 {
            return bad("maps.enlarge.max_retries", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.maps.enlarge.shift_fraction) {
            return bad(
                "maps.enlarge.shift_fraction",
                format!("{} not in [0, 1]", self.maps.enlarge.shift_fraction),
            );
        }
        Ok(())
    }
}
