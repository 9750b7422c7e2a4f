//! Training loop: hybrid loss (noise MSE + weighted variational term),
//! classifier-free conditioning dropout, Adam, periodic checkpoints with
//! exact-resume state.
//!
//! Determinism: one ChaCha stream drives data order, timesteps, noise and
//! dropout; per-sample gradients are computed in parallel but folded in
//! batch order, so two runs with the same seed produce bit-identical
//! checkpoints and loss trajectories.

use super::checkpoint::{Checkpoint, ScheduleParams};
use super::nn::{Adam, Feat, Grads};
use super::{Denoiser, DenoiserError};
use crate::diffusion_core::{
    simple_loss, simple_loss_grad, vlb_term_with_grad_v, DenoiserOutput, NoiseSchedule,
};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Total optimizer steps for the run.
    pub steps: u64,
    /// Probability of replacing the conditioning with the all-zero map.
    pub p_uncond: f64,
    /// Weight of the variational term in the hybrid loss.
    pub lambda_vlb: f64,
    /// Periodic checkpoint interval in steps (0 = final only).
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainHyperparams {
    fn default() -> Self {
        TrainHyperparams {
            learning_rate: 1e-4,
            batch_size: 8,
            steps: 10_000,
            p_uncond: 0.2,
            lambda_vlb: 0.001,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl TrainHyperparams {
    pub fn validate(&self) -> Result<(), DenoiserError> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(DenoiserError::InvalidConfig(
                "batch_size and steps must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(DenoiserError::InvalidConfig("p_uncond must lie in [0, 1]".into()));
        }
        if self.learning_rate < 0.0 || self.lambda_vlb < 0.0 {
            return Err(DenoiserError::InvalidConfig(
                "learning_rate and lambda_vlb must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One training example: image in [-1, 1] and its one-hot conditioning.
#[derive(Debug, Clone)]
pub struct TrainPatch {
    pub image: Array3<f32>,
    pub cond: Array3<f32>,
}

impl TrainPatch {
    pub fn new(image: Array3<f32>, cond: Array3<f32>) -> Self {
        TrainPatch { image, cond }
    }
}

pub struct Trainer {
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    adam: Adam,
    rng: ChaCha8Rng,
    step: u64,
    hp: TrainHyperparams,
    /// Per-step mean hybrid loss, appended as training progresses.
    pub losses: Vec<f64>,
}

struct SampleWork {
    index: usize,
    t: usize,
    uncond: bool,
    eps: Feat,
}

impl Trainer {
    pub fn new(
        denoiser: Denoiser,
        schedule: NoiseSchedule,
        hp: TrainHyperparams,
    ) -> Result<Self, DenoiserError> {
        hp.validate()?;
        let adam = Adam::new(hp.learning_rate as f32, denoiser.params());
        let rng = ChaCha8Rng::seed_from_u64(hp.seed);
        Ok(Trainer { denoiser, schedule, adam, rng, step: 0, hp, losses: Vec::new() })
    }

    /// Restores a trainer mid-run from a checkpoint: weights, optimizer
    /// moments, RNG position and step counter all resume exactly.
    pub fn resume(path: &Path) -> Result<Self, DenoiserError> {
        let ckpt = Checkpoint::load(path)?;
        let schedule = crate::diffusion_core::build_schedule(
            ckpt.schedule.steps,
            ckpt.schedule.beta_start,
            ckpt.schedule.beta_end,
        )
        .map_err(|e| DenoiserError::ResumeStateCorrupt(e.to_string()))?;
        let mut denoiser = Denoiser::init(&ckpt.config, ckpt.schedule.steps, 0)?;
        let (m, v) = ckpt.apply_to(denoiser.params_mut())?;
        let mut adam = Adam::new(ckpt.hyperparams.learning_rate as f32, denoiser.params());
        adam.m = m;
        adam.v = v;
        adam.t = ckpt.adam_t;
        let rng = ckpt.rng.restore();
        Ok(Trainer {
            denoiser,
            schedule,
            adam,
            rng,
            step: ckpt.step,
            hp: ckpt.hyperparams,
            losses: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn into_denoiser(self) -> Denoiser {
        self.denoiser
    }

    fn check_data(&self, data: &[TrainPatch]) -> Result<(), DenoiserError> {
        if data.is_empty() {
            return Err(DenoiserError::DataShapeMismatch("empty training set".into()));
        }
        let cfg = self.denoiser.config();
        for (i, p) in data.iter().enumerate() {
            let (c, h, w) = p.image.dim();
            if c != cfg.input_channels {
                return Err(DenoiserError::DataShapeMismatch(format!(
                    "patch {i}: {c} image channels, config says {}",
                    cfg.input_channels
                )));
            }
            let div = 1usize << (cfg.depth - 1);
            if h % div != 0 || w % div != 0 {
                return Err(DenoiserError::DataShapeMismatch(format!(
                    "patch {i}: {h}x{w} not divisible by {div}"
                )));
            }
            if p.cond.dim() != (cfg.condition_channels, h, w) {
                return Err(DenoiserError::DataShapeMismatch(format!(
                    "patch {i}: conditioning {:?} does not match image {h}x{w}",
                    p.cond.dim()
                )));
            }
        }
        Ok(())
    }

    /// Runs one optimizer step; returns the batch-mean hybrid loss.
    pub fn train_step(&mut self, data: &[TrainPatch]) -> f64 {
        let t_max = self.schedule.t_count();
        let n = data.len();
        let batch = self.hp.batch_size;

        // All randomness is drawn sequentially up front so the parallel
        // section is pure computation.
        let mut work = Vec::with_capacity(batch);
        for _ in 0..batch {
            let index = self.rng.gen_range(0..n);
            let t = self.rng.gen_range(1..=t_max);
            let uncond = self.rng.gen_bool(self.hp.p_uncond);
            let dim = data[index].image.dim();
            let eps = Feat::from_shape_simple_fn(dim, || {
                let z: f32 = self.rng.sample(StandardNormal);
                z
            });
            work.push(SampleWork { index, t, uncond, eps });
        }

        let denoiser = &self.denoiser;
        let schedule = &self.schedule;
        let lambda = self.hp.lambda_vlb;

        let results: Vec<(f64, Grads)> = work
            .par_iter()
            .map(|s| {
                let patch = &data[s.index];
                let ab = schedule.alpha_bar(s.t);
                let (ca, cb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
                let mut y_t = patch.image.mapv(|v| v * ca);
                y_t.zip_mut_with(&s.eps, |y, &e| *y += cb * e);
                let zero_cond;
                let cond = if s.uncond {
                    zero_cond = Array3::zeros(patch.cond.raw_dim());
                    &zero_cond
                } else {
                    &patch.cond
                };
                let (eps_hat, v, tape) = denoiser.forward_f32(&y_t, s.t, cond);

                // Loss values and gradients via the audited f64 math.
                let eps64 = s.eps.mapv(|x| x as f64).into_dyn();
                let out64 = DenoiserOutput {
                    eps_hat: eps_hat.mapv(|x| x as f64).into_dyn(),
                    v: v.mapv(|x| x as f64).into_dyn(),
                };
                let l_simple = simple_loss(&eps64, &out64).expect("shapes agree");
                let d_eps64 = simple_loss_grad(&eps64, &out64).expect("shapes agree");
                let y0_64 = patch.image.mapv(|x| x as f64).into_dyn();
                let yt_64 = y_t.mapv(|x| x as f64).into_dyn();
                let (l_vlb, d_v64) =
                    vlb_term_with_grad_v(&y0_64, &yt_64, s.t, &out64, schedule)
                        .expect("step in range");

                let d_eps = d_eps64
                    .mapv(|x| x as f32)
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("3d");
                let d_v = d_v64
                    .mapv(|x| (x * lambda) as f32)
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("3d");

                let mut g = Grads::zeros_like(denoiser.params());
                denoiser
                    .net()
                    .backward(denoiser.params(), &tape, &d_eps, &d_v, &mut g);
                (l_simple + lambda * l_vlb, g)
            })
            .collect();

        // Deterministic fold in batch order.
        let mut total = Grads::zeros_like(self.denoiser.params());
        let mut loss_sum = 0.0;
        for (loss, g) in &results {
            loss_sum += loss;
            total.accumulate(g);
        }
        total.scale(1.0 / batch as f32);
        self.adam.step(self.denoiser.params_mut(), &total);
        self.step += 1;
        let mean_loss = loss_sum / batch as f64;
        self.losses.push(mean_loss);
        mean_loss
    }

    fn schedule_params(&self) -> ScheduleParams {
        ScheduleParams {
            steps: self.schedule.t_count(),
            beta_start: self.schedule.beta_start(),
            beta_end: self.schedule.beta_end(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), DenoiserError> {
        Checkpoint::from_training(
            &self.denoiser,
            &self.adam,
            self.schedule_params(),
            self.hp.clone(),
            self.step,
            &self.rng,
        )?
        .save(path)
    }

    /// Runs until `hp.steps`, writing periodic checkpoints plus a final
    /// `checkpoint_final.dmck` when a directory is given. Returns the final
    /// checkpoint path, if any.
    pub fn run(
        &mut self,
        data: &[TrainPatch],
        checkpoint_dir: Option<&Path>,
    ) -> Result<Option<PathBuf>, DenoiserError> {
        self.check_data(data)?;
        while self.step < self.hp.steps {
            self.train_step(data);
            if let Some(dir) = checkpoint_dir {
                let every = self.hp.checkpoint_every;
                if every > 0 && self.step.is_multiple_of(every) && self.step < self.hp.steps {
                    self.save_checkpoint(&dir.join(format!("checkpoint_{:07}.dmck", self.step)))?;
                }
            }
        }
        match checkpoint_dir {
            Some(dir) => {
                let path = dir.join("checkpoint_final.dmck");
                self.save_checkpoint(&path)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser_net::DenoiserConfig;
    use crate::diffusion_core::build_schedule;

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            input_channels: 3,
            condition_channels: 3,
            base_width: 4,
            depth: 2,
            timestep_embedding_dim: 8,
            patch_size: 8,
        }
    }

    /// A flat two-tone patch: left half class 1 colour, right half class 2.
    fn toy_patch() -> TrainPatch {
        let mut image = Array3::<f32>::zeros((3, 8, 8));
        let mut cond = Array3::<f32>::zeros((3, 8, 8));
        for r in 0..8 {
            for c in 0..8 {
                if c < 4 {
                    image[(0, r, c)] = 0.6;
                    image[(1, r, c)] = -0.4;
                    image[(2, r, c)] = -0.2;
                    cond[(1, r, c)] = 1.0;
                } else {
                    image[(0, r, c)] = -0.5;
                    image[(1, r, c)] = 0.5;
                    image[(2, r, c)] = 0.1;
                    cond[(2, r, c)] = 1.0;
                }
            }
        }
        TrainPatch::new(image, cond)
    }

    fn make_trainer(hp: TrainHyperparams) -> Trainer {
        let schedule = build_schedule(50, 1e-3, 0.05).unwrap();
        let denoiser = Denoiser::init(&tiny_config(), 50, 11).unwrap();
        Trainer::new(denoiser, schedule, hp).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let hp = TrainHyperparams {
            learning_rate: 0.0,
            batch_size: 1,
            steps: 1,
            p_uncond: 0.0,
            ..Default::default()
        };
        let mut trainer = make_trainer(hp);
        let before: Vec<_> = trainer
            .denoiser
            .params()
            .entries()
            .iter()
            .map(|e| e.value.clone())
            .collect();
        trainer.train_step(&[toy_patch()]);
        for (e, b) in trainer.denoiser.params().entries().iter().zip(&before) {
            assert_eq!(&e.value, b, "{} changed under lr=0", e.name);
        }
    }

    #[test]
    fn loss_decreases_on_toy_patch() {
        let hp = TrainHyperparams {
            learning_rate: 2e-3,
            batch_size: 4,
            steps: 60,
            p_uncond: 0.1,
            lambda_vlb: 0.001,
            checkpoint_every: 0,
            seed: 5,
        };
        let mut trainer = make_trainer(hp);
        let data = [toy_patch()];
        trainer.run(&data, None).unwrap();
        let early: f64 = trainer.losses[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = trainer.losses[50..].iter().sum::<f64>() / 10.0;
        assert!(late < early, "loss did not decrease: {early} -> {late}");
    }

    #[test]
    fn identical_seeds_produce_bit_identical_checkpoints() {
        let hp = TrainHyperparams {
            learning_rate: 1e-3,
            batch_size: 2,
            steps: 8,
            checkpoint_every: 0,
            seed: 21,
            ..Default::default()
        };
        let data = [toy_patch()];
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a"), dir.path().join("b"));
        for p in [&pa, &pb] {
            let mut t = make_trainer(hp.clone());
            t.run(&data, Some(p)).unwrap();
        }
        let a = std::fs::read(pa.join("checkpoint_final.dmck")).unwrap();
        let b = std::fs::read(pb.join("checkpoint_final.dmck")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resume_reproduces_uninterrupted_trajectory() {
        let data = [toy_patch()];
        let full_hp = TrainHyperparams {
            learning_rate: 1e-3,
            batch_size: 2,
            steps: 16,
            checkpoint_every: 0,
            seed: 33,
            ..Default::default()
        };
        let mut full = make_trainer(full_hp.clone());
        full.run(&data, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let half_hp = TrainHyperparams { steps: 8, ..full_hp.clone() };
        let mut half = make_trainer(half_hp);
        half.run(&data, None).unwrap();
        let mid = dir.path().join("mid.dmck");
        // Bump the target step count before saving so the resumed run
        // continues to 16.
        half.hp.steps = 16;
        half.save_checkpoint(&mid).unwrap();

        let mut resumed = Trainer::resume(&mid).unwrap();
        assert_eq!(resumed.step_count(), 8);
        resumed.run(&data, None).unwrap();

        let mut trajectory = half.losses.clone();
        trajectory.extend(&resumed.losses);
        assert_eq!(trajectory, full.losses);

        // And the final weights agree bit-for-bit.
        for (a, b) in full
            .denoiser
            .params()
            .entries()
            .iter()
            .zip(resumed.denoiser.params().entries())
        {
            assert_eq!(a.value, b.value, "{} diverged after resume", a.name);
        }
    }

    #[test]
    fn rejects_mismatched_data() {
        let mut trainer = make_trainer(TrainHyperparams::default());
        let bad = TrainPatch::new(Array3::zeros((2, 8, 8)), Array3::zeros((3, 8, 8)));
        assert!(matches!(
            trainer.run(&[bad], None),
            Err(DenoiserError::DataShapeMismatch(_))
        ));
    }
}
