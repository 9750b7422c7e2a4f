// Scratch benchmark for sizing the toy experiment. Not part of the build
// contract; run with `cargo run --example bench_scratch --release`.

use diffmix_core::denoiser_net::{Denoiser, DenoiserConfig, TrainHyperparams, TrainPatch, Trainer};
use diffmix_core::diffusion_core::build_schedule;
use diffmix_core::label_space::one_hot_encode;
use diffmix_core::toydata;
use ndarray::ArrayD;
use std::time::Instant;

fn main() {
    let tiles = toydata::generate(&toydata::ToyConfig { tiles: 8, ..Default::default() });
    let data: Vec<TrainPatch> = tiles
        .iter()
        .map(|t| {
            let img = diffmix_core::dataset::image_to_tensor(&t.image).mapv(|v| v as f32);
            let cond = one_hot_encode(&t.labels).mapv(|v| v as f32);
            TrainPatch::new(img, cond)
        })
        .collect();

    for (bw, depth, batch) in [(16usize, 2usize, 8usize), (24, 2, 8), (16, 3, 8)] {
        let cfg = DenoiserConfig {
            input_channels: 3,
            condition_channels: 4,
            base_width: bw,
            depth,
            timestep_embedding_dim: 64,
            patch_size: 64,
        };
        let schedule = build_schedule(1000, 1e-4, 0.02).unwrap();
        let denoiser = Denoiser::init(&cfg, 1000, 1).unwrap();
        println!("config bw={bw} depth={depth}: {} params", denoiser.param_count());
        let hp = TrainHyperparams {
            learning_rate: 2e-4,
            batch_size: batch,
            steps: 10,
            p_uncond: 0.2,
            lambda_vlb: 0.001,
            checkpoint_every: 0,
            seed: 3,
        };
        let mut trainer = Trainer::new(denoiser, schedule, hp).unwrap();
        let t0 = Instant::now();
        trainer.run(&data, None).unwrap();
        let per_step = t0.elapsed().as_secs_f64() / 10.0;
        println!("  train: {per_step:.3} s/step (batch {batch}, 64x64)");

        // Denoise cost at 64x64 (one forward).
        let d = trainer.denoiser();
        let y = ArrayD::from_shape_simple_fn(vec![3, 64, 64], || 0.1f64);
        let t0 = Instant::now();
        let reps = 20;
        for _ in 0..reps {
            let _ = d.denoise(&y, 500, None).unwrap();
        }
        let per_call = t0.elapsed().as_secs_f64() / reps as f64;
        println!("  denoise 64x64: {:.1} ms/call -> {:.1} s per 55-step guided tile", per_call * 1e3, per_call * 110.0);
    }
}
