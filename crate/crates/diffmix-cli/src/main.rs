//! `diffmix`: dataset tooling, training, custom label map generation,
//! guided synthesis and evaluation behind one binary.
//!
//! Exit codes: 0 success, 2 validation failure, 3 stage failure.

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use diffmix_core::dataset::{DatasetWriter, TileDataset};
use diffmix_core::denoiser_net::checkpoint::load_denoiser;
use diffmix_core::diffusion_core::build_schedule;
use diffmix_core::pipeline::{
    self, extract_patches, ingest, make_maps_dataset, read_map_modes, report, run_experiment,
    synthesize_dataset, validate_dataset, write_patch_dataset, PipelineConfig, PipelineError,
    SamplerSection,
};
use diffmix_core::sampler::MapMode;
use diffmix_core::toydata;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "diffmix",
    about = "Label-conditioned diffusion synthesis of nuclei image/label pairs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MapModeArg {
    Balance,
    Enlarge,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a tile dataset against the label-map invariants.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        /// Write the validation report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print dataset composition statistics and the rarest-class headline.
    Report {
        #[arg(long)]
        data: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract sliding-window patches into a new tile dataset.
    Extract {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        patch_size: usize,
        #[arg(long, default_value_t = 32)]
        stride: usize,
        /// Drop patches with zero foreground pixels.
        #[arg(long, default_value_t = false)]
        filter_empty: bool,
    },
    /// Train the denoiser on a dataset of patches.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the training dataset from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint directory (default: <out_dir>/checkpoints).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate balancing or enlarging label maps for every tile.
    MakeMaps {
        #[arg(long, value_enum)]
        mode: MapModeArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize image/label pairs from a maps dataset and a checkpoint.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 55)]
        t_noise: usize,
        #[arg(long, default_value_t = 100)]
        ddim_steps: usize,
        #[arg(long, default_value_t = 1.5)]
        guidance: f64,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a predicted dataset against ground truth.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full experiment: ingest, report, extract, train, make-maps,
    /// synthesize, summarize.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the artifact directory from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic ellipse fixture dataset (for demos and tests).
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        tiles: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<PipelineError>()
                .map(PipelineError::exit_code)
                .unwrap_or(3);
            ExitCode::from(code as u8)
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Ingest { data, report: report_path } => {
            let (ds, rep) = validate_dataset(&data)?;
            if let Some(path) = &report_path {
                std::fs::write(path, serde_json::to_string_pretty(&rep)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            println!(
                "{} tiles checked, {} violations, {} warnings",
                rep.tiles_checked,
                rep.violations.len(),
                rep.warnings.len()
            );
            for v in rep.violations.iter().take(20) {
                println!("violation [{}]: {}", v.tile_id, v.message);
            }
            if let Some(first) = rep.violations.first() {
                return Err(PipelineError::TileCorrupt {
                    tile_id: first.tile_id.clone(),
                    reason: first.message.clone(),
                    additional: rep.violations.len() - 1,
                }
                .into());
            }
            println!("dataset ok: {} tiles, {} classes", ds.len(), ds.vocab().len());
            Ok(())
        }
        Command::Report { data, out } => {
            let (ds, _) = ingest(&data)?;
            let rep = report(&ds)?;
            print!("{}", rep.to_text());
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&rep)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::Extract { data, out, patch_size, stride, filter_empty } => {
            let (ds, _) = ingest(&data)?;
            let patches = extract_patches(&ds, patch_size, stride, filter_empty)?;
            write_patch_dataset(&patches, ds.vocab(), patch_size, &out)?;
            println!("wrote {} patches to {}", patches.len(), out.display());
            Ok(())
        }
        Command::Train { config, data, out } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(d) = data {
                cfg.dataset.train = d;
            }
            let (ds, _) = ingest(&cfg.dataset.train)?;
            let patches = extract_patches(
                &ds,
                cfg.patches.patch_size,
                cfg.patches.stride,
                cfg.patches.filter_empty,
            )?;
            let ckpt_dir = out.unwrap_or_else(|| cfg.dataset.out_dir.join("checkpoints"));
            let path = pipeline::train_stage(&cfg, ds.vocab().len(), &patches, &ckpt_dir)?;
            println!("final checkpoint: {}", path.display());
            Ok(())
        }
        Command::MakeMaps { mode, config, input, out } => {
            let cfg = PipelineConfig::from_toml(
                &std::fs::read_to_string(&config)
                    .with_context(|| format!("reading {}", config.display()))?,
            )?;
            let (ds, _) = ingest(&input)?;
            let mode = match mode {
                MapModeArg::Balance => MapMode::Balance,
                MapModeArg::Enlarge => MapMode::Enlarge,
            };
            let (maps_ds, log) =
                make_maps_dataset(&ds, mode, &cfg.maps, cfg.seed, None, &out)?;
            println!(
                "wrote {} maps to {} ({} log records)",
                maps_ds.len(),
                out.display(),
                log.len()
            );
            Ok(())
        }
        Command::Synthesize { checkpoint, maps, out, t_noise, ddim_steps, guidance, eta, seed } => {
            let (denoiser, sched_params) = load_denoiser(&checkpoint)?;
            let schedule = build_schedule(
                sched_params.steps,
                sched_params.beta_start,
                sched_params.beta_end,
            )?;
            let (maps_ds, _) = ingest(&maps)?;
            let modes = read_map_modes(&maps);
            let sampler_cfg = SamplerSection { ddim_steps, t_noise, guidance_scale: guidance, eta };
            let mut writer = DatasetWriter::create(
                &out,
                maps_ds.vocab().clone(),
                maps_ds.manifest().width,
                maps_ds.manifest().height,
            )?;
            let records = synthesize_dataset(
                &maps_ds,
                &modes,
                &denoiser,
                &schedule,
                &sampler_cfg,
                seed,
                "",
                &mut writer,
            )?;
            writer.finish()?;
            let log_path = out.join("synthesis_log.jsonl");
            let mut text = String::new();
            for r in &records {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            std::fs::write(&log_path, text)?;
            println!("synthesized {} tiles into {}", records.len(), out.display());
            Ok(())
        }
        Command::Evaluate { gt, pred, out } => {
            let rep = pipeline::evaluate_datasets(&gt, &pred)?;
            std::fs::write(&out, serde_json::to_string_pretty(&rep)?)
                .with_context(|| format!("writing {}", out.display()))?;
            println!(
                "dice(mean/pooled) {:.4}/{:.4}  aji {:.4}  dq {:.4}  sq {:.4}  pq {:.4}  acc {:.4}",
                rep.dice_mean,
                rep.dice_pooled,
                rep.aji_mean,
                rep.dq_mean,
                rep.sq_mean,
                rep.pq_mean,
                rep.accuracy
            );
            for (name, f1) in rep.class_names.iter().zip(&rep.f1_per_class) {
                println!("f1[{name}] {f1:.4}");
            }
            Ok(())
        }
        Command::Run { config, out } => {
            let cfg = PipelineConfig::load(&config)?;
            let out_dir = out.unwrap_or_else(|| cfg.dataset.out_dir.clone());
            let summary = run_experiment(&cfg, &out_dir)?;
            println!(
                "run complete: {} tiles, {} synthesized ({} transplants, {} shifts)",
                summary.tile_count,
                summary.budget.synthesized_tile_count,
                summary.balance_transplants,
                summary.enlarge_shifts
            );
            println!("summary: {}", out_dir.join("summary.json").display());
            Ok(())
        }
        Command::MakeToy { out, tiles, size, seed } => {
            let cfg = toydata::ToyConfig { tiles, size, seed, ..Default::default() };
            let generated = toydata::generate(&cfg);
            let mut writer = DatasetWriter::create(
                &out,
                toydata::toy_vocabulary(),
                size as u32,
                size as u32,
            )?;
            for t in &generated {
                writer.write_tile(&t.id, &t.image, &t.labels)?;
            }
            let ds: TileDataset = writer.finish()?;
            println!("wrote {} toy tiles to {}", ds.len(), out.display());
            Ok(())
        }
    }
}
