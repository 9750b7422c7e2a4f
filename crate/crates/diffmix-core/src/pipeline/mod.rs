//! End-to-end orchestration: dataset ingestion and validation, patch
//! extraction, training, map generation, synthesis, evaluation and
//! imbalance reporting. Every stage reads and writes the standard tile
//! layout, so each stage's output passes ingestion again.

mod config;

pub use config::{
    BalanceSection, Composition, DatasetSection, DenoiserSection, EnlargeSection, MapsSection,
    PatchSection, PipelineConfig, SamplerSection, ScheduleSection, SynthesisSection,
    TrainerSection,
};

use crate::dataset::{DatasetError, DatasetWriter, Tile, TileDataset};
use crate::denoiser_net::{
    checkpoint, Denoiser, DenoiserConfig, DenoiserError, TrainHyperparams, TrainPatch, Trainer,
};
use crate::diffusion_core::{build_schedule, DiffusionError, NoiseSchedule};
use crate::label_space::{
    class_histogram, one_hot_encode, DatasetStats, LabelSpaceError, SemanticLabelMap,
};
use crate::map_synthesis::{
    make_balancing_map, make_enlarging_map, BalanceSpec, DonorPool, MapSynthesisError,
    ShiftRecord, ShiftSpec, TransplantRecord,
};
use crate::metrics::{evaluate_tiles, EvaluationReport, MetricsError, TileEntry};
use crate::sampler::{
    synthesize, GuidanceConfig, MapMode, SamplerConfig, SamplerError, SynthesisRecord,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("manifest missing at {0}")]
    ManifestMissing(PathBuf),
    #[error("tile {tile_id} corrupt: {reason}{}", more_suffix(*.additional))]
    TileCorrupt {
        tile_id: String,
        reason: String,
        additional: usize,
    },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Label(#[from] LabelSpaceError),
    #[error(transparent)]
    Maps(#[from] MapSynthesisError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    fn stage(stage: &'static str) -> impl FnOnce(PipelineError) -> PipelineError {
        move |source| PipelineError::Stage { stage, source: Box::new(source) }
    }

    /// CLI exit code: 2 for validation failures, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Stage { source, .. } => source.exit_code(),
            PipelineError::ManifestMissing(_)
            | PipelineError::TileCorrupt { .. }
            | PipelineError::InvalidGeometry(_)
            | PipelineError::InvalidConfig(_) => 2,
            PipelineError::Dataset(DatasetError::ManifestMissing(_))
            | PipelineError::Dataset(DatasetError::TileCorrupt { .. })
            | PipelineError::Dataset(DatasetError::ManifestMalformed(_)) => 2,
            _ => 3,
        }
    }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn more_suffix(additional: usize) -> String {
    if additional > 0 {
        format!(" (+{additional} more tiles with violations)")
    } else {
        String::new()
    }
}

// ---------------------------------------------------------------------------
// Ingest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TileIssue {
    pub tile_id: String,
    pub message: String,
}

/// Per-dataset validation findings. `violations` are invariant breaches
/// (fatal); `warnings` are tolerated oddities such as fragmented instance
/// annotations.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub tiles_checked: usize,
    pub violations: Vec<TileIssue>,
    pub warnings: Vec<TileIssue>,
}

/// Validates every tile. Never fails on tile contents; structural problems
/// (missing manifest, unreadable files) still error.
pub fn validate_dataset(root: &Path) -> Result<(TileDataset, ValidationReport), PipelineError> {
    let ds = match TileDataset::open(root) {
        Ok(ds) => ds,
        Err(DatasetError::ManifestMissing(p)) => {
            return Err(PipelineError::ManifestMissing(p))
        }
        Err(e) => return Err(e.into()),
    };
    let ids = ds.tile_ids().to_vec();
    let results: Vec<(String, Result<Vec<u32>, String>)> = ids
        .par_iter()
        .map(|id| match ds.load_tile(id) {
            Ok(tile) => (id.clone(), Ok(tile.labels.fragmented_instances())),
            Err(DatasetError::TileCorrupt { reason, .. }) => (id.clone(), Err(reason)),
            Err(e) => (id.clone(), Err(e.to_string())),
        })
        .collect();

    let mut report = ValidationReport { tiles_checked: ids.len(), ..Default::default() };
    for (id, res) in results {
        match res {
            Ok(fragmented) => {
                for inst in fragmented {
                    report.warnings.push(TileIssue {
                        tile_id: id.clone(),
                        message: format!("instance {inst} is not 4-connected"),
                    });
                }
            }
            Err(reason) => report.violations.push(TileIssue { tile_id: id, message: reason }),
        }
    }
    Ok((ds, report))
}

/// Strict ingestion: every tile must satisfy the label-map invariants.
/// Returns the dataset handle plus the (violation-free) validation report.
pub fn ingest(root: &Path) -> Result<(TileDataset, ValidationReport), PipelineError> {
    let (ds, report) = validate_dataset(root)?;
    if let Some(first) = report.violations.first() {
        return Err(PipelineError::TileCorrupt {
            tile_id: first.tile_id.clone(),
            reason: first.message.clone(),
            additional: report.violations.len() - 1,
        });
    }
    Ok((ds, report))
}

// ---------------------------------------------------------------------------
// Patch extraction
// ---------------------------------------------------------------------------

/// One extracted patch with provenance in its id.
#[derive(Debug, Clone)]
pub struct Patch {
    pub id: String,
    pub image: image::RgbImage,
    pub labels: SemanticLabelMap,
}

/// Window starts covering [0, len - patch]: multiples of the stride plus a
/// final flush-to-edge window, i.e. ceil((len - patch) / stride) + 1
/// positions.
pub fn window_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&s| s + patch <= len)
        .collect();
    let last = len - patch;
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

/// Sliding-window crops of image and label maps. Instances cut by patch
/// borders are truncated; `filter_empty` drops all-background patches.
pub fn extract_patches(
    ds: &TileDataset,
    patch_size: usize,
    stride: usize,
    filter_empty: bool,
) -> Result<Vec<Patch>, PipelineError> {
    let (w, h) = (ds.manifest().width as usize, ds.manifest().height as usize);
    if patch_size == 0 || stride == 0 {
        return Err(PipelineError::InvalidGeometry(
            "patch_size and stride must be positive".into(),
        ));
    }
    if patch_size > w || patch_size > h {
        return Err(PipelineError::InvalidGeometry(format!(
            "patch size {patch_size} exceeds tile size {w}x{h}"
        )));
    }
    let ids = ds.tile_ids().to_vec();
    let per_tile: Vec<Vec<Patch>> = ids
        .par_iter()
        .map(|id| -> Result<Vec<Patch>, PipelineError> {
            let tile = ds.load_tile(id)?;
            let mut out = Vec::new();
            for &top in &window_starts(h, patch_size, stride) {
                for &left in &window_starts(w, patch_size, stride) {
                    let patch = crop_tile(&tile, top, left, patch_size);
                    if filter_empty && patch.labels.instance_ids().iter().all(|&v| v == 0) {
                        continue;
                    }
                    out.push(patch);
                }
            }
            Ok(out)
        })
        .collect::<Result<_, _>>()?;
    Ok(per_tile.into_iter().flatten().collect())
}

fn crop_tile(tile: &Tile, top: usize, left: usize, size: usize) -> Patch {
    let mut image = image::RgbImage::new(size as u32, size as u32);
    for r in 0..size {
        for c in 0..size {
            image.put_pixel(
                c as u32,
                r as u32,
                *tile.image.get_pixel((left + c) as u32, (top + r) as u32),
            );
        }
    }
    let inst = tile
        .labels
        .instance_ids()
        .slice(ndarray::s![top..top + size, left..left + size])
        .to_owned();
    let class = tile
        .labels
        .class_ids()
        .slice(ndarray::s![top..top + size, left..left + size])
        .to_owned();
    let labels =
        SemanticLabelMap::from_parts_unchecked(inst, class, tile.labels.vocab().clone());
    Patch { id: format!("{}_r{top:04}_c{left:04}", tile.id), image, labels }
}

/// Writes patches as a tile-layout dataset (so it ingests like any other).
pub fn write_patch_dataset(
    patches: &[Patch],
    vocab: &crate::label_space::ClassVocabulary,
    patch_size: usize,
    out: &Path,
) -> Result<TileDataset, PipelineError> {
    let mut writer =
        DatasetWriter::create(out, vocab.clone(), patch_size as u32, patch_size as u32)?;
    for p in patches {
        writer.write_tile(&p.id, &p.image, &p.labels)?;
    }
    Ok(writer.finish()?)
}

// ---------------------------------------------------------------------------
// Imbalance report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub stats: DatasetStats,
    pub rarest_class: String,
    pub rarest_proportion: f64,
    pub headline: String,
}

/// Dataset composition statistics plus the minimum-class headline.
pub fn report(ds: &TileDataset) -> Result<ImbalanceReport, PipelineError> {
    let tiles = ds.load_all()?;
    let maps: Vec<&SemanticLabelMap> = tiles.iter().map(|t| &t.labels).collect();
    let stats = class_histogram(&maps)?;
    let (name, _, proportion) = stats
        .rarest_class()
        .ok_or_else(|| PipelineError::InvalidConfig("dataset has no nucleus classes".into()))?;
    let headline = format!("{name} {:.1}%", proportion * 100.0);
    Ok(ImbalanceReport { stats, rarest_class: name, rarest_proportion: proportion, headline })
}

impl ImbalanceReport {
    /// Fixed-width table for terminals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>10} {:>10}\n",
            "class", "nuclei", "percent"
        ));
        for (i, name) in self.stats.class_names.iter().enumerate() {
            out.push_str(&format!(
                "{:<16} {:>10} {:>9.1}%\n",
                name,
                self.stats.counts[i],
                self.stats.proportions[i] * 100.0
            ));
        }
        out.push_str(&format!(
            "tiles: {}   total nuclei: {}   rarest: {}\n",
            self.stats.tile_count, self.stats.total_nuclei, self.headline
        ));
        out
    }
}

// ---------------------------------------------------------------------------
// Map generation stage
// ---------------------------------------------------------------------------

/// One line of `maps_log.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapLogRecord {
    pub tile_id: String,
    pub mode: MapMode,
    pub source_tile: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transplants: Vec<TransplantRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shifts: Vec<ShiftRecord>,
    /// Set when balancing gave up on this tile (donor pool exhausted); the
    /// original map is passed through unchanged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Stable per-tile stream derived from (global seed, tile id).
pub fn derive_seed(global: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ global.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Generates one custom map per selected tile and writes them as a
/// dataset; each output tile keeps its source image (the patch that will
/// be partially noised at synthesis time).
pub fn make_maps_dataset(
    src: &TileDataset,
    mode: MapMode,
    maps_cfg: &MapsSection,
    global_seed: u64,
    tile_subset: Option<&[String]>,
    out: &Path,
) -> Result<(TileDataset, Vec<MapLogRecord>), PipelineError> {
    let ids: Vec<String> = match tile_subset {
        Some(s) => s.to_vec(),
        None => src.tile_ids().to_vec(),
    };
    let vocab = src.vocab().clone();
    let n_nucleus = vocab.len() - 1;
    let target = match &maps_cfg.balance.target_proportions {
        Some(t) => {
            if t.len() != n_nucleus {
                return Err(PipelineError::InvalidConfig(format!(
                    "maps.balance.target_proportions has {} entries for {n_nucleus} classes",
                    t.len()
                )));
            }
            t.clone()
        }
        None => vec![1.0 / n_nucleus as f64; n_nucleus],
    };

    // Donor pool spans the whole source dataset (read-only across tiles).
    let pool = if mode == MapMode::Balance {
        let tiles = src.load_all()?;
        let pairs: Vec<(String, &SemanticLabelMap)> =
            tiles.iter().map(|t| (t.id.clone(), &t.labels)).collect();
        Some(DonorPool::from_maps(&pairs)?)
    } else {
        None
    };

    let results: Vec<(Tile, MapLogRecord)> = ids
        .par_iter()
        .map(|id| -> Result<(Tile, MapLogRecord), PipelineError> {
            let tile = src.load_tile(id)?;
            let seed = derive_seed(global_seed, id);
            match mode {
                MapMode::Balance => {
                    let spec = BalanceSpec {
                        target_proportions: target.clone(),
                        donor_pool: pool.as_ref().expect("pool built for balance mode"),
                        size_tolerance: maps_cfg.balance.size_tolerance,
                        rng_seed: seed,
                    };
                    match make_balancing_map(&tile.labels, &spec) {
                        Ok((labels, transplants)) => {
                            let record = MapLogRecord {
                                tile_id: id.clone(),
                                mode,
                                source_tile: id.clone(),
                                seed,
                                transplants,
                                shifts: Vec::new(),
                                error: None,
                            };
                            Ok((Tile { id: id.clone(), image: tile.image, labels }, record))
                        }
                        Err(MapSynthesisError::DonorExhausted { class_id, tolerance }) => {
                            log::warn!(
                                "tile {id}: donor pool exhausted for class {class_id} \
                                 at tolerance {tolerance}; keeping original map"
                            );
                            let record = MapLogRecord {
                                tile_id: id.clone(),
                                mode,
                                source_tile: id.clone(),
                                seed,
                                transplants: Vec::new(),
                                shifts: Vec::new(),
                                error: Some(format!(
                                    "donor exhausted for class {class_id} (tolerance {tolerance})"
                                )),
                            };
                            Ok((tile, record))
                        }
                        Err(e) => Err(e.into()),
                    }
                }
                MapMode::Enlarge => {
                    let spec = ShiftSpec {
                        max_shift: maps_cfg.enlarge.max_shift,
                        max_retries: maps_cfg.enlarge.max_retries,
                        shift_fraction: maps_cfg.enlarge.shift_fraction,
                        rng_seed: seed,
                    };
                    let (labels, shifts) = make_enlarging_map(&tile.labels, &spec)?;
                    let record = MapLogRecord {
                        tile_id: id.clone(),
                        mode,
                        source_tile: id.clone(),
                        seed,
                        transplants: Vec::new(),
                        shifts,
                        error: None,
                    };
                    Ok((Tile { id: id.clone(), image: tile.image, labels }, record))
                }
                MapMode::Original => {
                    let record = MapLogRecord {
                        tile_id: id.clone(),
                        mode,
                        source_tile: id.clone(),
                        seed,
                        transplants: Vec::new(),
                        shifts: Vec::new(),
                        error: None,
                    };
                    Ok((tile, record))
                }
            }
        })
        .collect::<Result<_, _>>()?;

    let mut writer = DatasetWriter::create(
        out,
        vocab,
        src.manifest().width,
        src.manifest().height,
    )?;
    let mut log = Vec::with_capacity(results.len());
    for (tile, record) in results {
        writer.write_tile(&tile.id, &tile.image, &tile.labels)?;
        log.push(record);
    }
    let ds = writer.finish()?;
    write_jsonl(&out.join("maps_log.jsonl"), &log)?;
    Ok((ds, log))
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), PipelineError> {
    let mut file = std::fs::File::create(path).map_err(io_at(path))?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| PipelineError::InvalidConfig(format!("jsonl encode: {e}")))?;
        writeln!(file, "{line}").map_err(io_at(path))?;
    }
    Ok(())
}

/// Reads `maps_log.jsonl` (if present) to recover each tile's map mode.
pub fn read_map_modes(maps_dir: &Path) -> BTreeMap<String, MapMode> {
    let mut modes = BTreeMap::new();
    let path = maps_dir.join("maps_log.jsonl");
    if let Ok(text) = std::fs::read_to_string(path) {
        for line in text.lines() {
            if let Ok(rec) = serde_json::from_str::<MapLogRecord>(line) {
                modes.insert(rec.tile_id, rec.mode);
            }
        }
    }
    modes
}

// ---------------------------------------------------------------------------
// Training stage
// ---------------------------------------------------------------------------

pub fn patches_to_training(patches: &[Patch]) -> Vec<TrainPatch> {
    patches
        .iter()
        .map(|p| {
            let image = crate::dataset::image_to_tensor(&p.image).mapv(|v| v as f32);
            let cond = one_hot_encode(&p.labels).mapv(|v| v as f32);
            TrainPatch::new(image, cond)
        })
        .collect()
}

/// Builds the denoiser + schedule from config and trains on the patches.
/// Returns the final checkpoint path.
pub fn train_stage(
    cfg: &PipelineConfig,
    condition_channels: usize,
    patches: &[Patch],
    checkpoint_dir: &Path,
) -> Result<PathBuf, PipelineError> {
    let schedule = build_schedule(
        cfg.schedule.steps,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )?;
    let dn_cfg = DenoiserConfig {
        input_channels: 3,
        condition_channels,
        base_width: cfg.denoiser.base_width,
        depth: cfg.denoiser.depth,
        timestep_embedding_dim: cfg.denoiser.timestep_embedding_dim,
        patch_size: cfg.patches.patch_size,
    };
    let denoiser = Denoiser::init(&dn_cfg, cfg.schedule.steps, derive_seed(cfg.seed, "init"))?;
    let hp = TrainHyperparams {
        learning_rate: cfg.trainer.learning_rate,
        batch_size: cfg.trainer.batch_size,
        steps: cfg.trainer.steps,
        p_uncond: cfg.trainer.p_uncond,
        lambda_vlb: cfg.trainer.lambda_vlb,
        checkpoint_every: cfg.trainer.checkpoint_every,
        seed: derive_seed(cfg.seed, "train"),
    };
    let mut trainer = Trainer::new(denoiser, schedule, hp)?;
    let data = patches_to_training(patches);
    let path = trainer
        .run(&data, Some(checkpoint_dir))?
        .expect("directory given, final checkpoint written");
    Ok(path)
}

// ---------------------------------------------------------------------------
// Synthesis stage
// ---------------------------------------------------------------------------

/// Synthesizes one tile per map in `maps_ds`, writing a new dataset whose
/// labels are the custom maps and whose images come from the denoiser.
/// `id_prefix` keeps ids distinct when several map sets combine into one
/// output dataset.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_dataset(
    maps_ds: &TileDataset,
    modes: &BTreeMap<String, MapMode>,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    sampler_cfg: &SamplerSection,
    global_seed: u64,
    id_prefix: &str,
    writer: &mut DatasetWriter,
) -> Result<Vec<SynthesisRecord>, PipelineError> {
    let ids = maps_ds.tile_ids().to_vec();
    let results: Vec<(String, crate::sampler::SynthesizedTile, SemanticLabelMap)> = ids
        .par_iter()
        .map(|id| -> Result<_, PipelineError> {
            let tile = maps_ds.load_tile(id)?;
            let output_id = format!("{id_prefix}{id}");
            let cfg = SamplerConfig {
                ddim_steps: sampler_cfg.ddim_steps,
                t_noise: sampler_cfg.t_noise,
                guidance: GuidanceConfig { s: sampler_cfg.guidance_scale },
                eta: sampler_cfg.eta,
                seed: derive_seed(global_seed, &output_id),
            };
            let mode = modes.get(id).copied().unwrap_or(MapMode::Original);
            let out = synthesize(
                &tile.image,
                Some(&tile.labels),
                denoiser,
                schedule,
                &cfg,
                id,
                &output_id,
                mode,
            )?;
            Ok((output_id, out, tile.labels))
        })
        .collect::<Result<_, _>>()?;

    let mut records = Vec::with_capacity(results.len());
    for (output_id, synth, labels) in results {
        writer.write_tile(&output_id, &synth.image, &labels)?;
        records.push(synth.record);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Evaluation stage
// ---------------------------------------------------------------------------

/// Scores a predicted dataset against ground truth (tile ids must match).
pub fn evaluate_datasets(
    gt_root: &Path,
    pred_root: &Path,
) -> Result<EvaluationReport, PipelineError> {
    let (gt, _) = ingest(gt_root).map_err(PipelineError::stage("evaluate/gt"))?;
    let (pred, _) = ingest(pred_root).map_err(PipelineError::stage("evaluate/pred"))?;
    if gt.tile_ids() != pred.tile_ids() {
        return Err(PipelineError::InvalidConfig(format!(
            "tile id mismatch: gt has {} tiles, pred has {}",
            gt.len(),
            pred.len()
        )));
    }
    let entries: Vec<TileEntry> = gt
        .tile_ids()
        .to_vec()
        .par_iter()
        .map(|id| -> Result<TileEntry, PipelineError> {
            let g = gt.load_tile(id)?;
            let p = pred.load_tile(id)?;
            Ok(TileEntry {
                tile_id: id.clone(),
                gt_inst: g.labels.instance_ids().clone(),
                gt_class: g.labels.class_ids().clone(),
                pred_inst: p.labels.instance_ids().clone(),
                pred_class: p.labels.class_ids().clone(),
            })
        })
        .collect::<Result<_, _>>()?;
    let class_names = gt.vocab().names()[1..].to_vec();
    Ok(evaluate_tiles(class_names, entries)?)
}

// ---------------------------------------------------------------------------
// run: the full experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetSummary {
    pub optimizer_steps: u64,
    pub batch_size: usize,
    pub real_patch_count: usize,
    pub synthesized_tile_count: usize,
    /// Synthesized tiles expressed in training-patch units (same
    /// extraction geometry as the real patches).
    pub synthesized_patch_equivalent: usize,
    /// Epochs the step budget equals on the real patch set alone.
    pub epochs_equivalent_real_only: f64,
    /// Epochs the same budget equals on real + synthesized patches; the
    /// equal-iteration accounting used when comparing augmented runs.
    pub epochs_equivalent_combined: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagePaths {
    pub validation_report: String,
    pub imbalance_report_json: String,
    pub imbalance_report_txt: String,
    pub patches_dir: String,
    pub checkpoint: String,
    pub maps_balance_dir: Option<String>,
    pub maps_enlarge_dir: Option<String>,
    pub synth_dir: String,
    pub synthesis_log: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub composition: Composition,
    pub tile_count: usize,
    pub class_names: Vec<String>,
    pub stages: StagePaths,
    pub budget: BudgetSummary,
    pub balance_transplants: usize,
    pub enlarge_shifts: usize,
    pub config: PipelineConfig,
}

/// Executes ingest → report → extract → train → make-maps → synthesize,
/// writing every artifact under `out_dir` plus `summary.json`. All outputs
/// are deterministic functions of (dataset, config); reruns produce
/// byte-identical artifacts.
pub fn run_experiment(cfg: &PipelineConfig, out_dir: &Path) -> Result<RunSummary, PipelineError> {
    cfg.validate_fields()?;
    std::fs::create_dir_all(out_dir).map_err(io_at(out_dir))?;

    // Ingest + validation report.
    let (ds, validation) =
        ingest(&cfg.dataset.train).map_err(PipelineError::stage("ingest"))?;
    let validation_path = out_dir.join("validation_report.json");
    write_json(&validation_path, &validation)?;

    // Imbalance report.
    let imbalance = report(&ds).map_err(PipelineError::stage("report"))?;
    let imbalance_json = out_dir.join("imbalance_report.json");
    write_json(&imbalance_json, &imbalance)?;
    let imbalance_txt = out_dir.join("imbalance_report.txt");
    std::fs::write(&imbalance_txt, imbalance.to_text()).map_err(io_at(&imbalance_txt))?;

    // Patch extraction.
    let patches = extract_patches(
        &ds,
        cfg.patches.patch_size,
        cfg.patches.stride,
        cfg.patches.filter_empty,
    )
    .map_err(PipelineError::stage("extract"))?;
    let patches_dir = out_dir.join("patches");
    write_patch_dataset(&patches, ds.vocab(), cfg.patches.patch_size, &patches_dir)
        .map_err(PipelineError::stage("extract"))?;

    // Training.
    let ckpt_dir = out_dir.join("checkpoints");
    let ckpt_path = train_stage(cfg, ds.vocab().len(), &patches, &ckpt_dir)
        .map_err(PipelineError::stage("train"))?;
    let (denoiser, sched_params) =
        checkpoint::load_denoiser(&ckpt_path).map_err(|e| PipelineError::Stage {
            stage: "train",
            source: Box::new(e.into()),
        })?;
    let schedule = build_schedule(
        sched_params.steps,
        sched_params.beta_start,
        sched_params.beta_end,
    )?;

    // Source tiles for synthesis. Counts beyond the tile count clamp: each
    // source tile conditions at most one map per mode.
    let mut count = if cfg.synthesis.count == 0 { ds.len() } else { cfg.synthesis.count };
    if count > ds.len() {
        log::warn!(
            "synthesis.count {count} exceeds tile count {}; clamping",
            ds.len()
        );
        count = ds.len();
    }
    let sources: Vec<String> = ds.tile_ids().iter().take(count).cloned().collect();
    // Even indices condition on balancing maps, odd on enlarging maps.
    let (balance_ids, enlarge_ids): (Vec<String>, Vec<String>) = match cfg.maps.composition {
        Composition::Full => {
            let b = sources.iter().step_by(2).cloned().collect();
            let e = sources.iter().skip(1).step_by(2).cloned().collect();
            (b, e)
        }
        Composition::Balance => (sources.clone(), Vec::new()),
        Composition::Enlarge => (Vec::new(), sources.clone()),
    };

    let mut maps_balance_dir = None;
    let mut maps_enlarge_dir = None;
    let synth_dir = out_dir.join("synth");
    let mut writer = DatasetWriter::create(
        &synth_dir,
        ds.vocab().clone(),
        ds.manifest().width,
        ds.manifest().height,
    )?;
    let mut synth_records = Vec::new();
    let mut balance_transplants = 0usize;
    let mut enlarge_shifts = 0usize;

    if !balance_ids.is_empty() {
        let dir = out_dir.join("maps_balance");
        let (maps_ds, log) = make_maps_dataset(
            &ds,
            MapMode::Balance,
            &cfg.maps,
            derive_seed(cfg.seed, "maps/balance"),
            Some(&dedup_sorted(&balance_ids)),
            &dir,
        )
        .map_err(PipelineError::stage("make-maps"))?;
        balance_transplants = log.iter().map(|r| r.transplants.len()).sum();
        let modes = log.iter().map(|r| (r.tile_id.clone(), r.mode)).collect();
        synth_records.extend(
            synthesize_dataset(
                &maps_ds,
                &modes,
                &denoiser,
                &schedule,
                &cfg.sampler,
                derive_seed(cfg.seed, "synth/balance"),
                "bal_",
                &mut writer,
            )
            .map_err(PipelineError::stage("synthesize"))?,
        );
        maps_balance_dir = Some(dir);
    }
    if !enlarge_ids.is_empty() {
        let dir = out_dir.join("maps_enlarge");
        let (maps_ds, log) = make_maps_dataset(
            &ds,
            MapMode::Enlarge,
            &cfg.maps,
            derive_seed(cfg.seed, "maps/enlarge"),
            Some(&dedup_sorted(&enlarge_ids)),
            &dir,
        )
        .map_err(PipelineError::stage("make-maps"))?;
        enlarge_shifts = log.iter().map(|r| r.shifts.len()).sum();
        let modes = log.iter().map(|r| (r.tile_id.clone(), r.mode)).collect();
        synth_records.extend(
            synthesize_dataset(
                &maps_ds,
                &modes,
                &denoiser,
                &schedule,
                &cfg.sampler,
                derive_seed(cfg.seed, "synth/enlarge"),
                "enl_",
                &mut writer,
            )
            .map_err(PipelineError::stage("synthesize"))?,
        );
        maps_enlarge_dir = Some(dir);
    }
    let synth_ds = writer.finish()?;
    write_jsonl(&synth_dir.join("synthesis_log.jsonl"), &synth_records)?;

    // Equal-iteration budget accounting.
    let windows_w = window_starts(
        ds.manifest().width as usize,
        cfg.patches.patch_size,
        cfg.patches.stride,
    )
    .len();
    let windows_h = window_starts(
        ds.manifest().height as usize,
        cfg.patches.patch_size,
        cfg.patches.stride,
    )
    .len();
    let patches_per_tile = windows_w * windows_h;
    let synth_patch_equiv = synth_ds.len() * patches_per_tile;
    let steps = cfg.trainer.steps;
    let samples_seen = steps as f64 * cfg.trainer.batch_size as f64;
    let budget = BudgetSummary {
        optimizer_steps: steps,
        batch_size: cfg.trainer.batch_size,
        real_patch_count: patches.len(),
        synthesized_tile_count: synth_ds.len(),
        synthesized_patch_equivalent: synth_patch_equiv,
        epochs_equivalent_real_only: samples_seen / patches.len().max(1) as f64,
        epochs_equivalent_combined: samples_seen
            / (patches.len() + synth_patch_equiv).max(1) as f64,
    };

    let rel = |p: &Path| {
        p.strip_prefix(out_dir)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let summary = RunSummary {
        seed: cfg.seed,
        composition: cfg.maps.composition,
        tile_count: ds.len(),
        class_names: ds.vocab().names().to_vec(),
        stages: StagePaths {
            validation_report: rel(&validation_path),
            imbalance_report_json: rel(&imbalance_json),
            imbalance_report_txt: rel(&imbalance_txt),
            patches_dir: rel(&patches_dir),
            checkpoint: rel(&ckpt_path),
            maps_balance_dir: maps_balance_dir.as_deref().map(rel),
            maps_enlarge_dir: maps_enlarge_dir.as_deref().map(rel),
            synth_dir: rel(&synth_dir),
            synthesis_log: rel(&synth_dir.join("synthesis_log.jsonl")),
        },
        budget,
        balance_transplants,
        enlarge_shifts,
        config: cfg.clone(),
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn dedup_sorted(ids: &[String]) -> Vec<String> {
    let mut v = ids.to_vec();
    v.sort();
    v.dedup();
    v
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| PipelineError::InvalidConfig(format!("json encode: {e}")))?;
    std::fs::write(path, text).map_err(io_at(path))
}
