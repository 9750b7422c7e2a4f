//! Diffusion-based synthesis of nuclei image/label training pairs for
//! imbalanced pathology datasets.
//!
//! The pipeline in one pass: ingest a tile dataset (paired instance and
//! class maps), train a semantic-label-conditioned denoiser, build custom
//! label maps (class-count *balancing* maps and nucleus-relocating
//! *enlarging* maps), partially noise real patches and denoise them under
//! guidance from the custom maps, and score any predicted instance/class
//! maps with the standard nuclei metrics (Dice, AJI, DQ/SQ/PQ, detection-
//! aware classification scores).
//!
//! Modules map onto the pipeline stages:
//! - [`label_space`]: instance/class map data model, nucleus extraction,
//!   one-hot conditioning, dataset statistics.
//! - [`dataset`]: the on-disk tile layout (`image.png`, `instance.png`,
//!   `class.png`, `manifest.json`).
//! - [`map_synthesis`]: balancing and enlarging label map generation.
//! - [`diffusion_core`]: noise schedule, forward process, losses,
//!   reverse-step statistics, classifier-free guidance algebra.
//! - [`denoiser_net`]: the conditional encoder/decoder denoiser and its
//!   trainer/checkpoints.
//! - [`sampler`]: partial noising + guided DDIM synthesis of image/label
//!   pairs.
//! - [`metrics`]: segmentation and classification scoring.
//! - [`pipeline`]: config, ingestion/validation, patch extraction,
//!   imbalance reporting and end-to-end orchestration.
//! - [`toydata`]: deterministic synthetic ellipse fixtures for tests and
//!   demos.

pub mod dataset;
pub mod denoiser_net;
pub mod diffusion_core;
pub mod label_space;
pub mod map_synthesis;
pub mod metrics;
pub mod pipeline;
pub mod sampler;
pub mod toydata;
