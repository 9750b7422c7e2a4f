//! Single-file checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   b"DMCK"
//! version u32
//! hlen    u64           length of the JSON header in bytes
//! header  JSON          config, schedule params, trainer state, RNG state,
//!                       tensor directory (name, shape, offset, len)
//! payload f32 data      tensors concatenated in directory order
//! ```
//!
//! Serialization is deterministic: the header is serde_json over ordered
//! structs and the tensor order follows the parameter store. Two trainers
//! in identical states write identical bytes.

use super::nn::{Adam, ParamStore};
use super::{Denoiser, DenoiserConfig, DenoiserError, TrainHyperparams};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DMCK";
const FORMAT_VERSION: u32 = 1;

/// (first moments, second moments) in parameter-store order.
pub type AdamMoments = (Vec<ArrayD<f32>>, Vec<ArrayD<f32>>);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Result<Self, DenoiserError> {
        let word_pos = rng.get_word_pos();
        let word_pos = u64::try_from(word_pos).map_err(|_| {
            DenoiserError::ResumeStateCorrupt("rng word position exceeds u64".into())
        })?;
        Ok(RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos })
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos as u128);
        rng
    }
}

use rand::SeedableRng;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: DenoiserConfig,
    schedule: ScheduleParams,
    hyperparams: TrainHyperparams,
    step: u64,
    adam_t: u64,
    rng: RngState,
    tensors: Vec<TensorInfo>,
}

/// Everything a training run needs to resume exactly, or an inference run
/// needs to load weights.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub hyperparams: TrainHyperparams,
    pub step: u64,
    pub adam_t: u64,
    pub rng: RngState,
    /// (name, tensor) in store order: parameters first, then `adam.m/...`
    /// and `adam.v/...` moment tensors.
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn from_training(
        denoiser: &Denoiser,
        adam: &Adam,
        schedule: ScheduleParams,
        hyperparams: TrainHyperparams,
        step: u64,
        rng: &ChaCha8Rng,
    ) -> Result<Self, DenoiserError> {
        let mut tensors = Vec::new();
        for e in denoiser.params().entries() {
            tensors.push((e.name.clone(), e.value.clone()));
        }
        for (e, m) in denoiser.params().entries().iter().zip(&adam.m) {
            tensors.push((format!("adam.m/{}", e.name), m.clone()));
        }
        for (e, v) in denoiser.params().entries().iter().zip(&adam.v) {
            tensors.push((format!("adam.v/{}", e.name), v.clone()));
        }
        Ok(Checkpoint {
            config: denoiser.config().clone(),
            schedule,
            hyperparams,
            step,
            adam_t: adam.t,
            rng: RngState::capture(rng)?,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DenoiserError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = BufWriter::new(std::fs::File::create(path)?);
        let mut infos = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = t.len() as u64;
            infos.push(TensorInfo {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len,
            });
            offset += len * 4;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            hyperparams: self.hyperparams.clone(),
            step: self.step,
            adam_t: self.adam_t,
            rng: self.rng.clone(),
            tensors: infos,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| DenoiserError::ResumeStateCorrupt(e.to_string()))?;

        file.write_all(MAGIC)?;
        file.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        file.write_u64::<LittleEndian>(header_json.len() as u64)?;
        file.write_all(&header_json)?;
        for (_, t) in &self.tensors {
            let slice = t.as_slice().expect("standard layout tensor");
            for &v in slice {
                file.write_f32::<LittleEndian>(v)?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DenoiserError> {
        let mut file = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DenoiserError::IncompatibleCheckpoint(
                "bad magic: not a checkpoint file".into(),
            ));
        }
        let version = file.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(DenoiserError::IncompatibleCheckpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let hlen = file.read_u64::<LittleEndian>()? as usize;
        let mut header_bytes = vec![0u8; hlen];
        file.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| DenoiserError::ResumeStateCorrupt(format!("header: {e}")))?;

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in &header.tensors {
            let expect: usize = info.shape.iter().product();
            if expect != info.len as usize {
                return Err(DenoiserError::ResumeStateCorrupt(format!(
                    "tensor {}: shape/len disagree",
                    info.name
                )));
            }
            let mut data = vec![0f32; info.len as usize];
            file.read_f32_into::<LittleEndian>(&mut data)?;
            let t = ArrayD::from_shape_vec(info.shape.clone(), data)
                .map_err(|e| DenoiserError::ResumeStateCorrupt(e.to_string()))?;
            tensors.push((info.name.clone(), t));
        }
        Ok(Checkpoint {
            config: header.config,
            schedule: header.schedule,
            hyperparams: header.hyperparams,
            step: header.step,
            adam_t: header.adam_t,
            rng: header.rng,
            tensors,
        })
    }

    /// Splits the tensor list back into (params, adam m, adam v) matching
    /// the given freshly-built parameter store.
    pub fn apply_to(&self, params: &mut ParamStore) -> Result<AdamMoments, DenoiserError> {
        let n = params.len();
        if self.tensors.len() != 3 * n {
            return Err(DenoiserError::IncompatibleCheckpoint(format!(
                "checkpoint holds {} tensors, structure needs {}",
                self.tensors.len(),
                3 * n
            )));
        }
        if self.tensors.is_empty() {
            return Err(DenoiserError::NotInitialized);
        }
        let mut adam_m = Vec::with_capacity(n);
        let mut adam_v = Vec::with_capacity(n);
        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            let (pname, pval) = &self.tensors[i];
            let (mname, mval) = &self.tensors[n + i];
            let (vname, vval) = &self.tensors[2 * n + i];
            if pname != &entry.name
                || mname != &format!("adam.m/{}", entry.name)
                || vname != &format!("adam.v/{}", entry.name)
            {
                return Err(DenoiserError::IncompatibleCheckpoint(format!(
                    "tensor {i} is {pname}, structure expects {}",
                    entry.name
                )));
            }
            if pval.shape() != entry.value.shape() {
                return Err(DenoiserError::IncompatibleCheckpoint(format!(
                    "{pname}: checkpoint shape {:?} vs structure {:?}",
                    pval.shape(),
                    entry.value.shape()
                )));
            }
            entry.value = pval.clone();
            adam_m.push(mval.clone());
            adam_v.push(vval.clone());
        }
        Ok((adam_m, adam_v))
    }
}

/// Loads weights for inference, discarding optimizer state. Returns the
/// denoiser plus the schedule parameters it was trained under.
pub fn load_denoiser(path: &Path) -> Result<(Denoiser, ScheduleParams), DenoiserError> {
    let ckpt = Checkpoint::load(path)?;
    let mut denoiser = Denoiser::init(&ckpt.config, ckpt.schedule.steps, 0)?;
    ckpt.apply_to(denoiser.params_mut())?;
    Ok((denoiser, ckpt.schedule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn rng_state_round_trip_continues_stream() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let _burn: f64 = rng.gen();
        let state = RngState::capture(&rng).unwrap();
        let mut restored = state.restore();
        let next_a: [f64; 4] = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
        let next_b: [f64; 4] = [
            restored.gen(),
            restored.gen(),
            restored.gen(),
            restored.gen(),
        ];
        assert_eq!(next_a, next_b);
    }

    #[test]
    fn rejects_non_checkpoint_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.dmck");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(DenoiserError::IncompatibleCheckpoint(_))
        ));
    }
}
