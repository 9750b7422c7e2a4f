//! Semantic label data model: paired instance/class maps, nucleus
//! extraction, one-hot conditioning encodings and dataset statistics.
//!
//! Conventions used everywhere downstream: class index 0 is background,
//! instance id 0 is background, and a nonzero instance id labels a set of
//! pixels that all share one class id.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabelSpaceError {
    #[error("invalid class vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("label map invariant violated: {0}")]
    InvariantViolation(String),
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
}

/// Ordered class vocabulary. Index 0 is always the background class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    names: Vec<String>,
    colors: Option<Vec<[u8; 3]>>,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self, LabelSpaceError> {
        Self::build(names, None)
    }

    pub fn with_colors(
        names: Vec<String>,
        colors: Vec<[u8; 3]>,
    ) -> Result<Self, LabelSpaceError> {
        if colors.len() != names.len() {
            return Err(LabelSpaceError::InvalidVocabulary(format!(
                "{} colors for {} classes",
                colors.len(),
                names.len()
            )));
        }
        Self::build(names, Some(colors))
    }

    fn build(names: Vec<String>, colors: Option<Vec<[u8; 3]>>) -> Result<Self, LabelSpaceError> {
        if names.len() < 2 {
            return Err(LabelSpaceError::InvalidVocabulary(
                "need background plus at least one nucleus class".into(),
            ));
        }
        if names[0] != "background" {
            return Err(LabelSpaceError::InvalidVocabulary(format!(
                "index 0 must be \"background\", got \"{}\"",
                names[0]
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(LabelSpaceError::InvalidVocabulary(format!(
                    "duplicate class name \"{n}\""
                )));
            }
        }
        Ok(Self { names, colors })
    }

    /// Total number of classes including background.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees len >= 2
    }

    pub fn name(&self, class_id: u8) -> Option<&str> {
        self.names.get(class_id as usize).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn colors(&self) -> Option<&[[u8; 3]]> {
        self.colors.as_deref()
    }

    /// Nucleus class ids, i.e. everything except background.
    pub fn nucleus_classes(&self) -> impl Iterator<Item = u8> + '_ {
        1..self.names.len() as u8
    }
}

/// Inclusive bounding box in (row, col) tile coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub top: u32,
    pub left: u32,
    pub bottom: u32,
    pub right: u32,
}

/// One extracted nucleus: its pixel set, class and simple geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NucleusInstance {
    pub id: u32,
    pub class_id: u8,
    /// Pixel coordinates (row, col), sorted row-major.
    pub mask: Vec<(u32, u32)>,
    pub bbox: BBox,
    pub area: usize,
    /// Pixel-coordinate mean of the mask, (row, col).
    pub centroid: (f64, f64),
}

impl NucleusInstance {
    /// Builds an instance from its pixel set, deriving bbox/area/centroid.
    pub fn from_pixels(id: u32, class_id: u8, mut mask: Vec<(u32, u32)>) -> Self {
        assert!(!mask.is_empty(), "instance {id} has an empty mask");
        mask.sort_unstable();
        let (mut top, mut left, mut bottom, mut right) = (u32::MAX, u32::MAX, 0u32, 0u32);
        let (mut sum_r, mut sum_c) = (0f64, 0f64);
        for &(r, c) in &mask {
            top = top.min(r);
            left = left.min(c);
            bottom = bottom.max(r);
            right = right.max(c);
            sum_r += r as f64;
            sum_c += c as f64;
        }
        let n = mask.len() as f64;
        NucleusInstance {
            id,
            class_id,
            area: mask.len(),
            bbox: BBox { top, left, bottom, right },
            centroid: (sum_r / n, sum_c / n),
            mask,
        }
    }
}

/// Paired instance-id map and per-pixel class map for one tile.
/// (Persistence goes through the PNG tile layout, not serde.)
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticLabelMap {
    height: usize,
    width: usize,
    instance_ids: Array2<u32>,
    class_ids: Array2<u8>,
    vocab: ClassVocabulary,
}

impl SemanticLabelMap {
    /// Validating constructor: enforces shape agreement, background
    /// agreement, class-id range and single-class instances.
    pub fn new(
        instance_ids: Array2<u32>,
        class_ids: Array2<u8>,
        vocab: ClassVocabulary,
    ) -> Result<Self, LabelSpaceError> {
        let map = Self::from_parts_unchecked(instance_ids, class_ids, vocab);
        map.validate()?;
        Ok(map)
    }

    /// Skips validation. For IO internals and tests that need to build
    /// deliberately broken maps; everything else goes through [`Self::new`].
    pub fn from_parts_unchecked(
        instance_ids: Array2<u32>,
        class_ids: Array2<u8>,
        vocab: ClassVocabulary,
    ) -> Self {
        let (height, width) = instance_ids.dim();
        SemanticLabelMap { height, width, instance_ids, class_ids, vocab }
    }

    pub fn validate(&self) -> Result<(), LabelSpaceError> {
        if self.instance_ids.dim() != self.class_ids.dim() {
            return Err(LabelSpaceError::InvariantViolation(format!(
                "instance map {:?} and class map {:?} differ in shape",
                self.instance_ids.dim(),
                self.class_ids.dim()
            )));
        }
        let n_classes = self.vocab.len() as u8;
        let mut instance_class: BTreeMap<u32, u8> = BTreeMap::new();
        for ((r, c), &inst) in self.instance_ids.indexed_iter() {
            let class = self.class_ids[(r, c)];
            if class >= n_classes {
                return Err(LabelSpaceError::InvariantViolation(format!(
                    "class id {class} at ({r},{c}) out of range for {n_classes}-class vocabulary"
                )));
            }
            if (inst == 0) != (class == 0) {
                return Err(LabelSpaceError::InvariantViolation(format!(
                    "background disagreement at ({r},{c}): instance {inst}, class {class}"
                )));
            }
            if inst != 0 {
                match instance_class.get(&inst) {
                    None => {
                        instance_class.insert(inst, class);
                    }
                    Some(&seen) if seen != class => {
                        return Err(LabelSpaceError::InvariantViolation(format!(
                            "instance {inst} spans classes {seen} and {class}"
                        )));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Rebuilds a map from extracted instances. Pixels outside all masks are
    /// background. Counterpart of [`extract_instances`].
    pub fn from_instances(
        height: usize,
        width: usize,
        vocab: ClassVocabulary,
        instances: &[NucleusInstance],
    ) -> Result<Self, LabelSpaceError> {
        let mut instance_ids = Array2::<u32>::zeros((height, width));
        let mut class_ids = Array2::<u8>::zeros((height, width));
        for inst in instances {
            for &(r, c) in &inst.mask {
                let (r, c) = (r as usize, c as usize);
                if r >= height || c >= width {
                    return Err(LabelSpaceError::InvariantViolation(format!(
                        "instance {} pixel ({r},{c}) outside {height}x{width} tile",
                        inst.id
                    )));
                }
                if instance_ids[(r, c)] != 0 {
                    return Err(LabelSpaceError::InvariantViolation(format!(
                        "instances {} and {} overlap at ({r},{c})",
                        instance_ids[(r, c)],
                        inst.id
                    )));
                }
                instance_ids[(r, c)] = inst.id;
                class_ids[(r, c)] = inst.class_id;
            }
        }
        SemanticLabelMap::new(instance_ids, class_ids, vocab)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn instance_ids(&self) -> &Array2<u32> {
        &self.instance_ids
    }

    pub fn class_ids(&self) -> &Array2<u8> {
        &self.class_ids
    }

    pub fn vocab(&self) -> &ClassVocabulary {
        &self.vocab
    }

    /// Ids whose pixel set is not 4-connected. Real datasets contain
    /// fragmented annotations, so this is a warning signal, never an error.
    pub fn fragmented_instances(&self) -> Vec<u32> {
        let mut pixels: BTreeMap<u32, Vec<(u32, u32)>> = BTreeMap::new();
        for ((r, c), &inst) in self.instance_ids.indexed_iter() {
            if inst != 0 {
                pixels.entry(inst).or_default().push((r as u32, c as u32));
            }
        }
        let mut fragmented = Vec::new();
        for (id, px) in &pixels {
            if !is_four_connected(px) {
                fragmented.push(*id);
            }
        }
        fragmented
    }
}

fn is_four_connected(pixels: &[(u32, u32)]) -> bool {
    if pixels.len() <= 1 {
        return true;
    }
    let set: std::collections::HashSet<(u32, u32)> = pixels.iter().copied().collect();
    let mut stack = vec![pixels[0]];
    let mut seen = std::collections::HashSet::new();
    seen.insert(pixels[0]);
    while let Some((r, c)) = stack.pop() {
        let neighbours = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        for nb in neighbours {
            if set.contains(&nb) && seen.insert(nb) {
                stack.push(nb);
            }
        }
    }
    seen.len() == pixels.len()
}

/// One `NucleusInstance` per distinct nonzero instance id, ascending by id.
/// Masks partition the foreground.
pub fn extract_instances(
    map: &SemanticLabelMap,
) -> Result<Vec<NucleusInstance>, LabelSpaceError> {
    let mut pixels: BTreeMap<u32, (u8, Vec<(u32, u32)>)> = BTreeMap::new();
    for ((r, c), &inst) in map.instance_ids().indexed_iter() {
        if inst == 0 {
            continue;
        }
        let class = map.class_ids()[(r, c)];
        let entry = pixels.entry(inst).or_insert_with(|| (class, Vec::new()));
        if entry.0 != class {
            return Err(LabelSpaceError::InvariantViolation(format!(
                "instance {inst} spans classes {} and {class}",
                entry.0
            )));
        }
        entry.1.push((r as u32, c as u32));
    }
    Ok(pixels
        .into_iter()
        .map(|(id, (class, mask))| NucleusInstance::from_pixels(id, class, mask))
        .collect())
}

/// One-hot conditioning tensor, shape (C, H, W): channel c is 1.0 where
/// `class_ids == c`, else 0.0. Exactly one channel is hot per pixel.
pub fn one_hot_encode(map: &SemanticLabelMap) -> Array3<f64> {
    let c = map.vocab().len();
    let (h, w) = (map.height(), map.width());
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ((r, col), &class) in map.class_ids().indexed_iter() {
        out[(class as usize, r, col)] = 1.0;
    }
    out
}

/// The null conditioning ∅: the all-zero tensor of the same shape as a
/// one-hot encoding. Distinct from the background one-hot, which has
/// channel 0 set.
pub fn null_conditioning(classes: usize, height: usize, width: usize) -> Array3<f64> {
    Array3::zeros((classes, height, width))
}

/// Per-class nucleus counts and proportions over a tile collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Class names for the nucleus classes (background excluded), in
    /// vocabulary order.
    pub class_names: Vec<String>,
    /// Distinct-instance counts per nucleus class.
    pub counts: Vec<u64>,
    /// Proportions over nucleus classes; sum to 1 when any nuclei exist.
    pub proportions: Vec<f64>,
    pub tile_count: usize,
    pub total_nuclei: u64,
}

impl DatasetStats {
    /// The least-represented nucleus class: (name, class_id, proportion).
    /// Ties resolve to the lower class id.
    pub fn rarest_class(&self) -> Option<(String, u8, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &p) in self.proportions.iter().enumerate() {
            if best.is_none_or(|(_, bp)| p < bp) {
                best = Some((i, p));
            }
        }
        best.map(|(i, p)| (self.class_names[i].clone(), (i + 1) as u8, p))
    }
}

/// Counts distinct instances (not pixels) per nucleus class across tiles.
/// All maps must share one vocabulary.
pub fn class_histogram(
    maps: &[&SemanticLabelMap],
) -> Result<DatasetStats, LabelSpaceError> {
    let vocab = match maps.first() {
        Some(m) => m.vocab().clone(),
        None => {
            return Err(LabelSpaceError::VocabularyMismatch(
                "no maps supplied".into(),
            ))
        }
    };
    let n_nucleus = vocab.len() - 1;
    let mut counts = vec![0u64; n_nucleus];
    for map in maps {
        if map.vocab() != &vocab {
            return Err(LabelSpaceError::VocabularyMismatch(format!(
                "expected vocabulary {:?}, got {:?}",
                vocab.names(),
                map.vocab().names()
            )));
        }
        for inst in extract_instances(map)? {
            counts[inst.class_id as usize - 1] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let proportions = counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect();
    Ok(DatasetStats {
        class_names: vocab.names()[1..].to_vec(),
        counts,
        proportions,
        tile_count: maps.len(),
        total_nuclei: total,
    })
}
