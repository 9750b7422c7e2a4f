//! Custom semantic label map generation.
//!
//! Two map families widen the conditioning distribution used for image
//! synthesis:
//! - *balancing maps* raise under-represented nucleus classes by
//!   transplanting rare-class instance labels from a donor pool over
//!   abundant-class instances;
//! - *enlarging maps* relocate nuclei by random integer offsets while
//!   preserving every mask exactly.
//!
//! All generation is deterministic given (input, spec, seed): identical
//! calls produce byte-identical maps and logs.

use crate::label_space::{
    extract_instances, LabelSpaceError, NucleusInstance, SemanticLabelMap,
};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MapSynthesisError {
    #[error(
        "donor pool exhausted for class {class_id}: no donor within size tolerance {tolerance} \
         (widen the tolerance or skip this tile)"
    )]
    DonorExhausted { class_id: u8, tolerance: f64 },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Label(#[from] LabelSpaceError),
}

/// One donated nucleus label, remembered with its source tile.
#[derive(Debug, Clone)]
pub struct DonorNucleus {
    pub tile_id: String,
    pub instance: NucleusInstance,
}

/// Cross-tile pool of nuclei eligible to donate their labels. Donors are
/// held in (tile id, instance id) order so selection is deterministic.
#[derive(Debug, Clone, Default)]
pub struct DonorPool {
    donors: Vec<DonorNucleus>,
}

impl DonorPool {
    pub fn new(mut donors: Vec<DonorNucleus>) -> Self {
        donors.sort_by(|a, b| {
            (a.tile_id.as_str(), a.instance.id).cmp(&(b.tile_id.as_str(), b.instance.id))
        });
        DonorPool { donors }
    }

    /// Collects every nucleus of every map into the pool.
    pub fn from_maps(maps: &[(String, &SemanticLabelMap)]) -> Result<Self, MapSynthesisError> {
        let mut donors = Vec::new();
        for (tile_id, map) in maps {
            for instance in extract_instances(map)? {
                donors.push(DonorNucleus { tile_id: tile_id.clone(), instance });
            }
        }
        Ok(DonorPool::new(donors))
    }

    pub fn len(&self) -> usize {
        self.donors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.donors.is_empty()
    }

    pub fn donors(&self) -> &[DonorNucleus] {
        &self.donors
    }

    /// True if the pool holds at least one donor of the class.
    pub fn has_class(&self, class_id: u8) -> bool {
        self.donors.iter().any(|d| d.instance.class_id == class_id)
    }
}

/// Parameters for balancing-map generation.
#[derive(Debug, Clone)]
pub struct BalanceSpec<'a> {
    /// Desired nucleus fractions per nucleus class (index = class id - 1).
    /// Must sum to 1.
    pub target_proportions: Vec<f64>,
    pub donor_pool: &'a DonorPool,
    /// Max relative area mismatch for a transplant, relative to the
    /// replaced instance's area. In (0, 1].
    pub size_tolerance: f64,
    pub rng_seed: u64,
}

impl BalanceSpec<'_> {
    fn validate(&self, n_nucleus_classes: usize) -> Result<(), MapSynthesisError> {
        if self.target_proportions.len() != n_nucleus_classes {
            return Err(MapSynthesisError::InvalidSpec(format!(
                "{} target proportions for {} nucleus classes",
                self.target_proportions.len(),
                n_nucleus_classes
            )));
        }
        let sum: f64 = self.target_proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.target_proportions.iter().any(|&p| p < 0.0) {
            return Err(MapSynthesisError::InvalidSpec(format!(
                "target proportions must be non-negative and sum to 1, got sum {sum}"
            )));
        }
        if !(self.size_tolerance > 0.0 && self.size_tolerance <= 1.0) {
            return Err(MapSynthesisError::InvalidSpec(format!(
                "size_tolerance must lie in (0, 1], got {}",
                self.size_tolerance
            )));
        }
        Ok(())
    }
}

/// One transplant: which instance was replaced and which donor label was
/// stamped over its centroid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransplantRecord {
    pub donor_tile: String,
    pub donor_id: u32,
    pub replaced_id: u32,
    pub replaced_class: u8,
    pub class_id: u8,
    /// Fresh id assigned to the stamped nucleus.
    pub new_id: u32,
    /// Integer translation applied to the donor mask, (rows, cols).
    pub offset: (i64, i64),
    /// Donor pixels dropped by tile-boundary clipping.
    pub clipped_pixels: usize,
}

struct Occupancy {
    instance: Array2<u32>,
    class: Array2<u8>,
}

impl Occupancy {
    fn erase(&mut self, inst: &NucleusInstance) {
        for &(r, c) in &inst.mask {
            self.instance[(r as usize, c as usize)] = 0;
            self.class[(r as usize, c as usize)] = 0;
        }
    }

    fn stamp(&mut self, pixels: &[(u32, u32)], id: u32, class_id: u8) {
        for &(r, c) in pixels {
            self.instance[(r as usize, c as usize)] = id;
            self.class[(r as usize, c as usize)] = class_id;
        }
    }
}

/// Translates a donor mask so its centroid lands on `target`, clips to the
/// tile and returns the surviving pixels (empty if everything clips away).
fn translate_mask(
    donor: &NucleusInstance,
    target: (f64, f64),
    height: usize,
    width: usize,
) -> (Vec<(u32, u32)>, (i64, i64), usize) {
    let dr = (target.0 - donor.centroid.0).round() as i64;
    let dc = (target.1 - donor.centroid.1).round() as i64;
    let mut pixels = Vec::with_capacity(donor.mask.len());
    let mut clipped = 0usize;
    for &(r, c) in &donor.mask {
        let nr = r as i64 + dr;
        let nc = c as i64 + dc;
        if nr >= 0 && nc >= 0 && (nr as usize) < height && (nc as usize) < width {
            pixels.push((nr as u32, nc as u32));
        } else {
            clipped += 1;
        }
    }
    (pixels, (dr, dc), clipped)
}

/// Generates a balancing map: transplants donor rare-class labels over
/// abundant-class instances until every class is within one nucleus of its
/// target proportion or no eligible pair remains.
///
/// A transplant clears the replaced instance, then stamps the donor mask
/// centroid-aligned on the replaced instance's centroid. The stamp must
/// land entirely on background (tile-boundary clipping excepted); colliding
/// placements fall through to the next donor. Donors are chosen
/// nearest-in-area within `size_tolerance`, ties broken by lower donor tile
/// id then lower instance id, and are used at most once per recipient tile.
pub fn make_balancing_map(
    recipient: &SemanticLabelMap,
    spec: &BalanceSpec,
) -> Result<(SemanticLabelMap, Vec<TransplantRecord>), MapSynthesisError> {
    let n_classes = recipient.vocab().len() - 1;
    spec.validate(n_classes)?;

    let mut live = extract_instances(recipient)?;
    let total = live.len();
    let mut log = Vec::new();
    if total == 0 {
        return Ok((recipient.clone(), log));
    }

    let mut occ = Occupancy {
        instance: recipient.instance_ids().clone(),
        class: recipient.class_ids().clone(),
    };
    let mut counts = vec![0i64; n_classes];
    for inst in &live {
        counts[inst.class_id as usize - 1] += 1;
    }
    let mut next_id = live.iter().map(|i| i.id).max().unwrap_or(0) + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut used_donors: HashSet<(String, u32)> = HashSet::new();
    let (h, w) = (recipient.height(), recipient.width());

    loop {
        // Most-deficient class at least one whole nucleus below target.
        let deficit = |c: usize| spec.target_proportions[c] * total as f64 - counts[c] as f64;
        let rare = (0..n_classes)
            .filter(|&c| deficit(c) >= 1.0 - 1e-9)
            .max_by(|&a, &b| deficit(a).total_cmp(&deficit(b)));
        let rare = match rare {
            Some(c) => (c + 1) as u8,
            None => break,
        };

        // Replacement candidates: instances of over-represented classes.
        let mut candidates: Vec<usize> = live
            .iter()
            .enumerate()
            .filter(|(_, inst)| {
                let c = inst.class_id as usize - 1;
                counts[c] as f64 - spec.target_proportions[c] * total as f64 > 1e-9
            })
            .map(|(i, _)| i)
            .collect();
        if candidates.is_empty() {
            break; // no eligible pair remains
        }
        candidates.shuffle(&mut rng);

        let mut any_donor_in_tolerance = false;
        let mut transplanted = false;
        'candidates: for &cand_idx in &candidates {
            let replaced = live[cand_idx].clone();
            // Donors of the rare class within tolerance, nearest area first.
            let mut donors: Vec<&DonorNucleus> = spec
                .donor_pool
                .donors()
                .iter()
                .filter(|d| {
                    d.instance.class_id == rare
                        && !used_donors.contains(&(d.tile_id.clone(), d.instance.id))
                        && (d.instance.area as f64 - replaced.area as f64).abs()
                            <= spec.size_tolerance * replaced.area as f64
                })
                .collect();
            if donors.is_empty() {
                continue;
            }
            any_donor_in_tolerance = true;
            donors.sort_by(|a, b| {
                let da = (a.instance.area as i64 - replaced.area as i64).abs();
                let db = (b.instance.area as i64 - replaced.area as i64).abs();
                (da, a.tile_id.as_str(), a.instance.id)
                    .cmp(&(db, b.tile_id.as_str(), b.instance.id))
            });

            occ.erase(&replaced);
            for donor in donors {
                let (pixels, offset, clipped) =
                    translate_mask(&donor.instance, replaced.centroid, h, w);
                let placeable = !pixels.is_empty()
                    && pixels
                        .iter()
                        .all(|&(r, c)| occ.instance[(r as usize, c as usize)] == 0);
                if !placeable {
                    continue;
                }
                let new_id = next_id;
                next_id += 1;
                occ.stamp(&pixels, new_id, rare);
                counts[replaced.class_id as usize - 1] -= 1;
                counts[rare as usize - 1] += 1;
                log.push(TransplantRecord {
                    donor_tile: donor.tile_id.clone(),
                    donor_id: donor.instance.id,
                    replaced_id: replaced.id,
                    replaced_class: replaced.class_id,
                    class_id: rare,
                    new_id,
                    offset,
                    clipped_pixels: clipped,
                });
                used_donors.insert((donor.tile_id.clone(), donor.instance.id));
                live.swap_remove(cand_idx);
                live.push(NucleusInstance::from_pixels(new_id, rare, pixels));
                transplanted = true;
                break 'candidates;
            }
            // Every donor collided: restore the candidate and move on.
            occ.stamp(&replaced.mask, replaced.id, replaced.class_id);
        }

        if !transplanted {
            if !any_donor_in_tolerance {
                return Err(MapSynthesisError::DonorExhausted {
                    class_id: rare,
                    tolerance: spec.size_tolerance,
                });
            }
            break; // donors existed but no placement fit: no eligible pair
        }
    }

    let map = SemanticLabelMap::new(occ.instance, occ.class, recipient.vocab().clone())?;
    Ok((map, log))
}

/// Parameters for enlarging-map generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Per-axis bound for the uniform integer displacement, in pixels.
    pub max_shift: u32,
    /// Attempts per nucleus before keeping it in place.
    pub max_retries: u32,
    /// Fraction of nuclei to move, in [0, 1].
    pub shift_fraction: f64,
    pub rng_seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec { max_shift: 25, max_retries: 10, shift_fraction: 1.0, rng_seed: 0 }
    }
}

impl ShiftSpec {
    fn validate(&self) -> Result<(), MapSynthesisError> {
        if self.max_retries < 1 {
            return Err(MapSynthesisError::InvalidSpec(
                "max_retries must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.shift_fraction) {
            return Err(MapSynthesisError::InvalidSpec(format!(
                "shift_fraction must lie in [0, 1], got {}",
                self.shift_fraction
            )));
        }
        Ok(())
    }
}

/// Outcome of one relocation attempt sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRecord {
    pub instance_id: u32,
    pub class_id: u8,
    /// Accepted displacement (rows, cols); `None` if the nucleus stayed in
    /// place after exhausting retries.
    pub offset: Option<(i64, i64)>,
    pub attempts: u32,
}

/// Generates an enlarging map: a seeded `shift_fraction` subset of nuclei
/// is displaced by uniform integer offsets in [-max_shift, +max_shift]².
/// A displacement is accepted only if the moved mask stays inside the tile
/// and overlaps no other instance; after `max_retries` failures the nucleus
/// keeps its position. Class, area and mask shape are preserved exactly.
pub fn make_enlarging_map(
    source: &SemanticLabelMap,
    spec: &ShiftSpec,
) -> Result<(SemanticLabelMap, Vec<ShiftRecord>), MapSynthesisError> {
    spec.validate()?;
    let instances = extract_instances(source)?;
    let n = instances.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    let k = ((spec.shift_fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut selected: Vec<usize> = order.into_iter().take(k).collect();
    // Process in ascending instance-id order so the relocation sequence does
    // not depend on the selection shuffle.
    selected.sort_by_key(|&i| instances[i].id);

    let mut occ = Occupancy {
        instance: source.instance_ids().clone(),
        class: source.class_ids().clone(),
    };
    let (h, w) = (source.height() as i64, source.width() as i64);
    let m = spec.max_shift as i64;
    let mut log = Vec::with_capacity(k);

    for &idx in &selected {
        let inst = &instances[idx];
        occ.erase(inst);
        let mut accepted: Option<(i64, i64)> = None;
        let mut attempts = 0u32;
        while attempts < spec.max_retries {
            attempts += 1;
            let dr = rng.gen_range(-m..=m);
            let dc = rng.gen_range(-m..=m);
            let fits = inst.mask.iter().all(|&(r, c)| {
                let nr = r as i64 + dr;
                let nc = c as i64 + dc;
                nr >= 0
                    && nc >= 0
                    && nr < h
                    && nc < w
                    && occ.instance[(nr as usize, nc as usize)] == 0
            });
            if fits {
                accepted = Some((dr, dc));
                break;
            }
        }
        match accepted {
            Some((dr, dc)) => {
                let moved: Vec<(u32, u32)> = inst
                    .mask
                    .iter()
                    .map(|&(r, c)| ((r as i64 + dr) as u32, (c as i64 + dc) as u32))
                    .collect();
                occ.stamp(&moved, inst.id, inst.class_id);
                log.push(ShiftRecord {
                    instance_id: inst.id,
                    class_id: inst.class_id,
                    offset: Some((dr, dc)),
                    attempts,
                });
            }
            None => {
                occ.stamp(&inst.mask, inst.id, inst.class_id);
                log.push(ShiftRecord {
                    instance_id: inst.id,
                    class_id: inst.class_id,
                    offset: None,
                    attempts,
                });
            }
        }
    }

    let map = SemanticLabelMap::new(occ.instance, occ.class, source.vocab().clone())?;
    Ok((map, log))
}
