//! Nuclei segmentation and classification metrics: Dice, AJI, DQ/SQ/PQ and
//! detection-aware classification scores, plus dataset-level aggregation.
//!
//! Matching rules are deterministic by construction:
//! - panoptic matching pairs instances with IoU strictly greater than 0.5
//!   (such a matching is unique);
//! - AJI matches each ground-truth instance greedily to the unused
//!   prediction maximizing IoU, ties broken by lower prediction id, and the
//!   denominator accumulates matched unions plus all unmatched areas on
//!   both sides;
//! - classification scores reuse the panoptic matching: a matched pair is a
//!   true positive for class c only when both sides carry c; unmatched and
//!   misclassified instances count as per-class FP/FN.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: gt {gt:?} vs pred {pred:?}")]
    ShapeMismatch { gt: Vec<usize>, pred: Vec<usize> },
}

fn check_shapes(gt: &Array2<u32>, pred: &Array2<u32>) -> Result<(), MetricsError> {
    if gt.dim() != pred.dim() {
        return Err(MetricsError::ShapeMismatch {
            gt: gt.shape().to_vec(),
            pred: pred.shape().to_vec(),
        });
    }
    Ok(())
}

/// Dice coefficient between two foreground masks: 2|A∩B|/(|A|+|B|).
/// Both masks empty is defined as 1.0.
pub fn dice(gt_fg: &Array2<bool>, pred_fg: &Array2<bool>) -> Result<f64, MetricsError> {
    if gt_fg.dim() != pred_fg.dim() {
        return Err(MetricsError::ShapeMismatch {
            gt: gt_fg.shape().to_vec(),
            pred: pred_fg.shape().to_vec(),
        });
    }
    let mut inter = 0u64;
    let mut total = 0u64;
    for (&a, &b) in gt_fg.iter().zip(pred_fg.iter()) {
        inter += (a && b) as u64;
        total += a as u64 + b as u64;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Per-pair overlap bookkeeping shared by AJI, panoptic and classification.
struct Overlaps {
    gt_areas: BTreeMap<u32, u64>,
    pred_areas: BTreeMap<u32, u64>,
    intersections: BTreeMap<(u32, u32), u64>,
}

fn overlaps(gt: &Array2<u32>, pred: &Array2<u32>) -> Overlaps {
    let mut gt_areas = BTreeMap::new();
    let mut pred_areas = BTreeMap::new();
    let mut intersections = BTreeMap::new();
    for (&g, &p) in gt.iter().zip(pred.iter()) {
        if g != 0 {
            *gt_areas.entry(g).or_insert(0) += 1;
        }
        if p != 0 {
            *pred_areas.entry(p).or_insert(0) += 1;
        }
        if g != 0 && p != 0 {
            *intersections.entry((g, p)).or_insert(0) += 1;
        }
    }
    Overlaps { gt_areas, pred_areas, intersections }
}

fn iou(inter: u64, a: u64, b: u64) -> f64 {
    inter as f64 / (a + b - inter) as f64
}

/// Aggregated Jaccard Index.
pub fn aji(gt: &Array2<u32>, pred: &Array2<u32>) -> Result<f64, MetricsError> {
    check_shapes(gt, pred)?;
    let ov = overlaps(gt, pred);
    let mut used_pred = std::collections::HashSet::new();
    let mut numerator = 0f64;
    let mut denominator = 0f64;
    for (&g, &ga) in &ov.gt_areas {
        // Best unused prediction by IoU; ties resolve to the lower pred id
        // because iteration is in ascending (g, p) order.
        let mut best: Option<(u32, f64, u64)> = None;
        for (&(gg, p), &inter) in ov.intersections.range((g, 0)..(g + 1, 0)) {
            debug_assert_eq!(gg, g);
            if used_pred.contains(&p) {
                continue;
            }
            let i = iou(inter, ga, ov.pred_areas[&p]);
            if best.is_none_or(|(_, bi, _)| i > bi) {
                best = Some((p, i, inter));
            }
        }
        match best {
            Some((p, _, inter)) => {
                used_pred.insert(p);
                numerator += inter as f64;
                denominator += (ga + ov.pred_areas[&p] - inter) as f64;
            }
            None => denominator += ga as f64,
        }
    }
    for (&p, &pa) in &ov.pred_areas {
        if !used_pred.contains(&p) {
            denominator += pa as f64;
        }
    }
    if denominator == 0.0 {
        return Ok(1.0); // both maps empty
    }
    Ok(numerator / denominator)
}

/// Matching underlying DQ/SQ/PQ. Pairs have IoU strictly greater than 0.5,
/// so each gt and pred id appears in at most one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// (gt id, pred id, IoU) triples, ascending by gt id.
    pub matches: Vec<(u32, u32, f64)>,
    pub unmatched_gt: Vec<u32>,
    pub unmatched_pred: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanopticScores {
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
}

/// Detection, segmentation and panoptic quality.
pub fn panoptic(
    gt: &Array2<u32>,
    pred: &Array2<u32>,
) -> Result<(PanopticScores, MatchResult), MetricsError> {
    check_shapes(gt, pred)?;
    let ov = overlaps(gt, pred);
    let mut matches = Vec::new();
    let mut matched_gt = std::collections::HashSet::new();
    let mut matched_pred = std::collections::HashSet::new();
    for (&(g, p), &inter) in &ov.intersections {
        let i = iou(inter, ov.gt_areas[&g], ov.pred_areas[&p]);
        if i > 0.5 {
            matches.push((g, p, i));
            matched_gt.insert(g);
            matched_pred.insert(p);
        }
    }
    let unmatched_gt: Vec<u32> = ov
        .gt_areas
        .keys()
        .copied()
        .filter(|g| !matched_gt.contains(g))
        .collect();
    let unmatched_pred: Vec<u32> = ov
        .pred_areas
        .keys()
        .copied()
        .filter(|p| !matched_pred.contains(p))
        .collect();

    let tp = matches.len() as f64;
    let fp = unmatched_pred.len() as f64;
    let f_n = unmatched_gt.len() as f64;

    let scores = if tp + fp + f_n == 0.0 {
        // Both maps empty: perfect agreement.
        PanopticScores { dq: 1.0, sq: 1.0, pq: 1.0 }
    } else {
        let dq = tp / (tp + 0.5 * fp + 0.5 * f_n);
        let sq = if tp > 0.0 {
            matches.iter().map(|&(_, _, i)| i).sum::<f64>() / tp
        } else {
            0.0
        };
        PanopticScores { dq, sq, pq: dq * sq }
    };
    Ok((scores, MatchResult { matches, unmatched_gt, unmatched_pred }))
}

/// Raw detection-aware per-class counts; F1 and accuracy derive from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    /// Per nucleus class (index = class id - 1).
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub matched_pairs: u64,
    pub agreeing_pairs: u64,
}

impl ClassCounts {
    pub fn zeros(n_nucleus_classes: usize) -> Self {
        ClassCounts {
            tp: vec![0; n_nucleus_classes],
            fp: vec![0; n_nucleus_classes],
            fn_: vec![0; n_nucleus_classes],
            matched_pairs: 0,
            agreeing_pairs: 0,
        }
    }

    pub fn add(&mut self, other: &ClassCounts) {
        for i in 0..self.tp.len() {
            self.tp[i] += other.tp[i];
            self.fp[i] += other.fp[i];
            self.fn_[i] += other.fn_[i];
        }
        self.matched_pairs += other.matched_pairs;
        self.agreeing_pairs += other.agreeing_pairs;
    }

    /// Accuracy over matched pairs. No matched pairs: 1.0 when there were
    /// no instances at all, else 0.0.
    pub fn accuracy(&self) -> f64 {
        if self.matched_pairs == 0 {
            let any: u64 = self.tp.iter().chain(&self.fp).chain(&self.fn_).sum();
            return if any == 0 { 1.0 } else { 0.0 };
        }
        self.agreeing_pairs as f64 / self.matched_pairs as f64
    }

    /// Per-class F1 = 2TP/(2TP+FP+FN); an absent class (zero denominator)
    /// scores 1.0.
    pub fn f1(&self) -> Vec<f64> {
        (0..self.tp.len())
            .map(|i| {
                let denom = 2 * self.tp[i] + self.fp[i] + self.fn_[i];
                if denom == 0 {
                    1.0
                } else {
                    2.0 * self.tp[i] as f64 / denom as f64
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub accuracy: f64,
    /// Per nucleus class, index = class id - 1.
    pub f1_per_class: Vec<f64>,
    pub counts: ClassCounts,
}

fn instance_classes(inst: &Array2<u32>, class: &Array2<u8>) -> BTreeMap<u32, u8> {
    let mut out = BTreeMap::new();
    for (&i, &c) in inst.iter().zip(class.iter()) {
        if i != 0 {
            out.entry(i).or_insert(c);
        }
    }
    out
}

/// Detection-aware classification scoring over paired instance/class maps.
/// `n_nucleus_classes` fixes the score vector length so empty tiles
/// aggregate consistently.
pub fn classification_scores(
    gt_inst: &Array2<u32>,
    gt_class: &Array2<u8>,
    pred_inst: &Array2<u32>,
    pred_class: &Array2<u8>,
    n_nucleus_classes: usize,
) -> Result<ClassificationScores, MetricsError> {
    check_shapes(gt_inst, pred_inst)?;
    let counts = classification_counts(gt_inst, gt_class, pred_inst, pred_class, n_nucleus_classes)?;
    Ok(ClassificationScores {
        accuracy: counts.accuracy(),
        f1_per_class: counts.f1(),
        counts,
    })
}

/// The raw counts behind [`classification_scores`].
pub fn classification_counts(
    gt_inst: &Array2<u32>,
    gt_class: &Array2<u8>,
    pred_inst: &Array2<u32>,
    pred_class: &Array2<u8>,
    n_nucleus_classes: usize,
) -> Result<ClassCounts, MetricsError> {
    check_shapes(gt_inst, pred_inst)?;
    let (_, matching) = panoptic(gt_inst, pred_inst)?;
    let gt_cls = instance_classes(gt_inst, gt_class);
    let pred_cls = instance_classes(pred_inst, pred_class);

    let mut counts = ClassCounts::zeros(n_nucleus_classes);
    let slot = |c: u8| (c as usize).saturating_sub(1);

    for &(g, p, _) in &matching.matches {
        let (cg, cp) = (gt_cls[&g], pred_cls[&p]);
        counts.matched_pairs += 1;
        if cg == cp {
            counts.agreeing_pairs += 1;
            counts.tp[slot(cg)] += 1;
        } else {
            // Misclassified detection: an FN for the gt class and an FP for
            // the predicted class.
            counts.fn_[slot(cg)] += 1;
            counts.fp[slot(cp)] += 1;
        }
    }
    for g in &matching.unmatched_gt {
        counts.fn_[slot(gt_cls[g])] += 1;
    }
    for p in &matching.unmatched_pred {
        counts.fp[slot(pred_cls[p])] += 1;
    }
    Ok(counts)
}

/// Per-tile metric values, keyed by tile id in the aggregate report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileScores {
    pub dice: f64,
    pub aji: f64,
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
    pub accuracy: f64,
    pub f1_per_class: Vec<f64>,
}

/// Dataset-level report: per-tile values plus aggregates. Dice is reported
/// both per-tile-averaged and over pooled pixels since conventions differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub class_names: Vec<String>,
    pub per_tile: Vec<(String, TileScores)>,
    pub dice_mean: f64,
    pub dice_pooled: f64,
    pub aji_mean: f64,
    pub dq_mean: f64,
    pub sq_mean: f64,
    pub pq_mean: f64,
    /// DQ/SQ/PQ recomputed from pooled TP/FP/FN and summed IoU.
    pub dq_pooled: f64,
    pub sq_pooled: f64,
    pub pq_pooled: f64,
    /// Classification scores from pooled per-class counts.
    pub accuracy: f64,
    pub f1_per_class: Vec<f64>,
}

/// Scores a list of (tile id, gt maps, pred maps) entries. Tiles are folded
/// in ascending tile-id order regardless of input order.
pub fn evaluate_tiles(
    class_names: Vec<String>,
    mut entries: Vec<TileEntry>,
) -> Result<EvaluationReport, MetricsError> {
    entries.sort_by(|a, b| a.tile_id.cmp(&b.tile_id));
    let n_classes = class_names.len();
    let mut per_tile = Vec::with_capacity(entries.len());
    let mut pooled_counts = ClassCounts::zeros(n_classes);
    let (mut dice_sum, mut aji_sum, mut dq_sum, mut sq_sum, mut pq_sum) =
        (0f64, 0f64, 0f64, 0f64, 0f64);
    let (mut inter_px, mut total_px) = (0u64, 0u64);
    let (mut tp_all, mut fp_all, mut fn_all, mut iou_all) = (0u64, 0u64, 0u64, 0f64);

    for entry in &entries {
        let gt_fg = entry.gt_inst.mapv(|v| v != 0);
        let pred_fg = entry.pred_inst.mapv(|v| v != 0);
        let d = dice(&gt_fg, &pred_fg)?;
        for (&a, &b) in gt_fg.iter().zip(pred_fg.iter()) {
            inter_px += (a && b) as u64;
            total_px += a as u64 + b as u64;
        }
        let a = aji(&entry.gt_inst, &entry.pred_inst)?;
        let (pan, matching) = panoptic(&entry.gt_inst, &entry.pred_inst)?;
        tp_all += matching.matches.len() as u64;
        fp_all += matching.unmatched_pred.len() as u64;
        fn_all += matching.unmatched_gt.len() as u64;
        iou_all += matching.matches.iter().map(|&(_, _, i)| i).sum::<f64>();
        let counts = classification_counts(
            &entry.gt_inst,
            &entry.gt_class,
            &entry.pred_inst,
            &entry.pred_class,
            n_classes,
        )?;
        pooled_counts.add(&counts);
        per_tile.push((
            entry.tile_id.clone(),
            TileScores {
                dice: d,
                aji: a,
                dq: pan.dq,
                sq: pan.sq,
                pq: pan.pq,
                accuracy: counts.accuracy(),
                f1_per_class: counts.f1(),
            },
        ));
        dice_sum += d;
        aji_sum += a;
        dq_sum += pan.dq;
        sq_sum += pan.sq;
        pq_sum += pan.pq;
    }

    let n = entries.len().max(1) as f64;
    let denom = (tp_all + fp_all + fn_all) as f64;
    let (dq_pooled, sq_pooled) = if denom == 0.0 {
        (1.0, 1.0)
    } else {
        let dq = tp_all as f64 / (tp_all as f64 + 0.5 * (fp_all + fn_all) as f64);
        let sq = if tp_all > 0 { iou_all / tp_all as f64 } else { 0.0 };
        (dq, sq)
    };
    Ok(EvaluationReport {
        class_names,
        dice_mean: dice_sum / n,
        dice_pooled: if total_px == 0 { 1.0 } else { 2.0 * inter_px as f64 / total_px as f64 },
        aji_mean: aji_sum / n,
        dq_mean: dq_sum / n,
        sq_mean: sq_sum / n,
        pq_mean: pq_sum / n,
        dq_pooled,
        sq_pooled,
        pq_pooled: dq_pooled * sq_pooled,
        accuracy: pooled_counts.accuracy(),
        f1_per_class: pooled_counts.f1(),
        per_tile,
    })
}

/// One tile's ground-truth and predicted instance/class maps.
#[derive(Debug, Clone)]
pub struct TileEntry {
    pub tile_id: String,
    pub gt_inst: Array2<u32>,
    pub gt_class: Array2<u8>,
    pub pred_inst: Array2<u32>,
    pub pred_class: Array2<u8>,
}
