//! Quantitative evaluation: point-set IoU, average precision with greedy
//! confidence-ordered matching, and the mAP suite over IoU thresholds
//! 0.50..0.95 plus the 0.50 and 0.25 single-threshold variants. The synthetic
//! scene generator in [`synth`] supplies ground truth for end-to-end checks.

pub mod synth;

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scene_io::{sort_instances, BinaryMask3D, LabeledInstance, SceneIoError};

/// The ten thresholds behind mAP(50:95).
pub const MAP_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// A ground-truth instance: mask plus class.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub mask: BinaryMask3D,
    pub class_id: u32,
}

/// Point-set intersection over union.
pub fn mask_iou(a: &BinaryMask3D, b: &BinaryMask3D) -> f64 {
    let inter = a.intersection_len(b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Per-class AP at every threshold the suite evaluates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerClassAp {
    /// AP at each of [`MAP_THRESHOLDS`], in order.
    pub ap_50_95: Vec<f64>,
    pub ap_50: f64,
    pub ap_25: f64,
}

/// The evaluation report: mAP(50:95), mAP50, mAP25 and the per-class APs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct APReport {
    pub map_50_95: f64,
    pub map_50: f64,
    pub map_25: f64,
    pub per_class_ap: BTreeMap<u32, PerClassAp>,
}

/// Average precision for one class at one IoU threshold. Predictions are
/// ranked by the deterministic serialization order (confidence descending,
/// then class, then first member index); each one greedily matches the
/// highest-IoU unmatched ground truth of the class with IoU >= threshold
/// (ties to the lower ground-truth index). AP is the area under the
/// precision-recall curve with precision made non-increasing from the right.
pub fn compute_ap(
    predictions: &[LabeledInstance],
    gt: &[GroundTruthInstance],
    class_id: u32,
    iou_threshold: f64,
) -> f64 {
    let gt_indices: Vec<usize> = gt
        .iter()
        .enumerate()
        .filter(|(_, g)| g.class_id == class_id)
        .map(|(i, _)| i)
        .collect();
    if gt_indices.is_empty() {
        return 0.0;
    }

    let mut owned: Vec<LabeledInstance> = predictions
        .iter()
        .filter(|p| p.class_id == class_id)
        .cloned()
        .collect();
    sort_instances(&mut owned);

    let mut matched = vec![false; gt_indices.len()];
    let mut tp = Vec::with_capacity(owned.len());
    for pred in &owned {
        let mut best: Option<(f64, usize)> = None;
        for (slot, &gi) in gt_indices.iter().enumerate() {
            if matched[slot] {
                continue;
            }
            let iou = mask_iou(&pred.mask, &gt[gi].mask);
            if best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, slot));
            }
        }
        match best.filter(|&(iou, _)| iou >= iou_threshold) {
            Some((_, slot)) => {
                matched[slot] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }

    average_precision(&tp, gt_indices.len())
}

/// All-point-interpolated AP from a ranked true/false-positive sequence.
fn average_precision(tp: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut tp_cum = 0usize;
    for (rank, &hit) in tp.iter().enumerate() {
        if hit {
            tp_cum += 1;
        }
        precision.push(tp_cum as f64 / (rank + 1) as f64);
        recall.push(tp_cum as f64 / gt_count as f64);
    }
    // Make precision monotone non-increasing from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..recall.len() {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    ap
}

/// Evaluate the full threshold suite. Classes absent from the ground truth
/// are excluded from the means; `class_subset` further restricts which
/// classes are averaged.
pub fn compute_map_suite(
    predictions: &[LabeledInstance],
    gt: &[GroundTruthInstance],
    class_subset: Option<&std::collections::BTreeSet<u32>>,
) -> APReport {
    let mut classes: Vec<u32> = gt.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if let Some(subset) = class_subset {
        classes.retain(|c| subset.contains(c));
    }

    let mut per_class_ap = BTreeMap::new();
    for &class_id in &classes {
        let ap_50_95: Vec<f64> = MAP_THRESHOLDS
            .iter()
            .map(|&t| compute_ap(predictions, gt, class_id, t))
            .collect();
        let ap_50 = ap_50_95[0];
        let ap_25 = compute_ap(predictions, gt, class_id, 0.25);
        per_class_ap.insert(
            class_id,
            PerClassAp {
                ap_50_95,
                ap_50,
                ap_25,
            },
        );
    }

    let class_mean = |f: &dyn Fn(&PerClassAp) -> f64| -> f64 {
        if per_class_ap.is_empty() {
            return 0.0;
        }
        per_class_ap.values().map(|p| f(p)).sum::<f64>() / per_class_ap.len() as f64
    };
    APReport {
        map_50_95: class_mean(&|p| p.ap_50_95.iter().sum::<f64>() / p.ap_50_95.len() as f64),
        map_50: class_mean(&|p| p.ap_50),
        map_25: class_mean(&|p| p.ap_25),
        per_class_ap,
    }
}

// ---------------------------------------------------------------------------
// Ground-truth file
// ---------------------------------------------------------------------------

/// Write ground truth: header `n_instances n_points`, then one line per
/// instance of `class_id idx0 idx1 ...`.
pub fn save_ground_truth(
    gt: &[GroundTruthInstance],
    n_points: usize,
    path: &Path,
) -> Result<(), SceneIoError> {
    let mut out = String::new();
    out.push_str(&format!("{} {}\n", gt.len(), n_points));
    for g in gt {
        out.push_str(&g.class_id.to_string());
        for &idx in g.mask.indices() {
            out.push(' ');
            out.push_str(&idx.to_string());
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(SceneIoError::Io)
}

/// Read a ground-truth file; returns the instances and the declared point
/// count.
pub fn load_ground_truth(path: &Path) -> Result<(Vec<GroundTruthInstance>, usize), SceneIoError> {
    let file = std::fs::File::open(path).map_err(SceneIoError::Io)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| SceneIoError::MalformedFile("empty ground-truth file".into()))?
        .map_err(SceneIoError::Io)?;
    let mut tokens = header.split_whitespace();
    let n_instances: usize = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| SceneIoError::MalformedFile("bad ground-truth header".into()))?;
    let n_points: usize = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| SceneIoError::MalformedFile("bad ground-truth header".into()))?;

    let mut gt = Vec::with_capacity(n_instances);
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(SceneIoError::Io)?;
        let line_no = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let class_id: u32 = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| SceneIoError::MalformedLine {
                line: line_no,
                reason: "missing class id".into(),
            })?;
        let mut indices = Vec::new();
        for token in tokens {
            let value: usize = token.parse().map_err(|_| SceneIoError::MalformedLine {
                line: line_no,
                reason: format!("bad index '{token}'"),
            })?;
            if value >= n_points {
                return Err(SceneIoError::IndexOutOfRange {
                    line: line_no,
                    index: value,
                    n_points,
                });
            }
            indices.push(value as u32);
        }
        if indices.is_empty() {
            return Err(SceneIoError::EmptyMask { line: line_no });
        }
        gt.push(GroundTruthInstance {
            mask: BinaryMask3D::from_unsorted(indices),
            class_id,
        });
    }
    if gt.len() != n_instances {
        return Err(SceneIoError::MalformedFile(format!(
            "header declares {n_instances} instances, file has {}",
            gt.len()
        )));
    }
    Ok((gt, n_points))
}
