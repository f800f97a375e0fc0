//! Box-guided proposal fusion.
//!
//! Lifted detector boxes are filtered against the point-based masks, turned
//! into coarse superpoint masks, merged sequentially across frames into
//! RGBD-based candidates, suppressed when they duplicate a point-based mask,
//! and finally concatenated with the point-based proposals. The merge walk is
//! inherently sequential; everything upstream of it is parallel per box.

use serde::Serialize;

use crate::geometry::{points_in_box_fraction, OrientedBox3D};
use crate::scene_io::{BinaryMask3D, MaskSource, ScenePointCloud};
use crate::superpoint::SuperpointPartition;

/// Point-set IoU of two masks.
pub fn point_set_iou(a: &BinaryMask3D, b: &BinaryMask3D) -> f64 {
    let inter = a.intersection_len(b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// A lifted, fitted 3D box with its detector class.
#[derive(Debug, Clone)]
pub struct LiftedBox {
    pub box3d: OrientedBox3D,
    pub class_id: u32,
}

/// The superpoint set captured by one lifted box in one frame.
#[derive(Debug, Clone)]
pub struct CoarseMask {
    pub superpoint_ids: Vec<u32>,
    pub class_id: u32,
    /// Exact union of the member superpoints, cached.
    pub point_set: BinaryMask3D,
    pub source_frame: u64,
}

/// One RGBD-based object candidate accumulated across frames.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub superpoint_ids: Vec<u32>,
    pub class_id: u32,
    pub point_set: BinaryMask3D,
}

/// Candidates in insertion order.
#[derive(Debug, Clone, Default)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
}

/// One step of the sequential merge, for the debug dump.
#[derive(Debug, Clone, Serialize)]
pub struct MergeEvent {
    pub frame_id: u64,
    pub class_id: u32,
    pub action: &'static str,
    pub candidate_index: usize,
    pub best_iou: f64,
    pub superpoint_ids: Vec<u32>,
}

/// Drop lifted boxes that are redundant with a point-based mask: a box is
/// removed when at least `tau_box` of some mask's points fall inside it
/// (inclusive threshold). Survivor order is preserved.
pub fn filter_redundant_boxes(
    boxes: Vec<LiftedBox>,
    point_masks: &[BinaryMask3D],
    cloud: &ScenePointCloud,
    tau_box: f64,
) -> Vec<LiftedBox> {
    boxes
        .into_iter()
        .filter(|b| {
            !point_masks
                .iter()
                .any(|m| points_in_box_fraction(&b.box3d, cloud, m) >= tau_box)
        })
        .collect()
}

/// Collect the superpoints claimed by a box: a superpoint joins when at
/// least `tau_spp` of its points are inside (inclusive). Returns None when no
/// superpoint qualifies.
pub fn assign_superpoints(
    lifted: &LiftedBox,
    partition: &SuperpointPartition,
    cloud: &ScenePointCloud,
    tau_spp: f64,
    source_frame: u64,
) -> Option<CoarseMask> {
    let mut superpoint_ids = Vec::new();
    let mut point_set: Option<BinaryMask3D> = None;
    for (sid, members) in partition.members.iter().enumerate() {
        if points_in_box_fraction(&lifted.box3d, cloud, members) >= tau_spp {
            superpoint_ids.push(sid as u32);
            point_set = Some(match point_set {
                Some(ps) => ps.union(members),
                None => members.clone(),
            });
        }
    }
    point_set.map(|point_set| CoarseMask {
        superpoint_ids,
        class_id: lifted.class_id,
        point_set,
        source_frame,
    })
}

/// Merge coarse masks sequentially across frames. The first frame's masks
/// seed the candidate set; every later coarse mask merges into the
/// best-IoU same-class candidate when that IoU reaches `tau_merge`
/// (ties to the lowest candidate index), otherwise it is appended. Masks in
/// one frame see candidates appended earlier in the same frame.
pub fn merge_coarse_masks(per_frame: &[Vec<CoarseMask>], tau_merge: f64) -> CandidateSet {
    merge_coarse_masks_traced(per_frame, tau_merge).0
}

/// Same as [`merge_coarse_masks`], also returning one event per coarse mask.
pub fn merge_coarse_masks_traced(
    per_frame: &[Vec<CoarseMask>],
    tau_merge: f64,
) -> (CandidateSet, Vec<MergeEvent>) {
    let mut set = CandidateSet::default();
    let mut events = Vec::new();
    for (frame_pos, masks) in per_frame.iter().enumerate() {
        for cm in masks {
            if frame_pos == 0 {
                set.candidates.push(candidate_from(cm));
                events.push(MergeEvent {
                    frame_id: cm.source_frame,
                    class_id: cm.class_id,
                    action: "seeded",
                    candidate_index: set.candidates.len() - 1,
                    best_iou: 0.0,
                    superpoint_ids: cm.superpoint_ids.clone(),
                });
                continue;
            }
            let mut best: Option<(f64, usize)> = None;
            for (ci, cand) in set.candidates.iter().enumerate() {
                if cand.class_id != cm.class_id {
                    continue;
                }
                let iou = point_set_iou(&cand.point_set, &cm.point_set);
                if best.map_or(true, |(b, _)| iou > b) {
                    best = Some((iou, ci));
                }
            }
            match best.filter(|&(iou, _)| iou >= tau_merge) {
                Some((iou, ci)) => {
                    let cand = &mut set.candidates[ci];
                    cand.point_set = cand.point_set.union(&cm.point_set);
                    let mut ids = cand.superpoint_ids.clone();
                    ids.extend_from_slice(&cm.superpoint_ids);
                    ids.sort_unstable();
                    ids.dedup();
                    cand.superpoint_ids = ids;
                    events.push(MergeEvent {
                        frame_id: cm.source_frame,
                        class_id: cm.class_id,
                        action: "merged",
                        candidate_index: ci,
                        best_iou: iou,
                        superpoint_ids: cm.superpoint_ids.clone(),
                    });
                }
                None => {
                    set.candidates.push(candidate_from(cm));
                    events.push(MergeEvent {
                        frame_id: cm.source_frame,
                        class_id: cm.class_id,
                        action: "appended",
                        candidate_index: set.candidates.len() - 1,
                        best_iou: best.map_or(0.0, |(b, _)| b),
                        superpoint_ids: cm.superpoint_ids.clone(),
                    });
                }
            }
        }
    }
    (set, events)
}

fn candidate_from(cm: &CoarseMask) -> Candidate {
    Candidate {
        superpoint_ids: cm.superpoint_ids.clone(),
        class_id: cm.class_id,
        point_set: cm.point_set.clone(),
    }
}

/// Keep RGBD candidates whose IoU with every point-based mask stays at or
/// below `tau_filter`; "exceeds" is strict, so a candidate at exactly the
/// threshold survives.
pub fn filter_rgbd_masks(
    candidates: CandidateSet,
    point_masks: &[BinaryMask3D],
    tau_filter: f64,
) -> Vec<Candidate> {
    candidates
        .candidates
        .into_iter()
        .filter(|cand| {
            !point_masks
                .iter()
                .any(|m| point_set_iou(&cand.point_set, m) > tau_filter)
        })
        .collect()
}

/// A fused proposal awaiting classification. Point-based proposals carry no
/// class; RGBD-based ones keep their detector class for bookkeeping even
/// though classification reassigns it.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub mask: BinaryMask3D,
    pub source: MaskSource,
    pub detector_class: Option<u32>,
}

/// Concatenate point-based proposals (first, in order) with surviving
/// RGBD-based candidates.
pub fn fuse_proposals(point_masks: &[BinaryMask3D], rgbd_masks: &[Candidate]) -> Vec<Proposal> {
    let mut out = Vec::with_capacity(point_masks.len() + rgbd_masks.len());
    for mask in point_masks {
        out.push(Proposal {
            mask: mask.clone(),
            source: MaskSource::PointBased,
            detector_class: None,
        });
    }
    for cand in rgbd_masks {
        out.push(Proposal {
            mask: cand.point_set.clone(),
            source: MaskSource::RgbdBased,
            detector_class: Some(cand.class_id),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Point3, Vector3};

    fn grid_cloud(n: usize) -> ScenePointCloud {
        // n points along the x axis: index i at (i, 0, 0).
        let points = (0..n).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        ScenePointCloud::new(points, None).unwrap()
    }

    fn box_over_x(lo: f64, hi: f64) -> OrientedBox3D {
        OrientedBox3D {
            center: Point3::new((lo + hi) / 2.0, 0.0, 0.0),
            axes: Matrix3::identity(),
            half_extents: Vector3::new((hi - lo) / 2.0, 0.5, 0.5),
        }
    }

    fn mask(range: std::ops::Range<u32>) -> BinaryMask3D {
        BinaryMask3D::from_sorted(range.collect())
    }

    #[test]
    fn fully_contained_mask_removes_box() {
        let cloud = grid_cloud(10);
        let boxes = vec![LiftedBox {
            box3d: box_over_x(-0.5, 9.5),
            class_id: 0,
        }];
        let survivors = filter_redundant_boxes(boxes, &[mask(0..10)], &cloud, 0.75);
        assert!(survivors.is_empty());
    }

    #[test]
    fn untouched_box_is_kept() {
        let cloud = grid_cloud(10);
        let boxes = vec![LiftedBox {
            box3d: box_over_x(100.0, 101.0),
            class_id: 0,
        }];
        let survivors = filter_redundant_boxes(boxes, &[mask(0..10)], &cloud, 0.75);
        assert_eq!(survivors.len(), 1);
    }

    #[test]
    fn tau_box_boundary_is_inclusive() {
        // Box covers points 0..=2 of a 4-point mask: fraction exactly 0.75.
        let cloud = grid_cloud(4);
        let boxes = vec![LiftedBox {
            box3d: box_over_x(-0.25, 2.25),
            class_id: 0,
        }];
        let survivors = filter_redundant_boxes(boxes, &[mask(0..4)], &cloud, 0.75);
        assert!(survivors.is_empty());
    }

    fn partition_of(members: Vec<Vec<u32>>, n: usize) -> SuperpointPartition {
        let mut segment_of = vec![0u32; n];
        for (sid, m) in members.iter().enumerate() {
            for &i in m {
                segment_of[i as usize] = sid as u32;
            }
        }
        SuperpointPartition {
            segment_of,
            members: members.into_iter().map(BinaryMask3D::from_sorted).collect(),
        }
    }

    #[test]
    fn superpoint_threshold_is_inclusive_at_half() {
        let cloud = grid_cloud(10);
        let partition = partition_of(vec![(0..10).collect()], 10);
        let lifted = |hi: f64| LiftedBox {
            box3d: box_over_x(-0.25, hi),
            class_id: 1,
        };
        // 6 of 10 inside.
        let cm = assign_superpoints(&lifted(5.25), &partition, &cloud, 0.5, 0).unwrap();
        assert_eq!(cm.superpoint_ids, vec![0]);
        assert_eq!(cm.point_set.len(), 10);
        // 4 of 10 inside.
        assert!(assign_superpoints(&lifted(3.25), &partition, &cloud, 0.5, 0).is_none());
        // exactly 5 of 10 inside.
        assert!(assign_superpoints(&lifted(4.25), &partition, &cloud, 0.5, 0).is_some());
    }

    fn coarse(ids: Vec<u32>, class_id: u32, points: Vec<u32>, frame: u64) -> CoarseMask {
        CoarseMask {
            superpoint_ids: ids,
            class_id,
            point_set: BinaryMask3D::from_unsorted(points),
            source_frame: frame,
        }
    }

    #[test]
    fn identical_masks_merge_across_frames() {
        let per_frame = vec![
            vec![coarse(vec![0], 2, (0..10).collect(), 0)],
            vec![coarse(vec![0], 2, (0..10).collect(), 1)],
        ];
        let set = merge_coarse_masks(&per_frame, 0.5);
        assert_eq!(set.candidates.len(), 1);
        assert_eq!(set.candidates[0].point_set.len(), 10);
    }

    #[test]
    fn class_gate_blocks_merging() {
        let per_frame = vec![
            vec![coarse(vec![0], 2, (0..10).collect(), 0)],
            vec![coarse(vec![0], 3, (0..10).collect(), 1)],
        ];
        let set = merge_coarse_masks(&per_frame, 0.5);
        assert_eq!(set.candidates.len(), 2);
    }

    #[test]
    fn merge_is_idempotent_for_existing_candidate() {
        let per_frame = vec![
            vec![coarse(vec![0, 1], 2, (0..10).collect(), 0)],
            vec![coarse(vec![0, 1], 2, (0..10).collect(), 1)],
            vec![coarse(vec![0, 1], 2, (0..10).collect(), 2)],
        ];
        let set = merge_coarse_masks(&per_frame, 0.25);
        assert_eq!(set.candidates.len(), 1);
        assert_eq!(set.candidates[0].superpoint_ids, vec![0, 1]);
        assert_eq!(set.candidates[0].point_set.len(), 10);
    }

    #[test]
    fn best_iou_candidate_wins_with_low_index_ties() {
        // Two same-class candidates; the new mask overlaps the second more.
        let per_frame = vec![
            vec![
                coarse(vec![0], 1, (0..10).collect(), 0),
                coarse(vec![1], 1, (20..30).collect(), 0),
            ],
            vec![coarse(vec![2], 1, (22..30).collect(), 1)],
        ];
        let set = merge_coarse_masks(&per_frame, 0.25);
        assert_eq!(set.candidates.len(), 2);
        assert_eq!(set.candidates[1].superpoint_ids, vec![1, 2]);
    }

    #[test]
    fn rgbd_filter_strictness_at_threshold() {
        let cand = |points: Vec<u32>| CandidateSet {
            candidates: vec![Candidate {
                superpoint_ids: vec![0],
                class_id: 0,
                point_set: BinaryMask3D::from_unsorted(points),
            }],
        };
        let point_masks = vec![mask(0..4)];
        // IoU exactly 0.75: candidate {0,1,2} vs mask {0,1,2,3}.
        let kept = filter_rgbd_masks(cand((0..3).collect()), &point_masks, 0.75);
        assert_eq!(kept.len(), 1);
        // IoU 1.0 > 0.75: discarded.
        let kept = filter_rgbd_masks(cand((0..4).collect()), &point_masks, 0.75);
        assert!(kept.is_empty());
    }

    #[test]
    fn fusion_orders_point_based_first() {
        let point_masks = vec![mask(0..3), mask(3..6), mask(6..9)];
        let rgbd = vec![
            Candidate {
                superpoint_ids: vec![0],
                class_id: 4,
                point_set: mask(10..12),
            },
            Candidate {
                superpoint_ids: vec![1],
                class_id: 5,
                point_set: mask(12..14),
            },
        ];
        let fused = fuse_proposals(&point_masks, &rgbd);
        assert_eq!(fused.len(), 5);
        for p in &fused[..3] {
            assert_eq!(p.source, MaskSource::PointBased);
            assert!(p.detector_class.is_none());
        }
        assert_eq!(fused[3].detector_class, Some(4));

        // Degenerate sides reduce to the other list.
        assert_eq!(fuse_proposals(&point_masks, &[]).len(), 3);
        assert_eq!(fuse_proposals(&[], &rgbd).len(), 2);
    }
}
