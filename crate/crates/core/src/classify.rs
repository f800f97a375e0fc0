//! Box-based mask classification.
//!
//! Detector boxes paint per-frame label maps (largest box first, so the
//! smallest covering box wins each pixel). Each fused proposal then samples
//! the label maps at its visible projected pixels over its top-k
//! most-visible frames; the argmax class becomes the instance label and the
//! winning share of all sampled pixels becomes the confidence.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::fusion::Proposal;
use crate::geometry::{sample_pixel, ProjectedPoints, VisibilityMatrices};
use crate::scene_io::{BinaryMask3D, DetectionSet, FrameSet, LabeledInstance, SceneIoError};

/// A per-frame integer image of prompt class ids; -1 means no relevant class.
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<i32>,
}

impl LabelMap {
    fn filled(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            labels: vec![-1; (width as usize) * (height as usize)],
        }
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> i32 {
        self.labels[(y as usize) * (self.width as usize) + (x as usize)]
    }
}

/// The classes sampled at a proposal's visible pixels.
#[derive(Debug, Clone, Default)]
pub struct ClassDistribution {
    pub counts: BTreeMap<u32, usize>,
    pub total_labeled: usize,
    /// All sampled pixels, including those with no label.
    pub total_sampled: usize,
}

/// The rounded pixel rect a box paints (and covers): half-open in both axes.
#[inline]
pub fn painted_rect(rect: &crate::scene_io::Rect2, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let x0 = rect.x_min.round().clamp(0.0, width as f64) as u32;
    let y0 = rect.y_min.round().clamp(0.0, height as f64) as u32;
    let x1 = rect.x_max.round().clamp(0.0, width as f64) as u32;
    let y1 = rect.y_max.round().clamp(0.0, height as f64) as u32;
    (x0, y0, x1, y1)
}

/// Paint one frame's label map: boxes sorted by pixel area descending (ties
/// by detection-file index ascending) and painted in that order, so smaller
/// boxes overwrite larger ones and later equal-area boxes overwrite earlier.
fn build_label_map(frame: &crate::scene_io::Frame, boxes: &[crate::scene_io::DetectionBox]) -> LabelMap {
    let mut map = LabelMap::filled(frame.camera.width, frame.camera.height);
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[b]
            .rect
            .area()
            .total_cmp(&boxes[a].rect.area())
            .then(boxes[a].file_index.cmp(&boxes[b].file_index))
    });
    for bi in order {
        let b = &boxes[bi];
        let (x0, y0, x1, y1) = painted_rect(&b.rect, map.width, map.height);
        for y in y0..y1 {
            let row = (y as usize) * (map.width as usize);
            for x in x0..x1 {
                map.labels[row + x as usize] = b.class_id as i32;
            }
        }
    }
    map
}

/// Build label maps for every loaded frame, in frame order.
pub fn build_label_maps(detections: &DetectionSet, frames: &FrameSet) -> Vec<LabelMap> {
    frames
        .frames
        .par_iter()
        .map(|frame| build_label_map(frame, detections.for_frame(frame.id)))
        .collect()
}

/// Rank frames by how many of the mask's points are both frame- and
/// depth-visible; return up to k frame positions with positive score,
/// highest score first, ties to the lower frame index.
pub fn select_topk_frames(mask: &BinaryMask3D, vis: &VisibilityMatrices, k: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, usize)> = vis
        .frame_vis
        .iter()
        .zip(vis.depth_vis.iter())
        .enumerate()
        .map(|(f, (fv, dv))| {
            let score = mask
                .indices()
                .iter()
                .filter(|&&p| fv[p as usize] && dv[p as usize])
                .count();
            (f, score)
        })
        .filter(|&(_, score)| score > 0)
        .collect();
    scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored.into_iter().map(|(f, _)| f).collect()
}

/// Sample the label maps at the mask's visible projected pixels over the
/// selected frames. Labels >= 0 are counted; `total_sampled` also counts
/// pixels labeled -1.
pub fn aggregate_distribution(
    mask: &BinaryMask3D,
    proj: &ProjectedPoints,
    vis: &VisibilityMatrices,
    label_maps: &[LabelMap],
    topk: &[usize],
) -> ClassDistribution {
    let mut dist = ClassDistribution::default();
    for &f in topk {
        let fp = proj.frame(f);
        let map = &label_maps[f];
        let fv = &vis.frame_vis[f];
        let dv = &vis.depth_vis[f];
        for &p in mask.indices() {
            let p = p as usize;
            if !(fv[p] && dv[p]) {
                continue;
            }
            let (u, v) = sample_pixel(fp.pixel_x[p], fp.pixel_y[p], map.width, map.height);
            let label = map.at(u, v);
            dist.total_sampled += 1;
            if label >= 0 {
                *dist.counts.entry(label as u32).or_insert(0) += 1;
                dist.total_labeled += 1;
            }
        }
    }
    dist
}

/// Score every proposal's distribution in parallel.
pub fn distributions_for_proposals(
    proposals: &[Proposal],
    proj: &ProjectedPoints,
    vis: &VisibilityMatrices,
    label_maps: &[LabelMap],
    k: usize,
) -> Vec<ClassDistribution> {
    proposals
        .par_iter()
        .map(|p| {
            let topk = select_topk_frames(&p.mask, vis, k);
            aggregate_distribution(&p.mask, proj, vis, label_maps, &topk)
        })
        .collect()
}

/// Turn proposals plus distributions into labeled instances. The winning
/// class is the count argmax (ties to the lower class id); confidence is the
/// winning count over all sampled pixels; proposals with no labeled sample
/// are dropped. RGBD proposals are re-classified like everything else.
pub fn assign_labels(
    proposals: &[Proposal],
    distributions: &[ClassDistribution],
) -> Vec<LabeledInstance> {
    assert_eq!(proposals.len(), distributions.len());
    proposals
        .iter()
        .zip(distributions.iter())
        .filter_map(|(proposal, dist)| {
            if dist.total_labeled == 0 {
                return None;
            }
            let (&class_id, &count) = dist
                .counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))?;
            Some(LabeledInstance {
                mask: proposal.mask.clone(),
                class_id,
                confidence: count as f64 / dist.total_sampled as f64,
                source: proposal.source,
            })
        })
        .collect()
}

/// Debug dump: write a label map as 16-bit PNG storing class_id + 1 (so the
/// empty label -1 maps to 0).
pub fn save_label_map_png(map: &LabelMap, path: &std::path::Path) -> Result<(), SceneIoError> {
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(map.width, map.height);
    for (x, y, px) in img.enumerate_pixels_mut() {
        *px = image::Luma([(map.at(x, y) + 1) as u16]);
    }
    img.save(path)
        .map_err(|e| SceneIoError::MalformedFile(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FrameProjection;
    use crate::scene_io::{
        CameraParams, DepthMap, DetectionBox, Frame, MaskSource, Rect2,
    };
    use nalgebra::Matrix4;

    fn frame_set(w: u32, h: u32) -> FrameSet {
        let mut intrinsic = Matrix4::identity();
        intrinsic[(0, 0)] = 1.0;
        intrinsic[(1, 1)] = 1.0;
        let camera = CameraParams::new(intrinsic, Matrix4::identity(), w, h, 0).unwrap();
        let depth = DepthMap::new(w, h, vec![1.0; (w * h) as usize]);
        FrameSet {
            frames: vec![Frame {
                id: 0,
                camera,
                depth,
                color_path: None,
            }],
            all_ids: vec![0],
        }
    }

    fn det(rect: [f64; 4], class_id: u32, file_index: usize) -> DetectionBox {
        DetectionBox {
            frame_id: 0,
            rect: Rect2 {
                x_min: rect[0],
                y_min: rect[1],
                x_max: rect[2],
                y_max: rect[3],
            },
            class_id,
            confidence: 1.0,
            file_index,
        }
    }

    fn paint(frame: &FrameSet, boxes: &[DetectionBox]) -> LabelMap {
        build_label_map(&frame.frames[0], boxes)
    }

    #[test]
    fn smaller_box_overwrites_larger() {
        let frames = frame_set(256, 256);
        let map = paint(
            &frames,
            &[
                det([0.0, 0.0, 100.0, 100.0], 2, 0),
                det([10.0, 10.0, 20.0, 20.0], 7, 1),
            ],
        );
        assert_eq!(map.at(15, 15), 7);
        assert_eq!(map.at(50, 50), 2);
        assert_eq!(map.at(200, 200), -1);
    }

    #[test]
    fn empty_frame_is_all_unlabeled() {
        let frames = frame_set(16, 16);
        let map = paint(&frames, &[]);
        assert!(map.labels.iter().all(|&l| l == -1));
    }

    #[test]
    fn equal_area_ties_paint_later_file_index_on_top() {
        let frames = frame_set(64, 64);
        let map = paint(
            &frames,
            &[
                det([0.0, 0.0, 10.0, 10.0], 1, 0),
                det([5.0, 5.0, 15.0, 15.0], 2, 1),
            ],
        );
        // Same area; the later box paints last and wins the overlap.
        assert_eq!(map.at(7, 7), 2);
        assert_eq!(map.at(2, 2), 1);
        assert_eq!(map.at(12, 12), 2);
    }

    fn vis_of(frame_bits: Vec<Vec<bool>>, depth_bits: Vec<Vec<bool>>) -> VisibilityMatrices {
        VisibilityMatrices {
            frame_vis: frame_bits,
            depth_vis: depth_bits,
        }
    }

    #[test]
    fn topk_single_positive_frame() {
        let mask = BinaryMask3D::from_sorted(vec![0, 1, 2]);
        let zeros = vec![vec![false; 3]; 5];
        let mut fv = zeros.clone();
        fv[3] = vec![true; 3];
        let vis = vis_of(fv.clone(), fv);
        assert_eq!(select_topk_frames(&mask, &vis, 5), vec![3]);
    }

    #[test]
    fn topk_tie_breaks_by_lower_frame() {
        let mask = BinaryMask3D::from_sorted(vec![0, 1]);
        let mut fv = vec![vec![false; 2]; 10];
        fv[2] = vec![true, true];
        fv[7] = vec![true, true];
        let vis = vis_of(fv.clone(), fv);
        assert_eq!(select_topk_frames(&mask, &vis, 1), vec![2]);
    }

    fn uniform_projection(n: usize, px: f64, py: f64) -> ProjectedPoints {
        ProjectedPoints {
            frames: vec![FrameProjection {
                pixel_x: vec![px; n],
                pixel_y: vec![py; n],
                cam_z: vec![1.0; n],
            }],
        }
    }

    #[test]
    fn aggregate_counts_uniform_labels() {
        let mask = BinaryMask3D::from_sorted((0..50).collect());
        let proj = uniform_projection(50, 8.0, 8.0);
        let vis = vis_of(vec![vec![true; 50]], vec![vec![true; 50]]);
        let mut map = LabelMap::filled(16, 16);
        map.labels.iter_mut().for_each(|l| *l = 3);
        let dist = aggregate_distribution(&mask, &proj, &vis, &[map], &[0]);
        assert_eq!(dist.counts.get(&3), Some(&50));
        assert_eq!(dist.total_labeled, 50);
        assert_eq!(dist.total_sampled, 50);
    }

    #[test]
    fn aggregate_all_unlabeled_is_empty() {
        let mask = BinaryMask3D::from_sorted((0..10).collect());
        let proj = uniform_projection(10, 4.0, 4.0);
        let vis = vis_of(vec![vec![true; 10]], vec![vec![true; 10]]);
        let map = LabelMap::filled(16, 16);
        let dist = aggregate_distribution(&mask, &proj, &vis, &[map], &[0]);
        assert!(dist.counts.is_empty());
        assert_eq!(dist.total_labeled, 0);
        assert_eq!(dist.total_sampled, 10);
    }

    fn proposal(n: u32) -> Proposal {
        Proposal {
            mask: BinaryMask3D::from_sorted((0..n).collect()),
            source: MaskSource::PointBased,
            detector_class: None,
        }
    }

    #[test]
    fn argmax_and_confidence() {
        let dist = ClassDistribution {
            counts: BTreeMap::from([(3, 50), (5, 10)]),
            total_labeled: 60,
            total_sampled: 80,
        };
        let out = assign_labels(&[proposal(4)], &[dist]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].class_id, 3);
        assert!((out[0].confidence - 0.625).abs() < 1e-15);
    }

    #[test]
    fn full_agreement_confidence_is_one() {
        let dist = ClassDistribution {
            counts: BTreeMap::from([(3, 50)]),
            total_labeled: 50,
            total_sampled: 50,
        };
        let out = assign_labels(&[proposal(4)], &[dist]);
        assert_eq!(out[0].class_id, 3);
        assert_eq!(out[0].confidence, 1.0);
    }

    #[test]
    fn unlabeled_proposal_is_dropped() {
        let dist = ClassDistribution::default();
        assert!(assign_labels(&[proposal(4)], &[dist]).is_empty());
    }

    #[test]
    fn count_ties_assign_lower_class_id() {
        let dist = ClassDistribution {
            counts: BTreeMap::from([(9, 10), (4, 10)]),
            total_labeled: 20,
            total_sampled: 20,
        };
        let out = assign_labels(&[proposal(4)], &[dist]);
        assert_eq!(out[0].class_id, 4);
    }
}
