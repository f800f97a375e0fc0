//! Input loading and output serialization for the pipeline.
//!
//! Everything the pipeline consumes arrives through this module: the scene
//! point cloud (PLY), posed depth frames (16-bit PNG plus per-frame 4x4
//! intrinsic/extrinsic text files), 2D detector boxes (JSON Lines), and
//! class-agnostic 3D masks (plain-text index lists). The labeled-instance
//! output writer lives here as well. All loaded structures are immutable
//! after construction and safe to share across threads.

mod ply;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ply::{read_ply, write_ply_ascii, write_ply_binary};

/// Errors raised while loading or saving pipeline files.
#[derive(Debug, Error)]
pub enum SceneIoError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("non-finite coordinate at point {index}")]
    NonFiniteCoordinate { index: usize },

    #[error("missing camera file: {path}")]
    MissingCameraFile { path: PathBuf },

    #[error("frame {frame_id}: depth is {depth_w}x{depth_h} but intrinsic metadata says {meta_w}x{meta_h}")]
    DimensionMismatch {
        frame_id: u64,
        depth_w: u32,
        depth_h: u32,
        meta_w: u32,
        meta_h: u32,
    },

    #[error("frame {frame_id}: extrinsic matrix is not invertible")]
    NonInvertibleExtrinsic { frame_id: u64 },

    #[error("frame {frame_id}: invalid camera: {reason}")]
    InvalidCamera { frame_id: u64, reason: String },

    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("detection on line {line} references unknown frame {frame_id}")]
    UnknownFrame { line: usize, frame_id: u64 },

    #[error("line {line}: point index {index} out of range (cloud has {n_points} points)")]
    IndexOutOfRange {
        line: usize,
        index: usize,
        n_points: usize,
    },

    #[error("mask file declares {declared} points but the cloud has {actual}")]
    HeaderMismatch { declared: usize, actual: usize },

    #[error("line {line}: empty mask")]
    EmptyMask { line: usize },
}

// ---------------------------------------------------------------------------
// Point cloud
// ---------------------------------------------------------------------------

/// A scene point cloud in world coordinates (meters), with optional unit
/// normals.
#[derive(Debug, Clone)]
pub struct ScenePointCloud {
    pub points: Vec<Point3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl ScenePointCloud {
    /// Validate and construct. Coordinates must be finite and the cloud
    /// non-empty; normals off unit length by more than 1e-4 are renormalized
    /// (zero-length normals are rejected).
    pub fn new(
        points: Vec<Point3<f64>>,
        normals: Option<Vec<Vector3<f64>>>,
    ) -> Result<Self, SceneIoError> {
        if points.is_empty() {
            return Err(SceneIoError::EmptyCloud);
        }
        for (index, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(SceneIoError::NonFiniteCoordinate { index });
            }
        }
        let normals = match normals {
            Some(mut ns) => {
                if ns.len() != points.len() {
                    return Err(SceneIoError::MalformedFile(format!(
                        "{} normals for {} points",
                        ns.len(),
                        points.len()
                    )));
                }
                for (index, n) in ns.iter_mut().enumerate() {
                    let len = n.norm();
                    if !len.is_finite() || len < 1e-12 {
                        return Err(SceneIoError::MalformedFile(format!(
                            "degenerate normal at point {index}"
                        )));
                    }
                    if (len - 1.0).abs() > 1e-4 {
                        *n /= len;
                    }
                }
                Some(ns)
            }
            None => None,
        };
        Ok(Self { points, normals })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Load a point cloud from PLY (ASCII or binary little-endian). Point order
/// is preserved from the file; normals are populated iff nx/ny/nz exist.
pub fn load_point_cloud(path: &Path) -> Result<ScenePointCloud, SceneIoError> {
    read_ply(path)
}

// ---------------------------------------------------------------------------
// Cameras and depth
// ---------------------------------------------------------------------------

/// Pinhole camera for one frame: 4x4 intrinsic (fx/fy/cx/cy embedded in the
/// upper-left block), 4x4 world-to-camera extrinsic, and image dimensions.
#[derive(Debug, Clone)]
pub struct CameraParams {
    pub intrinsic: Matrix4<f64>,
    pub extrinsic: Matrix4<f64>,
    /// Camera-to-world transform, cached for pixel lifting.
    pub extrinsic_inv: Matrix4<f64>,
    pub width: u32,
    pub height: u32,
}

impl CameraParams {
    pub fn new(
        intrinsic: Matrix4<f64>,
        extrinsic: Matrix4<f64>,
        width: u32,
        height: u32,
        frame_id: u64,
    ) -> Result<Self, SceneIoError> {
        let invalid = |reason: String| SceneIoError::InvalidCamera { frame_id, reason };
        if width == 0 || height == 0 {
            return Err(invalid(format!("image dimensions {width}x{height}")));
        }
        let fx = intrinsic[(0, 0)];
        let fy = intrinsic[(1, 1)];
        if !(fx > 0.0 && fy > 0.0) {
            return Err(invalid(format!("focal lengths fx={fx} fy={fy}")));
        }
        let rot: Matrix3<f64> = extrinsic.fixed_view::<3, 3>(0, 0).into_owned();
        let gram = rot.transpose() * rot;
        let max_dev = (gram - Matrix3::identity()).abs().max();
        if max_dev > 1e-6 {
            return Err(invalid(format!(
                "extrinsic rotation block deviates from orthonormal by {max_dev:.2e}"
            )));
        }
        let extrinsic_inv = extrinsic
            .try_inverse()
            .ok_or(SceneIoError::NonInvertibleExtrinsic { frame_id })?;
        Ok(Self {
            intrinsic,
            extrinsic,
            extrinsic_inv,
            width,
            height,
        })
    }

    pub fn fx(&self) -> f64 {
        self.intrinsic[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsic[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsic[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsic[(1, 2)]
    }
}

/// Per-frame depth in meters, row-major; 0.0 marks invalid pixels.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), (width as usize) * (height as usize));
        Self {
            width,
            height,
            values,
        }
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> f64 {
        self.values[(y as usize) * (self.width as usize) + (x as usize)]
    }
}

/// One posed RGB-D frame (the RGB image itself is never loaded; only a path
/// reference is kept when a sibling color file exists).
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: u64,
    pub camera: CameraParams,
    pub depth: DepthMap,
    pub color_path: Option<PathBuf>,
}

/// The loaded frame subset plus the full set of frame ids present on disk.
/// Detections that reference an on-disk id skipped by the stride are ignored;
/// ids absent from `all_ids` are an error.
#[derive(Debug, Clone)]
pub struct FrameSet {
    pub frames: Vec<Frame>,
    pub all_ids: Vec<u64>,
}

impl FrameSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn position_of(&self, frame_id: u64) -> Option<usize> {
        self.frames.binary_search_by_key(&frame_id, |f| f.id).ok()
    }
}

/// Loader knobs for dataset conventions that differ from the defaults
/// (millimeter depth PNGs, world-to-camera extrinsics).
#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Raw depth units per meter; depth meters = raw / depth_scale.
    pub depth_scale: f64,
    /// Set when the pose files store camera-to-world transforms.
    pub invert_extrinsics: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            depth_scale: 1000.0,
            invert_extrinsics: false,
        }
    }
}

fn parse_matrix_file(path: &Path) -> Result<(Matrix4<f64>, Option<(u32, u32)>), SceneIoError> {
    let text = fs::read_to_string(path).map_err(|_| SceneIoError::MissingCameraFile {
        path: path.to_path_buf(),
    })?;
    let values: Result<Vec<f64>, _> = text.split_whitespace().map(str::parse).collect();
    let values = values.map_err(|_| {
        SceneIoError::MalformedFile(format!("{}: non-numeric matrix entry", path.display()))
    })?;
    let dims = match values.len() {
        16 => None,
        // An optional trailing "W H" pair carries image dimension metadata.
        18 => Some((values[16] as u32, values[17] as u32)),
        n => {
            return Err(SceneIoError::MalformedFile(format!(
                "{}: expected 16 matrix entries, found {n}",
                path.display()
            )))
        }
    };
    let mut m = Matrix4::zeros();
    for r in 0..4 {
        for c in 0..4 {
            m[(r, c)] = values[r * 4 + c];
        }
    }
    Ok((m, dims))
}

fn load_depth_png(path: &Path, depth_scale: f64) -> Result<DepthMap, SceneIoError> {
    let img = image::open(path)
        .map_err(|e| SceneIoError::MalformedFile(format!("{}: {e}", path.display())))?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(buf) => buf,
        other => {
            let w = other.width();
            let h = other.height();
            match other {
                image::DynamicImage::ImageLuma8(buf) => {
                    let mut out = image::ImageBuffer::new(w, h);
                    for (x, y, p) in buf.enumerate_pixels() {
                        out.put_pixel(x, y, image::Luma([p.0[0] as u16]));
                    }
                    out
                }
                _ => {
                    return Err(SceneIoError::MalformedFile(format!(
                        "{}: depth PNG must be single-channel grayscale",
                        path.display()
                    )))
                }
            }
        }
    };
    let (width, height) = gray.dimensions();
    let values = gray.pixels().map(|p| p.0[0] as f64 / depth_scale).collect();
    Ok(DepthMap::new(width, height, values))
}

fn load_one_frame(dir: &Path, id: u64, opts: &LoadOptions) -> Result<Frame, SceneIoError> {
    let depth_path = dir.join(format!("{id}.depth.png"));
    let intrinsic_path = dir.join(format!("{id}.intrinsic.txt"));
    let extrinsic_path = dir.join(format!("{id}.extrinsic.txt"));
    for p in [&intrinsic_path, &extrinsic_path] {
        if !p.exists() {
            return Err(SceneIoError::MissingCameraFile { path: p.clone() });
        }
    }
    let depth = load_depth_png(&depth_path, opts.depth_scale)?;
    let (intrinsic, meta_dims) = parse_matrix_file(&intrinsic_path)?;
    let (mut extrinsic, _) = parse_matrix_file(&extrinsic_path)?;
    if let Some((meta_w, meta_h)) = meta_dims {
        if meta_w != depth.width || meta_h != depth.height {
            return Err(SceneIoError::DimensionMismatch {
                frame_id: id,
                depth_w: depth.width,
                depth_h: depth.height,
                meta_w,
                meta_h,
            });
        }
    }
    if opts.invert_extrinsics {
        extrinsic = extrinsic
            .try_inverse()
            .ok_or(SceneIoError::NonInvertibleExtrinsic { frame_id: id })?;
    }
    let camera = CameraParams::new(intrinsic, extrinsic, depth.width, depth.height, id)?;
    let color_path = ["color.png", "color.jpg"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.exists());
    Ok(Frame {
        id,
        camera,
        depth,
        color_path,
    })
}

/// Load posed depth frames from a directory of `<id>.depth.png` +
/// `<id>.intrinsic.txt` + `<id>.extrinsic.txt` triples. Frames are sorted by
/// id and every stride-th one (by sorted position) is kept. Files load in
/// parallel; assembly order is deterministic.
pub fn load_frames(
    dir: &Path,
    stride: usize,
    opts: &LoadOptions,
) -> Result<FrameSet, SceneIoError> {
    assert!(stride >= 1, "stride must be >= 1");
    let mut all_ids: Vec<u64> = Vec::new();
    for entry in fs::read_dir(dir).map_err(SceneIoError::Io)? {
        let entry = entry.map_err(SceneIoError::Io)?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(prefix) = name.strip_suffix(".depth.png") {
            if let Ok(id) = prefix.parse::<u64>() {
                all_ids.push(id);
            }
        }
    }
    if all_ids.is_empty() {
        return Err(SceneIoError::MalformedFile(format!(
            "{}: no <id>.depth.png frames found",
            dir.display()
        )));
    }
    all_ids.sort_unstable();

    let kept: Vec<u64> = all_ids.iter().copied().step_by(stride).collect();
    let frames: Result<Vec<Frame>, SceneIoError> = kept
        .par_iter()
        .map(|&id| load_one_frame(dir, id, opts))
        .collect();
    Ok(FrameSet {
        frames: frames?,
        all_ids,
    })
}

// ---------------------------------------------------------------------------
// Detections
// ---------------------------------------------------------------------------

/// Axis-aligned 2D box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect2 {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect2 {
    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    /// Clip to [0,w] x [0,h]; None when nothing with positive area remains.
    pub fn clipped(&self, w: f64, h: f64) -> Option<Rect2> {
        let r = Rect2 {
            x_min: self.x_min.max(0.0),
            y_min: self.y_min.max(0.0),
            x_max: self.x_max.min(w),
            y_max: self.y_max.min(h),
        };
        (r.x_min < r.x_max && r.y_min < r.y_max).then_some(r)
    }
}

/// One 2D detector box, clipped to its frame.
#[derive(Debug, Clone)]
pub struct DetectionBox {
    pub frame_id: u64,
    pub rect: Rect2,
    pub class_id: u32,
    pub confidence: f64,
    /// Position of the source line in the detections file; the tie-breaker
    /// for label-map painting and candidate ordering.
    pub file_index: usize,
}

/// Detections grouped by frame id, restricted to loaded frames.
#[derive(Debug, Clone, Default)]
pub struct DetectionSet {
    per_frame: BTreeMap<u64, Vec<DetectionBox>>,
}

impl DetectionSet {
    pub fn for_frame(&self, frame_id: u64) -> &[DetectionBox] {
        self.per_frame.get(&frame_id).map_or(&[], Vec::as_slice)
    }

    pub fn total(&self) -> usize {
        self.per_frame.values().map(Vec::len).sum()
    }
}

#[derive(Deserialize)]
struct DetectionRecord {
    frame_id: u64,
    #[serde(rename = "box")]
    rect: [f64; 4],
    class_id: u32,
    confidence: f64,
}

/// Parse a JSON Lines detections file and attach boxes to loaded frames.
/// Boxes are clipped to their frame; empty-after-clipping boxes and boxes on
/// frames skipped by the stride are dropped; unknown frame ids are an error.
pub fn load_detections(path: &Path, frames: &FrameSet) -> Result<DetectionSet, SceneIoError> {
    let file = fs::File::open(path).map_err(SceneIoError::Io)?;
    let reader = BufReader::new(file);
    let mut set = DetectionSet::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(SceneIoError::Io)?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord =
            serde_json::from_str(&line).map_err(|e| SceneIoError::MalformedLine {
                line: line_no,
                reason: e.to_string(),
            })?;
        let [x_min, y_min, x_max, y_max] = rec.rect;
        if !(x_min < x_max && y_min < y_max) || rec.rect.iter().any(|v| !v.is_finite()) {
            return Err(SceneIoError::MalformedLine {
                line: line_no,
                reason: format!("degenerate box [{x_min}, {y_min}, {x_max}, {y_max}]"),
            });
        }
        if !(0.0..=1.0).contains(&rec.confidence) {
            return Err(SceneIoError::MalformedLine {
                line: line_no,
                reason: format!("confidence {} outside [0,1]", rec.confidence),
            });
        }
        let frame_pos = match frames.position_of(rec.frame_id) {
            Some(pos) => pos,
            None => {
                if frames.all_ids.binary_search(&rec.frame_id).is_ok() {
                    continue; // present on disk but skipped by the stride
                }
                return Err(SceneIoError::UnknownFrame {
                    line: line_no,
                    frame_id: rec.frame_id,
                });
            }
        };
        let cam = &frames.frames[frame_pos].camera;
        let raw = Rect2 {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if let Some(rect) = raw.clipped(cam.width as f64, cam.height as f64) {
            set.per_frame.entry(rec.frame_id).or_default().push(DetectionBox {
                frame_id: rec.frame_id,
                rect,
                class_id: rec.class_id,
                confidence: rec.confidence,
                file_index: idx,
            });
        }
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// 3D masks
// ---------------------------------------------------------------------------

/// A 3D instance mask: a sorted set of point indices into the scene cloud.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask3D {
    indices: Vec<u32>,
}

impl BinaryMask3D {
    /// Build from indices already strictly ascending.
    pub fn from_sorted(indices: Vec<u32>) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        Self { indices }
    }

    /// Build from arbitrary indices; sorts and deduplicates.
    pub fn from_unsorted(mut indices: Vec<u32>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { indices }
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn first(&self) -> Option<u32> {
        self.indices.first().copied()
    }

    pub fn contains(&self, index: u32) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    /// Size of the intersection with another mask (merge join).
    pub fn intersection_len(&self, other: &BinaryMask3D) -> usize {
        let (mut i, mut j, mut count) = (0usize, 0usize, 0usize);
        let (a, b) = (&self.indices, &other.indices);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    count += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        count
    }

    /// Union with another mask.
    pub fn union(&self, other: &BinaryMask3D) -> BinaryMask3D {
        let mut out = Vec::with_capacity(self.indices.len() + other.indices.len());
        let (mut i, mut j) = (0usize, 0usize);
        let (a, b) = (&self.indices, &other.indices);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        BinaryMask3D { indices: out }
    }
}

/// Load class-agnostic 3D masks: header `n_masks n_points`, then one line of
/// ascending point indices per mask.
pub fn load_masks(path: &Path, n_points: usize) -> Result<Vec<BinaryMask3D>, SceneIoError> {
    let file = fs::File::open(path).map_err(SceneIoError::Io)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| SceneIoError::MalformedFile("empty mask file".into()))?
        .map_err(SceneIoError::Io)?;
    let mut tokens = header.split_whitespace();
    let n_masks: usize = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| SceneIoError::MalformedFile("bad mask header".into()))?;
    let declared: usize = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| SceneIoError::MalformedFile("bad mask header".into()))?;
    if declared != n_points {
        return Err(SceneIoError::HeaderMismatch {
            declared,
            actual: n_points,
        });
    }

    let mut masks = Vec::with_capacity(n_masks);
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(SceneIoError::Io)?;
        let line_no = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut indices: Vec<u32> = Vec::new();
        for token in line.split_whitespace() {
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
            if let Some(&last) = indices.last() {
                if value as u32 <= last {
                    return Err(SceneIoError::MalformedLine {
                        line: line_no,
                        reason: format!("indices not strictly ascending at '{token}'"),
                    });
                }
            }
            indices.push(value as u32);
        }
        if indices.is_empty() {
            return Err(SceneIoError::EmptyMask { line: line_no });
        }
        masks.push(BinaryMask3D::from_sorted(indices));
    }
    if masks.len() != n_masks {
        return Err(SceneIoError::MalformedFile(format!(
            "header declares {n_masks} masks, file has {}",
            masks.len()
        )));
    }
    Ok(masks)
}

/// Write masks in the text format `load_masks` reads.
pub fn save_masks(
    masks: &[BinaryMask3D],
    n_points: usize,
    path: &Path,
) -> Result<(), SceneIoError> {
    let mut out = String::new();
    out.push_str(&format!("{} {}\n", masks.len(), n_points));
    for mask in masks {
        let mut first = true;
        for &idx in mask.indices() {
            if !first {
                out.push(' ');
            }
            out.push_str(&idx.to_string());
            first = false;
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(SceneIoError::Io)
}

// ---------------------------------------------------------------------------
// Labeled instances
// ---------------------------------------------------------------------------

/// Where a final instance mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskSource {
    #[serde(rename = "point_based")]
    PointBased,
    #[serde(rename = "rgbd_based")]
    RgbdBased,
}

impl fmt::Display for MaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskSource::PointBased => write!(f, "point_based"),
            MaskSource::RgbdBased => write!(f, "rgbd_based"),
        }
    }
}

/// A final pipeline output: a 3D mask with its prompt class and confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInstance {
    pub mask: BinaryMask3D,
    pub class_id: u32,
    pub confidence: f64,
    pub source: MaskSource,
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    class_id: u32,
    confidence: f64,
    source: MaskSource,
    mask: Vec<u32>,
}

/// Deterministic output order: confidence descending, then class id, then
/// first member index.
pub fn sort_instances(instances: &mut [LabeledInstance]) {
    instances.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.class_id.cmp(&b.class_id))
            .then_with(|| a.mask.first().cmp(&b.mask.first()))
    });
}

/// Write labeled instances as JSON Lines in deterministic order. The file is
/// staged in a temporary sibling and renamed, so a failure never leaves a
/// partial output behind.
pub fn save_labeled_instances(
    instances: &[LabeledInstance],
    path: &Path,
) -> Result<(), SceneIoError> {
    let mut sorted: Vec<LabeledInstance> = instances.to_vec();
    sort_instances(&mut sorted);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new(".")))
        .map_err(SceneIoError::Io)?;
    for inst in &sorted {
        let record = InstanceRecord {
            class_id: inst.class_id,
            confidence: inst.confidence,
            source: inst.source,
            mask: inst.mask.indices().to_vec(),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| SceneIoError::MalformedFile(e.to_string()))?;
        tmp.write_all(line.as_bytes()).map_err(SceneIoError::Io)?;
        tmp.write_all(b"\n").map_err(SceneIoError::Io)?;
    }
    tmp.persist(path)
        .map_err(|e| SceneIoError::Io(e.error))?;
    Ok(())
}

/// Read labeled instances back from JSON Lines.
pub fn load_labeled_instances(path: &Path) -> Result<Vec<LabeledInstance>, SceneIoError> {
    let file = fs::File::open(path).map_err(SceneIoError::Io)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(SceneIoError::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord =
            serde_json::from_str(&line).map_err(|e| SceneIoError::MalformedLine {
                line: idx + 1,
                reason: e.to_string(),
            })?;
        out.push(LabeledInstance {
            mask: BinaryMask3D::from_unsorted(rec.mask),
            class_id: rec.class_id,
            confidence: rec.confidence,
            source: rec.source,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn ascii_ply_three_vertices() {
        let dir = tmpdir();
        let path = dir.path().join("tri.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0\n",
        )
        .unwrap();
        let cloud = load_point_cloud(&path).unwrap();
        assert_eq!(cloud.len(), 3);
        assert!(cloud.normals.is_none());
        assert_eq!(cloud.points[1], Point3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn empty_ply_is_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("empty.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        )
        .unwrap();
        assert!(matches!(
            load_point_cloud(&path),
            Err(SceneIoError::EmptyCloud)
        ));
    }

    #[test]
    fn truncated_binary_ply_is_malformed() {
        let dir = tmpdir();
        let path = dir.path().join("trunc.ply");
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nend_header\n".to_vec();
        bytes.extend_from_slice(&1.0f64.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_point_cloud(&path),
            Err(SceneIoError::MalformedFile(_))
        ));
    }

    #[test]
    fn binary_ply_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points: Vec<Point3<f64>> = (0..10_000)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-50.0..50.0),
                )
            })
            .collect();
        let normals: Vec<Vector3<f64>> = (0..10_000)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0f64),
                )
                .normalize()
            })
            .collect();
        let cloud = ScenePointCloud::new(points, Some(normals)).unwrap();

        let dir = tmpdir();
        let path = dir.path().join("cloud.ply");
        write_ply_binary(&cloud, &path).unwrap();
        let loaded = load_point_cloud(&path).unwrap();
        assert_eq!(loaded.len(), cloud.len());
        for i in 0..cloud.len() {
            assert_eq!(
                cloud.points[i].coords.as_slice(),
                loaded.points[i].coords.as_slice()
            );
        }
        let (a, b) = (cloud.normals.unwrap(), loaded.normals.unwrap());
        for i in 0..a.len() {
            assert_eq!(a[i].as_slice(), b[i].as_slice());
        }
    }

    #[test]
    fn ascii_ply_round_trip_preserves_values() {
        let points = vec![
            Point3::new(0.123456789012345, -9.87654321098765, 1e-12),
            Point3::new(std::f64::consts::PI, -std::f64::consts::E, 42.0),
        ];
        let cloud = ScenePointCloud::new(points, None).unwrap();
        let dir = tmpdir();
        let path = dir.path().join("cloud_ascii.ply");
        write_ply_ascii(&cloud, &path).unwrap();
        let loaded = load_point_cloud(&path).unwrap();
        for i in 0..cloud.len() {
            assert_eq!(cloud.points[i], loaded.points[i]);
        }
    }

    #[test]
    fn float32_ply_with_extra_properties_parses() {
        let dir = tmpdir();
        let path = dir.path().join("extra.ply");
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n".to_vec();
        for (p, red) in [([1.5f32, 2.5, 3.5], 7u8), ([4.0, 5.0, 6.0], 9)] {
            for v in p {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            bytes.push(red);
        }
        fs::write(&path, bytes).unwrap();
        let cloud = load_point_cloud(&path).unwrap();
        assert_eq!(cloud.points[0], Point3::new(1.5, 2.5, 3.5));
        assert_eq!(cloud.points[1], Point3::new(4.0, 5.0, 6.0));
    }

    fn write_frame(
        dir: &Path,
        id: u64,
        w: u32,
        h: u32,
        depth_mm: u16,
        intrinsic_extra: Option<(u32, u32)>,
    ) {
        let img = image::ImageBuffer::from_pixel(w, h, image::Luma([depth_mm]));
        img.save(dir.join(format!("{id}.depth.png"))).unwrap();
        let mut intr = String::from("500 0 320 0\n0 500 240 0\n0 0 1 0\n0 0 0 1\n");
        if let Some((mw, mh)) = intrinsic_extra {
            intr.push_str(&format!("{mw} {mh}\n"));
        }
        fs::write(dir.join(format!("{id}.intrinsic.txt")), intr).unwrap();
        fs::write(
            dir.join(format!("{id}.extrinsic.txt")),
            "1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n",
        )
        .unwrap();
    }

    #[test]
    fn frame_stride_selects_every_tenth() {
        let dir = tmpdir();
        for id in 0..30 {
            write_frame(dir.path(), id, 8, 6, 2500, None);
        }
        let frames = load_frames(dir.path(), 10, &LoadOptions::default()).unwrap();
        let ids: Vec<u64> = frames.frames.iter().map(|f| f.id).collect();
        assert_eq!(ids, vec![0, 10, 20]);
        assert_eq!(frames.all_ids.len(), 30);

        let all = load_frames(dir.path(), 1, &LoadOptions::default()).unwrap();
        assert_eq!(all.len(), 30);
        // depth PNG value 2500 -> 2.5 m
        assert_eq!(all.frames[0].depth.at(0, 0), 2.5);
    }

    #[test]
    fn frame_stride_count_matches_ceiling() {
        let dir = tmpdir();
        for id in 0..7 {
            write_frame(dir.path(), id, 4, 4, 1000, None);
        }
        for stride in 1..=7 {
            let frames = load_frames(dir.path(), stride, &LoadOptions::default()).unwrap();
            assert_eq!(frames.len(), 7usize.div_ceil(stride), "stride {stride}");
        }
    }

    #[test]
    fn missing_camera_file_is_reported() {
        let dir = tmpdir();
        write_frame(dir.path(), 0, 4, 4, 1000, None);
        fs::remove_file(dir.path().join("0.extrinsic.txt")).unwrap();
        match load_frames(dir.path(), 1, &LoadOptions::default()) {
            Err(SceneIoError::MissingCameraFile { path }) => {
                assert!(path.to_string_lossy().contains("0.extrinsic.txt"));
            }
            other => panic!("expected MissingCameraFile, got {other:?}"),
        }
    }

    #[test]
    fn dimension_metadata_mismatch_is_reported() {
        let dir = tmpdir();
        write_frame(dir.path(), 0, 8, 6, 1000, Some((640, 480)));
        assert!(matches!(
            load_frames(dir.path(), 1, &LoadOptions::default()),
            Err(SceneIoError::DimensionMismatch { .. })
        ));
    }

    fn one_frame_set(w: u32, h: u32) -> FrameSet {
        let dir = tmpdir();
        write_frame(dir.path(), 0, w, h, 1000, None);
        load_frames(dir.path(), 1, &LoadOptions::default()).unwrap()
    }

    #[test]
    fn detections_parse_and_clip() {
        let frames = one_frame_set(640, 480);
        let dir = tmpdir();
        let path = dir.path().join("det.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"frame_id\":0,\"box\":[10,20,110,220],\"class_id\":3,\"confidence\":0.9}\n",
                "{\"frame_id\":0,\"box\":[-50,-50,-10,-10],\"class_id\":1,\"confidence\":0.5}\n",
                "{\"frame_id\":0,\"box\":[-10,0,50,50],\"class_id\":2,\"confidence\":0.5}\n",
            ),
        )
        .unwrap();
        let set = load_detections(&path, &frames).unwrap();
        let boxes = set.for_frame(0);
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[0].class_id, 3);
        assert_eq!(
            boxes[1].rect,
            Rect2 {
                x_min: 0.0,
                y_min: 0.0,
                x_max: 50.0,
                y_max: 50.0
            }
        );
    }

    #[test]
    fn detection_on_unknown_frame_errors() {
        let frames = one_frame_set(640, 480);
        let dir = tmpdir();
        let path = dir.path().join("det.jsonl");
        fs::write(
            &path,
            "{\"frame_id\":99,\"box\":[0,0,10,10],\"class_id\":0,\"confidence\":1.0}\n",
        )
        .unwrap();
        assert!(matches!(
            load_detections(&path, &frames),
            Err(SceneIoError::UnknownFrame { frame_id: 99, .. })
        ));
    }

    #[test]
    fn detection_on_strided_out_frame_is_dropped() {
        let dir = tmpdir();
        for id in 0..4 {
            write_frame(dir.path(), id, 8, 8, 1000, None);
        }
        let frames = load_frames(dir.path(), 2, &LoadOptions::default()).unwrap();
        let det_path = dir.path().join("det.jsonl");
        fs::write(
            &det_path,
            "{\"frame_id\":1,\"box\":[0,0,4,4],\"class_id\":0,\"confidence\":1.0}\n",
        )
        .unwrap();
        let set = load_detections(&det_path, &frames).unwrap();
        assert_eq!(set.total(), 0);
    }

    #[test]
    fn malformed_detection_line_reports_number() {
        let frames = one_frame_set(640, 480);
        let dir = tmpdir();
        let path = dir.path().join("det.jsonl");
        fs::write(&path, "{\"frame_id\":0}\nnot json\n").unwrap();
        assert!(matches!(
            load_detections(&path, &frames),
            Err(SceneIoError::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn masks_parse_and_validate() {
        let dir = tmpdir();
        let path = dir.path().join("masks.txt");
        fs::write(&path, "2 100\n0 1 2\n50 51\n").unwrap();
        let masks = load_masks(&path, 100).unwrap();
        assert_eq!(masks.len(), 2);
        assert_eq!(masks[0].len(), 3);
        assert_eq!(masks[1].indices(), &[50, 51]);
    }

    #[test]
    fn mask_index_at_n_points_is_out_of_range() {
        let dir = tmpdir();
        let path = dir.path().join("masks.txt");
        fs::write(&path, "1 100\n99 100\n").unwrap();
        assert!(matches!(
            load_masks(&path, 100),
            Err(SceneIoError::IndexOutOfRange { index: 100, .. })
        ));
    }

    #[test]
    fn mask_header_mismatch_vs_cloud() {
        let dir = tmpdir();
        let path = dir.path().join("masks.txt");
        fs::write(&path, "1 100\n0 1\n").unwrap();
        assert!(matches!(
            load_masks(&path, 64),
            Err(SceneIoError::HeaderMismatch {
                declared: 100,
                actual: 64
            })
        ));
    }

    #[test]
    fn masks_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n_points = 500usize;
        let mut pool: Vec<u32> = (0..n_points as u32).collect();
        pool.shuffle(&mut rng);
        let mut masks = Vec::new();
        let mut cursor = 0;
        for _ in 0..50 {
            let take = rng.gen_range(1..=8).min(pool.len() - cursor);
            let chunk = pool[cursor..cursor + take].to_vec();
            cursor += take;
            masks.push(BinaryMask3D::from_unsorted(chunk));
        }
        let dir = tmpdir();
        let path = dir.path().join("masks.txt");
        save_masks(&masks, n_points, &path).unwrap();
        let loaded = load_masks(&path, n_points).unwrap();
        assert_eq!(masks, loaded);
    }

    #[test]
    fn instances_sorted_and_round_tripped() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut instances: Vec<LabeledInstance> = (0..20)
            .map(|_| {
                let n = rng.gen_range(1..20);
                let indices: Vec<u32> = (0..n).map(|_| rng.gen_range(0..1000)).collect();
                LabeledInstance {
                    mask: BinaryMask3D::from_unsorted(indices),
                    class_id: rng.gen_range(0..5),
                    confidence: rng.gen_range(0.0..1.0),
                    source: if rng.gen_bool(0.5) {
                        MaskSource::PointBased
                    } else {
                        MaskSource::RgbdBased
                    },
                }
            })
            .collect();
        let dir = tmpdir();
        let path = dir.path().join("pred.jsonl");
        save_labeled_instances(&instances, &path).unwrap();
        let loaded = load_labeled_instances(&path).unwrap();
        sort_instances(&mut instances);
        assert_eq!(instances, loaded);
        for w in loaded.windows(2) {
            assert!(w[0].confidence >= w[1].confidence);
        }
    }

    #[test]
    fn empty_instance_list_writes_empty_file() {
        let dir = tmpdir();
        let path = dir.path().join("pred.jsonl");
        save_labeled_instances(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
    }

    #[test]
    fn higher_confidence_serializes_first() {
        let make = |conf: f64| LabeledInstance {
            mask: BinaryMask3D::from_sorted(vec![0]),
            class_id: 0,
            confidence: conf,
            source: MaskSource::PointBased,
        };
        let dir = tmpdir();
        let path = dir.path().join("pred.jsonl");
        save_labeled_instances(&[make(0.4), make(0.9)], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let first_line = text.lines().next().unwrap();
        assert!(first_line.contains("0.9"));
    }
}
