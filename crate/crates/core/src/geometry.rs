//! Projection and spatial primitives.
//!
//! Batch point-cloud projection into posed frames, in-frame and occlusion
//! visibility, depth-based pixel lifting, and PCA oriented-box fitting with a
//! containment test. Everything here is a pure function of immutable inputs;
//! per-frame work runs in parallel with order-preserving gathers, so results
//! do not depend on thread count.

use nalgebra::{Matrix3, Point3, Vector3, Vector4};
use rayon::prelude::*;
use thiserror::Error;

use crate::scene_io::{
    BinaryMask3D, CameraParams, DepthMap, DetectionBox, FrameSet, ScenePointCloud,
};

/// Numerical slack for box containment; covers round-off when re-expressing a
/// fitted box's own input points in its axis frame.
pub const BOX_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("no valid-depth pixel inside the box")]
    EmptyLift,
}

// ---------------------------------------------------------------------------
// Projection
// ---------------------------------------------------------------------------

/// Projection of the whole cloud into one frame.
#[derive(Debug, Clone)]
pub struct FrameProjection {
    pub pixel_x: Vec<f64>,
    pub pixel_y: Vec<f64>,
    /// Camera-frame depth before perspective division; <= 0 behind the camera.
    pub cam_z: Vec<f64>,
}

/// Per-frame projections for all points (frame-major).
#[derive(Debug, Clone)]
pub struct ProjectedPoints {
    pub frames: Vec<FrameProjection>,
}

impl ProjectedPoints {
    pub fn frame(&self, f: usize) -> &FrameProjection {
        &self.frames[f]
    }
}

/// Project every point into one frame: extrinsic, then intrinsic, then
/// perspective division by camera z. Pixel coordinates of points behind the
/// camera are left NaN and flagged by `cam_z <= 0`.
pub fn project_frame(cloud: &ScenePointCloud, camera: &CameraParams) -> FrameProjection {
    let n = cloud.len();
    let mut pixel_x = vec![f64::NAN; n];
    let mut pixel_y = vec![f64::NAN; n];
    let mut cam_z = vec![0.0f64; n];
    let m = camera.intrinsic * camera.extrinsic;
    for (i, p) in cloud.points.iter().enumerate() {
        let q = m * Vector4::new(p.x, p.y, p.z, 1.0);
        cam_z[i] = q.z;
        if q.z > 0.0 {
            pixel_x[i] = q.x / q.z;
            pixel_y[i] = q.y / q.z;
        }
    }
    FrameProjection {
        pixel_x,
        pixel_y,
        cam_z,
    }
}

/// Project every point into every frame. Frames are computed independently,
/// so the batch output is bit-identical to per-frame calls.
pub fn project_all(cloud: &ScenePointCloud, frames: &FrameSet) -> ProjectedPoints {
    let frames = frames
        .frames
        .par_iter()
        .map(|f| project_frame(cloud, &f.camera))
        .collect();
    ProjectedPoints { frames }
}

// ---------------------------------------------------------------------------
// Visibility
// ---------------------------------------------------------------------------

/// Per-frame visibility bits: in-frame visibility and depth-agreement
/// (occlusion) visibility. `depth_vis` implies `frame_vis` everywhere.
#[derive(Debug, Clone)]
pub struct VisibilityMatrices {
    pub frame_vis: Vec<Vec<bool>>,
    pub depth_vis: Vec<Vec<bool>>,
}

/// A point is frame-visible when it projects strictly inside the image
/// rectangle with positive camera-frame depth.
pub fn compute_frame_visibility(proj: &ProjectedPoints, frames: &FrameSet) -> Vec<Vec<bool>> {
    proj.frames
        .par_iter()
        .zip(frames.frames.par_iter())
        .map(|(fp, frame)| {
            let w = frame.camera.width as f64;
            let h = frame.camera.height as f64;
            (0..fp.cam_z.len())
                .map(|i| {
                    fp.cam_z[i] > 0.0
                        && fp.pixel_x[i] > 0.0
                        && fp.pixel_x[i] < w
                        && fp.pixel_y[i] > 0.0
                        && fp.pixel_y[i] < h
                })
                .collect()
        })
        .collect()
}

/// Round a projected coordinate to its depth-sample pixel, clamped to the
/// image. Rounding is half-away-from-zero (`f64::round`); the same convention
/// is used for label-map sampling.
#[inline]
pub fn sample_pixel(px: f64, py: f64, width: u32, height: u32) -> (u32, u32) {
    let u = px.round().clamp(0.0, (width - 1) as f64) as u32;
    let v = py.round().clamp(0.0, (height - 1) as f64) as u32;
    (u, v)
}

/// A frame-visible point is depth-visible when the depth map at its rounded
/// pixel is valid and agrees with the point's camera depth within tau_depth.
pub fn compute_occlusion_visibility(
    proj: &ProjectedPoints,
    frames: &FrameSet,
    frame_vis: &[Vec<bool>],
    tau_depth: f64,
) -> Vec<Vec<bool>> {
    proj.frames
        .par_iter()
        .zip(frames.frames.par_iter())
        .zip(frame_vis.par_iter())
        .map(|((fp, frame), fv)| {
            let depth = &frame.depth;
            (0..fp.cam_z.len())
                .map(|i| {
                    if !fv[i] {
                        return false;
                    }
                    let (u, v) =
                        sample_pixel(fp.pixel_x[i], fp.pixel_y[i], depth.width, depth.height);
                    let d = depth.at(u, v);
                    d > 0.0 && (fp.cam_z[i] - d).abs() < tau_depth
                })
                .collect()
        })
        .collect()
}

/// Compute both visibility matrices in one pass.
pub fn compute_visibility(
    proj: &ProjectedPoints,
    frames: &FrameSet,
    tau_depth: f64,
) -> VisibilityMatrices {
    let frame_vis = compute_frame_visibility(proj, frames);
    let depth_vis = compute_occlusion_visibility(proj, frames, &frame_vis, tau_depth);
    VisibilityMatrices {
        frame_vis,
        depth_vis,
    }
}

// ---------------------------------------------------------------------------
// Pixel lifting
// ---------------------------------------------------------------------------

/// Backproject one pixel with a known depth to a world-frame point.
#[inline]
pub fn backproject_pixel(camera: &CameraParams, u: f64, v: f64, depth: f64) -> Point3<f64> {
    let xc = (u - camera.cx()) * depth / camera.fx();
    let yc = (v - camera.cy()) * depth / camera.fy();
    let world = camera.extrinsic_inv * Vector4::new(xc, yc, depth, 1.0);
    Point3::new(world.x, world.y, world.z)
}

/// Lift the valid-depth pixels inside a detector box to world-frame 3D
/// points, subsampling with `pixel_stride` in both axes. Pixel (u, v) is
/// inside the box when `x_min <= u < x_max` (same for v); iteration starts at
/// the rounded-up box corner and proceeds row-major.
pub fn lift_box_pixels(
    det: &DetectionBox,
    camera: &CameraParams,
    depth: &DepthMap,
    pixel_stride: usize,
) -> Result<Vec<Point3<f64>>, LiftError> {
    assert!(pixel_stride >= 1);
    let u_start = det.rect.x_min.ceil().max(0.0) as u32;
    let v_start = det.rect.y_min.ceil().max(0.0) as u32;
    let mut points = Vec::new();
    let mut v = v_start;
    while (v as f64) < det.rect.y_max && v < depth.height {
        let mut u = u_start;
        while (u as f64) < det.rect.x_max && u < depth.width {
            let d = depth.at(u, v);
            if d > 0.0 {
                points.push(backproject_pixel(camera, u as f64, v as f64, d));
            }
            u += pixel_stride as u32;
        }
        v += pixel_stride as u32;
    }
    if points.is_empty() {
        return Err(LiftError::EmptyLift);
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// Oriented boxes
// ---------------------------------------------------------------------------

/// An oriented 3D box: center, orthonormal axes (columns), half extents.
#[derive(Debug, Clone)]
pub struct OrientedBox3D {
    pub center: Point3<f64>,
    pub axes: Matrix3<f64>,
    pub half_extents: Vector3<f64>,
}

impl OrientedBox3D {
    /// Containment with the shared BOX_EPS inflation on every axis.
    #[inline]
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        let d = p - self.center;
        for k in 0..3 {
            let coord = self.axes.column(k).dot(&d);
            if coord.abs() > self.half_extents[k] + BOX_EPS {
                return false;
            }
        }
        true
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half_extents.x * self.half_extents.y * self.half_extents.z
    }
}

/// Deterministic sign convention for a PCA axis: non-negative dot with
/// (1,1,1); exact zeros fall back to +x, then +y.
fn fix_axis_sign(axis: Vector3<f64>) -> Vector3<f64> {
    let s = axis.x + axis.y + axis.z;
    if s > 0.0 {
        return axis;
    }
    if s < 0.0 {
        return -axis;
    }
    if axis.x != 0.0 {
        return if axis.x > 0.0 { axis } else { -axis };
    }
    if axis.y > 0.0 {
        axis
    } else {
        -axis
    }
}

/// Fit an oriented box by PCA: axes are covariance eigenvectors in
/// descending-eigenvalue order with pinned signs; extents come from the
/// min/max of the points along each axis. Degenerate inputs produce zero
/// extents along the degenerate axes.
pub fn fit_oriented_box(points: &[Point3<f64>]) -> OrientedBox3D {
    assert!(!points.is_empty(), "fit_oriented_box needs at least 1 point");
    let n = points.len() as f64;
    let mut mean = Vector3::zeros();
    for p in points {
        mean += p.coords;
    }
    mean /= n;

    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    cov /= n;

    let eigen = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));

    let mut axes = Matrix3::zeros();
    for (k, &src) in order.iter().enumerate() {
        let axis = fix_axis_sign(eigen.eigenvectors.column(src).into_owned());
        axes.set_column(k, &axis);
    }

    let mut lo = Vector3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Vector3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        let d = p.coords - mean;
        for k in 0..3 {
            let c = axes.column(k).dot(&d);
            lo[k] = lo[k].min(c);
            hi[k] = hi[k].max(c);
        }
    }

    let mid = (lo + hi) * 0.5;
    let center = Point3::from(mean + axes * mid);
    let half_extents = (hi - lo) * 0.5;
    OrientedBox3D {
        center,
        axes,
        half_extents,
    }
}

/// Fraction of the masked points contained in the box.
pub fn points_in_box_fraction(
    boxed: &OrientedBox3D,
    cloud: &ScenePointCloud,
    indices: &BinaryMask3D,
) -> f64 {
    assert!(!indices.is_empty());
    let inside = indices
        .indices()
        .iter()
        .filter(|&&i| boxed.contains(&cloud.points[i as usize]))
        .count();
    inside as f64 / indices.len() as f64
}
