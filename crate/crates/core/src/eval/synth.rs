//! Synthetic RGB-D scene generation.
//!
//! Places non-overlapping cuboids and ellipsoids on a ground plane, samples
//! their surfaces into a point cloud (keeping only points actually observed
//! by at least one camera, like a reconstructed scan), renders depth maps by
//! analytic ray intersection from an orbiting camera rig, and derives ideal
//! per-frame detector boxes plus ground-truth masks. A seeded subset of
//! objects can be withheld from the point-based mask file to mimic a 3D
//! segmenter missing rare classes. Everything is driven by one seeded RNG,
//! so a fixed seed reproduces the scene byte for byte.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use super::GroundTruthInstance;
use crate::scene_io::{
    write_ply_binary, BinaryMask3D, CameraParams, DepthMap, Frame, FrameSet, Rect2, SceneIoError,
    ScenePointCloud,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not place {objects} non-overlapping objects after {attempts} attempts")]
    InfeasiblePlacement { objects: usize, attempts: usize },

    #[error(transparent)]
    Io(#[from] SceneIoError),
}

/// Scene generation parameters.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub objects_min: usize,
    pub objects_max: usize,
    pub frame_count: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    /// Fraction of objects withheld from the point-based mask file.
    pub withhold_fraction: f64,
    /// Uniform per-edge box jitter in pixels (0 = ideal detections).
    pub jitter_px: f64,
    /// Half side of the square room floor; cameras orbit outside it.
    pub room_half: f64,
    /// Surface sample density in points per square meter.
    pub surface_density: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            objects_min: 5,
            objects_max: 10,
            frame_count: 30,
            width: 320,
            height: 240,
            seed: 0,
            withhold_fraction: 0.0,
            jitter_px: 0.0,
            room_half: 2.5,
            surface_density: 1200.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Cuboid,
    Ellipsoid,
}

/// One analytic object: an axis-aligned cuboid or ellipsoid resting on z=0.
#[derive(Debug, Clone)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub center: Point3<f64>,
    /// Half sizes (cuboid) or radii (ellipsoid).
    pub half: Vector3<f64>,
    pub class_id: u32,
}

impl SceneObject {
    /// Nearest positive ray parameter, with depth measured along `dir`
    /// (callers pass camera rays with unit camera-frame z, so t is depth).
    pub fn ray_hit(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self.kind {
            ShapeKind::Cuboid => {
                let mut t_enter = f64::NEG_INFINITY;
                let mut t_exit = f64::INFINITY;
                for a in 0..3 {
                    let o = origin[a] - self.center[a];
                    let d = dir[a];
                    if d.abs() < 1e-12 {
                        if o.abs() > self.half[a] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-self.half[a] - o) / d;
                    let t2 = (self.half[a] - o) / d;
                    let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    t_enter = t_enter.max(lo);
                    t_exit = t_exit.min(hi);
                    if t_enter > t_exit {
                        return None;
                    }
                }
                (t_enter > 1e-9).then_some(t_enter)
            }
            ShapeKind::Ellipsoid => {
                let o = (origin - self.center).component_div(&self.half);
                let d = dir.component_div(&self.half);
                let a = d.norm_squared();
                let b = o.dot(&d);
                let c = o.norm_squared() - 1.0;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / a;
                (t > 1e-9).then_some(t)
            }
        }
    }

    fn surface_area(&self) -> f64 {
        let h = &self.half;
        match self.kind {
            ShapeKind::Cuboid => 8.0 * (h.x * h.y + h.y * h.z + h.z * h.x),
            ShapeKind::Ellipsoid => {
                // Thomsen's approximation, accurate to ~1%.
                let p = 1.6075;
                let (a, b, c) = (h.x.powf(p), h.y.powf(p), h.z.powf(p));
                4.0 * std::f64::consts::PI * ((a * b + b * c + c * a) / 3.0).powf(1.0 / p)
            }
        }
    }

    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> (Point3<f64>, Vector3<f64>) {
        match self.kind {
            ShapeKind::Cuboid => {
                let h = &self.half;
                let areas = [h.y * h.z, h.y * h.z, h.x * h.z, h.x * h.z, h.x * h.y, h.x * h.y];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.gen_range(0.0..total);
                let mut face = 0usize;
                for (i, a) in areas.iter().enumerate() {
                    if pick < *a {
                        face = i;
                        break;
                    }
                    pick -= a;
                }
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut local = Vector3::zeros();
                local[axis] = sign * h[axis];
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                local[u] = rng.gen_range(-h[u]..h[u]);
                local[v] = rng.gen_range(-h[v]..h[v]);
                let mut normal = Vector3::zeros();
                normal[axis] = sign;
                (self.center + local, normal)
            }
            ShapeKind::Ellipsoid => {
                // Uniform direction by rejection, scaled onto the surface.
                let u = loop {
                    let v = Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0f64),
                    );
                    let n = v.norm();
                    if n > 0.1 && n <= 1.0 {
                        break v / n;
                    }
                };
                let p = self.center + u.component_mul(&self.half);
                let normal = u.component_div(&self.half).normalize();
                (p, normal)
            }
        }
    }
}

/// An ideal (or jittered) detector box for one object in one frame.
#[derive(Debug, Clone, Serialize)]
pub struct IdealDetection {
    pub frame_id: u64,
    #[serde(rename = "box")]
    pub rect: [f64; 4],
    pub class_id: u32,
    pub confidence: f64,
}

/// A fully generated scene plus everything needed to verify the pipeline.
pub struct SyntheticScene {
    pub cloud: ScenePointCloud,
    pub frames: FrameSet,
    pub gt: Vec<GroundTruthInstance>,
    /// Per loaded frame (same order as `frames.frames`).
    pub ideal_detections: Vec<Vec<IdealDetection>>,
    pub partial_point_masks: Vec<BinaryMask3D>,
    /// Object indices withheld from `partial_point_masks`.
    pub withheld_objects: Vec<usize>,
    pub objects: Vec<SceneObject>,
}

const PLACEMENT_TRIES: usize = 200;
const LAYOUT_TRIES: usize = 20;
const MARGIN: f64 = 0.30;
const HALF_MIN: f64 = 0.225;
const HALF_MAX: f64 = 0.45;
const MIN_RETAINED_POINTS: usize = 50;
const MIN_VISIBLE_FOR_DETECTION: usize = 5;

fn size_bucket(half: &Vector3<f64>) -> u32 {
    let m = half.max();
    if m < 0.30 {
        0
    } else if m < 0.375 {
        1
    } else {
        2
    }
}

fn place_objects(rng: &mut ChaCha8Rng, count: usize, room_half: f64) -> Option<Vec<SceneObject>> {
    let span = room_half - HALF_MAX - 0.05;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let kind = if rng.gen_bool(0.5) {
                ShapeKind::Cuboid
            } else {
                ShapeKind::Ellipsoid
            };
            let half = Vector3::new(
                rng.gen_range(HALF_MIN..HALF_MAX),
                rng.gen_range(HALF_MIN..HALF_MAX),
                rng.gen_range(HALF_MIN..HALF_MAX),
            );
            let center = Point3::new(
                rng.gen_range(-span..span),
                rng.gen_range(-span..span),
                half.z,
            );
            let radius = half.x.max(half.y);
            let ok = objects.iter().all(|o| {
                let d = ((center.x - o.center.x).powi(2) + (center.y - o.center.y).powi(2)).sqrt();
                d >= radius + o.half.x.max(o.half.y) + MARGIN
            });
            if ok {
                let kind_idx = match kind {
                    ShapeKind::Cuboid => 0,
                    ShapeKind::Ellipsoid => 1,
                };
                objects.push(SceneObject {
                    kind,
                    center,
                    half,
                    class_id: kind_idx * 3 + size_bucket(&half),
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(objects)
}

fn orbit_camera(spec: &SynthSpec, frame_idx: usize, frame_id: u64) -> CameraParams {
    let theta = std::f64::consts::TAU * frame_idx as f64 / spec.frame_count as f64;
    let radius = 1.85 * spec.room_half;
    let height = 1.35 * spec.room_half;
    let pos = Point3::new(radius * theta.cos(), radius * theta.sin(), height);
    let target = Point3::new(0.0, 0.0, 0.3);

    let forward = (target - pos).normalize();
    let right = forward.cross(&Vector3::z()).normalize();
    let down = forward.cross(&right);
    let mut extrinsic = Matrix4::identity();
    // Rows of the rotation are the camera axes (x right, y down, z forward).
    for c in 0..3 {
        extrinsic[(0, c)] = right[c];
        extrinsic[(1, c)] = down[c];
        extrinsic[(2, c)] = forward[c];
    }
    let rot: Matrix3<f64> = extrinsic.fixed_view::<3, 3>(0, 0).into_owned();
    let t = -(rot * pos.coords);
    extrinsic[(0, 3)] = t.x;
    extrinsic[(1, 3)] = t.y;
    extrinsic[(2, 3)] = t.z;

    let mut intrinsic = Matrix4::identity();
    let f = 0.85 * spec.width as f64;
    intrinsic[(0, 0)] = f;
    intrinsic[(1, 1)] = f;
    intrinsic[(0, 2)] = spec.width as f64 / 2.0;
    intrinsic[(1, 2)] = spec.height as f64 / 2.0;

    CameraParams::new(intrinsic, extrinsic, spec.width, spec.height, frame_id)
        .expect("orbit camera is always valid")
}

fn camera_origin(camera: &CameraParams) -> Point3<f64> {
    let inv = &camera.extrinsic_inv;
    Point3::new(inv[(0, 3)], inv[(1, 3)], inv[(2, 3)])
}

fn nearest_hit(objects: &[SceneObject], origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    objects
        .iter()
        .filter_map(|o| o.ray_hit(origin, dir))
        .min_by(f64::total_cmp)
}

/// Render one frame's depth by intersecting a ray per pixel; depth is the
/// camera-frame z of the nearest hit, 0 where nothing is hit.
pub fn render_depth(camera: &CameraParams, objects: &[SceneObject]) -> DepthMap {
    let (w, h) = (camera.width, camera.height);
    let origin = camera_origin(camera);
    let rot_cw: Matrix3<f64> = camera.extrinsic_inv.fixed_view::<3, 3>(0, 0).into_owned();
    let (fx, fy, cx, cy) = (camera.fx(), camera.fy(), camera.cx(), camera.cy());
    let mut values = vec![0.0f64; (w as usize) * (h as usize)];
    values
        .par_chunks_mut(w as usize)
        .enumerate()
        .for_each(|(v, row)| {
            for (u, out) in row.iter_mut().enumerate() {
                // Camera-frame ray with unit z, so the parameter is depth.
                let dir_cam = Vector3::new(
                    (u as f64 - cx) / fx,
                    (v as f64 - cy) / fy,
                    1.0,
                );
                let dir = rot_cw * dir_cam;
                if let Some(t) = nearest_hit(objects, &origin, &dir) {
                    *out = t;
                }
            }
        });
    DepthMap::new(w, h, values)
}

/// True when the stored surface point is seen by this camera: it projects
/// strictly inside the image and no surface lies closer along its own ray.
fn point_visible(
    camera: &CameraParams,
    objects: &[SceneObject],
    p: &Point3<f64>,
) -> Option<(f64, f64)> {
    let q = camera.extrinsic * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
    if q.z <= 0.0 {
        return None;
    }
    let px = (camera.fx() * q.x + camera.cx() * q.z) / q.z;
    let py = (camera.fy() * q.y + camera.cy() * q.z) / q.z;
    if !(px > 0.0 && px < camera.width as f64 && py > 0.0 && py < camera.height as f64) {
        return None;
    }
    let origin = camera_origin(camera);
    let dir = p - origin;
    let t_hit = nearest_hit(objects, &origin, &dir)?;
    // The parameterization puts the point itself at t = 1.
    (t_hit >= 1.0 - 1e-6).then_some((px, py))
}

/// Generate a synthetic scene.
pub fn generate_synthetic_scene(spec: &SynthSpec) -> Result<SyntheticScene, SynthError> {
    assert!(spec.objects_min >= 1 && spec.objects_min <= spec.objects_max);
    assert!(spec.frame_count >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_objects = rng.gen_range(spec.objects_min..=spec.objects_max);

    let cameras: Vec<CameraParams> = (0..spec.frame_count)
        .map(|i| orbit_camera(spec, i, i as u64))
        .collect();

    for _ in 0..LAYOUT_TRIES {
        let Some(objects) = place_objects(&mut rng, n_objects, spec.room_half) else {
            continue;
        };

        // Sample candidate surface points per object.
        let mut candidates: Vec<(Point3<f64>, Vector3<f64>, usize)> = Vec::new();
        for (oi, obj) in objects.iter().enumerate() {
            let count = ((obj.surface_area() * spec.surface_density).round() as usize).max(300);
            for _ in 0..count {
                let (p, n) = obj.sample_surface(&mut rng);
                candidates.push((p, n, oi));
            }
        }

        // Keep candidates observed from at least one camera, recording the
        // per-frame projections of those that survive.
        let visibility: Vec<Vec<Option<(f64, f64)>>> = candidates
            .par_iter()
            .map(|(p, _, _)| {
                cameras
                    .iter()
                    .map(|cam| point_visible(cam, &objects, p))
                    .collect()
            })
            .collect();

        let mut retained: Vec<usize> = Vec::new();
        for (ci, vis) in visibility.iter().enumerate() {
            if vis.iter().any(Option::is_some) {
                retained.push(ci);
            }
        }
        let mut per_object_count = vec![0usize; n_objects];
        for &ci in &retained {
            per_object_count[candidates[ci].2] += 1;
        }
        if per_object_count.iter().any(|&c| c < MIN_RETAINED_POINTS) {
            continue;
        }

        // Assemble the cloud object by object so ground-truth masks are
        // contiguous index ranges.
        let mut points = Vec::with_capacity(retained.len());
        let mut normals = Vec::with_capacity(retained.len());
        let mut gt = Vec::with_capacity(n_objects);
        let mut point_vis: Vec<&Vec<Option<(f64, f64)>>> = Vec::with_capacity(retained.len());
        let mut point_object: Vec<usize> = Vec::with_capacity(retained.len());
        for oi in 0..n_objects {
            let start = points.len() as u32;
            for &ci in &retained {
                if candidates[ci].2 == oi {
                    points.push(candidates[ci].0);
                    normals.push(candidates[ci].1);
                    point_vis.push(&visibility[ci]);
                    point_object.push(oi);
                }
            }
            gt.push(GroundTruthInstance {
                mask: BinaryMask3D::from_sorted((start..points.len() as u32).collect()),
                class_id: objects[oi].class_id,
            });
        }

        // Withhold a seeded subset of objects from the point-based masks.
        let withheld_count =
            ((n_objects as f64 * spec.withhold_fraction).round() as usize).min(n_objects);
        let mut object_ids: Vec<usize> = (0..n_objects).collect();
        object_ids.shuffle(&mut rng);
        let mut withheld_objects: Vec<usize> = object_ids[..withheld_count].to_vec();
        withheld_objects.sort_unstable();
        let partial_point_masks: Vec<BinaryMask3D> = (0..n_objects)
            .filter(|oi| !withheld_objects.contains(oi))
            .map(|oi| gt[oi].mask.clone())
            .collect();

        // Ideal detections: a tight box around each object's visible
        // projected points, per frame, optionally jittered.
        let mut ideal_detections: Vec<Vec<IdealDetection>> = Vec::with_capacity(spec.frame_count);
        for fi in 0..cameras.len() {
            let mut frame_dets = Vec::new();
            for (oi, obj) in objects.iter().enumerate() {
                let mut lo = (f64::INFINITY, f64::INFINITY);
                let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                let mut seen = 0usize;
                for pi in 0..points.len() {
                    if point_object[pi] != oi {
                        continue;
                    }
                    if let Some((px, py)) = point_vis[pi][fi] {
                        lo.0 = lo.0.min(px);
                        lo.1 = lo.1.min(py);
                        hi.0 = hi.0.max(px);
                        hi.1 = hi.1.max(py);
                        seen += 1;
                    }
                }
                if seen < MIN_VISIBLE_FOR_DETECTION {
                    continue;
                }
                let mut rect = Rect2 {
                    x_min: lo.0 - 0.5,
                    y_min: lo.1 - 0.5,
                    x_max: hi.0 + 0.5,
                    y_max: hi.1 + 0.5,
                };
                if spec.jitter_px > 0.0 {
                    rect.x_min += rng.gen_range(-spec.jitter_px..spec.jitter_px);
                    rect.y_min += rng.gen_range(-spec.jitter_px..spec.jitter_px);
                    rect.x_max += rng.gen_range(-spec.jitter_px..spec.jitter_px);
                    rect.y_max += rng.gen_range(-spec.jitter_px..spec.jitter_px);
                }
                let Some(clipped) = rect.clipped(spec.width as f64, spec.height as f64) else {
                    continue;
                };
                frame_dets.push(IdealDetection {
                    frame_id: fi as u64,
                    rect: [clipped.x_min, clipped.y_min, clipped.x_max, clipped.y_max],
                    class_id: obj.class_id,
                    confidence: 1.0,
                });
            }
            ideal_detections.push(frame_dets);
        }

        // Render depth and assemble the frame set.
        let frames: Vec<Frame> = cameras
            .par_iter()
            .enumerate()
            .map(|(fi, cam)| Frame {
                id: fi as u64,
                camera: cam.clone(),
                depth: render_depth(cam, &objects),
                color_path: None,
            })
            .collect();
        let frame_set = FrameSet {
            frames,
            all_ids: (0..spec.frame_count as u64).collect(),
        };

        let cloud = ScenePointCloud::new(points, Some(normals)).map_err(SynthError::Io)?;
        return Ok(SyntheticScene {
            cloud,
            frames: frame_set,
            gt,
            ideal_detections,
            partial_point_masks,
            withheld_objects,
            objects,
        });
    }
    Err(SynthError::InfeasiblePlacement {
        objects: n_objects,
        attempts: LAYOUT_TRIES,
    })
}

/// Write the scene as a loadable directory: `cloud.ply`, `frames/` with
/// depth PNGs (millimeters) and camera matrices, `detections.jsonl`,
/// `point_masks.txt`, and `gt.txt`.
pub fn write_scene_dir(scene: &SyntheticScene, dir: &Path) -> Result<(), SynthError> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(SceneIoError::Io)?;

    write_ply_binary(&scene.cloud, &dir.join("cloud.ply"))?;

    for frame in &scene.frames.frames {
        let id = frame.id;
        let mut png = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
            frame.depth.width,
            frame.depth.height,
        );
        for (x, y, px) in png.enumerate_pixels_mut() {
            let mm = (frame.depth.at(x, y) * 1000.0).round();
            *px = image::Luma([mm.clamp(0.0, u16::MAX as f64) as u16]);
        }
        png.save(frames_dir.join(format!("{id}.depth.png")))
            .map_err(|e| SceneIoError::MalformedFile(e.to_string()))?;

        let write_matrix = |m: &Matrix4<f64>, path: &Path| -> Result<(), SceneIoError> {
            let mut text = String::new();
            for r in 0..4 {
                let row: Vec<String> = (0..4).map(|c| format!("{}", m[(r, c)])).collect();
                text.push_str(&row.join(" "));
                text.push('\n');
            }
            std::fs::write(path, text).map_err(SceneIoError::Io)
        };
        write_matrix(
            &frame.camera.intrinsic,
            &frames_dir.join(format!("{id}.intrinsic.txt")),
        )?;
        write_matrix(
            &frame.camera.extrinsic,
            &frames_dir.join(format!("{id}.extrinsic.txt")),
        )?;
    }

    let mut detections = String::new();
    for frame_dets in &scene.ideal_detections {
        for det in frame_dets {
            detections.push_str(
                &serde_json::to_string(det)
                    .map_err(|e| SceneIoError::MalformedFile(e.to_string()))?,
            );
            detections.push('\n');
        }
    }
    std::fs::write(dir.join("detections.jsonl"), detections).map_err(SceneIoError::Io)?;

    crate::scene_io::save_masks(
        &scene.partial_point_masks,
        scene.cloud.len(),
        &dir.join("point_masks.txt"),
    )?;
    super::save_ground_truth(&scene.gt, scene.cloud.len(), &dir.join("gt.txt"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{compute_visibility, project_all};

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            objects_min: 3,
            objects_max: 5,
            frame_count: 8,
            width: 160,
            height: 120,
            seed,
            surface_density: 700.0,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn gt_masks_partition_the_cloud() {
        let scene = generate_synthetic_scene(&small_spec(4)).unwrap();
        let mut covered = vec![false; scene.cloud.len()];
        for g in &scene.gt {
            for &i in g.mask.indices() {
                assert!(!covered[i as usize], "masks overlap at {i}");
                covered[i as usize] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn every_point_lies_on_its_object_surface() {
        let scene = generate_synthetic_scene(&small_spec(5)).unwrap();
        for (oi, g) in scene.gt.iter().enumerate() {
            let obj = &scene.objects[oi];
            for &i in g.mask.indices() {
                let p = scene.cloud.points[i as usize];
                let local = (p - obj.center).component_div(&obj.half);
                match obj.kind {
                    ShapeKind::Cuboid => {
                        let m = local.abs().max();
                        assert!(
                            (m - 1.0).abs() < 1e-9,
                            "cuboid point off surface: {m}"
                        );
                        assert!(local.abs().min() <= 1.0 + 1e-9);
                    }
                    ShapeKind::Ellipsoid => {
                        assert!((local.norm() - 1.0).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_scene() {
        let a = generate_synthetic_scene(&small_spec(7)).unwrap();
        let b = generate_synthetic_scene(&small_spec(7)).unwrap();
        assert_eq!(a.cloud.len(), b.cloud.len());
        for i in 0..a.cloud.len() {
            assert_eq!(
                a.cloud.points[i].coords.as_slice(),
                b.cloud.points[i].coords.as_slice()
            );
        }
        assert_eq!(a.withheld_objects, b.withheld_objects);
        for (fa, fb) in a.frames.frames.iter().zip(&b.frames.frames) {
            assert_eq!(fa.depth.values, fb.depth.values);
        }
    }

    #[test]
    fn single_cuboid_depth_matches_plane_intersection() {
        // Scan seeds for a single-cuboid scene; the scan is deterministic.
        let scene = (0..50u64)
            .find_map(|seed| {
                let spec = SynthSpec {
                    objects_min: 1,
                    objects_max: 1,
                    frame_count: 1,
                    ..small_spec(seed)
                };
                let s = generate_synthetic_scene(&spec).unwrap();
                (s.objects[0].kind == ShapeKind::Cuboid).then_some(s)
            })
            .unwrap();
        let obj = &scene.objects[0];
        let frame = &scene.frames.frames[0];
        let cam = &frame.camera;

        // Pixel under the cuboid center.
        let q = cam.extrinsic * nalgebra::Vector4::new(obj.center.x, obj.center.y, obj.center.z, 1.0);
        let u = ((cam.fx() * q.x + cam.cx() * q.z) / q.z).round() as u32;
        let v = ((cam.fy() * q.y + cam.cy() * q.z) / q.z).round() as u32;

        // Independent slab intersection along that pixel's ray.
        let origin = camera_origin(cam);
        let rot_cw: Matrix3<f64> = cam.extrinsic_inv.fixed_view::<3, 3>(0, 0).into_owned();
        let dir = rot_cw
            * Vector3::new(
                (u as f64 - cam.cx()) / cam.fx(),
                (v as f64 - cam.cy()) / cam.fy(),
                1.0,
            );
        let mut t_enter = f64::NEG_INFINITY;
        let mut t_exit = f64::INFINITY;
        for a in 0..3 {
            let o = origin[a] - obj.center[a];
            let t1 = (-obj.half[a] - o) / dir[a];
            let t2 = (obj.half[a] - o) / dir[a];
            t_enter = t_enter.max(t1.min(t2));
            t_exit = t_exit.min(t1.max(t2));
        }
        assert!(t_enter <= t_exit && t_enter > 0.0);
        assert!(
            (frame.depth.at(u, v) - t_enter).abs() < 1e-9,
            "rendered {} vs analytic {}",
            frame.depth.at(u, v),
            t_enter
        );
    }

    #[test]
    fn detections_enclose_visible_projections() {
        let scene = generate_synthetic_scene(&small_spec(13)).unwrap();
        for (fi, frame) in scene.frames.frames.iter().enumerate() {
            for (oi, obj) in scene.objects.iter().enumerate() {
                let visible: Vec<(f64, f64)> = scene.gt[oi]
                    .mask
                    .indices()
                    .iter()
                    .filter_map(|&p| {
                        point_visible(&frame.camera, &scene.objects, &scene.cloud.points[p as usize])
                    })
                    .collect();
                if visible.len() < MIN_VISIBLE_FOR_DETECTION {
                    continue;
                }
                // Some emitted detection of the object's class must enclose
                // every visible projected pixel.
                let enclosed = scene.ideal_detections[fi].iter().any(|det| {
                    det.class_id == obj.class_id
                        && visible.iter().all(|&(px, py)| {
                            px >= det.rect[0]
                                && px <= det.rect[2]
                                && py >= det.rect[1]
                                && py <= det.rect[3]
                        })
                });
                assert!(enclosed, "frame {fi} object {oi} not enclosed");
            }
        }
    }

    #[test]
    fn withhold_fraction_selects_half() {
        let spec = SynthSpec {
            withhold_fraction: 0.5,
            ..small_spec(19)
        };
        let scene = generate_synthetic_scene(&spec).unwrap();
        let n = scene.gt.len();
        assert_eq!(scene.withheld_objects.len(), (n as f64 * 0.5).round() as usize);
        assert_eq!(
            scene.partial_point_masks.len(),
            n - scene.withheld_objects.len()
        );
    }

    #[test]
    fn unoccluded_points_are_depth_visible_through_png() {
        // Write the scene out, reload it through the real loaders, and check
        // that analytic visibility matches pipeline depth visibility.
        let scene = generate_synthetic_scene(&small_spec(23)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_scene_dir(&scene, dir.path()).unwrap();

        let cloud = crate::scene_io::load_point_cloud(&dir.path().join("cloud.ply")).unwrap();
        let frames = crate::scene_io::load_frames(
            &dir.path().join("frames"),
            1,
            &crate::scene_io::LoadOptions::default(),
        )
        .unwrap();
        let proj = project_all(&cloud, &frames);
        let tau_depth = 0.05;
        let vis = compute_visibility(&proj, &frames, tau_depth);

        let mut checked = 0usize;
        for (fi, frame) in frames.frames.iter().enumerate() {
            let origin = camera_origin(&frame.camera);
            for pi in 0..cloud.len() {
                if !vis.frame_vis[fi][pi] {
                    continue;
                }
                let (u, v) = crate::geometry::sample_pixel(
                    proj.frame(fi).pixel_x[pi],
                    proj.frame(fi).pixel_y[pi],
                    frame.camera.width,
                    frame.camera.height,
                );
                let dir = Vector3::new(
                    (u as f64 - frame.camera.cx()) / frame.camera.fx(),
                    (v as f64 - frame.camera.cy()) / frame.camera.fy(),
                    1.0,
                );
                let rot_cw: Matrix3<f64> =
                    frame.camera.extrinsic_inv.fixed_view::<3, 3>(0, 0).into_owned();
                let t = nearest_hit(&scene.objects, &origin, &(rot_cw * dir));
                let cam_z = proj.frame(fi).cam_z[pi];
                // 1 mm slack on each side for PNG quantization.
                match t {
                    Some(t) if (cam_z - t).abs() < tau_depth - 2e-3 => {
                        assert!(vis.depth_vis[fi][pi], "frame {fi} point {pi} should be visible");
                        checked += 1;
                    }
                    Some(t) if (cam_z - t).abs() > tau_depth + 2e-3 => {
                        assert!(!vis.depth_vis[fi][pi], "frame {fi} point {pi} should be occluded");
                    }
                    _ => {}
                }
            }
        }
        assert!(checked > 1000, "only {checked} visible samples checked");
    }
}
