//! End-to-end orchestration: configuration, the scene-directory layout, the
//! stage sequence (load, superpoints, projection, visibility, label maps,
//! lift/fit, filters, merge, fuse, classify, save), and per-stage timing.
//! Output is deterministic for fixed inputs and configuration, independent of
//! the worker-pool size; nothing is written on failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::classify::{assign_labels, build_label_maps, distributions_for_proposals, save_label_map_png};
use crate::fusion::{
    assign_superpoints, filter_redundant_boxes, filter_rgbd_masks, fuse_proposals,
    merge_coarse_masks_traced, CoarseMask, LiftedBox,
};
use crate::geometry::{compute_visibility, fit_oriented_box, lift_box_pixels, project_all};
use crate::scene_io::{
    load_detections, load_frames, load_masks, load_point_cloud, save_labeled_instances,
    sort_instances, LabeledInstance, LoadOptions, SceneIoError,
};
use crate::superpoint::{build_knn_graph, load_partition, segment_graph};

/// Scene directory layout consumed by `run`.
pub const CLOUD_FILE: &str = "cloud.ply";
pub const FRAMES_DIR: &str = "frames";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const POINT_MASKS_FILE: &str = "point_masks.txt";
pub const GT_FILE: &str = "gt.txt";

/// A lifted box needs at least this many valid-depth pixels to be worth
/// fitting.
pub const MIN_LIFT_POINTS: usize = 10;

#[derive(Debug, Error)]
#[error("stage {stage}: {source}")]
pub struct PipelineError {
    pub stage: &'static str,
    #[source]
    pub source: SceneIoError,
}

fn at_stage(stage: &'static str) -> impl Fn(SceneIoError) -> PipelineError {
    move |source| PipelineError { stage, source }
}

/// All pipeline thresholds and sizes. Serializes to flat `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub tau_box: f64,
    pub tau_spp: f64,
    pub tau_merge: f64,
    pub tau_filter: f64,
    /// Depth agreement tolerance in meters.
    pub tau_depth: f64,
    /// Frames per proposal used for classification.
    pub top_k: usize,
    pub frame_stride: usize,
    pub pixel_stride: usize,
    pub superpoint_granularity: f64,
    pub superpoint_knn: usize,
    pub superpoint_min_size: usize,
    /// Worker threads; 0 picks the machine default.
    pub thread_count: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau_box: 0.75,
            tau_spp: 0.5,
            tau_merge: 0.25,
            tau_filter: 0.75,
            tau_depth: 0.10,
            top_k: 5,
            frame_stride: 10,
            pixel_stride: 5,
            superpoint_granularity: 0.05,
            superpoint_knn: 10,
            superpoint_min_size: 20,
            thread_count: 0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Flat `key = value` lines in a fixed order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("tau_box", self.tau_box.to_string());
        push("tau_spp", self.tau_spp.to_string());
        push("tau_merge", self.tau_merge.to_string());
        push("tau_filter", self.tau_filter.to_string());
        push("tau_depth", self.tau_depth.to_string());
        push("top_k", self.top_k.to_string());
        push("frame_stride", self.frame_stride.to_string());
        push("pixel_stride", self.pixel_stride.to_string());
        push("superpoint_granularity", self.superpoint_granularity.to_string());
        push("superpoint_knn", self.superpoint_knn.to_string());
        push("superpoint_min_size", self.superpoint_min_size.to_string());
        push("thread_count", self.thread_count.to_string());
        push("seed", self.seed.to_string());
        out
    }

    /// Parse `key = value` text on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut config = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", idx + 1))?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let bad = |e: String| format!("bad value '{value}' for {key}: {e}");
        match key {
            "tau_box" => self.tau_box = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "tau_spp" => self.tau_spp = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "tau_merge" => self.tau_merge = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "tau_filter" => self.tau_filter = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "tau_depth" => self.tau_depth = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "top_k" => self.top_k = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "frame_stride" => self.frame_stride = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "pixel_stride" => self.pixel_stride = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "superpoint_granularity" => self.superpoint_granularity = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "superpoint_knn" => self.superpoint_knn = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "superpoint_min_size" => self.superpoint_min_size = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "thread_count" => self.thread_count = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "seed" => self.seed = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            other => return Err(format!("unknown config key '{other}'")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        let unit = [
            ("tau_box", self.tau_box),
            ("tau_spp", self.tau_spp),
            ("tau_merge", self.tau_merge),
            ("tau_filter", self.tau_filter),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(self.tau_depth > 0.0) {
            return Err(format!("tau_depth = {} must be positive", self.tau_depth));
        }
        if self.top_k == 0 || self.frame_stride == 0 || self.pixel_stride == 0 {
            return Err("top_k, frame_stride and pixel_stride must be >= 1".into());
        }
        if !(self.superpoint_granularity > 0.0) {
            return Err("superpoint_granularity must be positive".into());
        }
        if self.superpoint_knn == 0 {
            return Err("superpoint_knn must be >= 1".into());
        }
        Ok(())
    }
}

/// Per-run knobs that are not part of the reproducible configuration.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub load: LoadOptions,
    /// Bypass superpoint computation with a cached partition file.
    pub superpoint_cache: Option<PathBuf>,
    /// Where to write the labeled instances (JSON Lines).
    pub out: Option<PathBuf>,
    /// Where to write the timing report (JSON).
    pub timing_out: Option<PathBuf>,
    /// Debug dump of merge events (JSON Lines).
    pub debug_candidates: Option<PathBuf>,
    /// Debug dump of label maps as 16-bit PNGs (class id + 1).
    pub debug_labelmaps: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub name: &'static str,
    pub ms: f64,
    pub counts: BTreeMap<&'static str, u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub total_ms: f64,
    pub stages: Vec<StageTiming>,
}

impl TimingReport {
    pub fn stage_sum_ms(&self) -> f64 {
        self.stages.iter().map(|s| s.ms).sum()
    }
}

pub struct PipelineOutput {
    pub instances: Vec<LabeledInstance>,
    pub timing: TimingReport,
}

struct StageClock {
    stages: Vec<StageTiming>,
    started: Instant,
}

impl StageClock {
    fn new() -> Self {
        Self {
            stages: Vec::new(),
            started: Instant::now(),
        }
    }

    fn run<T>(
        &mut self,
        name: &'static str,
        f: impl FnOnce() -> Result<(T, BTreeMap<&'static str, u64>), PipelineError>,
    ) -> Result<T, PipelineError> {
        let t0 = Instant::now();
        let (value, counts) = f()?;
        self.stages.push(StageTiming {
            name,
            ms: t0.elapsed().as_secs_f64() * 1000.0,
            counts,
        });
        Ok(value)
    }

    fn finish(self) -> TimingReport {
        TimingReport {
            total_ms: self.started.elapsed().as_secs_f64() * 1000.0,
            stages: self.stages,
        }
    }
}

fn counts(pairs: &[(&'static str, u64)]) -> BTreeMap<&'static str, u64> {
    pairs.iter().copied().collect()
}

/// Run the full pipeline on a scene directory.
pub fn run_pipeline(
    scene_dir: &Path,
    config: &PipelineConfig,
    opts: &RunOptions,
) -> Result<PipelineOutput, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.thread_count)
        .build()
        .map_err(|e| PipelineError {
            stage: "setup",
            source: SceneIoError::MalformedFile(format!("thread pool: {e}")),
        })?;
    pool.install(|| run_pipeline_inner(scene_dir, config, opts))
}

fn run_pipeline_inner(
    scene_dir: &Path,
    config: &PipelineConfig,
    opts: &RunOptions,
) -> Result<PipelineOutput, PipelineError> {
    let mut clock = StageClock::new();

    let (cloud, frames, detections, point_masks) = clock.run("load", || {
        let cloud = load_point_cloud(&scene_dir.join(CLOUD_FILE)).map_err(at_stage("load"))?;
        let frames = load_frames(
            &scene_dir.join(FRAMES_DIR),
            config.frame_stride,
            &opts.load,
        )
        .map_err(at_stage("load"))?;
        let detections = load_detections(&scene_dir.join(DETECTIONS_FILE), &frames)
            .map_err(at_stage("load"))?;
        let point_masks = load_masks(&scene_dir.join(POINT_MASKS_FILE), cloud.len())
            .map_err(at_stage("load"))?;
        let c = counts(&[
            ("points", cloud.len() as u64),
            ("frames", frames.len() as u64),
            ("detections", detections.total() as u64),
            ("point_masks", point_masks.len() as u64),
        ]);
        Ok(((cloud, frames, detections, point_masks), c))
    })?;

    let partition = clock.run("superpoints", || {
        let partition = match &opts.superpoint_cache {
            Some(path) => load_partition(path, cloud.len()).map_err(at_stage("superpoints"))?,
            None => {
                let graph = build_knn_graph(&cloud, config.superpoint_knn);
                segment_graph(
                    &graph,
                    config.superpoint_granularity,
                    config.superpoint_min_size,
                )
            }
        };
        let c = counts(&[("superpoints", partition.segment_count() as u64)]);
        Ok((partition, c))
    })?;

    let proj = clock.run("projection", || Ok((project_all(&cloud, &frames), counts(&[]))))?;

    let vis = clock.run("visibility", || {
        Ok((compute_visibility(&proj, &frames, config.tau_depth), counts(&[])))
    })?;

    let label_maps = clock.run("label_maps", || {
        let maps = build_label_maps(&detections, &frames);
        let c = counts(&[("label_maps", maps.len() as u64)]);
        Ok((maps, c))
    })?;

    // Lift every detector box to 3D and fit an oriented box; boxes with too
    // few valid-depth pixels are dropped here.
    let lifted_per_frame: Vec<Vec<LiftedBox>> = clock.run("lift_fit", || {
        let work: Vec<(usize, &crate::scene_io::DetectionBox)> = frames
            .frames
            .iter()
            .enumerate()
            .flat_map(|(fi, f)| detections.for_frame(f.id).iter().map(move |d| (fi, d)))
            .collect();
        let fitted: Vec<Option<(usize, LiftedBox)>> = work
            .par_iter()
            .map(|&(fi, det)| {
                let frame = &frames.frames[fi];
                let points =
                    lift_box_pixels(det, &frame.camera, &frame.depth, config.pixel_stride).ok()?;
                if points.len() < MIN_LIFT_POINTS {
                    return None;
                }
                Some((
                    fi,
                    LiftedBox {
                        box3d: fit_oriented_box(&points),
                        class_id: det.class_id,
                    },
                ))
            })
            .collect();
        let mut per_frame: Vec<Vec<LiftedBox>> = vec![Vec::new(); frames.len()];
        let mut lifted = 0u64;
        for item in fitted.into_iter().flatten() {
            per_frame[item.0].push(item.1);
            lifted += 1;
        }
        Ok((per_frame, counts(&[("lifted_boxes", lifted)])))
    })?;

    let surviving_per_frame: Vec<Vec<LiftedBox>> = clock.run("box_filter", || {
        let survivors: Vec<Vec<LiftedBox>> = lifted_per_frame
            .into_par_iter()
            .map(|boxes| filter_redundant_boxes(boxes, &point_masks, &cloud, config.tau_box))
            .collect();
        let n = survivors.iter().map(Vec::len).sum::<usize>() as u64;
        Ok((survivors, counts(&[("surviving_boxes", n)])))
    })?;

    let coarse_per_frame: Vec<Vec<CoarseMask>> = clock.run("assign_superpoints", || {
        let coarse: Vec<Vec<CoarseMask>> = surviving_per_frame
            .par_iter()
            .enumerate()
            .map(|(fi, boxes)| {
                let frame_id = frames.frames[fi].id;
                boxes
                    .iter()
                    .filter_map(|b| {
                        assign_superpoints(b, &partition, &cloud, config.tau_spp, frame_id)
                    })
                    .collect()
            })
            .collect();
        let n = coarse.iter().map(Vec::len).sum::<usize>() as u64;
        Ok((coarse, counts(&[("coarse_masks", n)])))
    })?;

    let (candidates, merge_events) = clock.run("merge", || {
        let (set, events) = merge_coarse_masks_traced(&coarse_per_frame, config.tau_merge);
        let c = counts(&[("candidates", set.candidates.len() as u64)]);
        Ok(((set, events), c))
    })?;

    let rgbd_masks = clock.run("rgbd_filter", || {
        let kept = filter_rgbd_masks(candidates, &point_masks, config.tau_filter);
        let c = counts(&[("rgbd_masks", kept.len() as u64)]);
        Ok((kept, c))
    })?;

    let proposals = clock.run("fuse", || {
        let fused = fuse_proposals(&point_masks, &rgbd_masks);
        let c = counts(&[("proposals", fused.len() as u64)]);
        Ok((fused, c))
    })?;

    let mut instances = clock.run("classify", || {
        let distributions =
            distributions_for_proposals(&proposals, &proj, &vis, &label_maps, config.top_k);
        let labeled = assign_labels(&proposals, &distributions);
        let c = counts(&[("labeled_instances", labeled.len() as u64)]);
        Ok((labeled, c))
    })?;
    sort_instances(&mut instances);

    clock.run("save", || {
        if let Some(out) = &opts.out {
            save_labeled_instances(&instances, out).map_err(at_stage("save"))?;
        }
        if let Some(dir) = &opts.debug_labelmaps {
            std::fs::create_dir_all(dir)
                .map_err(|e| at_stage("save")(SceneIoError::Io(e)))?;
            for (fi, map) in label_maps.iter().enumerate() {
                let id = frames.frames[fi].id;
                save_label_map_png(map, &dir.join(format!("{id}.png")))
                    .map_err(at_stage("save"))?;
            }
        }
        if let Some(path) = &opts.debug_candidates {
            let mut text = String::new();
            for event in &merge_events {
                text.push_str(&serde_json::to_string(event).map_err(|e| {
                    at_stage("save")(SceneIoError::MalformedFile(e.to_string()))
                })?);
                text.push('\n');
            }
            std::fs::write(path, text).map_err(|e| at_stage("save")(SceneIoError::Io(e)))?;
        }
        Ok(((), counts(&[])))
    })?;

    let timing = clock.finish();
    if let Some(path) = &opts.timing_out {
        let json = serde_json::to_string_pretty(&timing)
            .map_err(|e| at_stage("save")(SceneIoError::MalformedFile(e.to_string())))?;
        std::fs::write(path, json).map_err(|e| at_stage("save")(SceneIoError::Io(e)))?;
    }

    Ok(PipelineOutput { instances, timing })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_text() {
        let mut config = PipelineConfig::default();
        config.tau_merge = 0.3125;
        config.tau_depth = 0.07;
        config.top_k = 3;
        config.seed = 987654321;
        let text = config.serialize();
        let parsed = PipelineConfig::parse(&text).unwrap();
        assert_eq!(config, parsed);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_ranges() {
        assert!(PipelineConfig::parse("no_such_key = 1\n").is_err());
        assert!(PipelineConfig::parse("tau_box = 1.5\n").is_err());
        assert!(PipelineConfig::parse("pixel_stride = 0\n").is_err());
    }

    #[test]
    fn config_parse_accepts_comments_and_spacing() {
        let parsed = PipelineConfig::parse("# comment\n\ntau_box=0.5   # inline\n").unwrap();
        assert_eq!(parsed.tau_box, 0.5);
    }
}
