//! Box-guided open-vocabulary 3D instance segmentation.
//!
//! Given a scene point cloud, posed depth frames, 2D detector boxes, and
//! class-agnostic 3D instance masks, this crate assembles labeled 3D
//! instance masks: detector boxes are lifted into oriented 3D boxes that
//! gather superpoints into novel instance candidates (recovering objects the
//! 3D masks miss), candidates are merged across frames and fused with the
//! point-based masks, and every proposal is classified by sampling per-frame
//! label maps at its visible projected pixels. No neural network runs here;
//! detector and segmenter outputs are ingested from files.
//!
//! The [`eval`] module provides the mAP evaluator and a synthetic scene
//! generator with analytic depth, which together make the whole pipeline
//! verifiable end to end. [`pipeline`] ties the stages into a configurable
//! deterministic run; the `boxfusion` binary exposes `run`, `superpoints`,
//! `synth`, and `eval` subcommands.

pub mod classify;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod pipeline;
pub mod scene_io;
pub mod superpoint;

pub use pipeline::{run_pipeline, PipelineConfig, PipelineOutput, RunOptions};
pub use scene_io::{BinaryMask3D, LabeledInstance, MaskSource, ScenePointCloud};
