//! Command-line front end: `run` executes the pipeline on a scene directory,
//! `superpoints` precomputes a partition cache, `synth` emits a synthetic
//! scene directory, and `eval` scores predictions against ground truth.
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use boxfusion::eval::synth::{generate_synthetic_scene, write_scene_dir, SynthSpec};
use boxfusion::eval::{compute_map_suite, load_ground_truth};
use boxfusion::pipeline::{run_pipeline, PipelineConfig, RunOptions};
use boxfusion::scene_io::{load_labeled_instances, load_point_cloud, LoadOptions};
use boxfusion::superpoint::{build_knn_graph, save_partition, segment_graph};

#[derive(Parser)]
#[command(name = "boxfusion", version, about = "Box-guided 3D instance segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on a scene directory.
    Run(RunArgs),
    /// Compute the superpoint partition of a scene's point cloud.
    Superpoints(SuperpointsArgs),
    /// Generate a synthetic scene directory.
    Synth(SynthArgs),
    /// Evaluate predictions against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scene directory (cloud.ply, frames/, detections.jsonl, point_masks.txt).
    scene_dir: PathBuf,
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set tau_merge=0.3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output path for labeled instances (default: <scene_dir>/predictions.jsonl).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a per-stage timing report (JSON).
    #[arg(long)]
    timing: Option<PathBuf>,
    /// Use a precomputed superpoint partition instead of segmenting.
    #[arg(long)]
    superpoints: Option<PathBuf>,
    /// Pose files store camera-to-world transforms; invert them on load.
    #[arg(long)]
    invert_extrinsics: bool,
    /// Raw depth units per meter (default 1000 = millimeter PNGs).
    #[arg(long, default_value_t = 1000.0)]
    depth_scale: f64,
    /// Print the fully resolved configuration before running.
    #[arg(long)]
    print_config: bool,
    /// Debug: dump merge events as JSON Lines.
    #[arg(long)]
    debug_candidates: Option<PathBuf>,
    /// Debug: dump label maps as 16-bit PNGs into this directory.
    #[arg(long)]
    debug_labelmaps: Option<PathBuf>,
}

#[derive(Args)]
struct SuperpointsArgs {
    /// Scene directory containing cloud.ply.
    scene_dir: PathBuf,
    /// Output cache file (line i = segment id of point i).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    granularity: f64,
    #[arg(long, default_value_t = 10)]
    knn: usize,
    #[arg(long, default_value_t = 20)]
    min_size: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Object count range, e.g. 5..10 (inclusive).
    #[arg(long)]
    objects: String,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    /// Image size, e.g. 320x240.
    #[arg(long, default_value = "320x240")]
    size: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of objects withheld from the point-based mask file.
    #[arg(long, default_value_t = 0.0)]
    withhold_fraction: f64,
    /// Uniform detector-box jitter in pixels.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions (JSON Lines, as written by `run`).
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth file.
    #[arg(long)]
    gt: PathBuf,
    /// Restrict the mean to these class ids, e.g. 0,2,5.
    #[arg(long)]
    classes: Option<String>,
    /// Report output path (JSON). Printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(1),
            CliError::Data(_) => ExitCode::from(2),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are not errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Superpoints(args) => cmd_superpoints(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("usage error: {msg}"),
                CliError::Data(msg) => eprintln!("error: {msg}"),
            }
            e.exit_code()
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
            PipelineConfig::parse(&text).map_err(CliError::Usage)?
        }
        None => PipelineConfig::default(),
    };
    for pair in &args.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set '{pair}' is not KEY=VALUE")))?;
        config.set(key.trim(), value.trim()).map_err(CliError::Usage)?;
    }
    config.validate().map_err(CliError::Usage)?;
    if args.print_config {
        print!("{}", config.serialize());
    }

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.scene_dir.join("predictions.jsonl"));
    let opts = RunOptions {
        load: LoadOptions {
            depth_scale: args.depth_scale,
            invert_extrinsics: args.invert_extrinsics,
        },
        superpoint_cache: args.superpoints.clone(),
        out: Some(out.clone()),
        timing_out: args.timing.clone(),
        debug_candidates: args.debug_candidates.clone(),
        debug_labelmaps: args.debug_labelmaps.clone(),
    };
    let output = run_pipeline(&args.scene_dir, &config, &opts)
        .map_err(|e| CliError::Data(e.to_string()))?;
    eprintln!(
        "wrote {} instances to {} ({:.1} ms total)",
        output.instances.len(),
        out.display(),
        output.timing.total_ms
    );
    Ok(())
}

fn cmd_superpoints(args: SuperpointsArgs) -> Result<(), CliError> {
    if args.granularity <= 0.0 || args.knn == 0 {
        return Err(CliError::Usage(
            "granularity must be positive and knn >= 1".into(),
        ));
    }
    let cloud = load_point_cloud(&args.scene_dir.join(boxfusion::pipeline::CLOUD_FILE))
        .map_err(|e| CliError::Data(e.to_string()))?;
    let graph = build_knn_graph(&cloud, args.knn);
    let partition = segment_graph(&graph, args.granularity, args.min_size);
    save_partition(&partition, &args.out).map_err(|e| CliError::Data(e.to_string()))?;
    eprintln!(
        "wrote {} superpoints over {} points to {}",
        partition.segment_count(),
        cloud.len(),
        args.out.display()
    );
    Ok(())
}

fn parse_objects_range(text: &str) -> Result<(usize, usize), CliError> {
    let (lo, hi) = text
        .split_once("..")
        .ok_or_else(|| CliError::Usage(format!("--objects '{text}' is not A..B")))?;
    let lo: usize = lo
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("--objects lower bound '{lo}'")))?;
    let hi: usize = hi
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("--objects upper bound '{hi}'")))?;
    if lo == 0 || lo > hi {
        return Err(CliError::Usage(format!("--objects range {lo}..{hi} is empty")));
    }
    Ok((lo, hi))
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let (objects_min, objects_max) = parse_objects_range(&args.objects)?;
    let (w, h) = args
        .size
        .split_once('x')
        .and_then(|(w, h)| Some((w.trim().parse().ok()?, h.trim().parse().ok()?)))
        .ok_or_else(|| CliError::Usage(format!("--size '{}' is not WxH", args.size)))?;
    if !(0.0..=1.0).contains(&args.withhold_fraction) {
        return Err(CliError::Usage("--withhold-fraction outside [0, 1]".into()));
    }
    if args.frames == 0 {
        return Err(CliError::Usage("--frames must be >= 1".into()));
    }
    let spec = SynthSpec {
        objects_min,
        objects_max,
        frame_count: args.frames,
        width: w,
        height: h,
        seed: args.seed,
        withhold_fraction: args.withhold_fraction,
        jitter_px: args.jitter,
        ..SynthSpec::default()
    };
    let scene = generate_synthetic_scene(&spec).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
    write_scene_dir(&scene, &args.out).map_err(|e| CliError::Data(e.to_string()))?;
    eprintln!(
        "wrote scene with {} objects, {} points, {} frames to {}",
        scene.gt.len(),
        scene.cloud.len(),
        scene.frames.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let predictions =
        load_labeled_instances(&args.pred).map_err(|e| CliError::Data(e.to_string()))?;
    let (gt, n_points) = load_ground_truth(&args.gt).map_err(|e| CliError::Data(e.to_string()))?;
    for (i, p) in predictions.iter().enumerate() {
        if let Some(last) = p.mask.indices().last() {
            if *last as usize >= n_points {
                return Err(CliError::Data(format!(
                    "prediction {i} has index {last} but ground truth covers {n_points} points"
                )));
            }
        }
    }
    let subset: Option<BTreeSet<u32>> = match &args.classes {
        Some(text) => {
            let parsed: Result<BTreeSet<u32>, _> =
                text.split(',').map(|t| t.trim().parse::<u32>()).collect();
            Some(parsed.map_err(|_| CliError::Usage(format!("--classes '{text}'")))?)
        }
        None => None,
    };
    let report = compute_map_suite(&predictions, &gt, subset.as_ref());
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Data(e.to_string()))?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, &json)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            eprintln!(
                "mAP(50:95) {:.4}  mAP50 {:.4}  mAP25 {:.4} -> {}",
                report.map_50_95,
                report.map_50,
                report.map_25,
                path.display()
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}
