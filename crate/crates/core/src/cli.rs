//! Command-line front end: `simulate`, `calibrate` and `evaluate`.
//!
//! Exit codes: 0 success, 1 invalid config or schema, 2 I/O failure,
//! 3 pipeline stage failure, 4 too few corresponding cameras.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::evaluation::{
    compare_to_ground_truth, pose_rmsd, reprojection_residuals, summarize_residuals,
    EvaluationError, PoseRmsdReport, ReprojectionReport, ReprojectionResidual,
};
use crate::io::{
    read_dataset, read_json, write_dataset, write_json, DatasetFiles, FileDigest,
    GroundTruthFile, IoError, ResultFile, RunManifest, DATASET_FILE, GROUND_TRUTH_FILE,
    INTRINSICS_FILE, MANIFEST_FILE, RESULT_FILE, TRAJECTORY_FILE,
};
use crate::registration::{run_pipeline, CameraEstimate, PipelineOptions};
use crate::simulator::{generate_scenario, ScenarioConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_PIPELINE: u8 = 3;
pub const EXIT_CORRESPONDENCES: u8 = 4;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const RESIDUALS_CSV: &str = "reprojection_residuals.csv";

#[derive(Debug, Parser)]
#[command(name = "camreg", version, about = "Ceiling camera network registration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario and its measurements.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register all cameras of a dataset directory.
    Calibrate(CalibrateArgs),
    /// Score a result against ground truth or another result.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub huber_delta: Option<f64>,
    #[arg(long)]
    pub cauchy_scale: Option<f64>,
    #[arg(long)]
    pub gate_px: Option<f64>,
    #[arg(long)]
    pub no_refine: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub result: PathBuf,
    #[arg(long, conflicts_with = "other", required_unless_present = "other")]
    pub ground_truth: Option<PathBuf>,
    #[arg(long)]
    pub other: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Rigidly align estimates to the ground truth before comparing.
    #[arg(long)]
    pub align: bool,
}

/// A failed command: process exit code and message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        let code = match e {
            IoError::Io { .. } => EXIT_IO,
            IoError::Schema { .. } => EXIT_INVALID,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<EvaluationError> for CliError {
    fn from(e: EvaluationError) -> Self {
        let code = match e {
            EvaluationError::TooFewCorrespondences { .. } => EXIT_CORRESPONDENCES,
            EvaluationError::DegenerateGeometry => EXIT_INVALID,
        };
        CliError::new(code, e.to_string())
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", dir.display())))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>, CliError> {
    paths
        .iter()
        .map(|p| FileDigest::of(p).map_err(CliError::from))
        .collect()
}

fn finish_manifest(
    mut manifest: RunManifest,
    out_dir: &Path,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<(), CliError> {
    manifest.inputs = digests(inputs)?;
    manifest.outputs = digests(outputs)?;
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(())
}

pub fn cmd_simulate(config_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    let cfg: ScenarioConfig = read_json(config_path)?;
    cfg.validate()
        .map_err(|e| CliError::new(EXIT_INVALID, format!("{}: {e}", config_path.display())))?;
    let parsed_ms = elapsed_ms(start);

    let t = Instant::now();
    let (gt, data) = generate_scenario(&cfg)
        .map_err(|e| CliError::new(EXIT_INVALID, format!("{}: {e}", config_path.display())))?;
    let generate_ms = elapsed_ms(t);
    info!(
        "{} cameras, {} keyframes, {} marker detections, {} blobs",
        gt.camera_poses_world.len(),
        data.trajectory_unscaled.len(),
        data.arucos.len(),
        data.blobs.len()
    );

    let t = Instant::now();
    create_dir(out_dir)?;
    write_dataset(out_dir, &DatasetFiles::from(&data))?;
    write_json(
        &out_dir.join(GROUND_TRUTH_FILE),
        &GroundTruthFile::from_parts(&gt, &data.blob_labels),
    )?;
    let write_ms = elapsed_ms(t);

    let mut manifest = RunManifest::new("simulate", to_value(&cfg));
    manifest.seed = Some(cfg.seed);
    manifest.stage_timings_ms = BTreeMap::from([
        ("parse".to_string(), parsed_ms),
        ("generate".to_string(), generate_ms),
        ("write".to_string(), write_ms),
    ]);
    let outputs: Vec<PathBuf> = [DATASET_FILE, TRAJECTORY_FILE, INTRINSICS_FILE, GROUND_TRUTH_FILE]
        .iter()
        .map(|f| out_dir.join(f))
        .collect();
    finish_manifest(manifest, out_dir, &[config_path.to_path_buf()], &outputs)
}

impl CalibrateArgs {
    pub fn options(&self) -> Result<PipelineOptions, CliError> {
        let mut opts = PipelineOptions::default();
        let positive = |name: &str, v: Option<f64>, slot: &mut f64| {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(CliError::new(EXIT_INVALID, format!("--{name} must be positive, got {v}")));
                }
                *slot = v;
            }
            Ok(())
        };
        positive("huber-delta", self.huber_delta, &mut opts.huber_delta)?;
        positive("cauchy-scale", self.cauchy_scale, &mut opts.cauchy_scale)?;
        positive("gate-px", self.gate_px, &mut opts.gate_px)?;
        opts.refine = !self.no_refine;
        Ok(opts)
    }
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<(), CliError> {
    let opts = args.options()?;
    let t = Instant::now();
    let data = read_dataset(&args.dataset)?;
    let load_ms = elapsed_ms(t);

    let t = Instant::now();
    let result = run_pipeline(&data.trajectory, &data.arucos, &data.blobs, &data.intrinsics, &opts)
        .map_err(|e| CliError::new(EXIT_PIPELINE, e.to_string()))?;
    let pipeline_ms = elapsed_ms(t);
    info!(
        "scale {:.9}, {} cameras, {} refined",
        result.scale_offset.scale,
        result.cameras.len(),
        result.cameras.iter().filter(|c| c.refined).count()
    );
    if result.scale_offset.observability.degenerate_motion {
        log::warn!(
            "odometry rotation axes span only {:.2} deg; the offset is partially unobservable",
            result.scale_offset.observability.axis_spread_deg
        );
    }

    let t = Instant::now();
    create_dir(&args.out)?;
    let result_path = args.out.join(RESULT_FILE);
    write_json(
        &result_path,
        &ResultFile {
            intrinsics: data.intrinsics,
            options: opts,
            result,
        },
    )?;
    let write_ms = elapsed_ms(t);

    let mut manifest = RunManifest::new("calibrate", to_value(&opts));
    manifest.stage_timings_ms = BTreeMap::from([
        ("load".to_string(), load_ms),
        ("pipeline".to_string(), pipeline_ms),
        ("write".to_string(), write_ms),
    ]);
    let inputs: Vec<PathBuf> = [DATASET_FILE, TRAJECTORY_FILE, INTRINSICS_FILE]
        .iter()
        .map(|f| args.dataset.join(f))
        .collect();
    finish_manifest(manifest, &args.out, &inputs, &[result_path])
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// `ground_truth` or `other`.
    pub reference: String,
    /// Reprojection error of the looking-down positions.
    pub reprojection_before: ReprojectionReport,
    /// Reprojection error of the final positions.
    pub reprojection_after: ReprojectionReport,
    pub pose_rmsd: PoseRmsdReport,
    pub scale: f64,
    pub reference_scale: f64,
}

fn residual_sets(res: &ResultFile) -> (Vec<ReprojectionResidual>, Vec<ReprojectionResidual>) {
    let positions = |f: fn(&CameraEstimate) -> nalgebra::Vector3<f64>| {
        res.result
            .cameras
            .iter()
            .map(|c| (c.camera_id, f(c)))
            .collect::<BTreeMap<_, _>>()
    };
    let run = |p| {
        reprojection_residuals(
            &p,
            &res.result.associated_blobs,
            &res.result.scaled_trajectory,
            &res.intrinsics,
        )
    };
    (
        run(positions(|c| *c.pose_looking_down.translation())),
        run(positions(|c| *c.pose_world.translation())),
    )
}

pub fn evaluate(
    res: &ResultFile,
    reference: &Reference,
    align: bool,
) -> Result<(EvaluationReport, Vec<ReprojectionResidual>, Vec<ReprojectionResidual>), CliError> {
    let (before, after) = residual_sets(res);
    let (name, pose_rmsd, reference_scale) = match reference {
        Reference::GroundTruth(gt) => (
            "ground_truth",
            compare_to_ground_truth(&res.result.cameras, &gt.ground_truth(), align)?,
            gt.scale,
        ),
        Reference::Other(other) => (
            "other",
            pose_rmsd(&res.result.cameras, &other.result.cameras)?,
            other.result.scale_offset.scale,
        ),
    };
    let report = EvaluationReport {
        reference: name.to_string(),
        reprojection_before: summarize_residuals(&before),
        reprojection_after: summarize_residuals(&after),
        pose_rmsd,
        scale: res.result.scale_offset.scale,
        reference_scale,
    };
    Ok((report, before, after))
}

pub enum Reference {
    GroundTruth(GroundTruthFile),
    Other(ResultFile),
}

/// Plain-text tables of reprojection RMSE and pose RMSD.
pub fn render_tables(report: &EvaluationReport) -> String {
    let mut s = String::new();
    let (b, a) = (&report.reprojection_before, &report.reprojection_after);
    let _ = writeln!(s, "Reprojection RMSE (px)");
    let _ = writeln!(s, "{:<12} {:>18} {:>18}", "camera", "before refinement", "after refinement");
    let _ = writeln!(s, "{:<12} {:>18.3} {:>18.3}", "all", b.rmse_px, a.rmse_px);
    let ids: std::collections::BTreeSet<u32> = b
        .per_camera_rmse_px
        .keys()
        .chain(a.per_camera_rmse_px.keys())
        .copied()
        .collect();
    let cell = |m: &BTreeMap<u32, f64>, id| m.get(&id).map_or("-".to_string(), |v| format!("{v:.3}"));
    for id in ids {
        let _ = writeln!(
            s,
            "{:<12} {:>18} {:>18}",
            id,
            cell(&b.per_camera_rmse_px, id),
            cell(&a.per_camera_rmse_px, id)
        );
    }
    let _ = writeln!(s);
    let r = &report.pose_rmsd;
    let _ = writeln!(
        s,
        "Pose RMSD vs {} ({} cameras)",
        report.reference.replace('_', " "),
        r.n_matched
    );
    let _ = writeln!(
        s,
        "{:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "roll[deg]", "pitch[deg]", "yaw[deg]", "x[m]", "y[m]", "z[m]"
    );
    let _ = writeln!(
        s,
        "{:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
        r.rot_rmsd_deg[0], r.rot_rmsd_deg[1], r.rot_rmsd_deg[2], r.trans_rmsd_m[0], r.trans_rmsd_m[1], r.trans_rmsd_m[2]
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "scale {:.9} (reference {:.9})", report.scale, report.reference_scale);
    s
}

pub fn residuals_csv(before: &[ReprojectionResidual], after: &[ReprojectionResidual]) -> String {
    let mut s = String::from(
        "stage,camera_id,keyframe_id,observed_u,observed_v,predicted_u,predicted_v,error_px\n",
    );
    for (stage, set) in [("before", before), ("after", after)] {
        for r in set {
            let _ = writeln!(
                s,
                "{stage},{},{},{},{},{},{},{}",
                r.camera_id,
                r.keyframe_id,
                r.observed.x,
                r.observed.y,
                r.predicted.x,
                r.predicted.y,
                r.error()
            );
        }
    }
    s
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let t = Instant::now();
    let res: ResultFile = read_json(&args.result)?;
    let (reference, reference_path) = match (&args.ground_truth, &args.other) {
        (Some(p), _) => (Reference::GroundTruth(read_json(p)?), p.clone()),
        (None, Some(p)) => (Reference::Other(read_json(p)?), p.clone()),
        (None, None) => {
            return Err(CliError::new(EXIT_INVALID, "either --ground-truth or --other is required"))
        }
    };
    let load_ms = elapsed_ms(t);

    let t = Instant::now();
    let (report, before, after) = evaluate(&res, &reference, args.align)?;
    let evaluate_ms = elapsed_ms(t);

    create_dir(&args.out)?;
    let outputs = [
        args.out.join(REPORT_JSON),
        args.out.join(REPORT_TXT),
        args.out.join(RESIDUALS_CSV),
    ];
    write_json(&outputs[0], &report)?;
    let tables = render_tables(&report);
    print!("{tables}");
    let write = |p: &Path, text: &str| {
        fs::write(p, text).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", p.display())))
    };
    write(&outputs[1], &tables)?;
    write(&outputs[2], &residuals_csv(&before, &after))?;

    let mut manifest = RunManifest::new(
        "evaluate",
        serde_json::json!({ "reference": report.reference, "align": args.align }),
    );
    manifest.stage_timings_ms = BTreeMap::from([
        ("load".to_string(), load_ms),
        ("evaluate".to_string(), evaluate_ms),
    ]);
    finish_manifest(manifest, &args.out, &[args.result.clone(), reference_path], &outputs)
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate { config, out } => cmd_simulate(config, out),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.code
        }
    }
}
